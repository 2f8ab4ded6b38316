"""Experiment configuration files (YAML).

Top-level keys::

    system:         f, h (expression lists), B1, D1, B2, D2 (row-major arrays)
    partition:      axis (1-based), breakpoints, box {lo, hi}
                    or cells: [{E, e}, ...] with box {lo, hi}
    approximation:  method (taylor | secant), samples, seed, safety
    channel:        alpha, beta, seed            (networked modes only)
    synthesis:      mode (check | passify | netpassify | pwa-netpassify),
                    formulation (lifted | reduced), coupling, tau, tolerance,
                    max_depth, max_iter
    simulation:     x0, horizon, disturbance, seeds, tolerance

Matrices are nested lists in row-major order; a flat list is accepted when
the shape follows from the dimensions (for example a column ``B1``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .expr import parse
from .model import Cell, NonlinearSystem, PolyhedralPartition, grid_partition

__all__ = ["ConfigError", "ProjectConfig", "load_config", "parse_config", "MODES"]

MODES = ("check", "passify", "netpassify", "pwa-netpassify")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class ProjectConfig:
    system: NonlinearSystem
    partition: PolyhedralPartition
    approximation: dict = field(default_factory=dict)
    channel: dict | None = None
    synthesis: dict = field(default_factory=dict)
    simulation: dict | None = None
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def mode(self) -> str:
        return self.synthesis.get("mode", "passify")


def load_config(path) -> ProjectConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML: {err}") from None
    return parse_config(data)


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"{where}: missing key '{key}'")
    return block[key]


def _allowed(block: dict, keys, where: str):
    extra = set(block) - set(keys)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _system(block) -> NonlinearSystem:
    if not isinstance(block, dict):
        raise ConfigError("system: expected a mapping")
    _allowed(block, ("n", "m", "s", "f", "h", "B1", "D1", "B2", "D2"), "system")
    f = _require(block, "f", "system")
    h = _require(block, "h", "system")
    f = [f] if isinstance(f, str) else list(f)
    h = [h] if isinstance(h, str) else list(h)
    if not all(isinstance(e, str) for e in f + h):
        raise ConfigError("system: f and h must be expression strings")
    for key, val in (("n", len(f)), ("s", len(h))):
        if key in block and int(block[key]) != val:
            raise ConfigError(f"system: {key} = {block[key]} but {val} expressions given")
    try:
        sysm = NonlinearSystem.from_strings(
            f, h, *(_require(block, k, "system") for k in ("B1", "D1", "B2", "D2")))
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"system: {err}") from None
    if "m" in block and int(block["m"]) != sysm.m:
        raise ConfigError(f"system: m = {block['m']} but B1 has {sysm.m} columns")
    return sysm


def _partition(block, n: int) -> PolyhedralPartition:
    if not isinstance(block, dict):
        raise ConfigError("partition: expected a mapping")
    _allowed(block, ("axis", "breakpoints", "box", "cells"), "partition")
    box = _require(block, "box", "partition")
    try:
        lo = np.asarray(box["lo"], dtype=float).reshape(-1)
        hi = np.asarray(box["hi"], dtype=float).reshape(-1)
    except (KeyError, TypeError, ValueError):
        raise ConfigError("partition.box: needs numeric 'lo' and 'hi' lists") from None
    if lo.size != n or hi.size != n:
        raise ConfigError(f"partition.box: lo/hi need {n} entries")
    try:
        if "cells" in block:
            cells = []
            for k, c in enumerate(block["cells"]):
                cells.append(Cell(k, np.asarray(c["E"], dtype=float).reshape(-1, n),
                                  np.asarray(c["e"], dtype=float).reshape(-1)))
            return PolyhedralPartition(cells, lo, hi)
        axis = int(_require(block, "axis", "partition"))
        if not 1 <= axis <= n:
            raise ConfigError(f"partition.axis must be between 1 and {n}")
        bps = [float(b) for b in _require(block, "breakpoints", "partition")]
        return grid_partition(axis - 1, bps, lo, hi)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise ConfigError(f"partition: {err}") from None


_SYNTH_KEYS = ("mode", "formulation", "coupling", "tau", "tolerance", "max_depth",
               "max_iter", "escalations", "max_blocks", "samples", "seed", "safety")


def parse_config(data) -> ProjectConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    _allowed(data, ("system", "partition", "approximation", "channel", "synthesis",
                    "simulation"), "config")
    sysm = _system(_require(data, "system", "config"))
    part = _partition(_require(data, "partition", "config"), sysm.n)
    approx = dict(data.get("approximation") or {})
    _allowed(approx, ("method", "samples", "seed", "safety"), "approximation")
    if approx.get("method", "taylor") not in ("taylor", "secant"):
        raise ConfigError("approximation.method must be 'taylor' or 'secant'")
    synth = dict(data.get("synthesis") or {})
    _allowed(synth, _SYNTH_KEYS, "synthesis")
    mode = synth.setdefault("mode", "passify")
    if mode not in MODES:
        raise ConfigError(f"synthesis.mode must be one of {', '.join(MODES)}")
    if synth.get("formulation", "lifted") not in ("lifted", "reduced"):
        raise ConfigError("synthesis.formulation must be 'lifted' or 'reduced'")
    channel = data.get("channel")
    if mode in ("netpassify", "pwa-netpassify"):
        if not isinstance(channel, dict):
            raise ConfigError(f"mode {mode} needs a channel block")
        _allowed(channel, ("alpha", "beta", "seed"), "channel")
        for key in ("alpha", "beta"):
            val = float(_require(channel, key, "channel"))
            if not 0 < val < 1:
                raise ConfigError(f"channel.{key} must lie strictly between 0 and 1")
    sim = data.get("simulation")
    if sim is not None:
        if not isinstance(sim, dict):
            raise ConfigError("simulation: expected a mapping")
        _allowed(sim, ("x0", "horizon", "disturbance", "seeds", "tolerance"), "simulation")
        x0 = np.asarray(_require(sim, "x0", "simulation"), dtype=float).reshape(-1)
        if x0.size != sysm.n:
            raise ConfigError(f"simulation.x0 needs {sysm.n} entries")
        if not part.in_box(x0):
            raise ConfigError("simulation.x0 lies outside the partition box")
        if int(sim.get("horizon", 100)) < 1:
            raise ConfigError("simulation.horizon must be positive")
        dist = sim.get("disturbance")
        exprs = [dist] if isinstance(dist, str) else dist if isinstance(dist, list) else []
        for e in exprs:
            if isinstance(e, str) and e.strip().lower() != "zero":
                try:
                    parse(e, n=0, extra=("k",))
                except ValueError as err:
                    raise ConfigError(f"simulation.disturbance: {err}") from None
    return ProjectConfig(sysm, part, approx, channel, synth, sim, data)
