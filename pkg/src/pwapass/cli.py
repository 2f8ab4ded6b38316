"""Command line entry point.

Subcommands (all take ``--config PATH`` and optional ``--seed``/``--out-dir``):

    approximate        per-cell affine pieces and residual bounds
    check-passivity    storage certificate for the uncontrolled plant
    passify            passivating state feedback
    passify-networked  passivating feedback over the lossy channel
    simulate           closed-loop simulation and dissipation check
    run                the whole pipeline selected by ``synthesis.mode``

Exit codes: 0 certified (and no dissipation violations), 1 not certified or
violations found, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .approx import approximate
from .config import ConfigError, ProjectConfig, load_config
from .model import Cell, PolyhedralPartition
from .netpassify import GilbertElliottChannel, synthesize_networked, synthesize_pwa_networked
from .passify import SynthesisOptions, synthesize
from .passivity import check_passivity
from .sim import SimulationConfig, dissipation_report, run, trace_to_csv
from .svg import line_chart

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("pwapass")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwapass", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("approximate", "write the PWA approximation report"),
                        ("check-passivity", "certify passivity of the uncontrolled plant"),
                        ("passify", "synthesize passivating state feedback"),
                        ("passify-networked", "synthesize feedback for the lossy channel"),
                        ("simulate", "simulate the closed loop and check dissipation"),
                        ("run", "full pipeline for the configured mode")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed", type=int, default=None,
                        help="base seed for sampling and channel draws")
        sp.add_argument("--out-dir", default=None, help="output directory (default: out)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "simulate":
            sp.add_argument("--gains", default=None,
                            help="gains file from passify/passify-networked (skips synthesis)")
    return p


# ------------------------------------------------------------ helpers


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _rows(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _options(cfg: ProjectConfig, seed) -> SynthesisOptions:
    s = cfg.synthesis
    a = cfg.approximation
    kw = {k: s[k] for k in ("formulation", "coupling", "tau", "tolerance", "max_depth",
                            "escalations", "max_blocks") if k in s}
    kw["method"] = a.get("method")
    kw["samples"] = int(a.get("samples", 10_000))
    kw["safety"] = float(a.get("safety", 1.2))
    kw["seed"] = int(seed if seed is not None else a.get("seed", 0))
    return SynthesisOptions(**kw)


def _channel(cfg: ProjectConfig):
    if not cfg.channel:
        return None
    return GilbertElliottChannel(float(cfg.channel["alpha"]), float(cfg.channel["beta"]))


def _cell_record(part, i):
    c = part[i]
    rec = {"index": i, "description": part.describe(i), "E": _rows(c.E), "e": _rows(c.e),
           "origin_cell": bool(c.contains_origin)}
    return rec


def _approx(cfg: ProjectConfig, opts: SynthesisOptions):
    return approximate(cfg.system, cfg.partition, opts.method, opts.samples, opts.seed,
                       opts.safety)


def _pwa_report(pwa):
    cells = []
    for i, c in enumerate(pwa.cells):
        rec = _cell_record(pwa.partition, i)
        rec.update(A=_rows(c.A), a=_rows(c.a), C=_rows(c.C), c=_rows(c.c),
                   eps=float(c.eps), delta=float(c.delta))
        cells.append(rec)
    return {"method": pwa.method, "cells": cells}


def _pwa_summary(pwa) -> str:
    lines = [f"{len(pwa)} cells, linearization: {pwa.method}",
             f"{'cell':>4}  {'region':<32} {'eps':>12} {'delta':>12}"]
    for i, c in enumerate(pwa.cells):
        desc = pwa.partition.describe(i).split(": ", 1)[-1]
        lines.append(f"{i:>4}  {desc:<32} {c.eps:12.6g} {c.delta:12.6g}")
    return "\n".join(lines) + "\n"


def _gains_file(res) -> dict:
    cells = []
    for i in range(len(res.pwa)):
        rec = _cell_record(res.partition, i)
        rec.update(K=_rows(res.K[i]), T=_rows(res.values[f"T{i}"]))
        cells.append(rec)
    return {"kind": res.kind, "formulation": res.formulation,
            "storage": "V(x) = 0.5 x' inv(T(i)) x on cell i", "cells": cells}


def _certificate_file(res) -> dict:
    out = {"kind": res.kind, "formulation": res.formulation, "certified": True,
           "refined": res.refined, "history": res.history,
           "min_replay_margin": res.min_replay_margin(),
           "gain_consistency": res.gain_consistency(),
           "values": {k: _rows(v) for k, v in sorted(res.values.items())}}
    if res.audit.cells:
        out["side_conditions"] = [
            {"cell": c.index, "terms": [float(t) for t in c.terms],
             "g_terms": [float(t) for t in c.g_terms], "L_min": c.L_min, "G_min": c.G_min,
             "cond_U": c.cond_U, "passed": c.passed} for c in res.audit.cells]
    return out


def _failure_file(res) -> dict:
    return {"certified": False, "reason": res.reason, "cell": res.cell,
            "cell_description": (res.partition.describe(res.cell)
                                 if res.cell is not None else None),
            "history": res.history}


class _GainStorage:
    """Storage ``0.5 x' inv(T(i)) x`` rebuilt from a gains file."""

    def __init__(self, T):
        self.T = [np.asarray(t, dtype=float) for t in T]

    def storage(self, x, i):
        x = np.asarray(x, dtype=float)
        return 0.5 * float(x @ np.linalg.solve(self.T[i], x))


# ------------------------------------------------------------ stages


def _synthesize(cfg: ProjectConfig, opts: SynthesisOptions, mode: str, out: Path):
    """Run the synthesis for ``mode``; returns ``(result, plant for simulation)``."""
    ch = _channel(cfg)
    plant = cfg.system
    if mode == "passify":
        res = synthesize(cfg.system, cfg.partition, opts)
    elif mode == "netpassify":
        res = synthesize_networked(cfg.system, cfg.partition, ch, opts)
    elif mode == "pwa-netpassify":
        pwa = _approx(cfg, opts).with_zero_bounds()
        plant = pwa
        res = synthesize_pwa_networked(pwa, ch, opts)
    else:
        raise ConfigError(f"mode {mode!r} does not synthesize gains")
    if res.certified:
        _dump(out / "gains.json", _gains_file(res))
        _dump(out / "certificate.json", _certificate_file(res))
        print(f"{res.kind}: certified on {len(res.pwa)} cells "
              f"(min replay margin {res.min_replay_margin():.3g})")
    else:
        _dump(out / "certificate.json", _failure_file(res))
        print(f"not certified: {res.describe()}")
    return res, plant


def _simulate(cfg: ProjectConfig, plant, gains, storage, partition, seed, out: Path) -> bool:
    sim = cfg.simulation
    if sim is None:
        raise ConfigError("the configuration has no simulation block")
    ch = _channel(cfg)
    tol = float(sim.get("tolerance", 1e-9))
    if ch is not None:
        seeds = list(sim.get("seeds", [cfg.channel.get("seed", 0)]))
        if seed is not None:
            seeds = [seed + k for k in range(len(seeds))]
    else:
        seeds = [None]
    reports, cond, first = [], [], None
    for sd in seeds:
        conf = SimulationConfig(sim["x0"], int(sim.get("horizon", 100)), sim.get("disturbance"),
                                gains=gains, channel=ch, channel_seed=sd, storage=storage,
                                partition=partition, seed=sd)
        tr = run(plant, conf)
        name = "trace.csv" if sd is None else f"trace_seed{sd}.csv"
        (out / name).write_text(trace_to_csv(tr))
        rep = dissipation_report(tr, tol)
        reports.append({"seed": sd, "series": rep.series, "steps": rep.steps,
                        "status": tr.status, "exit_step": tr.exit_step,
                        "max_gap": rep.max_gap, "step_of_max": rep.step_of_max,
                        "violations": rep.violations, "violation_steps": rep.violation_steps})
        first = first or tr
        cond.append(tr.cond_gap)
    if ch is None:
        series = {"realized gap g_k": first.gap}
    else:
        series = {f"conditional gap, seed {seeds[0]}": first.cond_gap,
                  f"realized gap, seed {seeds[0]}": first.gap}
        if len(seeds) > 1:
            width = max(len(c) for c in cond)
            stack = np.full((len(cond), width), -np.inf)
            for r, c in enumerate(cond):
                stack[r, :len(c)] = np.where(np.isfinite(c), c, -np.inf)
            top = stack.max(axis=0)
            series["max conditional gap over seeds"] = np.where(np.isfinite(top), top, np.nan)
    (out / "dissipation.svg").write_text(line_chart(
        series, title="Storage increment minus supply rate", ylabel="gap"))
    total = sum(r["violations"] for r in reports)
    _dump(out / "dissipation.json", {"tolerance": tol, "runs": reports, "violations": total})
    worst = max((r["max_gap"] for r in reports if r["max_gap"] == r["max_gap"]), default=np.nan)
    print(f"simulation: {len(seeds)} run(s), max gap {worst:.3g}, {total} violation(s) "
          f"above {tol:g}")
    return total == 0


def _load_gains(path):
    try:
        data = json.loads(Path(path).read_text())
        K = [np.asarray(c["K"], dtype=float) for c in data["cells"]]
        T = [np.asarray(c["T"], dtype=float) for c in data["cells"]]
        cells = [Cell(k, c["E"], c["e"]) for k, c in enumerate(data["cells"])]
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"cannot read gains file {path}: {err}") from None
    return K, _GainStorage(T), cells


# ------------------------------------------------------------ commands


def cmd_approximate(cfg, args, out: Path) -> int:
    opts = _options(cfg, args.seed)
    pwa = _approx(cfg, opts)
    _dump(out / "approximation.json", _pwa_report(pwa))
    text = _pwa_summary(pwa)
    (out / "approximation.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_check(cfg, args, out: Path) -> int:
    opts = _options(cfg, args.seed)
    pwa = _approx(cfg, opts)
    s = cfg.synthesis
    res = check_passivity(pwa, tau=float(s.get("tau", 1e-6)),
                          tolerance=float(s.get("tolerance", 1e-7)),
                          max_iter=int(s.get("max_iter", 10)),
                          coupling=s.get("coupling", "envelope"))
    if res.certified:
        _dump(out / "certificate.json", {
            "kind": "theorem1", "certified": True, "iterations": res.iterations,
            "storage": "V(x) = 0.5 [x;1]' P(i) [x;1] on cell i",
            "P": [_rows(P) for P in res.P],
            "max_lambda_eig": max(res.lambda_margins.values()),
            "min_positivity_eig": min(res.positivity_margins.values())})
        print(f"theorem1: certified on {len(pwa)} cells")
        return EXIT_OK
    _dump(out / "certificate.json", {"kind": "theorem1", "certified": False,
                                     "reason": res.reason, "worst_pair": res.worst_pair,
                                     "margin": res.margin})
    print(f"not certified: {res.reason} (worst pair {res.worst_pair})")
    return EXIT_FAIL


def cmd_passify(cfg, args, out: Path) -> int:
    res, _ = _synthesize(cfg, _options(cfg, args.seed), "passify", out)
    return EXIT_OK if res.certified else EXIT_FAIL


def cmd_passify_networked(cfg, args, out: Path) -> int:
    mode = cfg.mode if cfg.mode in ("netpassify", "pwa-netpassify") else "netpassify"
    if _channel(cfg) is None:
        raise ConfigError("passify-networked needs a channel block")
    res, _ = _synthesize(cfg, _options(cfg, args.seed), mode, out)
    return EXIT_OK if res.certified else EXIT_FAIL


def cmd_simulate(cfg, args, out: Path) -> int:
    if args.gains:
        K, storage, cells = _load_gains(args.gains)
        part = PolyhedralPartition(cells, cfg.partition.lo, cfg.partition.hi)
        plant = cfg.system
        if cfg.mode == "pwa-netpassify":
            plant = _approx(cfg, _options(cfg, args.seed)).with_zero_bounds()
        ok = _simulate(cfg, plant, K, storage, part, args.seed, out)
        return EXIT_OK if ok else EXIT_FAIL
    return cmd_run(cfg, args, out)


def cmd_run(cfg, args, out: Path) -> int:
    opts = _options(cfg, args.seed)
    if cfg.mode == "check":
        code = cmd_check(cfg, args, out)
        if code != EXIT_OK or cfg.simulation is None:
            return code
        cert = json.loads((out / "certificate.json").read_text())
        P = [np.asarray(p) for p in cert["P"]]

        class _S:
            def storage(self, x, i):
                xb = np.append(np.asarray(x, dtype=float), 1.0)
                return 0.5 * float(xb @ P[i] @ xb)

        ok = _simulate(cfg, cfg.system, None, _S(), cfg.partition, args.seed, out)
        return EXIT_OK if ok else EXIT_FAIL
    res, plant = _synthesize(cfg, opts, cfg.mode, out)
    if not res.certified:
        return EXIT_FAIL
    if cfg.simulation is None:
        return EXIT_OK
    ok = _simulate(cfg, plant, res.K, res, res.partition, args.seed, out)
    return EXIT_OK if ok else EXIT_FAIL


COMMANDS = {"approximate": cmd_approximate, "check-passivity": cmd_check,
            "passify": cmd_passify, "passify-networked": cmd_passify_networked,
            "simulate": cmd_simulate, "run": cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out_dir or "out")
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
