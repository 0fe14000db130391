"""``relayrank`` command line: plan, verify, route-check, simulate, sweep.

Exit codes: 0 success, 1 a check failed, 2 bad configuration or input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load, parse_overrides
from .errors import ConfigError, PoolError, RelayError
from .model import max_deviation, random_sequence
from .router import Instance, InstancePool, Kind, Policy, Request, churn_diff, route
from .sim.engine import Mode, Simulation, resolve_trigger
from .sim.search import MEASURES, SWEEPABLE, sweep
from .sim.workload import make_users
from .trigger import compute_capacity_plan

logger = logging.getLogger("relayrank")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CSV_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _csv_text(rows: list[dict], columns=None) -> str:
    buf = io.StringIO()
    columns = columns or (list(rows[0]) if rows else [])
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit(rows: list[dict], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "json":
        out.write(json.dumps(rows if len(rows) != 1 else rows[0], indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        out.write(_csv_text(rows))
    else:
        for row in rows:
            width = max(len(k) for k in row)
            for key, value in row.items():
                out.write(f"{key:<{width}}  {value}\n")
            if len(rows) > 1:
                out.write("\n")


def _manifest(args, cfg: RunConfig | None, out_dir: Path, extra: dict | None = None) -> dict:
    manifest = {
        "tool": "relayrank",
        "version": __version__,
        "command": args.command,
        "config_path": str(args.config) if getattr(args, "config", None) else None,
        "config_sha256": cfg.sha256 if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "mode": cfg.mode.value if cfg is not None else None,
        "output_dir": str(out_dir),
        "overrides": sorted(getattr(args, "set", None) or []),
        "csv_schema_version": CSV_SCHEMA_VERSION,
    }
    manifest.update(extra or {})
    return manifest


def _load(args) -> RunConfig:
    overrides = parse_overrides(getattr(args, "set", None))
    sim = overrides.setdefault("sim", {})
    if getattr(args, "seed", None) is not None:
        sim["seed"] = str(args.seed)
    if getattr(args, "mode", None) is not None:
        sim["mode"] = args.mode
    if getattr(args, "dram_hit_target", None) is not None:
        sim["dram_hit_target"] = str(args.dram_hit_target)
    if not sim:
        overrides.pop("sim")
    return load(args.config, overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_plan(args) -> int:
    cfg = _load(args)
    trigger = cfg.system.trigger
    if not cfg.trigger_explicit:
        trigger = resolve_trigger(cfg.system, make_users(cfg.workload), cfg.system.model.dim)
    plan = compute_capacity_plan(trigger)
    if plan.special_instances == 0:
        logger.warning("r2 * n_instances < 1: no special instances, q_max = 0")
    row = {**plan.as_dict(), "kv_p99": trigger.kv_p99, "q_m": trigger.q_m,
           "m_slots": trigger.m_slots, "t_life": trigger.t_life,
           "hbm_bound_above_t_life": round(plan.l_max / (trigger.q_m * trigger.m_slots), 6)
           if trigger.q_m * trigger.m_slots > 0 else None}
    _emit([row], args.format)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _load(args)
    model = cfg.verify.model
    overrides = {k: v for k, v in (("layers", args.layers), ("dim", args.dim),
                                   ("elem_bytes", args.elem_bytes)) if v is not None}
    if overrides:
        from dataclasses import replace
        model = replace(model, **overrides)
    trials = args.trials if args.trials is not None else cfg.verify.trials
    rng = np.random.default_rng(cfg.seed)
    worst = 0.0
    for _ in range(trials):
        seq = random_sequence(rng, model.dim, int(rng.integers(0, 4)), int(rng.integers(1, 128)),
                              int(rng.integers(0, 17)), int(rng.integers(0, 9)), int(rng.integers(1, 17)))
        worst = max(worst, max_deviation(model, seq, corrupt=args.corrupt))
    passed = worst <= model.epsilon
    _emit([{"trials": trials, "layers": model.layers, "dim": model.dim, "elem_bytes": model.elem_bytes,
            "epsilon": model.epsilon, "max_deviation": float(f"{worst:.6e}"),
            "corrupted": bool(args.corrupt), "result": "pass" if passed else "fail"}], args.format)
    return EXIT_OK if passed else EXIT_FAIL


def _read_pool(path) -> InstancePool:
    try:
        spec = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"pool spec not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"pool spec is not valid JSON: {exc}") from exc
    try:
        instances = tuple(Instance(i["id"], Kind(i.get("kind", "special")), i.get("server", i["id"]))
                          for i in spec["instances"])
        return InstancePool(instances, int(spec.get("vnodes", 128)),
                            int(spec.get("per_server_special_cap", 2)),
                            Policy(spec.get("policy", Policy.ROUND_ROBIN.value)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad pool spec: {exc}") from exc


def _read_keys(args) -> list[str]:
    if args.keys:
        text = Path(args.keys).read_text(encoding="utf-8")
        return [line.strip() for line in text.splitlines() if line.strip()]
    rng = np.random.default_rng(args.seed or 0)
    return [f"user-{int(x):012d}" for x in rng.integers(0, 10**12, size=args.n_keys)]


def cmd_route_check(args) -> int:
    pool = _read_pool(args.pool)
    keys = _read_keys(args)
    owners = pool.owners(keys)
    rows = []
    broken = 0
    for key, owner in zip(keys, owners):
        pre = route(pool, Request.pre_infer(key)).instance_id
        rank = route(pool, Request.rank(key, (0,), keyed=True)).instance_id
        broken += pre != rank
        rows.append({"key": key, "instance": owner, "pre_infer": pre, "rank": rank})
    out_rows = rows
    summary = {"keys": len(keys), "affinity_violations": broken}
    after = pool
    for spec in args.add or ():
        iid, _, server = spec.partition(":")
        after = after.add_instance(Instance(iid, Kind.SPECIAL, server or iid))
    for iid in args.remove or ():
        after = after.remove_instance(iid)
    if after is not pool:
        diff = churn_diff(pool, after, keys)
        removed = set(args.remove or ())
        added = {s.partition(":")[0] for s in args.add or ()}
        bad = sum(1 for _, a, b, moved in diff
                  if moved and not (a in removed or b in added))
        moved = sum(1 for d in diff if d[3])
        out_rows = [{"key": k, "owner_before": a, "owner_after": b, "moved": int(m)} for k, a, b, m in diff]
        summary.update({"moved": moved, "moved_fraction": round(moved / len(keys), 6) if keys else 0.0,
                        "disruption_violations": bad})
        broken += bad
    if args.out:
        out = Path(args.out)
        _write_atomic(out / "routes.csv", _csv_text(out_rows))
        _write_atomic(out / "manifest.json", json.dumps(
            _manifest(args, None, out, {"pool": str(args.pool), "summary": summary}), indent=2, sort_keys=True) + "\n")
        _emit([summary], args.format if args.format != "csv" else "text")
    elif args.format == "csv":
        sys.stdout.write(_csv_text(out_rows))
    else:
        _emit([summary], args.format)
    return EXIT_OK if broken == 0 else EXIT_FAIL


def _outcome_rows(sim: Simulation) -> list[dict]:
    rows = []
    for r in sim.records:
        rows.append({"qid": r.qid, "user": sim.users.keys[r.user], "long": int(r.long),
                     "at_risk": int(r.at_risk), "keyed": int(r.keyed), "t0_us": r.t0,
                     "rank_arrival_us": r.rank_at, "done_us": r.done, "path": r.path,
                     **{f"{k}_us": v for k, v in (r.stages or {}).items()}})
    return rows


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = Simulation(cfg.system, cfg.workload, cfg.slo, cfg.mode, cfg.seed, cfg.dram_hit_target)
    report = sim.run(audit=True)
    audit = report.audit
    relevant = [v for v in audit["violations"]
                if not (cfg.mode is Mode.REMOTE and v["record"][3] == "remote_fetch")]
    summary = report.summary()
    if args.out:
        out = Path(args.out)
        _write_atomic(out / "summary.csv", _csv_text([summary]))
        hist = [{"metric": m, "bin_ms": b, "count": c}
                for m, h in sorted(report.histograms.items()) for b, c in h]
        _write_atomic(out / "histograms.csv", _csv_text(hist, ["metric", "bin_ms", "count"]))
        _write_atomic(out / "outcomes.csv", _csv_text(_outcome_rows(sim)))
        _write_atomic(out / "trace.csv", sim.trace.to_csv())
        full = {k: v for k, v in vars(report).items() if k != "histograms"}
        _write_atomic(out / "report.json", json.dumps(full, indent=2, sort_keys=True) + "\n")
        _write_atomic(out / "manifest.json", json.dumps(
            _manifest(args, cfg, out, {"dram_hit_target": cfg.dram_hit_target}), indent=2, sort_keys=True) + "\n")
    _emit([summary], args.format)
    if relevant:
        first = relevant[0]
        sys.stderr.write(f"invariant violation: {first['message']}\n  trace: {','.join(map(str, first['record']))}\n")
        return EXIT_FAIL
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    parsed = [float(v) if any(c in v for c in ".e") else int(v) for v in values]
    modes = [Mode(m) for m in (args.modes.split(",") if args.modes else [cfg.mode.value])]
    rows = sweep(args.param, parsed, cfg.system, cfg.workload, cfg.slo, modes, measure=args.measure,
                 seed=cfg.seed, dram_hit_target=cfg.dram_hit_target)
    if args.out:
        out = Path(args.out)
        _write_atomic(out / "sweep.csv", _csv_text(rows))
        _write_atomic(out / "manifest.json", json.dumps(
            _manifest(args, cfg, out, {"param": args.param, "values": values,
                                       "modes": [m.value for m in modes], "measure": args.measure}),
            indent=2, sort_keys=True) + "\n")
    _emit(rows, args.format)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relayrank", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"relayrank {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("-c", "--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--format", choices=("text", "json", "csv"), default="text")

    p = sub.add_parser("plan", help="capacity plan from the trigger budgets")
    common(p, seed=False)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="cached vs full scoring equivalence")
    common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--elem-bytes", type=int, choices=(4, 8))
    p.add_argument("--corrupt", action="store_true", help="perturb the cache (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("route-check", help="key -> instance mapping and churn diff")
    p.add_argument("--pool", required=True, help="pool spec JSON")
    p.add_argument("--keys", help="file with one key per line (default: random keys)")
    p.add_argument("--n-keys", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--remove", action="append", metavar="INSTANCE_ID")
    p.add_argument("--add", action="append", metavar="INSTANCE_ID[:SERVER]")
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.set_defaults(func=cmd_route_check)

    p = sub.add_parser("simulate", help="run one simulation")
    common(p)
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--dram-hit-target", type=float)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="one simulation per parameter value")
    common(p)
    p.add_argument("--param", required=True, choices=SWEEPABLE)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--modes", help="comma-separated modes (default: [sim] mode)")
    p.add_argument("--measure", choices=MEASURES, default="run")
    p.add_argument("--dram-hit-target", type=float)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PoolError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except RelayError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
