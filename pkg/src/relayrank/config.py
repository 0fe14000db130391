"""INI configuration for the CLI and simulator.

Sections and keys (all optional; defaults shown in ``configs/default.ini``):

``[model]``     sizing model for cache bytes: layers, dim, elem_bytes, seed
``[trigger]``   length_threshold, dim_threshold, kv_p99 (bytes or ``auto``),
                hbm_bytes, r1, q_m (per-slot QPS or ``auto``), q_m_headroom,
                m_slots, n_instances, r2, t_life (seconds)
``[router]``    n_servers, vnodes, per_server_special_cap, policy
``[cache]``     dram_bytes, dram_ttl_s (``none`` = never stale), max_reloads, spill
``[cost]``      coefficients = calibrated | explicit; explicit curves via
                pre_coeffs / rank_coeffs (``a2, a1, a0``); load_fixed_ms,
                reload_bandwidth, hbm_access_ms, remote_rtt_ms, remote_bandwidth,
                slot_contention, shared_bandwidth, retrieval_ms / preprocess_ms
                (``lo, hi`` uniform, ms; an assumption, not a measured value),
                trigger_ms
``[workload]``  offered_qps, horizon_s, n_users, long_fraction, short_len, long_len,
                fixed_long_len, suffix_len, items, p_refresh, refresh_gap_s,
                clients, retrieval_slack_ms
``[slo]``       pipeline_p99_ms, ranking_ms, success_rate, scope, budget
``[sim]``       mode, seed, dram_hit_target, rank_priority, churn_at_s
``[verify]``    layers, dim, elem_bytes, seed, trials
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .router import Policy
from .sim.costs import DEFAULT_COSTS, CostModel
from .sim.engine import Mode, SloConfig, SystemConfig
from .sim.workload import WorkloadConfig
from .trigger import TriggerConfig

SECTIONS = ("model", "trigger", "router", "cache", "cost", "workload", "slo", "sim", "verify")

_KNOWN = {
    "model": {"layers", "dim", "elem_bytes", "seed"},
    "trigger": {f.name for f in fields(TriggerConfig)} | {"q_m_headroom"},
    "router": {"n_servers", "vnodes", "per_server_special_cap", "policy"},
    "cache": {"dram_bytes", "dram_ttl_s", "max_reloads", "spill"},
    "cost": {f.name for f in fields(CostModel)} - {"layers", "dim"} | {"coefficients"},
    "workload": {f.name for f in fields(WorkloadConfig)} - {"seed", "feature_dim"},
    "slo": {f.name for f in fields(SloConfig)},
    "sim": {"mode", "seed", "dram_hit_target", "rank_priority", "churn_at_s"},
    "verify": {"layers", "dim", "elem_bytes", "seed", "trials"},
}


@dataclass(frozen=True)
class VerifyConfig:
    model: ModelConfig = ModelConfig()
    trials: int = 100


@dataclass(frozen=True)
class RunConfig:
    system: SystemConfig
    workload: WorkloadConfig
    slo: SloConfig
    mode: Mode
    seed: int
    dram_hit_target: float
    verify: VerifyConfig
    trigger_explicit: bool
    text: str

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def _pair(text: str, cast=float) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    return tuple(cast(p) for p in parts)


def _optional(text: str, cast):
    return None if text.strip().lower() in ("none", "") else cast(text)


def _int(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def parse_overrides(items) -> dict:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = value.strip()
    return out


def read_parser(path: str | Path | None = None, overrides=None) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section, pairs in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for key, value in pairs.items():
            parser.set(section, key, value)
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KNOWN[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return parser


def canonical_text(parser: configparser.ConfigParser) -> str:
    """Sorted rendering used for the manifest hash."""
    buf = io.StringIO()
    for section in sorted(parser.sections()):
        buf.write(f"[{section}]\n")
        for key in sorted(parser[section]):
            buf.write(f"{key} = {parser[section][key]}\n")
    return buf.getvalue()


def load(path: str | Path | None = None, overrides=None) -> RunConfig:
    parser = read_parser(path, overrides)
    try:
        return _build(parser)
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _section(parser, name) -> dict:
    return dict(parser[name]) if parser.has_section(name) else {}


def _build(parser: configparser.ConfigParser) -> RunConfig:
    base = SystemConfig()
    sec = _section(parser, "model")
    model = ModelConfig(
        layers=_int(sec.get("layers", base.model.layers)), dim=_int(sec.get("dim", base.model.dim)),
        elem_bytes=_int(sec.get("elem_bytes", base.model.elem_bytes)), seed=_int(sec.get("seed", base.model.seed)))

    sec = _section(parser, "trigger")
    tdef = base.trigger
    kv_raw = sec.get("kv_p99", "auto").strip().lower()
    qm_raw = sec.get("q_m", "auto").strip().lower()
    trigger = TriggerConfig(
        length_threshold=_int(sec.get("length_threshold", tdef.length_threshold)),
        dim_threshold=_int(sec.get("dim_threshold", tdef.dim_threshold)),
        kv_p99=tdef.kv_p99 if kv_raw == "auto" else _int(kv_raw),
        hbm_bytes=_int(sec.get("hbm_bytes", tdef.hbm_bytes)),
        r1=float(sec.get("r1", tdef.r1)),
        q_m=tdef.q_m if qm_raw == "auto" else float(qm_raw),
        m_slots=_int(sec.get("m_slots", tdef.m_slots)),
        n_instances=_int(sec.get("n_instances", tdef.n_instances)),
        r2=float(sec.get("r2", tdef.r2)),
        t_life=float(sec.get("t_life", tdef.t_life)),
    )
    headroom = float(sec.get("q_m_headroom", base.q_m_headroom))

    sec = _section(parser, "cost")
    mode_c = sec.get("coefficients", "calibrated").strip().lower()
    if mode_c not in ("calibrated", "explicit"):
        raise ConfigError("[cost] coefficients must be 'calibrated' or 'explicit'")
    costs = DEFAULT_COSTS
    if mode_c == "explicit":
        if "pre_coeffs" not in sec or "rank_coeffs" not in sec:
            raise ConfigError("explicit [cost] needs pre_coeffs and rank_coeffs")
    updates = {}
    for key in ("pre_coeffs", "rank_coeffs", "retrieval_ms", "preprocess_ms"):
        if key in sec:
            value = _pair(sec[key])
            if len(value) != (3 if key.endswith("coeffs") else 2):
                raise ConfigError(f"[cost] {key} has the wrong number of values")
            updates[key] = value
    for key in ("load_fixed_ms", "reload_bandwidth", "hbm_access_ms", "remote_rtt_ms",
                "remote_bandwidth", "slot_contention", "trigger_ms"):
        if key in sec:
            updates[key] = float(sec[key])
    if "shared_bandwidth" in sec:
        updates["shared_bandwidth"] = parser.getboolean("cost", "shared_bandwidth")
    costs = replace(costs, **updates).with_shape(model.layers, model.dim)

    sec = _section(parser, "router")
    sec_c = _section(parser, "cache")
    sec_s = _section(parser, "sim")
    system = SystemConfig(
        model=model, trigger=trigger, auto_kv_p99=kv_raw == "auto", auto_q_m=qm_raw == "auto",
        q_m_headroom=headroom,
        n_servers=_int(sec.get("n_servers", base.n_servers)),
        vnodes=_int(sec.get("vnodes", base.vnodes)),
        per_server_special_cap=_int(sec.get("per_server_special_cap", base.per_server_special_cap)),
        policy=Policy(sec.get("policy", base.policy.value)),
        dram_bytes=_int(sec_c.get("dram_bytes", base.dram_bytes)),
        dram_ttl_s=_optional(sec_c.get("dram_ttl_s", "none"), float),
        max_reloads=_int(sec_c.get("max_reloads", base.max_reloads)),
        spill=parser.getboolean("cache", "spill") if "spill" in sec_c else base.spill,
        rank_priority=parser.getboolean("sim", "rank_priority") if "rank_priority" in sec_s else False,
        costs=costs,
        churn_at_s=_optional(sec_s.get("churn_at_s", "none"), float),
    )

    seed = _int(sec_s.get("seed", 0))
    sec = _section(parser, "workload")
    wdef = WorkloadConfig()
    wkw = {}
    for f in fields(WorkloadConfig):
        if f.name not in sec:
            continue
        raw = sec[f.name]
        default = getattr(wdef, f.name)
        if isinstance(default, tuple):
            wkw[f.name] = _pair(raw, _int)
        elif f.name == "fixed_long_len":
            wkw[f.name] = _optional(raw, _int)
        elif isinstance(default, bool):
            wkw[f.name] = parser.getboolean("workload", f.name)
        elif isinstance(default, int):
            wkw[f.name] = _int(raw)
        else:
            wkw[f.name] = float(raw)
    workload = WorkloadConfig(**wkw, feature_dim=model.dim, seed=seed)

    sec = _section(parser, "slo")
    sdef = SloConfig()
    slo = SloConfig(
        pipeline_p99_ms=float(sec.get("pipeline_p99_ms", sdef.pipeline_p99_ms)),
        ranking_ms=float(sec.get("ranking_ms", sdef.ranking_ms)),
        success_rate=float(sec.get("success_rate", sdef.success_rate)),
        scope=sec.get("scope", sdef.scope), budget=sec.get("budget", sdef.budget))

    sec = _section(parser, "verify")
    vdef = VerifyConfig()
    verify = VerifyConfig(
        ModelConfig(layers=_int(sec.get("layers", vdef.model.layers)), dim=_int(sec.get("dim", vdef.model.dim)),
                    elem_bytes=_int(sec.get("elem_bytes", vdef.model.elem_bytes)),
                    seed=_int(sec.get("seed", vdef.model.seed))),
        trials=_int(sec.get("trials", vdef.trials)))

    try:
        mode = Mode(sec_s.get("mode", Mode.RELAY.value))
    except ValueError as exc:
        raise ConfigError(f"unknown mode {sec_s.get('mode')!r}") from exc
    return RunConfig(system, workload, slo, mode, seed,
                     float(sec_s.get("dram_hit_target", 0.0)), verify,
                     trigger_explicit=kv_raw != "auto" and qm_raw != "auto",
                     text=canonical_text(parser))
