"""Command-line entry point: run single scenarios, sweep input bounds, and
dump/re-read flat key=value config files."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import scenarios as scen_mod
from . import sim as sim_mod
from .errors import ConfigInfeasible
from .sim import POLICIES, RunMetrics, metrics, min_safe_um, simulate, sweep_um

ENV_OUT_DIR = "LPREV_OUT_DIR"

EXO_UM_GRID = [1.119] + [round(1.2 + 0.1 * i, 3) for i in range(9)]
LANE_UM_GRID = [0.1, 0.15, 0.2]


@dataclass
class RunConfig:
    scenario: str = "exo"
    policy: str = "lprev"
    u_m: Optional[float] = None
    T_p: Optional[float] = None
    step: Optional[float] = None
    duration: Optional[float] = None
    alpha: float = 1.0
    out: str = "out"

    def validate(self):
        if self.scenario not in scen_mod.SCENARIOS:
            raise ValueError(
                f"unknown scenario {self.scenario!r}; available: "
                f"{sorted(scen_mod.SCENARIOS)}"
            )
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; available: {POLICIES}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def build_scenario(self):
        kwargs = {}
        if self.u_m is not None:
            kwargs["u_m"] = self.u_m
        if self.T_p is not None:
            kwargs["T_p"] = self.T_p
        if self.step is not None:
            kwargs["step"] = self.step
        if self.duration is not None:
            kwargs["duration"] = self.duration
        return scen_mod.build(self.scenario, **kwargs)


_FIELD_TYPES = {
    "scenario": str, "policy": str, "u_m": float, "T_p": float,
    "step": float, "duration": float, "alpha": float, "out": str,
}


def format_config(cfg: RunConfig) -> str:
    lines = ["# lprevcbf run configuration (key = value; flags override)"]
    for key, value in asdict(cfg).items():
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if value == "":
            setattr(cfg, key, None if key in ("u_m", "T_p", "step", "duration") else "")
            continue
        setattr(cfg, key, _FIELD_TYPES[key](value))
    return cfg


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    if args.scenario is not None:
        cfg.scenario = args.scenario
    if args.policy is not None:
        cfg.policy = args.policy
    if args.um is not None:
        cfg.u_m = args.um
    if args.tp is not None:
        cfg.T_p = args.tp
    if args.step is not None:
        cfg.step = args.step
    if args.duration is not None:
        cfg.duration = args.duration
    if args.alpha is not None:
        cfg.alpha = args.alpha
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text())
    cfg = _apply_flags(cfg, args)
    root = os.environ.get(ENV_OUT_DIR)
    if root and not os.path.isabs(cfg.out):
        cfg.out = str(Path(root) / cfg.out)
    return cfg


def _add_common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--scenario", help="scenario name (see list-scenarios)")
    p.add_argument("--policy", help="none | standard | prev | lprev")
    p.add_argument("--um", type=float, help="input bound override")
    p.add_argument("--tp", type=float, help="preview horizon override [s]")
    p.add_argument("--step", type=float, help="simulation step [s]")
    p.add_argument("--duration", type=float, help="run duration [s]")
    p.add_argument("--alpha", type=float, help="class-K gain (alpha(h) = gain*h)")
    p.add_argument("--out", help="output directory")


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args)
        cfg.validate()
        scn = cfg.build_scenario()
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        trace = simulate(scn, sim_mod.make_policy(cfg.policy, scn, cfg.alpha),
                         raise_on_failure=False)
    except ConfigInfeasible as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    m = metrics(trace)
    m.u_m = float(scn.system.u_m[0])
    m.policy = cfg.policy
    sim_mod.write_trace_outputs(trace, outdir)
    sim_mod.write_metrics_csv([m], outdir / "metrics.csv")
    if trace.failure is not None:
        print(f"run failed at t={trace.failure_step * scn.step:.4f} s: {trace.failure}")
        return 1
    if m.violated:
        print(
            f"unsafe: |y| exceeded {scn.system.y_m} at t={m.violation_time:.4f} s "
            f"(trace in {outdir})"
        )
        return 1
    t1 = "none" if m.T_1 is None else f"{m.T_1:.4f} s"
    print(f"safe: min h={m.min_h}, first intervention={t1} (trace in {outdir})")
    return 0


def _ordering_report(rows: list[RunMetrics], um_grid) -> list[str]:
    lines = []
    by_cell = {(round(m.u_m, 6), m.policy): m for m in rows}
    for u_m in um_grid:
        key = round(float(u_m), 6)
        cells = {p: by_cell.get((key, p)) for p in ("standard", "lprev", "prev")}
        t1 = {
            p: (c.T_1 if c and c.completed and c.T_1 is not None else None)
            for p, c in cells.items()
        }
        if all(v is not None for v in t1.values()):
            ok = t1["standard"] <= t1["lprev"] <= t1["prev"]
            lines.append(
                f"u_m={u_m}: T_1 standard={t1['standard']:.4f} <= "
                f"lprev={t1['lprev']:.4f} <= prev={t1['prev']:.4f}: "
                f"{'ok' if ok else 'VIOLATED'}"
            )
        else:
            missing = [p for p, v in t1.items() if v is None]
            lines.append(f"u_m={u_m}: no intervention/failed for {missing}")
    return lines


def cmd_sweep(args) -> int:
    try:
        cfg = _load_config(args)
        cfg.policy = cfg.policy or "lprev"
        cfg.validate()
        scn = cfg.build_scenario()
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    um_grid = EXO_UM_GRID if cfg.scenario == "exo" else LANE_UM_GRID
    policies = ["standard", "prev", "lprev"]
    rows = sweep_um(scn, policies, um_grid, alpha_gain=cfg.alpha)
    sim_mod.write_metrics_csv(rows, outdir / "sweep.csv")
    report = [f"sweep over u_m grid {um_grid} ({cfg.scenario})"]
    report += _ordering_report(rows, um_grid)
    if cfg.scenario == "lane":
        report.append("minimum safe u_m (resolution 0.01):")
        mins = {}
        for policy in policies:
            mins[policy] = min_safe_um(scn, policy, 0.05, 0.4, alpha_gain=cfg.alpha)
            shown = "none <= 0.4" if mins[policy] is None else f"{mins[policy]:.2f}"
            report.append(f"  {policy}: {shown}")
        if all(v is not None for v in mins.values()):
            ok = mins["prev"] < mins["lprev"] < mins["standard"]
            report.append(f"  partial order prev < lprev < standard: {'ok' if ok else 'VIOLATED'}")
    text = "\n".join(report)
    (outdir / "report.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_dump_config(args) -> int:
    try:
        cfg = _load_config(args)
        cfg.validate()
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    text = format_config(cfg)
    if args.output:
        Path(args.output).write_text(text)
    else:
        print(text, end="")
    return 0


def cmd_list_scenarios(args) -> int:
    for name in sorted(scen_mod.SCENARIOS):
        scn = scen_mod.build(name)
        sys_ = scn.system
        print(
            f"{name}: n={sys_.n}, T_i={sys_.T_i} s, T_p={sys_.T_p} s, "
            f"y_m={sys_.y_m}, u_m={float(sys_.u_m[0])}, step={scn.step} s, "
            f"duration={scn.duration} s"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lprevcbf",
        description="Limited-preview CBF safety filtering: runs and sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one (scenario, policy) pair")
    _add_common_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep u_m for all three filters")
    _add_common_flags(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_dump = sub.add_parser("dump-config", help="print the resolved config")
    _add_common_flags(p_dump)
    p_dump.add_argument("--output", help="write to file instead of stdout")
    p_dump.set_defaults(func=cmd_dump_config)

    p_list = sub.add_parser("list-scenarios", help="list built-in scenarios")
    p_list.set_defaults(func=cmd_list_scenarios)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
