"""Fixed-step closed-loop simulator, run metrics, and input-bound sweeps.

One run integrates the delayed plant x' = A x + B u(t - T_i) + B_d d(t)
with classical RK4 at the scenario step.  The delayed input comes from the
ring buffer (held constant across RK4 substages); the disturbance is
evaluated analytically at the substages.  The policy sees the predicted
state z(t), a fresh preview window, and chooses u(t) once per step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import engine as engine_mod
from .baselines import StandardCbfEngine, prev_cbf
from .errors import ConfigInfeasible, Infeasible, NoStoppingTime, SimulationFailed
from .plant import DelaySystem, DisturbanceSignal, InputHistory, PreviewWindow
from .safety_filter import FilterConfig, step_filter

POLICIES = ("none", "standard", "prev", "lprev")

_QP_STATUS = {0: "ok", 1: "nominal", 2: "infeasible", 3: "no_stopping_time"}


@dataclass
class Scenario:
    """Everything one closed-loop run needs."""

    name: str
    system: DelaySystem
    disturbance: DisturbanceSignal
    x0: np.ndarray
    duration: float
    step: float
    nominal_factory: Callable[[DelaySystem, DisturbanceSignal], Callable]
    standard_amax: Callable[[DelaySystem], float]
    pre_delay_input: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        for name, interval in (("T_i", self.system.T_i), ("T_p", self.system.T_p)):
            k = interval / self.step
            if abs(k - round(k)) > 1e-6:
                raise ValueError(f"{name} must be an integer multiple of the step")

    def with_system(self, sys: DelaySystem) -> "Scenario":
        return replace(self, system=sys)

    def with_um(self, u_m: float) -> "Scenario":
        return self.with_system(self.system.with_overrides(u_m=np.atleast_1d(u_m)))

    def with_tp(self, T_p: float) -> "Scenario":
        return self.with_system(self.system.with_overrides(T_p=T_p))


@dataclass
class SimTrace:
    """Per-step record of one run (arrays are truncated on failure)."""

    scenario: str
    policy: str
    step: float
    t: np.ndarray
    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    u: np.ndarray
    k: np.ndarray
    intervened: np.ndarray
    h: np.ndarray
    T_s: np.ndarray
    qp_status: np.ndarray
    y_m: float
    failure: Optional[str] = None
    failure_step: Optional[int] = None
    extremal_violations: int = 0

    def __len__(self) -> int:
        return self.t.shape[0]

    def columns(self) -> list[str]:
        n = self.x.shape[1]
        cols = ["t"]
        cols += [f"x_{i + 1}" for i in range(n)]
        cols += [f"z_{i + 1}" for i in range(n)]
        cols += ["y", "u", "k", "intervened", "h", "T_s", "qp_status"]
        return cols

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for i in range(len(self)):
                row = [f"{self.t[i]:.6f}"]
                row += [repr(v) for v in self.x[i]]
                row += [repr(v) for v in self.z[i]]
                row += [repr(self.y[i]), repr(self.u[i]), repr(self.k[i])]
                row += [int(self.intervened[i]), repr(self.h[i]), repr(self.T_s[i])]
                row += [_QP_STATUS[int(self.qp_status[i])]]
                writer.writerow(row)


@dataclass
class RunMetrics:
    scenario: str
    policy: str
    u_m: float
    completed: bool
    violated: bool
    violation_time: Optional[float]
    T_1: Optional[float]
    ts_min: Optional[float]
    ts_q1: Optional[float]
    ts_median: Optional[float]
    ts_q3: Optional[float]
    ts_max: Optional[float]
    max_abs_u: float
    min_h: Optional[float]
    failure: Optional[str] = None

    @staticmethod
    def csv_header() -> list[str]:
        return [
            "scenario", "policy", "u_m", "completed", "violated", "violation_time",
            "T_1", "ts_min", "ts_q1", "ts_median", "ts_q3", "ts_max",
            "max_abs_u", "min_h", "failure",
        ]

    def to_row(self) -> list:
        def fmt(v):
            return "" if v is None else v

        return [
            self.scenario, self.policy, self.u_m, int(self.completed),
            int(self.violated), fmt(self.violation_time), fmt(self.T_1),
            fmt(self.ts_min), fmt(self.ts_q1), fmt(self.ts_median),
            fmt(self.ts_q3), fmt(self.ts_max), self.max_abs_u, fmt(self.min_h),
            self.failure or "",
        ]


class _RK4Step:
    """Precomputed matrices making one classical RK4 step a handful of
    matrix-vector products (bit-identical to the textbook substage form)."""

    def __init__(self, sys: DelaySystem, dt: float):
        A, n = sys.A, sys.n
        I = np.eye(n)
        A2, A3 = A @ A, A @ A @ A
        self.phi = I + dt * A + dt**2 / 2 * A2 + dt**3 / 6 * A3 + dt**4 / 24 * A3 @ A
        M0 = dt / 6 * (I + dt * A + dt**2 / 2 * A2 + dt**3 / 4 * A3)
        Mh = dt / 6 * (4 * I + 2 * dt * A + dt**2 / 2 * A2)
        M1 = dt / 6 * I
        self.gamma_u = (M0 + Mh + M1) @ sys.B
        self.d0 = M0 @ sys.Bd
        self.dh = Mh @ sys.Bd
        self.d1 = M1 @ sys.Bd

    def advance(self, x, u_delayed, d_t, d_half, d_next):
        return (
            self.phi @ x
            + self.gamma_u @ u_delayed
            + self.d0 @ d_t
            + self.dh @ d_half
            + self.d1 @ d_next
        )


class _NominalPolicy:
    """No safety filter: the (saturated) nominal command goes straight out."""

    def __init__(self, scn: Scenario):
        self.sys = scn.system
        self.nominal = scn.nominal_factory(scn.system, scn.disturbance)
        self.u_m = scn.system.u_m

    def __call__(self, t, x, z, window):
        k_val = np.atleast_1d(np.asarray(self.nominal(x, z, t), dtype=float))
        u = np.clip(k_val, -self.u_m, self.u_m)
        return u, k_val, False, np.nan, np.nan, 1, True


class _FilteredPolicy:
    def __init__(self, scn: Scenario, eng, alpha_gain: float):
        self.engine = eng
        self.cfg = FilterConfig(
            nominal=scn.nominal_factory(scn.system, scn.disturbance),
            alpha_gain=alpha_gain,
        )

    def __call__(self, t, x, z, window):
        res = step_filter(self.engine, self.cfg, x, z, None, window, t)
        return (
            res.u, res.k_val, res.intervened, res.eval.h, res.eval.T_s, 0,
            res.extremal_feasible,
        )


def make_policy(name: str, scn: Scenario, alpha_gain: float = 1.0):
    if name == "none":
        return _NominalPolicy(scn)
    if name == "lprev":
        eng = engine_mod.LimitedPreviewEngine(scn.system, scn.step)
        return _FilteredPolicy(scn, eng, alpha_gain)
    if name == "prev":
        return _FilteredPolicy(scn, prev_cbf(scn.system, scn.step), alpha_gain)
    if name == "standard":
        a_max = scn.standard_amax(scn.system)
        eng = StandardCbfEngine(scn.system, a_max, scn.step)
        return _FilteredPolicy(scn, eng, alpha_gain)
    raise ValueError(f"unknown policy {name!r}; choose from {POLICIES}")


def simulate(scn: Scenario, policy, raise_on_failure: bool = True) -> SimTrace:
    """Run the closed loop; ``policy`` is a name or a policy object."""
    if isinstance(policy, str):
        policy_name = policy
        policy = make_policy(policy, scn)
    else:
        policy_name = getattr(policy, "name", policy.__class__.__name__)

    sys = scn.system
    dt = scn.step
    n_steps = int(round(scn.duration / dt))
    k_i = int(round(sys.T_i / dt))
    k_p = int(round(sys.T_p / dt))
    tab = engine_mod.grid_tables(sys, dt)
    rk4 = _RK4Step(sys, dt)
    sig = scn.disturbance

    # Disturbance samples for every preview window of the run, plus the
    # half-step values RK4 needs; bound-checked once here.
    n_total = n_steps + k_p + 1
    times = dt * np.arange(n_total)
    dvals = np.stack([np.atleast_1d(sig.value(ti)) for ti in times])
    ddvals = np.stack([np.atleast_1d(sig.derivative(ti)) for ti in times])
    if np.any(np.abs(dvals) > sig.bound[None, :] + 1e-9):
        raise ValueError("disturbance exceeds its stated bound over the run")
    dhalf = np.stack(
        [np.atleast_1d(sig.value(ti + 0.5 * dt)) for ti in times[:n_steps]]
    )

    pre = scn.pre_delay_input
    hist = InputHistory(dt, sys.T_i, sys.u_m, initial=pre)
    x = scn.x0.copy()

    n_rec = n_steps + 1
    rec_t = dt * np.arange(n_rec)
    rec_x = np.empty((n_rec, sys.n))
    rec_z = np.empty((n_rec, sys.n))
    rec_y = np.empty(n_rec)
    rec_u = np.empty(n_rec)
    rec_k = np.empty(n_rec)
    rec_int = np.zeros(n_rec, dtype=bool)
    rec_h = np.full(n_rec, np.nan)
    rec_ts = np.full(n_rec, np.nan)
    rec_status = np.zeros(n_rec, dtype=np.int8)

    failure = None
    failure_step = None
    extremal_violations = 0
    hist_flat = hist._buf.reshape(-1)

    i = 0
    try:
        for i in range(n_rec):
            t = rec_t[i]
            window = PreviewWindow(
                anchor=t, step=dt, horizon=sys.T_p,
                values=dvals[i : i + k_p + 1],
                derivatives=ddvals[i : i + k_p + 1],
                source=sig,
            )
            z = (
                tab.E_Ti @ x
                + tab.M_hist @ hist_flat
                + np.tensordot(tab.D_pred, dvals[i : i + k_i + 1], axes=([0, 2], [0, 1]))
            )
            u, k_val, intervened, h, T_s, status, extremal_ok = policy(t, x, z, window)
            if not extremal_ok:
                extremal_violations += 1
            rec_x[i] = x
            rec_z[i] = z
            rec_y[i] = sys.C @ x
            rec_u[i] = u[0]
            rec_k[i] = k_val[0]
            rec_int[i] = intervened
            rec_h[i] = h
            rec_ts[i] = T_s
            rec_status[i] = status
            if i < n_steps:
                u_delayed = hist.oldest.copy()
                x = rk4.advance(x, u_delayed, dvals[i], dhalf[i], dvals[i + 1])
                hist.push(u)
                hist_flat = hist._buf.reshape(-1)
    except (Infeasible, NoStoppingTime) as exc:
        failure = f"{type(exc).__name__}: {exc}"
        failure_step = i
        n_rec = i

    trace = SimTrace(
        scenario=scn.name,
        policy=policy_name,
        step=dt,
        t=rec_t[:n_rec],
        x=rec_x[:n_rec],
        z=rec_z[:n_rec],
        y=rec_y[:n_rec],
        u=rec_u[:n_rec],
        k=rec_k[:n_rec],
        intervened=rec_int[:n_rec],
        h=rec_h[:n_rec],
        T_s=rec_ts[:n_rec],
        qp_status=rec_status[:n_rec],
        y_m=sys.y_m,
        failure=failure,
        failure_step=failure_step,
        extremal_violations=extremal_violations,
    )
    if failure is not None and raise_on_failure:
        raise SimulationFailed(failure, failure_step, failure_step * dt, trace=trace)
    return trace


def metrics(trace: SimTrace, tol: float = 1e-9) -> RunMetrics:
    """Violation scan, first intervention time, and stopping-time quartiles."""
    over = np.nonzero(np.abs(trace.y) > trace.y_m + tol)[0]
    violated = over.size > 0
    violation_time = float(trace.t[over[0]]) if violated else None
    hit = np.nonzero(trace.intervened)[0]
    T_1 = float(trace.t[hit[0]]) if hit.size else None
    ts = trace.T_s[trace.intervened]
    ts = ts[np.isfinite(ts)]
    if ts.size:
        q1, med, q3 = np.percentile(ts, [25, 50, 75])
        ts_stats = (float(ts.min()), float(q1), float(med), float(q3), float(ts.max()))
    else:
        ts_stats = (None, None, None, None, None)
    finite_h = trace.h[np.isfinite(trace.h)]
    return RunMetrics(
        scenario=trace.scenario,
        policy=trace.policy,
        u_m=np.nan,
        completed=trace.failure is None,
        violated=violated,
        violation_time=violation_time,
        T_1=T_1,
        ts_min=ts_stats[0],
        ts_q1=ts_stats[1],
        ts_median=ts_stats[2],
        ts_q3=ts_stats[3],
        ts_max=ts_stats[4],
        max_abs_u=float(np.max(np.abs(trace.u))) if len(trace) else 0.0,
        min_h=float(finite_h.min()) if finite_h.size else None,
        failure=trace.failure,
    )


def run_and_measure(scn: Scenario, policy_name: str, alpha_gain: float = 1.0) -> RunMetrics:
    try:
        trace = simulate(scn, make_policy(policy_name, scn, alpha_gain),
                         raise_on_failure=False)
        m = metrics(trace)
    except ConfigInfeasible as exc:
        m = RunMetrics(
            scenario=scn.name, policy=policy_name, u_m=float(scn.system.u_m[0]),
            completed=False, violated=True, violation_time=None, T_1=None,
            ts_min=None, ts_q1=None, ts_median=None, ts_q3=None, ts_max=None,
            max_abs_u=0.0, min_h=None, failure=f"ConfigInfeasible: {exc}",
        )
        m.policy = policy_name
        return m
    m.u_m = float(scn.system.u_m[0])
    m.policy = policy_name
    if not m.completed:
        m.violated = True
    return m


def sweep_um(
    scn: Scenario,
    policies: list[str],
    um_grid,
    alpha_gain: float = 1.0,
) -> list[RunMetrics]:
    """One run per (policy, u_m) cell; failures are recorded, not fatal."""
    rows = []
    for u_m in um_grid:
        scaled = scn.with_um(float(u_m))
        for policy_name in policies:
            rows.append(run_and_measure(scaled, policy_name, alpha_gain))
    return rows


def is_safe_run(scn: Scenario, policy_name: str, alpha_gain: float = 1.0) -> bool:
    m = run_and_measure(scn, policy_name, alpha_gain)
    return m.completed and not m.violated


def min_safe_um(
    scn: Scenario,
    policy_name: str,
    lo: float,
    hi: float,
    resolution: float = 0.01,
    alpha_gain: float = 1.0,
) -> Optional[float]:
    """Smallest u_m on the resolution grid keeping the run safe (bisection,
    safety assumed monotone in u_m).  None when even ``hi`` is unsafe."""
    lo_i = int(np.floor(lo / resolution + 1e-9))
    hi_i = int(np.ceil(hi / resolution - 1e-9))
    if not is_safe_run(scn.with_um(hi_i * resolution), policy_name, alpha_gain):
        return None
    if is_safe_run(scn.with_um(lo_i * resolution), policy_name, alpha_gain):
        return lo_i * resolution
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if is_safe_run(scn.with_um(mid * resolution), policy_name, alpha_gain):
            hi_i = mid
        else:
            lo_i = mid
    return hi_i * resolution


def write_metrics_csv(rows: list[RunMetrics], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RunMetrics.csv_header())
        for m in rows:
            writer.writerow(m.to_row())


GNUPLOT_TRACE = """# gnuplot companion for trace.csv (output y and input u vs time)
set datafile separator ','
set key autotitle columnhead
set terminal pngcairo size 1200,500
set output 'trace.png'
set multiplot layout 1,2
set xlabel 't [s]'
plot 'trace.csv' using 1:{y_col} with lines title 'y', \\
     {y_m} with lines dashtype 2 title 'y_m', {neg_y_m} with lines dashtype 2 notitle
plot 'trace.csv' using 1:{u_col} with lines title 'u'
unset multiplot
"""


def write_trace_outputs(trace: SimTrace, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    trace.to_csv(outdir / "trace.csv")
    n = trace.x.shape[1]
    gp = GNUPLOT_TRACE.format(
        y_col=2 * n + 2, u_col=2 * n + 3, y_m=trace.y_m, neg_y_m=-trace.y_m
    )
    (outdir / "trace.gp").write_text(gp)
