"""Minimal-intervention QP filter and the nominal controllers it modifies.

The filter solves

    argmin_u  (1/2) ||u - k||^2    s.t.  P u <= q,  u in [lo, hi]

for a scalar input, which reduces to intersecting a halfline with the box
and clamping the nominal command onto the result.  Infeasibility is
fail-loud: the run aborts and is reported, never silently continued.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import BarrierEval
from .errors import Infeasible

#: |u - k| above this counts as an intervention of the safety filter.
INTERVENTION_TOL = 1e-9


@dataclass
class FilterConfig:
    """Class-K gain (alpha(h) = gain * h) and the nominal controller k(x,z,t)."""

    nominal: Callable[[np.ndarray, np.ndarray, float], np.ndarray]
    alpha_gain: float = 1.0

    def __post_init__(self):
        if not self.alpha_gain > 0:
            raise ValueError(f"alpha_gain must be positive, got {self.alpha_gain}")


def solve_qp_scalar(
    k_val: float, P: float, q: float, box: tuple[float, float]
) -> float:
    """Exact minimizer of (1/2)(u - k)^2 over {u in [lo, hi] : P u <= q}."""
    lo, hi = box
    if lo > hi:
        raise Infeasible(
            f"input box is empty: [{lo:.6g}, {hi:.6g}]",
            snapshot={"k": k_val, "P": P, "q": q, "box": box},
        )
    if P > 0.0:
        hi = min(hi, q / P)
    elif P < 0.0:
        lo = max(lo, q / P)
    elif q < 0.0:
        raise Infeasible(
            f"constraint 0*u <= {q:.6g} cannot hold",
            snapshot={"k": k_val, "P": P, "q": q, "box": box},
        )
    if lo > hi:
        raise Infeasible(
            f"halfplane P u <= q empties the box: [{lo:.6g}, {hi:.6g}]",
            snapshot={"k": k_val, "P": P, "q": q, "box": box},
        )
    return min(max(k_val, lo), hi)


def nominal_zero(x, z, t) -> np.ndarray:
    """Zero nominal command, so any output of the filter is pure intervention."""
    return np.zeros(1)


def nominal_statefb(K: np.ndarray, z_ff: np.ndarray, z: np.ndarray, u_m=None) -> np.ndarray:
    """State feedback K (z_ff - z), saturated to [-u_m, u_m] when a bound is given."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    u = K @ (np.asarray(z_ff, dtype=float) - np.asarray(z, dtype=float))
    if u_m is not None:
        u_m = np.atleast_1d(np.asarray(u_m, dtype=float))
        u = np.clip(u, -u_m, u_m)
    return u


@dataclass
class StepResult:
    u: np.ndarray
    eval: BarrierEval
    intervened: bool
    k_val: np.ndarray
    extremal_feasible: bool = True


def step_filter(engine, cfg: FilterConfig, x, z, hist, prev, t) -> StepResult:
    """One filtered control step: evaluate the barrier, build the constraint
    row and the input box, project the nominal command."""
    ev = engine.evaluate(t, z, prev)
    k_val = np.atleast_1d(np.asarray(cfg.nominal(x, z, t), dtype=float))
    k_i = int(round(engine.sys.T_i / prev.step))
    d_Ti = prev.values[k_i]
    alpha_val = cfg.alpha_gain * ev.h
    P, q = engine.constraint(ev, d_Ti, alpha_val)
    box = engine.input_box(ev, prev)
    p0 = float(np.atleast_1d(P)[0])
    u0 = solve_qp_scalar(float(k_val[0]), p0, q, box)
    u = np.array([u0])
    # Recursive-feasibility spot check: the extremal input should satisfy
    # the constraint whenever h >= 0 (counted, never masked).
    ok = True
    if ev.h >= 0.0 and np.any(ev.u_hat):
        uh = float(ev.u_hat[0])
        ok = (p0 * uh <= q + 1e-9) and (box[0] - 1e-12 <= uh <= box[1] + 1e-12)
    return StepResult(
        u=u,
        eval=ev,
        intervened=bool(abs(u0 - float(k_val[0])) > INTERVENTION_TOL),
        k_val=k_val,
        extremal_feasible=ok,
    )
