"""Comparison filters: the standard no-preview CBF and the
unlimited-preview configuration of the barrier engine.

The standard approach assumes a constant worst-case output acceleration
bound a_max and uses

    h(y, y') = (y_m - sgn(y') y) - y'^2 / (2 a_max),

with the input restricted to the interval that keeps |y''| <= a_max.  It
receives the same predicted state z as the preview filters but treats the
disturbance as adversarial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import BarrierEval, UnlimitedPreviewEngine
from .errors import ConfigInfeasible
from .plant import SIGN_TOL, DelaySystem, PreviewWindow


@dataclass(frozen=True)
class StandardCbfConfig:
    """Acceleration-bound construction for the standard CBF."""

    a_max: float
    y_m: float

    def __post_init__(self):
        if not self.a_max > 0:
            raise ConfigInfeasible(f"a_max must be positive, got {self.a_max}")


def standard_h(cfg: StandardCbfConfig, y: float, y_dot: float) -> float:
    """Barrier value of the constant-deceleration construction."""
    s = -1.0 if y_dot < 0 else 1.0
    return (cfg.y_m - s * y) - y_dot * y_dot / (2.0 * cfg.a_max)


def standard_amax_exo(
    u_m: float,
    e_dot_max: float,
    e_max: float,
    tau_e_max: float,
    I_d: float,
    B_d_coef: float,
    K_d: float,
) -> float:
    """Worst-case output acceleration bound for the joint-error dynamics:

    a_max = (u_m - B e'_max - K e_max - tau_max) / I.

    Raises ConfigInfeasible when the input bound cannot cover the
    worst-case load terms.
    """
    a_max = (u_m - B_d_coef * e_dot_max - K_d * e_max - tau_e_max) / I_d
    if a_max <= 0:
        raise ConfigInfeasible(
            f"u_m={u_m} leaves no acceleration authority (a_max={a_max:.4g})"
        )
    return a_max


def standard_input_box(
    cfg: StandardCbfConfig, F0: float, scale: float, f0_scale: float = 1.0
) -> tuple[float, float]:
    """Admissible input interval that keeps |y''| <= a_max.

    Joint-error form: [-I a_max + F0, I a_max + F0] (scale = I, f0_scale = 1).
    Lane form: (1/C_f)(-M a_max + F0, M a_max + F0) with scale = M/C_f and
    f0_scale = 1/C_f.
    """
    center = F0 * f0_scale
    half = abs(scale) * cfg.a_max
    return (center - half, center + half)


def standard_amax_generic(
    sys: DelaySystem, state_bound: np.ndarray, u_m: float | None = None
) -> float:
    """a_max = |CAB| u_m - (|C A^2| . state_bound + |C A B_d| . d_m).

    ``state_bound`` is the element-wise box the load term F0 is maximized
    over.  Reduces to the joint-error and lane-keeping formulas for those
    systems.
    """
    u_lim = float(sys.u_m[0]) if u_m is None else float(u_m)
    cab = float((sys.CA @ sys.B).ravel()[0])
    ca2 = sys.CA @ sys.A
    f0_max = float(np.abs(ca2) @ np.abs(state_bound) + np.abs(sys.CA @ sys.Bd) @ sys.d_m)
    a_max = abs(cab) * u_lim - f0_max
    if a_max <= 0:
        raise ConfigInfeasible(
            f"u_m={u_lim} leaves no acceleration authority (a_max={a_max:.4g})"
        )
    return a_max


class StandardCbfEngine:
    """Closed-loop wrapper giving the standard CBF the same stepping
    interface as the preview engines.

    The reported stopping time is the constant-deceleration analog
    |y'| / a_max.  The constraint row enforces h' >= -alpha(h) with the
    disturbance at its adversarial bound, and the input box intersects the
    acceleration-limited interval with [-u_m, u_m].
    """

    unlimited = False

    def __init__(self, sys: DelaySystem, a_max: float, step: float):
        self.sys = sys
        self.cfg = StandardCbfConfig(a_max=a_max, y_m=sys.y_m)
        self.step = float(step)
        self._k_i = int(round(sys.T_i / step))
        self._cab = float((sys.CA @ sys.B).ravel()[0])
        self._ca2 = sys.CA @ sys.A
        self._cabd = sys.CA @ sys.Bd
        self._wc_d = float(np.abs(self._cabd) @ sys.d_m)

    def evaluate(self, t: float, z: np.ndarray, window: PreviewWindow) -> BarrierEval:
        sys = self.sys
        z = np.asarray(z, dtype=float).reshape(-1)
        y = float(sys.C @ z)
        y_dot = float(sys.CA @ z)
        h = standard_h(self.cfg, y, y_dot)
        sign = -1.0 if y_dot < -SIGN_TOL else 1.0
        a = self.cfg.a_max
        P = np.array([y_dot * self._cab / a])
        q0 = -abs(y_dot) - y_dot * float(self._ca2 @ z) / a - abs(y_dot) * self._wc_d / a
        return BarrierEval(
            t=t, h=h, T_s=abs(y_dot) / a, T_delta=0.0,
            u_hat=np.zeros(sys.m), d_hat=np.zeros(sys.l), psi=0.0,
            P=P, q=q0, y_dot=y_dot, sign=sign, z=z.copy(), ce_row=sys.C.copy(),
        )

    def constraint(self, ev: BarrierEval, d_at_Ti, alpha_of_h: float):
        return ev.P, alpha_of_h + ev.q

    def input_box(self, ev: BarrierEval, window: PreviewWindow) -> tuple[float, float]:
        sys = self.sys
        d_Ti = window.values[self._k_i]
        f0 = -(float(self._ca2 @ ev.z) + float(self._cabd @ d_Ti)) / self._cab
        lo, hi = standard_input_box(self.cfg, f0, 1.0 / abs(self._cab))
        u = float(sys.u_m[0])
        return (max(lo, -u), min(hi, u))


def prev_cbf(sys: DelaySystem, step: float = 0.001) -> UnlimitedPreviewEngine:
    """Barrier engine with the preview horizon extended on demand so the
    worst-case tail never contributes (same interface as the limited one)."""
    return UnlimitedPreviewEngine(sys, step)
