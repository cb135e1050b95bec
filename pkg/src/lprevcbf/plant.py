"""Delayed linear plant, preview/history buffers, and exact state prediction.

The plant is

    x'(t) = A x(t) + B u(t - T_i) + B_d d(t)

with a scalar safety output y = C z on the predicted state z(t) = x(t + T_i).
The predicted state is exactly recoverable from the current state, the ring
buffer of already-issued inputs, and the previewed disturbance, because the
preview horizon exceeds the input delay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import matops

#: |y_dot| below this is treated as "at rest" (sign taken as +1).
SIGN_TOL = 1e-9

_GRID_TOL = 1e-9


def _steps(interval: float, step: float, name: str) -> int:
    k = interval / step
    k_round = int(round(k))
    if abs(k - k_round) > 1e-6 or k_round < 0:
        raise ValueError(f"{name} ({interval}) must be an integer multiple of step ({step})")
    return k_round


@dataclass(frozen=True, eq=False)
class DelaySystem:
    """Plant matrices, delay/preview horizons, and symmetric bounds.

    Relative degree 2 is required: C B = C B_d = 0 while every entry of
    C A B and C A B_d is nonzero, so input and disturbance first appear in
    the second output derivative.
    """

    A: np.ndarray
    B: np.ndarray
    Bd: np.ndarray
    C: np.ndarray
    T_i: float
    T_p: float
    u_m: np.ndarray
    d_m: np.ndarray
    y_m: float

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        object.__setattr__(self, "Bd", np.atleast_2d(np.asarray(self.Bd, dtype=float)))
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float).reshape(-1))
        object.__setattr__(self, "u_m", np.atleast_1d(np.asarray(self.u_m, dtype=float)))
        object.__setattr__(self, "d_m", np.atleast_1d(np.asarray(self.d_m, dtype=float)))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if self.B.shape[0] != n or self.Bd.shape[0] != n or self.C.shape[0] != n:
            raise ValueError("B, Bd, C dimensions do not match A")
        for name, m in (("A", self.A), ("B", self.B), ("Bd", self.Bd), ("C", self.C)):
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite entries")
        if not (self.T_p > self.T_i > 0):
            raise ValueError(f"need T_p > T_i > 0, got T_p={self.T_p}, T_i={self.T_i}")
        if not np.all(self.u_m > 0):
            raise ValueError("u_m must be positive element-wise")
        if np.any(self.d_m < 0):
            raise ValueError("d_m must be nonnegative element-wise")
        if not self.y_m > 0:
            raise ValueError("y_m must be positive")
        cb = self.C @ self.B
        cbd = self.C @ self.Bd
        if np.max(np.abs(cb)) > 1e-12 or np.max(np.abs(cbd)) > 1e-12:
            raise ValueError("relative degree 2 requires C B = 0 and C B_d = 0")
        cab = self.C @ self.A @ self.B
        cabd = self.C @ self.A @ self.Bd
        if np.any(np.abs(cab) < 1e-12) or np.any(np.abs(cabd) < 1e-12):
            raise ValueError("relative degree 2 requires nonzero C A B and C A B_d")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def l(self) -> int:
        return self.Bd.shape[1]

    @property
    def CA(self) -> np.ndarray:
        return self.C @ self.A

    def y_dot(self, z: np.ndarray) -> float:
        """Output velocity C A z of the predicted state."""
        return float(self.CA @ z)

    def with_overrides(self, u_m=None, T_p=None) -> "DelaySystem":
        return DelaySystem(
            A=self.A,
            B=self.B,
            Bd=self.Bd,
            C=self.C,
            T_i=self.T_i,
            T_p=self.T_p if T_p is None else float(T_p),
            u_m=self.u_m if u_m is None else u_m,
            d_m=self.d_m,
            y_m=self.y_m,
        )


@dataclass
class DisturbanceSignal:
    """Previewable disturbance: value and derivative callables plus its bound."""

    value: Callable[[float], np.ndarray]
    derivative: Callable[[float], np.ndarray]
    bound: np.ndarray

    def __post_init__(self):
        self.bound = np.atleast_1d(np.asarray(self.bound, dtype=float))


def sinusoid_disturbance(amplitude: float, omega: float, phase: float = 0.0) -> DisturbanceSignal:
    """Single-channel sinusoid amplitude*sin(omega t + phase)."""
    amp = float(amplitude)
    om = float(omega)

    def value(t: float) -> np.ndarray:
        return np.array([amp * np.sin(om * t + phase)])

    def derivative(t: float) -> np.ndarray:
        return np.array([amp * om * np.cos(om * t + phase)])

    return DisturbanceSignal(value=value, derivative=derivative, bound=np.array([abs(amp)]))


def zero_disturbance(channels: int = 1) -> DisturbanceSignal:
    zero = np.zeros(channels)
    return DisturbanceSignal(value=lambda t: zero, derivative=lambda t: zero, bound=zero.copy())


class InputHistory:
    """Ring buffer of the inputs issued on [t - T_i, t), one per step.

    Each stored input is interpreted zero-order-hold over its step, so the
    oldest entry is the command currently reaching the plant.
    """

    def __init__(self, step: float, T_i: float, u_m: np.ndarray, initial=None):
        self.step = float(step)
        n_slots = _steps(T_i, step, "T_i")
        if n_slots < 1:
            raise ValueError("T_i must span at least one step")
        self.u_m = np.atleast_1d(np.asarray(u_m, dtype=float))
        m = self.u_m.shape[0]
        self._buf = np.zeros((n_slots, m))
        if initial is not None:
            initial = np.asarray(initial, dtype=float)
            if initial.shape != self._buf.shape:
                raise ValueError(f"initial history must have shape {self._buf.shape}")
            self._check(initial)
            self._buf[:] = initial

    def _check(self, u):
        if np.any(np.abs(u) > self.u_m + 1e-9):
            raise ValueError("stored input exceeds u_m")

    def __len__(self) -> int:
        return self._buf.shape[0]

    @property
    def oldest(self) -> np.ndarray:
        """The delayed input u(t - T_i) active over the current step."""
        return self._buf[0]

    def push(self, u: np.ndarray) -> None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        self._check(u)
        self._buf[:-1] = self._buf[1:]
        self._buf[-1] = u

    def as_array(self) -> np.ndarray:
        """Inputs ordered oldest (t - T_i) to newest (t - step), one row each."""
        return self._buf.copy()


@dataclass
class PreviewWindow:
    """Previewed disturbance samples on [t, t + T_p], one per step.

    Holds ``T_p/step + 1`` rows; the closing sample at t + T_p is the
    continuous-signal limit of the half-open preview interval.  ``source`` is
    the backing signal when the window was materialized from one, which lets
    an unlimited-preview consumer extend the horizon on demand.
    """

    anchor: float
    step: float
    horizon: float
    values: np.ndarray
    derivatives: np.ndarray
    source: Optional[DisturbanceSignal] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        self.derivatives = np.atleast_2d(np.asarray(self.derivatives, dtype=float))
        if self.values.shape[1] > self.values.shape[0] and self.values.shape[0] <= 2:
            self.values = self.values.T
            self.derivatives = self.derivatives.T
        n_samples = _steps(self.horizon, self.step, "T_p") + 1
        if self.values.shape[0] != n_samples or self.derivatives.shape[0] != n_samples:
            raise ValueError(
                f"window needs {n_samples} samples to span [0, {self.horizon}] "
                f"at step {self.step}, got {self.values.shape[0]}"
            )

    @classmethod
    def from_signal(
        cls, signal: DisturbanceSignal, t: float, horizon: float, step: float
    ) -> "PreviewWindow":
        k = _steps(horizon, step, "T_p")
        times = t + step * np.arange(k + 1)
        values = np.stack([np.atleast_1d(signal.value(ti)) for ti in times])
        derivs = np.stack([np.atleast_1d(signal.derivative(ti)) for ti in times])
        return cls(
            anchor=t, step=step, horizon=horizon, values=values,
            derivatives=derivs, source=signal,
        )

    def offsets(self) -> np.ndarray:
        return self.step * np.arange(self.values.shape[0])

    def slice_from(self, offset: float, count: int) -> np.ndarray:
        """``count`` value rows starting at the given grid offset."""
        j = _steps(offset, self.step, "offset")
        if j + count > self.values.shape[0]:
            raise ValueError("requested samples run past the preview horizon")
        return self.values[j : j + count]


def predict_state(
    sys: DelaySystem, x: np.ndarray, hist: InputHistory, prev: PreviewWindow
) -> np.ndarray:
    """Predicted state z(t) = x(t + T_i), evaluated exactly.

    z = e^{A T_i} x + int_0^{T_i} e^{A(T_i - tau)} (B u(t - T_i + tau)
        + B_d d(t + tau)) dtau

    The input integral is exact per zero-order-hold segment (block-exponential
    per step); the disturbance integral uses the canonical quadrature over the
    preview samples.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    step = hist.step
    if abs(prev.step - step) > _GRID_TOL:
        raise ValueError("history and preview grids disagree")
    k_i = _steps(sys.T_i, step, "T_i")
    if len(hist) != k_i:
        raise ValueError("history length does not span T_i")

    z = matops.expm(sys.A, sys.T_i) @ x
    g1 = matops.conv_const(sys.A, sys.B, step)
    hist_arr = hist.as_array()
    for j in range(k_i):
        z += matops.expm(sys.A, sys.T_i - (j + 1) * step) @ (g1 @ hist_arr[j])
    offsets = step * np.arange(k_i + 1)
    d_samples = prev.slice_from(0.0, k_i + 1)
    z += matops.conv_signal(
        sys.A, sys.Bd, np.eye(sys.n), (offsets, d_samples), sys.T_i
    )
    return z


def phi(sys: DelaySystem, z: np.ndarray, prev: PreviewWindow, T: float) -> np.ndarray:
    """Predicted-state projection under the previewed disturbance only.

    phi(t, T) = e^{A T} z + int_0^{T_delta} e^{A(T - tau)} B_d d(t + T_i + tau) dtau
    with T_delta = min(T_p - T_i, T).  The unpreviewed tail is excluded; only
    samples the window holds are used.
    """
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    z = np.asarray(z, dtype=float).reshape(-1)
    step = prev.step
    t_pd = sys.T_p - sys.T_i
    t_delta = min(t_pd, T)
    out = matops.expm(sys.A, T) @ z
    if t_delta <= 0:
        return out
    k_i = _steps(sys.T_i, step, "T_i")
    n_cover = int(np.floor(t_delta / step + 1e-9)) + 1
    if n_cover * step < t_delta - _GRID_TOL:
        n_cover += 1
    n_cover = min(n_cover + 1, prev.values.shape[0] - k_i)
    offsets = step * np.arange(n_cover)
    d_samples = prev.values[k_i : k_i + n_cover]
    inner = matops.conv_signal(
        sys.A, sys.Bd, np.eye(sys.n), (offsets, d_samples), t_delta
    )
    if T > t_delta:
        out += matops.expm(sys.A, T - t_delta) @ inner
    else:
        out += inner
    return out
