"""Dense small-matrix helpers: matrix exponential and convolution integrals.

Everything here operates on plain ``numpy.ndarray`` values.  Matrices are
small (n <= 8 throughout), so dense storage and direct algorithms are used.
All functions are pure.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


def _as_matrix(m, name="matrix"):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def expm(m: np.ndarray, t: float) -> np.ndarray:
    """e^{m t} for a square matrix ``m`` and scalar time ``t`` (may be <= 0).

    Uses scaling-and-squaring with Pade approximation (scipy), which is
    accurate to ~1e-13 relative for the well-conditioned matrices used here.
    """
    m = _as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise ValueError(f"expm needs a square matrix, got {m.shape}")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    return scipy.linalg.expm(m * float(t))


def conv_const(a: np.ndarray, b: np.ndarray, horizon: float) -> np.ndarray:
    """Integral of e^{a (T - tau)} b over tau in [0, T].

    Computed through the block-augmented exponential

        exp([[a, b], [0, 0]] * T)

    whose top-right block equals the integral exactly (no quadrature error),
    which matters because this feeds the stopping-time root solve.
    """
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ValueError(f"b has {b.shape[0]} rows, expected {n}")
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    k = b.shape[1]
    blk = np.zeros((n + k, n + k))
    blk[:n, :n] = a
    blk[:n, n:] = b
    return scipy.linalg.expm(blk * float(horizon))[:n, n:]


def quad_weights(n_sub: int, step: float) -> np.ndarray:
    """Weights for the canonical quadrature over ``n_sub`` uniform subintervals.

    Composite Simpson over the even leading pairs; the final subinterval of an
    odd count is handled with the trapezoid rule.  Returns ``n_sub + 1``
    weights (a single zero weight when ``n_sub == 0``).
    """
    if n_sub < 0:
        raise ValueError("n_sub must be >= 0")
    w = np.zeros(n_sub + 1)
    if n_sub == 0:
        return w
    pairs = n_sub // 2
    if pairs:
        simpson = np.zeros(2 * pairs + 1)
        simpson[0] = simpson[-1] = 1.0
        simpson[1:-1:2] = 4.0
        simpson[2:-1:2] = 2.0
        w[: 2 * pairs + 1] += simpson * (step / 3.0)
    if n_sub % 2:
        w[-2] += step / 2.0
        w[-1] += step / 2.0
    return w


def conv_signal(
    a: np.ndarray,
    bd: np.ndarray,
    c_left: np.ndarray,
    samples: tuple[np.ndarray, np.ndarray],
    horizon: float,
) -> np.ndarray:
    """c_left . integral of e^{a (T - tau)} bd d(tau) over [0, T].

    ``samples`` is ``(offsets, values)`` on a uniform grid that must cover
    [0, T]; ``values`` has one row per offset.  Uses the canonical quadrature
    (Simpson with a trapezoid tail); when T falls strictly between grid nodes
    the last piece is a trapezoid with the endpoint value linearly
    interpolated between the bracketing samples.
    """
    a = _as_matrix(a, "a")
    bd = _as_matrix(bd, "bd")
    c_left = np.asarray(c_left, dtype=float)
    offsets = np.asarray(samples[0], dtype=float)
    values = np.atleast_2d(np.asarray(samples[1], dtype=float))
    if values.shape[0] != offsets.shape[0]:
        values = values.T
    if values.shape[0] != offsets.shape[0]:
        raise ValueError("sample offsets and values disagree in length")
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    n = a.shape[0]
    if horizon == 0.0:
        return c_left @ np.zeros(n)
    if offsets.shape[0] < 2:
        raise ValueError("need at least two samples to cover a nonzero horizon")
    step = offsets[1] - offsets[0]
    if not np.allclose(np.diff(offsets), step, rtol=0, atol=1e-12):
        raise ValueError("sample grid is not uniform")
    if offsets[0] > 1e-12 or offsets[-1] < horizon - 1e-12:
        raise ValueError(
            f"samples cover [{offsets[0]}, {offsets[-1]}], need [0, {horizon}]"
        )

    k_full = int(np.floor(horizon / step + 1e-9))
    k_full = min(k_full, offsets.shape[0] - 1)
    rem = horizon - k_full * step

    acc = np.zeros(n)
    w = quad_weights(k_full, step)
    for j in range(k_full + 1):
        acc += w[j] * (expm(a, horizon - offsets[j]) @ (bd @ values[j]))
    if rem > 1e-12:
        frac = rem / step
        d_end = (1.0 - frac) * values[k_full] + frac * values[k_full + 1]
        acc += (rem / 2.0) * (expm(a, rem) @ (bd @ values[k_full]))
        acc += (rem / 2.0) * (bd @ d_end)
    return c_left @ acc
