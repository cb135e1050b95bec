"""Built-in scenario registry: shoulder-joint assistance and lane keeping.

The joint-error scenario models I e'' + B e' + K e = tau_e + u(t - T_i)
with a previewable sinusoidal interaction torque; safety is |e| <= 0.2 rad.
The lane-keeping scenario is the linear lateral bicycle model with the
desired yaw rate (from road curvature) as the previewed disturbance;
safety is staying within |y| <= 0.6 m of the lane center.

Constants marked "default - not from the model data" are free parameters of
the setup; every comparison that depends on them is ordering-based.
"""

from __future__ import annotations

import numpy as np

from .baselines import standard_amax_exo, standard_amax_generic
from .plant import DelaySystem, DisturbanceSignal, sinusoid_disturbance
from .safety_filter import nominal_statefb, nominal_zero
from .sim import Scenario

# -- shoulder-joint assistance --------------------------------------------------

EXO_INERTIA = 1.0      # N m s^2 / rad
EXO_DAMPING = 2.0      # N m s / rad
EXO_STIFFNESS = 2.0    # N m / rad
EXO_TORQUE_AMP = 0.43  # N m
EXO_TORQUE_OMEGA = 0.2 * np.pi
EXO_Y_MAX = 0.2        # rad
EXO_T_I = 0.008
EXO_T_P = 0.010
EXO_U_MAX_DEFAULT = 1.119
EXO_E_DOT_MAX = 0.1326  # steady forced-response velocity amplitude


def exo_system(u_m: float = EXO_U_MAX_DEFAULT, T_p: float = EXO_T_P) -> DelaySystem:
    inv_i = 1.0 / EXO_INERTIA
    return DelaySystem(
        A=np.array([[0.0, 1.0], [-EXO_STIFFNESS * inv_i, -EXO_DAMPING * inv_i]]),
        B=np.array([[0.0], [inv_i]]),
        Bd=np.array([[0.0], [inv_i]]),
        C=np.array([1.0, 0.0]),
        T_i=EXO_T_I,
        T_p=T_p,
        u_m=np.array([u_m]),
        d_m=np.array([EXO_TORQUE_AMP]),
        y_m=EXO_Y_MAX,
    )


def exo_standard_amax(sys: DelaySystem) -> float:
    return standard_amax_exo(
        u_m=float(sys.u_m[0]),
        e_dot_max=EXO_E_DOT_MAX,
        e_max=sys.y_m,
        tau_e_max=float(sys.d_m[0]),
        I_d=EXO_INERTIA,
        B_d_coef=EXO_DAMPING,
        K_d=EXO_STIFFNESS,
    )


def exoskeleton(
    u_m: float = EXO_U_MAX_DEFAULT,
    T_p: float = EXO_T_P,
    step: float = 0.001,
    duration: float = 20.0,
) -> Scenario:
    return Scenario(
        name="exo",
        system=exo_system(u_m=u_m, T_p=T_p),
        disturbance=sinusoid_disturbance(EXO_TORQUE_AMP, EXO_TORQUE_OMEGA),
        x0=np.zeros(2),
        duration=duration,
        step=step,
        nominal_factory=lambda sys, sig: nominal_zero,
        standard_amax=exo_standard_amax,
    )


# -- lane keeping -----------------------------------------------------------------

LANE_V0 = 27.7       # m/s; default - not from the model data
LANE_M = 1650.0      # kg
LANE_A = 1.11        # m (front axle to CG)
LANE_B = 1.59        # m (rear axle to CG)
LANE_CF = 98800.0    # N/rad
LANE_CR = 133000.0   # N/rad
LANE_IZ = 2315.3     # kg m^2
LANE_Y_MAX = 0.6     # m
LANE_T_I = 0.010
LANE_T_P = 0.020
LANE_U_MAX_DEFAULT = 0.2
LANE_RD_AMP = 0.2    # rad/s desired-yaw-rate amplitude; default - not from the model data
LANE_RD_PERIOD = 4.0  # s; default - not from the model data
LANE_NU_MAX = 0.8    # m/s bound used for F0 maximization; default - not from the model data
LANE_R_MAX = 0.5     # rad/s bound used for F0 maximization; default - not from the model data
LANE_Z0 = np.array([0.5, 1.2, 0.0, 0.0])

# State feedback synthesized by scripts/synthesize_lane_gain.py
# (LQR, Q = diag(10, 1, 10, 1), R = 50).
LANE_K = np.array(
    [[0.4472135954999572, 0.06963479382557322, 3.971238334924369, 0.22854798887907163]]
)


def lane_system(u_m: float = LANE_U_MAX_DEFAULT, T_p: float = LANE_T_P) -> DelaySystem:
    v0 = LANE_V0
    return DelaySystem(
        A=np.array(
            [
                [0.0, 1.0, v0, 0.0],
                [0.0, -(LANE_CF + LANE_CR) / (LANE_M * v0), 0.0,
                 (LANE_B * LANE_CR - LANE_A * LANE_CF) / (LANE_M * v0) - v0],
                [0.0, 0.0, 0.0, 1.0],
                [0.0, (LANE_B * LANE_CR - LANE_A * LANE_CF) / (LANE_IZ * v0), 0.0,
                 -(LANE_A**2 * LANE_CF + LANE_B**2 * LANE_CR) / (LANE_IZ * v0)],
            ]
        ),
        B=np.array([[0.0], [LANE_CF / LANE_M], [0.0], [LANE_A * LANE_CF / LANE_IZ]]),
        Bd=np.array([[0.0], [0.0], [-1.0], [0.0]]),
        C=np.array([1.0, 0.0, 0.0, 0.0]),
        T_i=LANE_T_I,
        T_p=T_p,
        u_m=np.array([u_m]),
        d_m=np.array([LANE_RD_AMP]),
        y_m=LANE_Y_MAX,
    )


def lane_nominal_factory(sys: DelaySystem, sig: DisturbanceSignal):
    """Feedforward-tracking state feedback u = K(z_ff - z), z_ff = [0 0 0 r_d]."""
    u_m = sys.u_m
    t_i = sys.T_i

    def nominal(x, z, t):
        r_d = sig.value(t + t_i)
        z_ff = np.array([0.0, 0.0, 0.0, float(r_d[0])])
        return nominal_statefb(LANE_K, z_ff, z, u_m=u_m)

    return nominal


def lane_standard_amax(sys: DelaySystem) -> float:
    bound = np.array([0.0, LANE_NU_MAX, 0.0, LANE_R_MAX])
    return standard_amax_generic(sys, bound)


def lane_keeping(
    u_m: float = LANE_U_MAX_DEFAULT,
    T_p: float = LANE_T_P,
    step: float = 0.001,
    duration: float = 15.0,
) -> Scenario:
    return Scenario(
        name="lane",
        system=lane_system(u_m=u_m, T_p=T_p),
        disturbance=sinusoid_disturbance(LANE_RD_AMP, 2.0 * np.pi / LANE_RD_PERIOD),
        x0=LANE_Z0.copy(),
        duration=duration,
        step=step,
        nominal_factory=lane_nominal_factory,
        standard_amax=lane_standard_amax,
    )


SCENARIOS = {
    "exo": exoskeleton,
    "lane": lane_keeping,
}


def build(name: str, **kwargs) -> Scenario:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}")
    return SCENARIOS[name](**kwargs)
