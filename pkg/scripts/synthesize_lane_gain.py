#!/usr/bin/env python3
"""Synthesize the lane-keeping nominal state-feedback gain.

LQR on the lateral dynamics (state [y, nu, psi, r]) with weights
Q = diag(10, 1, 10, 1) and R = 50.  The resulting gain is committed as
LANE_K in lprevcbf.scenarios; rerun this script to regenerate it.
"""

import numpy as np
import scipy.linalg

V0 = 27.7
M = 1650.0
A_CG = 1.11
B_CG = 1.59
CF = 98800.0
CR = 133000.0
IZ = 2315.3


def lane_matrices():
    a = np.array(
        [
            [0.0, 1.0, V0, 0.0],
            [0.0, -(CF + CR) / (M * V0), 0.0, (B_CG * CR - A_CG * CF) / (M * V0) - V0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, (B_CG * CR - A_CG * CF) / (IZ * V0), 0.0,
             -(A_CG**2 * CF + B_CG**2 * CR) / (IZ * V0)],
        ]
    )
    b = np.array([[0.0], [CF / M], [0.0], [A_CG * CF / IZ]])
    return a, b


def main():
    a, b = lane_matrices()
    q = np.diag([10.0, 1.0, 10.0, 1.0])
    r = np.array([[50.0]])
    p = scipy.linalg.solve_continuous_are(a, b, q, r)
    k = np.linalg.solve(r, b.T @ p)
    print("LANE_K =", np.array2string(k, precision=17, separator=", "))
    print("closed-loop eigenvalues:", np.linalg.eigvals(a - b @ k))


if __name__ == "__main__":
    main()
