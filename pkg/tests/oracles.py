"""Straight-line reference recursions used as independent test oracles.

Deliberately simple code: explicit loops, no shared helpers with the
package under test.
"""

import math

import numpy as np


def lti_response(A, B, C, D, u):
    """y_k = C x_k + D u_k ; x_{k+1} = A x_k + B u_k ; x_1 = 0."""
    x = np.zeros(A.shape[0])
    y = np.zeros(len(u))
    for k in range(len(u)):
        y[k] = C[0] @ x + D[0, 0] * u[k]
        x = A @ x + B[:, 0] * u[k]
    return y


def static_net_response(f, z):
    out = np.zeros(len(z))
    for k in range(len(z)):
        hidden = np.tanh(f.W1[:, 0] * z[k] + f.b1)
        out[k] = f.W2[0] @ hidden + f.b2
    return out


def wh_response(branch, u):
    y1 = lti_response(branch.g1.A, branch.g1.B, branch.g1.C, branch.g1.D, u)
    z = static_net_response(branch.f, y1)
    return lti_response(branch.g2.A, branch.g2.B, branch.g2.C, branch.g2.D, z)


def system_response(system, u):
    """Output of a SystemInstance without touching its state."""
    if system.kind == "lti":
        blk = system.blocks
        return lti_response(blk.A, blk.B, blk.C, blk.D, u)
    if system.kind == "wh":
        return wh_response(system.blocks, u)
    if system.kind == "pwh":
        total = np.zeros(len(u))
        for branch in system.blocks:
            total = total + wh_response(branch, u)
        return total / math.sqrt(len(system.blocks))
    raise ValueError(system.kind)
