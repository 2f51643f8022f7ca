"""Pure numpy branch kernels (reference and fallback for the compiled module).

Every branch-end flow has the form

    f = a_f Vf^2 + a_t Vt^2 + Vf Vt (p cos d + q sin d),   d = theta_f - theta_t

with per-flow coefficients ``K[k] = (a_f, a_t, p, q)`` for the four flows
k = P_ft, Q_ft, P_tf, Q_tf.  Variables are ordered (theta_f, theta_t, Vf, Vt).
"""
import numpy as np

IMPLEMENTATION = "numpy"


def _trig(K, f, t, theta, vm):
    d = theta[f] - theta[t]
    return np.cos(d), np.sin(d), vm[f], vm[t]


def flows(K, f, t, theta, vm):
    c, s, vf, vt = _trig(K, f, t, theta, vm)
    C = K[:, 2] * c + K[:, 3] * s
    return K[:, 0] * vf * vf + K[:, 1] * vt * vt + vf * vt * C


def flow_grads(K, f, t, theta, vm):
    c, s, vf, vt = _trig(K, f, t, theta, vm)
    C = K[:, 2] * c + K[:, 3] * s
    D = -K[:, 2] * s + K[:, 3] * c
    out = np.empty((4, 4, f.size))
    out[:, 0] = vf * vt * D
    out[:, 1] = -out[:, 0]
    out[:, 2] = 2.0 * K[:, 0] * vf + vt * C
    out[:, 3] = 2.0 * K[:, 1] * vt + vf * C
    return out


def weighted_hessian(K, f, t, theta, vm, w):
    """Hessian of sum_k w[k] * flow_k per branch, shape (4, 4, m)."""
    c, s, vf, vt = _trig(K, f, t, theta, vm)
    A = np.einsum("km,kim->im", w, K)
    C = A[2] * c + A[3] * s
    D = -A[2] * s + A[3] * c
    h = np.empty((4, 4, f.size))
    vv = vf * vt
    h[0, 0] = -vv * C
    h[0, 1] = vv * C
    h[1, 1] = -vv * C
    h[0, 2] = vt * D
    h[0, 3] = vf * D
    h[1, 2] = -vt * D
    h[1, 3] = -vf * D
    h[2, 2] = 2.0 * A[0]
    h[3, 3] = 2.0 * A[1]
    h[2, 3] = C
    for i in range(4):
        for j in range(i):
            h[i, j] = h[j, i]
    return h
