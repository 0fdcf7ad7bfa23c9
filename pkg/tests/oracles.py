"""Independent reference computations used by the tests.

Nothing here imports the package under test.
"""

import numpy as np

M, RW, BETA, GAMMA, TAU = 2044.0, 0.3074, 339.1329, 0.77, 0.7868


def vehicle_rhs(v, torque_a, torque_ref, torque_b):
    """(dv/dt, dT_a/dt) of the nonlinear model, no clamping."""
    dv = ((torque_a - torque_b) / RW - BETA - GAMMA * v * v) / M
    dT = (torque_ref - torque_a) / TAU
    return dv, dT


def rk4_vehicle(v, torque_a, torque_ref, torque_b, duration, h=1e-3):
    """Classic RK4 on (p, v, T_a) with fixed step ``h``; returns (p, v, T_a)."""
    y = np.array([0.0, v, torque_a])

    def f(y):
        dv, dT = vehicle_rhs(y[1], y[2], torque_ref, torque_b)
        return np.array([y[1], dv, dT])

    n = int(round(duration / h))
    for _ in range(n):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def dual_pg_qp(P, q, G, h, upper=None, iters=20000, tol=1e-12):
    """Accelerated projected gradient on the dual of

        min 1/2 x'Px + q'x + sum_i u_i max(0, g_i x - h_i)

    with ``upper=None`` meaning hard rows (u_i = inf).  The dual variable
    lives in the box ``0 <= z <= u`` so projection is a clip.  Returns the
    primal minimizer recovered from the dual iterate.
    """
    P = np.asarray(P, float)
    Pinv = np.linalg.inv(P)
    m = G.shape[0]
    hi = np.full(m, np.inf) if upper is None else np.asarray(upper, float)
    Hd = G @ Pinv @ G.T
    L = np.linalg.eigvalsh(Hd).max() + 1e-12
    z = np.zeros(m)
    y = z.copy()
    t = 1.0
    for _ in range(iters):
        x = -Pinv @ (q + G.T @ y)
        grad = G @ x - h
        z_new = np.clip(y + grad / L, 0.0, hi)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        y = z_new + (t - 1) / t_new * (z_new - z)
        if np.max(np.abs(z_new - z)) < tol:
            z = z_new
            break
        z, t = z_new, t_new
    return -Pinv @ (q + G.T @ z)


def box_pg_qp(P, q, lo, hi, iters=50000, tol=1e-13):
    """Projected gradient for ``min 1/2 x'Px + q'x`` over a box."""
    L = np.linalg.eigvalsh(P).max()
    x = np.clip(np.zeros(len(q)), lo, hi)
    for _ in range(iters):
        x_new = np.clip(x - (P @ x + q) / L, lo, hi)
        if np.max(np.abs(x_new - x)) < tol:
            return x_new
        x = x_new
    return x


def hinge_objective(P, q, G, h, lam, x):
    return float(0.5 * x @ P @ x + q @ x + np.sum(lam * np.maximum(0.0, G @ x - h)))


def scalar_kalman(x0, p0, measurements, r, qn, drift=0.0):
    """Textbook scalar filter with random-walk process noise ``qn`` per step."""
    x, p = x0, p0
    out = []
    for z in measurements:
        x, p = x + drift, p + qn
        k = p / (p + r)
        x, p = x + k * (z - x), (1 - k) * p
        out.append((x, p))
    return out
