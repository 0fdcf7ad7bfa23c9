"""Dense convex QP solver with hinge-softened inequality rows.

Problem form::

    minimize    1/2 x'Px + q'x + sum_i lam_i * max(0, g_i x - h_i)   (soft rows)
    subject to  A x = b
                g_i x <= h_i                                          (hard rows)

Soft rows are handled in epigraph form (``g_i x - e_i <= h_i``, ``e_i >= 0``)
inside the interior point method; the slack block is eliminated analytically
from the Newton system so the linear algebra stays at the size of ``x``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"

DUMP_FORMAT = "platoonsim-qp"
DUMP_VERSION = 1


def _mat(a, cols):
    a = np.asarray(a, float) if a is not None else np.zeros((0, cols))
    return a.reshape(-1, cols) if a.size else np.zeros((0, cols))


@dataclass
class QpProblem:
    P: np.ndarray
    q: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    soft: Optional[np.ndarray] = None          # bool per inequality row
    soft_weight: object = 1e3                  # scalar or per-row array
    constant: float = 0.0
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, float))
        n = self.P.shape[0]
        self.q = np.asarray(self.q, float).ravel()
        self.A = _mat(self.A, n)
        self.b = np.asarray(self.b if self.b is not None else [], float).ravel()
        self.G = _mat(self.G, n)
        self.h = np.asarray(self.h if self.h is not None else [], float).ravel()
        m = self.G.shape[0]
        self.soft = (np.zeros(m, bool) if self.soft is None
                     else np.asarray(self.soft, bool).ravel())
        w = np.asarray(self.soft_weight, float)
        self.soft_weight = np.full(m, float(w)) if w.ndim == 0 else w.ravel().copy()
        if self.P.shape != (n, n) or self.q.size != n:
            raise ValueError("P must be (n, n) and q (n,)")
        if self.A.shape[0] != self.b.size or self.G.shape[0] != self.h.size:
            raise ValueError("constraint matrix / right-hand side size mismatch")
        if self.soft.size != m or self.soft_weight.size != m:
            raise ValueError("soft mask and weights must have one entry per inequality row")
        if self.validate:
            self.check()

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def has_soft_rows(self) -> bool:
        return bool(self.soft.any())

    def check(self) -> None:
        if not np.allclose(self.P, self.P.T, atol=1e-10 * (1 + np.abs(self.P).max())):
            raise ValueError("Hessian is not symmetric")
        # PSD check by attempted factorization of a slightly shifted matrix
        shift = 1e-9 * (1.0 + np.abs(self.P).max())
        try:
            np.linalg.cholesky(self.P + shift * np.eye(self.n))
        except np.linalg.LinAlgError:
            raise ValueError("Hessian is not positive semidefinite") from None
        if self.A.shape[0] and np.linalg.matrix_rank(self.A) < self.A.shape[0]:
            raise ValueError("equality rows are linearly dependent")
        if np.any(self.soft_weight[self.soft] <= 0):
            raise ValueError("soft weights must be positive")

    def objective(self, x) -> float:
        """Objective including the hinge penalty of soft rows."""
        x = np.asarray(x, float)
        val = 0.5 * x @ self.P @ x + self.q @ x + self.constant
        if self.has_soft_rows:
            viol = np.maximum(0.0, self.G[self.soft] @ x - self.h[self.soft])
            val += self.soft_weight[self.soft] @ viol
        return float(val)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray            # equality multipliers
    z: np.ndarray            # inequality multipliers
    slack: np.ndarray        # soft-row violation (zero on hard rows)
    objective: float
    status: str
    iterations: int
    kkt_residual: float
    s: Optional[np.ndarray] = field(default=None, repr=False)
    z_slack: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def soften(problem: QpProblem) -> QpProblem:
    """Explicit epigraph form: soft rows become ``g x - e <= h``, ``e >= 0``.

    The returned problem has only hard rows and ``n + n_soft`` variables; its
    optimum restricted to the first ``n`` entries equals the hinge-penalized
    optimum of ``problem``.
    """
    idx = np.flatnonzero(problem.soft)
    if np.any(problem.soft_weight[idx] <= 0):
        raise ValueError("soft weight lambda must be positive")
    n, k = problem.n, idx.size
    P = np.zeros((n + k, n + k))
    P[:n, :n] = problem.P
    q = np.concatenate([problem.q, problem.soft_weight[idx]])
    A = np.hstack([problem.A, np.zeros((problem.A.shape[0], k))])
    E = np.zeros((problem.G.shape[0], k))
    E[idx, np.arange(k)] = -1.0
    G = np.vstack([np.hstack([problem.G, E]), np.hstack([np.zeros((k, n)), -np.eye(k)])])
    h = np.concatenate([problem.h, np.zeros(k)])
    return QpProblem(P, q, A, problem.b.copy(), G, h, None, 1.0, problem.constant,
                     validate=False)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


class _Kkt:
    """Factorization of the reduced Newton system for one iterate.

    Rows with a large weight ``D`` (nearly active constraints) are kept in an
    augmented block ``[[H, G_a'], [G_a, -1/D_a]]`` instead of being folded into
    ``G'DG``; this avoids the cancellation that otherwise caps accuracy once
    the barrier parameter gets small.
    """

    SPLIT = 1e4

    def __init__(self, P, A, G, D):
        n, me = P.shape[0], A.shape[0]
        big = D > self.SPLIT * (1.0 + np.abs(np.diag(P)).max())
        self.big = np.flatnonzero(big)
        small = np.flatnonzero(~big)
        Gs, Ga = G[small], G[self.big]
        H = P + (Gs.T * D[small]) @ Gs
        self.reg = 1e-11 * (1.0 + np.abs(np.diag(H)).max())
        self.n, self.me, self.na = n, me, self.big.size
        self.G, self.D = G, D
        if me == 0 and self.na == 0:
            self.H = H
            self.fac = sla.cho_factor(H + self.reg * np.eye(n), check_finite=False)
            return
        k = n + me + self.na
        K = np.zeros((k, k))
        K[:n, :n] = H
        K[:n, n:n + me] = A.T
        K[n:n + me, :n] = A
        K[:n, n + me:] = Ga.T
        K[n + me:, :n] = Ga
        K[n + me:, n + me:] = np.diag(-1.0 / D[self.big])
        self.K_exact = K
        Kr = K.copy()
        Kr[np.arange(n), np.arange(n)] += self.reg
        Kr[n + np.arange(me), n + np.arange(me)] -= self.reg
        self.lu = sla.lu_factor(Kr, check_finite=False)

    def solve(self, rx, ry, kap=None):
        """Solve for ``(dx, dy)`` given ``-rx - G'kap`` split across the blocks.

        ``kap`` is the affine part of ``dz = D G dx + kap``; when given, the
        right-hand side ``rx`` must not yet contain ``G'kap``.
        """
        n, me = self.n, self.me
        if kap is None:
            kap = np.zeros(self.G.shape[0])
        small = np.ones(self.G.shape[0], bool)
        small[self.big] = False
        rhs_x = rx - self.G[small].T @ kap[small]
        if me == 0 and self.na == 0:
            d = sla.cho_solve(self.fac, rhs_x, check_finite=False)
            d += sla.cho_solve(self.fac, rhs_x - self.H @ d, check_finite=False)
            return d, np.zeros(0), None
        # third block: G_a dx - dz_a / D_a = -kap_a / D_a
        rhs = np.concatenate([rhs_x, ry, -kap[self.big] / self.D[self.big]])
        sol = sla.lu_solve(self.lu, rhs, check_finite=False)
        sol += sla.lu_solve(self.lu, rhs - self.K_exact @ sol, check_finite=False)
        return sol[:n], sol[n:n + me], sol[n + me:]


def _residuals(pb, x, y, z, s, e, ze, soft_idx, lam):
    rx = pb.P @ x + pb.q + pb.A.T @ y + pb.G.T @ z
    ry = pb.A @ x - pb.b
    rp = pb.G @ x + s - pb.h
    rp[soft_idx] -= e
    re = lam - z[soft_idx] - ze
    return rx, ry, rp, re


def _measure(pb, x, y, z, s, e, ze, soft_idx, lam, scales):
    rx, ry, rp, re = _residuals(pb, x, y, z, s, e, ze, soft_idx, lam)
    qs, bs, hs, ls = scales
    dual = max(_inf(rx) / (1 + qs), _inf(re) / (1 + ls))
    prim = max(_inf(ry) / (1 + bs), _inf(rp) / (1 + hs))
    obj = 0.5 * x @ pb.P @ x + pb.q @ x + lam @ e + pb.constant
    gap = (s @ z + e @ ze) / (1 + abs(obj))
    return max(dual, prim, gap), prim, dual, obj


def _inf(v):
    return float(np.max(np.abs(v))) if v.size else 0.0


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100,
          warm_start: Optional[QpSolution] = None) -> QpSolution:
    """Mehrotra predictor-corrector primal-dual interior point method.

    ``tol`` bounds the scaled residuals and the duality gap relative to
    ``1 + |objective|``, so the absolute objective error grows with the
    objective itself.  Controllers pass their own, looser tolerance.
    """
    pb = problem
    n, m = pb.n, pb.G.shape[0]
    soft_idx = np.flatnonzero(pb.soft)
    ns = soft_idx.size
    lam = pb.soft_weight[soft_idx]
    if np.any(lam <= 0):
        raise ValueError("soft weight lambda must be positive")
    scales = (_inf(pb.q), _inf(pb.b), _inf(pb.h), _inf(lam))
    hard_only = ns == 0

    if m == 0:
        # equality-constrained: a single linear solve
        x, y, _ = _Kkt(pb.P, pb.A, pb.G, np.zeros(0)).solve(-pb.q, pb.b)
        res, _, _, obj = _measure(pb, x, y, np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0),
                                  soft_idx, lam, scales)
        return QpSolution(x, y, np.zeros(0), np.zeros(0), float(obj),
                          OPTIMAL if res <= tol else MAX_ITER, 1, res, np.zeros(0), np.zeros(0))

    x = y = z = s = e = ze = None
    if warm_start is not None and warm_start.x.size == n and warm_start.z.size == m:
        x = warm_start.x.copy()
        y = warm_start.y.copy() if warm_start.y.size == pb.A.shape[0] else np.zeros(pb.A.shape[0])
        z = warm_start.z.copy()
        s = (warm_start.s.copy() if warm_start.s is not None
             else np.maximum(pb.h - pb.G @ x, 0.0))
        e = warm_start.slack[soft_idx].copy()
        ze = (warm_start.z_slack.copy() if warm_start.z_slack is not None
              and warm_start.z_slack.size == ns else lam - z[soft_idx])
        floor = 1e-12
        s, z, e, ze = (np.maximum(v, floor) for v in (s, z, e, ze))
        res, _, _, obj = _measure(pb, x, y, z, s, e, ze, soft_idx, lam, scales)
        if res <= tol:
            return _pack(pb, x, y, z, s, e, ze, soft_idx, obj, OPTIMAL, 0, res)
        # move off the boundary so the central path is reachable again
        floor = 1e-2
        s, z, e, ze = (np.maximum(v, floor) for v in (s, z, e, ze))
    if x is None:
        # cold start: least-squares fit of the inequalities plus the cost
        kkt = _Kkt(pb.P, pb.A, pb.G, np.ones(m))
        x, y, _ = kkt.solve(-pb.q, pb.b, -pb.h)
        r = pb.h - pb.G @ x
        s = np.maximum(r, 1.0)
        e = np.ones(ns)
        r_soft = r[soft_idx]
        e = np.maximum(-r_soft + 1.0, 1.0)
        s[soft_idx] = np.maximum(r_soft + e, 1.0)
        z = np.ones(m)
        z[soft_idx] = np.minimum(1.0, 0.5 * lam)
        ze = lam - z[soft_idx]

    best = None
    it = 0
    status = MAX_ITER
    mu_den = m + ns
    for it in range(1, max_iter + 1):
        rx, ry, rp, re = _residuals(pb, x, y, z, s, e, ze, soft_idx, lam)
        res, prim, dual, obj = _measure(pb, x, y, z, s, e, ze, soft_idx, lam, scales)
        if best is None or res < best[0]:
            best = (res, x.copy(), y.copy(), z.copy(), s.copy(), e.copy(), ze.copy(), obj, it - 1)
        if res <= tol:
            status = OPTIMAL
            it -= 1
            break
        if hard_only and _farkas(pb, y, z, scales):
            status = INFEASIBLE
            it -= 1
            break

        mu = (s @ z + e @ ze) / mu_den
        W1 = z / s
        W2 = ze / e
        Dm = W1.copy()
        Dm[soft_idx] = W1[soft_idx] * W2 / (W1[soft_idx] + W2)
        try:
            kkt = _Kkt(pb.P, pb.A, pb.G, Dm)
        except (np.linalg.LinAlgError, sla.LinAlgError):
            log.debug("KKT factorization failed at iteration %d", it)
            break

        def direction(rc1, rc2):
            rho = rp - rc1 / z
            kap = Dm * rho
            kap[soft_idx] = Dm[soft_idx] * (rho[soft_idx] + re / W2 + rc2 / ze)
            dx, dy, dz_big = kkt.solve(-rx, -ry, kap)
            dz = Dm * (pb.G @ dx) + kap
            if dz_big is not None:
                dz[kkt.big] = dz_big
            ds = (-rc1 - s * dz) / z
            de = (dz[soft_idx] - re) / W2 - rc2 / ze
            dze = (-rc2 - ze * de) / e
            return dx, dy, dz, ds, de, dze

        # predictor
        rc1 = s * z
        rc2 = e * ze
        dx, dy, dz, ds, de, dze = direction(rc1, rc2)
        a_p = min(_max_step(s, ds), _max_step(e, de))
        a_d = min(_max_step(z, dz), _max_step(ze, dze))
        a = min(a_p, a_d)
        mu_aff = ((s + a * ds) @ (z + a * dz) + (e + a * de) @ (ze + a * dze)) / mu_den
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # corrector
        rc1 = s * z + ds * dz - sigma * mu
        rc2 = e * ze + de * dze - sigma * mu
        dx, dy, dz, ds, de, dze = direction(rc1, rc2)
        a_p = min(_max_step(s, ds), _max_step(e, de))
        a_d = min(_max_step(z, dz), _max_step(ze, dze))
        a = min(1.0, 0.99 * min(a_p, a_d))
        x = x + a * dx
        y = y + a * dy
        z = z + a * dz
        s = s + a * ds
        e = e + a * de
        ze = ze + a * dze
        if not np.all(np.isfinite(x)):
            break
    else:
        res, prim, dual, obj = _measure(pb, x, y, z, s, e, ze, soft_idx, lam, scales)
        if res <= tol:
            status = OPTIMAL
        it = max_iter

    if status == OPTIMAL or status == INFEASIBLE:
        res, _, _, obj = _measure(pb, x, y, z, s, e, ze, soft_idx, lam, scales)
        return _pack(pb, x, y, z, s, e, ze, soft_idx, obj, status, it, res)
    res, x, y, z, s, e, ze, obj, _ = best
    if hard_only and _farkas(pb, y, z, scales, loose=True):
        status = INFEASIBLE
    log.debug("QP stopped with status %s, residual %.3g", status, res)
    return _pack(pb, x, y, z, s, e, ze, soft_idx, obj, status, it, res)


def _farkas(pb, y, z, scales, loose=False):
    # certificate of primal infeasibility: A'y + G'z ~ 0, z >= 0, b'y + h'z < 0
    nrm = max(_inf(y), _inf(z))
    if nrm < (1e4 if loose else 1e8) * (1 + scales[0]):
        return False
    yy, zz = y / nrm, z / nrm
    stat = _inf(pb.A.T @ yy + pb.G.T @ zz)
    return stat < 1e-6 and (pb.b @ yy + pb.h @ zz) < -1e-6


def _pack(pb, x, y, z, s, e, ze, soft_idx, obj, status, it, res):
    slack = np.zeros(pb.G.shape[0])
    slack[soft_idx] = e
    return QpSolution(x, y, z, slack, float(obj), status, int(it), float(res), s, ze)


def dump_qp(problem: QpProblem, path, solution: Optional[QpSolution] = None) -> None:
    """Write a self-describing JSON snapshot of a QP (and optionally its solution)."""
    doc = {
        "format": DUMP_FORMAT, "version": DUMP_VERSION,
        "n": problem.n, "n_eq": int(problem.A.shape[0]), "n_ineq": int(problem.G.shape[0]),
        "P": problem.P.tolist(), "q": problem.q.tolist(),
        "A": problem.A.tolist(), "b": problem.b.tolist(),
        "G": problem.G.tolist(), "h": problem.h.tolist(),
        "soft": problem.soft.astype(int).tolist(), "soft_weight": problem.soft_weight.tolist(),
        "constant": problem.constant,
    }
    if solution is not None:
        doc["solution"] = {"x": solution.x.tolist(), "objective": solution.objective,
                           "status": solution.status, "iterations": solution.iterations,
                           "kkt_residual": solution.kkt_residual}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_qp(path) -> QpProblem:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != DUMP_FORMAT:
        raise ValueError("not a QP dump file")
    n = doc["n"]
    return QpProblem(np.array(doc["P"], float).reshape(n, n), doc["q"],
                     np.array(doc["A"], float).reshape(-1, n), doc["b"],
                     np.array(doc["G"], float).reshape(-1, n), doc["h"],
                     np.array(doc["soft"], bool), np.array(doc["soft_weight"], float),
                     doc.get("constant", 0.0))
