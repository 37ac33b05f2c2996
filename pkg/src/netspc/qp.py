"""Dense convex QP solvers.

Shipped path: an operator-splitting (ADMM) method with a final polish step,
sized for the small policy programs this package produces (tens of variables,
low hundreds of constraints).  The workspace caches the KKT factorization so
receding-horizon solves with an unchanged constraint matrix are cheap.

Reference path: a textbook primal active-set method, kept independent of the
ADMM code so the two can cross-check each other.

Both solve  minimize 0.5 zᵀHz + gᵀz  subject to  A z <= b  with H symmetric
positive semidefinite.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg


@dataclass
class SolveStats:
    iterations: int
    primal_residual: float
    dual_residual: float
    duality_gap: float
    certified: bool
    polished: bool
    rho: float


@dataclass
class QpSolution:
    z: np.ndarray
    y: np.ndarray
    objective: float
    stats: SolveStats


def _objective(H, g, z):
    return float(0.5 * z @ (H @ z) + g @ z)


def _kkt_residuals(H, g, A, b, z, y):
    viol = float(np.maximum(A @ z - b, 0.0).max(initial=0.0))
    dual = float(np.abs(H @ z + g + A.T @ y).max(initial=0.0))
    # Dual objective -0.5 zᵀHz - bᵀy is exact at stationarity; the gap below
    # inherits an O(dual residual * |z|) error, which certification absorbs.
    gap = float(abs(z @ (H @ z) + g @ z + b @ y))
    return viol, dual, gap


def ruiz_equilibrate(H: np.ndarray, A: np.ndarray, iters: int = 10
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal scalings (d, e) that balance the row/column infinity norms of
    the KKT matrix [[H, Aᵀ], [A, 0]]."""
    n = H.shape[0]
    mcon = A.shape[0]
    d = np.ones(n)
    e = np.ones(mcon)
    Hs = H.copy()
    As = A.copy()
    for _ in range(iters):
        col_h = np.abs(Hs).max(axis=0, initial=0.0)
        col_a = np.abs(As).max(axis=0, initial=0.0) if mcon else np.zeros(n)
        norm_z = np.maximum(col_h, col_a)
        norm_y = np.abs(As).max(axis=1, initial=0.0) if mcon else np.zeros(0)
        sd = 1.0 / np.sqrt(np.where(norm_z > 0, norm_z, 1.0))
        se = 1.0 / np.sqrt(np.where(norm_y > 0, norm_y, 1.0))
        d *= sd
        e *= se
        Hs = Hs * sd[:, None] * sd[None, :]
        if mcon:
            As = As * se[:, None] * sd[None, :]
    return d, e


class AdmmWorkspace:
    """Factorized workspace for repeated solves with fixed (H, A).

    The data are Ruiz-equilibrated once; per-solve inputs are the linear term
    g and the right-hand side b (scaled on entry, unscaled on exit), and warm
    starts carry primal/dual iterates between solves in original units.
    """

    def __init__(self, H: np.ndarray, A: np.ndarray, sigma: float = 1e-6,
                 rho: float = 1.0, alpha: float = 1.6):
        self.H = np.asarray(H, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.n = self.H.shape[0]
        self.mcon = self.A.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.d, self.e = ruiz_equilibrate(self.H, self.A)
        self.Hs = self.H * self.d[:, None] * self.d[None, :]
        self.As = self.A * self.e[:, None] * self.d[None, :] if self.mcon \
            else self.A.copy()
        self.rho0 = rho
        self._set_rho(rho)

    def _set_rho(self, rho: float) -> None:
        self.rho = rho
        K = np.zeros((self.n + self.mcon, self.n + self.mcon))
        K[: self.n, : self.n] = self.Hs + self.sigma * np.eye(self.n)
        K[: self.n, self.n:] = self.As.T
        K[self.n:, : self.n] = self.As
        K[self.n:, self.n:] = -(1.0 / rho) * np.eye(self.mcon)
        self._lu = scipy.linalg.lu_factor(K, check_finite=False)

    def solve(self, g: np.ndarray, b: np.ndarray, z0: Optional[np.ndarray] = None,
              y0: Optional[np.ndarray] = None, tol: float = 1e-6,
              max_iter: int = 20000, check_every: int = 25,
              polish: bool = True) -> QpSolution:
        H, A = self.H, self.A
        n, mcon = self.n, self.mcon
        # Step size resets per solve so results depend only on the inputs,
        # never on which solve ran on this workspace before.
        if self.rho != self.rho0:
            self._set_rho(self.rho0)
        g = np.asarray(g, dtype=float)
        b = np.asarray(b, dtype=float)
        if mcon == 0:
            z, *_ = np.linalg.lstsq(H, -g, rcond=None)
            dual = float(np.abs(H @ z + g).max(initial=0.0))
            stats = SolveStats(0, 0.0, dual, 0.0, dual <= tol, False, self.rho)
            return QpSolution(z=z, y=np.zeros(0),
                              objective=_objective(H, g, z), stats=stats)

        # Work on the equilibrated data; report residuals in original units.
        g_s = self.d * g
        b_s = self.e * b
        z = np.zeros(n) if z0 is None else np.asarray(z0, dtype=float) / self.d
        y = np.zeros(mcon) if y0 is None else np.asarray(y0, dtype=float) / self.e
        s = np.minimum(self.As @ z, b_s)

        rhs = np.empty(n + mcon)
        it = 0
        while it < max_iter:
            rhs[:n] = self.sigma * z - g_s
            rhs[n:] = s - y / self.rho
            sol = scipy.linalg.lu_solve(self._lu, rhs, check_finite=False)
            z_t = sol[:n]
            s_t = s + (sol[n:] - y) / self.rho
            z = self.alpha * z_t + (1 - self.alpha) * z
            s_rel = self.alpha * s_t + (1 - self.alpha) * s
            s = np.minimum(s_rel + y / self.rho, b_s)
            y = y + self.rho * (s_rel - s)
            it += 1
            if it % check_every == 0 or it == max_iter:
                z_o = self.d * z
                y_o = np.maximum(self.e * y, 0.0)
                viol, dual, gap = _kkt_residuals(H, g, A, b, z_o, y_o)
                if viol <= tol and dual <= tol and gap <= tol:
                    break
                # Hand over to the polish step once the scaled residuals are
                # small; its repair loop copes with a rough active-set guess.
                viol_s = float(np.maximum(self.As @ z - b_s, 0.0).max(initial=0.0))
                dual_s = float(np.abs(self.Hs @ z + g_s + self.As.T @ y).max(initial=0.0))
                ref = max(1.0, float(np.abs(g_s).max(initial=0.0)))
                if polish and max(viol_s, dual_s) <= 3e-2 * ref:
                    pol = self._polish(g, b, z_o, y_o, tol)
                    if pol is not None:
                        z_p, y_p, res_p = pol
                        if max(res_p) <= tol:
                            stats = SolveStats(it, res_p[0], res_p[1], res_p[2],
                                               True, True, self.rho)
                            return QpSolution(z=z_p, y=y_p,
                                              objective=_objective(H, g, z_p),
                                              stats=stats)
                if it % (check_every * 8) == 0:
                    self._adapt_rho(viol_s, dual_s, z, g_s)

        z_o = self.d * z
        y_o = np.maximum(self.e * y, 0.0)
        viol, dual, gap = _kkt_residuals(H, g, A, b, z_o, y_o)
        if polish:
            pol = self._polish(g, b, z_o, y_o, tol)
            if pol is not None:
                z_p, y_p, res_p = pol
                if max(res_p) <= max(viol, dual, gap):
                    z_o, y_o, (viol, dual, gap) = z_p, y_p, res_p
        certified = viol <= tol and dual <= tol and gap <= tol
        stats = SolveStats(it, viol, dual, gap, certified,
                           polished=False, rho=self.rho)
        return QpSolution(z=z_o, y=y_o, objective=_objective(H, g, z_o),
                          stats=stats)

    def _adapt_rho(self, viol_s, dual_s, z, g_s) -> None:
        num = viol_s
        den = dual_s / max(1.0, float(np.abs(self.Hs @ z).max(initial=0.0)),
                           float(np.abs(g_s).max(initial=0.0)))
        if den <= 1e-14 or num <= 1e-14:
            return
        # Bounded per-step change and a tight overall band: railing the step
        # size freezes progress on degenerate instances.
        ratio = float(np.clip(np.sqrt(num / den), 0.1, 10.0))
        if ratio > 5 or ratio < 0.2:
            self._set_rho(float(np.clip(self.rho * ratio, 1e-3, 1e3)))

    def _solve_active_kkt(self, g, b, idx, delta):
        """Regularized KKT solve on the rows `idx`, refined against the exact
        system.  Returns (z, lam) or None on numerical breakdown."""
        H, A = self.H, self.A
        n = self.n
        k = idx.size
        Aact = A[idx]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = Aact.T
        K[n:, :n] = Aact
        Kreg = K.copy()
        Kreg[:n, :n] += delta * np.eye(n)
        Kreg[n:, n:] -= delta * np.eye(k)
        rhs = np.concatenate([-g, b[idx]])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu = scipy.linalg.lu_factor(Kreg, check_finite=False)
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        for _ in range(3):
            r = rhs - K @ sol
            sol = sol + scipy.linalg.lu_solve(lu, r, check_finite=False)
        if not np.isfinite(sol).all():
            return None
        return sol[:n], sol[n:]

    def _polish(self, g, b, z, y, tol, delta: float = 1e-9, max_passes: int = 40):
        """Refine the iterate by solving the KKT system on the guessed active
        set, repairing the guess until it is consistent: first grow the set
        with violated rows, then shed negative multipliers one at a time.
        Returns None when no consistent active set emerges."""
        H, A = self.H, self.A
        slack = b - A @ z
        yscale = max(1e-12, float(y.max(initial=0.0)))
        active = (y > 1e-6 * yscale) | (slack < 1e-6 * (1.0 + np.abs(b)))
        idx = np.nonzero(active)[0]
        bscale = 1.0 + np.abs(b)
        best = None
        add_phases = 0
        dropping = False
        for _ in range(max_passes):
            out = self._solve_active_kkt(g, b, idx, delta)
            if out is None:
                return best
            z_p, lam = out
            # Track the best clipped-multiplier candidate whether or not the
            # working set is already consistent; degenerate vertices may never
            # produce one, yet an intermediate pass can hit the KKT point.
            if float(np.maximum(A @ z_p - b, 0.0).max(initial=0.0)) <= tol:
                y_p = np.zeros(self.mcon)
                y_p[idx] = np.maximum(lam, 0.0)
                res = _kkt_residuals(H, g, A, b, z_p, y_p)
                if best is None or max(res) < max(best[2]):
                    best = (z_p, y_p, res)
                if max(res) <= tol:
                    return best
            to_add = np.nonzero(A @ z_p - b > 1e-9 * bscale)[0]
            to_add = np.setdiff1d(to_add, idx, assume_unique=False)
            if to_add.size:
                if dropping:
                    add_phases += 1
                    dropping = False
                    if add_phases >= 3:  # cycling between add and drop phases
                        return best
                idx = np.unique(np.concatenate([idx, to_add]))
                continue
            lam_scale = max(1.0, float(np.abs(lam).max(initial=0.0)))
            if lam.size and lam.min() < -1e-8 * lam_scale:
                dropping = True
                keep = np.ones(idx.size, dtype=bool)
                keep[int(np.argmin(lam))] = False
                idx = idx[keep]
                continue
            return best
        return best


def solve_qp(H, g, A, b, z0=None, y0=None, tol: float = 1e-6,
             max_iter: int = 20000) -> QpSolution:
    """One-shot ADMM solve (fresh workspace)."""
    return AdmmWorkspace(H, A).solve(g, b, z0=z0, y0=y0, tol=tol, max_iter=max_iter)


def reference_active_set(H, g, A, b, x0, max_iter: int = 500,
                         tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Primal active-set reference solver; needs a feasible start x0.

    Deliberately independent of the ADMM path: equality-constrained KKT
    subproblems, step to the nearest blocking constraint, drop the most
    negative multiplier.  Intended for modest sizes and non-degenerate data.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    x = np.array(x0, dtype=float)
    n = H.shape[0]
    if np.any(A @ x - b > 1e-9 * (1.0 + np.abs(b))):
        raise ValueError("x0 is not feasible")
    work: list[int] = list(np.nonzero(b - A @ x <= 1e-10 * (1.0 + np.abs(b)))[0])
    for _ in range(max_iter):
        Aw = A[work] if work else np.zeros((0, n))
        k = Aw.shape[0]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = H
        K[:n, n:] = Aw.T
        K[n:, :n] = Aw
        rhs = np.concatenate([-(H @ x + g), np.zeros(k)])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        p = sol[:n]
        lam = sol[n:]
        if np.abs(p).max(initial=0.0) <= tol * (1.0 + np.abs(x).max(initial=0.0)):
            if k == 0 or lam.min(initial=0.0) >= -tol * (1.0 + abs(lam).max(initial=0.0)):
                return x, _objective(H, g, x)
            work.pop(int(np.argmin(lam)))
            continue
        mask = np.ones(A.shape[0], dtype=bool)
        mask[work] = False
        Ap = A[mask] @ p
        step = 1.0
        block = -1
        cand = np.nonzero(Ap > 1e-12)[0]
        if cand.size:
            slack = (b[mask] - A[mask] @ x)[cand]
            ratios = slack / Ap[cand]
            j = int(np.argmin(ratios))
            if ratios[j] < step:
                step = max(ratios[j], 0.0)
                block = int(np.nonzero(mask)[0][cand[j]])
        x = x + step * p
        if block >= 0:
            work.append(block)
    raise RuntimeError("active-set reference did not converge")
