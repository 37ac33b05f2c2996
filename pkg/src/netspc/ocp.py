"""Assembly and solution of the per-horizon convex quadratic program.

Decision vector layout (all indices live in a :class:`VariableLayout`):

    [ eta | lambda_tilde | theta_free | a | b_lam | c_theta | s ]

where a_i linearizes |eta_i + 0.5 * (Lambda row sum)|, b/c are per-entry
absolute values of the Lambda/Theta free entries (they feed the 1-norms of
the input-bound rows), and s_k are the per-stage epigraph variables of the
sparsity regularizer (present only when mu > 0).  Policy gains can be
disabled wholesale (baseline variants), which simply removes their variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .moments import IndefiniteL, LiftedDynamics, MomentSet
from .plant import OrthoSchurDecomposition, ReachabilityData
from .policy import PolicyParams, stage_rows
from .qp import AdmmWorkspace, QpSolution


class SolverFailure(RuntimeError):
    """The solver could not certify a solution at the requested tolerance."""


@dataclass(frozen=True)
class StabilityConstraintSpec:
    """Drift-constraint parameters; zeta must stay strictly below
    u_max / (sqrt(d_o) * sigma1(R_kappa^+)) so the certified fallback policy
    remains inside the input box."""

    r: float = 1.0
    epsilon: float = 0.1
    zeta: float = 0.0

    def __post_init__(self):
        if self.r <= 0 or self.epsilon <= 0 or self.zeta <= 0:
            raise ValueError("r, epsilon and zeta must be positive")


def zeta_upper_bound(u_max: float, d_o: int, sigma1_pinv: float) -> float:
    if d_o == 0 or sigma1_pinv == 0.0:
        return np.inf
    return u_max / (np.sqrt(d_o) * sigma1_pinv)


def default_zeta(u_max: float, d_o: int, sigma1_pinv: float,
                 fraction: float = 0.9) -> float:
    return fraction * zeta_upper_bound(u_max, d_o, sigma1_pinv)


def drift_saturation(z: np.ndarray, r: float, zeta: float) -> np.ndarray:
    """Component-wise ramp: linear with slope zeta/r inside |z_i| <= r,
    clipped to +-zeta outside."""
    return np.clip(np.asarray(z, dtype=float) * (zeta / r), -zeta, zeta)


@dataclass(frozen=True)
class VariableLayout:
    """Index bookkeeping between policy entries and the flat decision vector."""

    N: int
    m: int
    d: int
    include_theta: bool = True
    include_lambda: bool = True
    with_regularizer: bool = True
    lam_entries: tuple = field(default=())       # (row, col) per lambda_tilde slot
    theta_entries: tuple = field(default=())     # (row, col) per theta_free slot
    n_eta: int = 0
    n_lam: int = 0
    n_theta: int = 0
    i_lam0: int = 0
    i_theta0: int = 0
    i_a0: int = 0
    i_b0: int = 0
    i_c0: int = 0
    i_s0: int = 0
    n_vars: int = 0

    @classmethod
    def build(cls, N: int, m: int, d: int, include_theta: bool = True,
              include_lambda: bool = True, with_regularizer: bool = True
              ) -> "VariableLayout":
        lam_entries = []
        if include_lambda:
            for j in range(N - 1):
                for row in range((j + 1) * m, m * N):
                    lam_entries.append((row, j))
        theta_entries = []
        if include_theta:
            for k in range(1, N):
                for rr in range(m):
                    for c in range(k * d):
                        theta_entries.append((k * m + rr, c))
        n_eta = m * N
        n_lam = len(lam_entries)
        n_theta = len(theta_entries)
        i_lam0 = n_eta
        i_theta0 = i_lam0 + n_lam
        i_a0 = i_theta0 + n_theta
        i_b0 = i_a0 + n_eta
        i_c0 = i_b0 + n_lam
        i_s0 = i_c0 + n_theta
        n_vars = i_s0 + (N if with_regularizer else 0)
        return cls(N=N, m=m, d=d, include_theta=include_theta,
                   include_lambda=include_lambda, with_regularizer=with_regularizer,
                   lam_entries=tuple(lam_entries), theta_entries=tuple(theta_entries),
                   n_eta=n_eta, n_lam=n_lam, n_theta=n_theta, i_lam0=i_lam0,
                   i_theta0=i_theta0, i_a0=i_a0, i_b0=i_b0, i_c0=i_c0,
                   i_s0=i_s0, n_vars=n_vars)

    @property
    def n_xi(self) -> int:
        return self.n_eta + self.n_lam

    def policy_from_z(self, z: np.ndarray) -> PolicyParams:
        N, m, d = self.N, self.m, self.d
        eta = np.array(z[: self.n_eta], dtype=float)
        Lam = np.zeros((m * N, N - 1))
        for e, (row, col) in enumerate(self.lam_entries):
            Lam[row, col] = z[self.i_lam0 + e]
        Theta = np.zeros((m * N, d * (N - 1)))
        for e, (row, col) in enumerate(self.theta_entries):
            Theta[row, col] = z[self.i_theta0 + e]
        return PolicyParams(eta=eta, Theta=Theta, Lambda=Lam, N=N, m=m, d=d)

    def z_from_policy(self, params: PolicyParams) -> np.ndarray:
        """Canonical decision vector: auxiliaries set to their exact values."""
        z = np.zeros(self.n_vars)
        z[: self.n_eta] = params.eta
        for e, (row, col) in enumerate(self.lam_entries):
            z[self.i_lam0 + e] = params.Lambda[row, col]
        for e, (row, col) in enumerate(self.theta_entries):
            z[self.i_theta0 + e] = params.Theta[row, col]
        h = params.eta + 0.5 * params.Lambda.sum(axis=1)
        z[self.i_a0: self.i_a0 + self.n_eta] = np.abs(h)
        for e, (row, col) in enumerate(self.lam_entries):
            z[self.i_b0 + e] = abs(params.Lambda[row, col])
        for e, (row, col) in enumerate(self.theta_entries):
            z[self.i_c0 + e] = abs(params.Theta[row, col])
        if self.with_regularizer:
            z[self.i_s0: self.i_s0 + self.N] = np.abs(stage_rows(params)).max(axis=1)
        return z


@dataclass
class QpProblem:
    """One horizon's QP: 0.5 zᵀHz + gᵀz + c0 s.t. Aineq z <= bineq."""

    H: np.ndarray
    g: np.ndarray
    c0: float
    Aineq: np.ndarray
    bineq: np.ndarray
    var_map: VariableLayout
    mu: float = 0.0
    stability_pattern: tuple = ()


def build_objective(layout: VariableLayout, moments: MomentSet,
                    lifted: LiftedDynamics, x_t: np.ndarray,
                    mu: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadratic data (H, g, c0) of the expected cost over the layout.

    The (eta, lambda_tilde) block carries twice the assembled quadratic-form
    matrix, the theta block the Kronecker form of its trace quadratic, s the
    regularizer weight; everything else is constraint-only.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    x_t = np.asarray(x_t, dtype=float).ravel()
    n = layout.n_vars
    H = np.zeros((n, n))
    g = np.zeros(n)
    mN = layout.n_eta

    calL = moments.calL
    if layout.include_lambda:
        H[: layout.n_xi, : layout.n_xi] = 2.0 * calL
    else:
        H[:mN, :mN] = 2.0 * calL[:mN, :mN]

    Ax = lifted.calA @ x_t
    # With the dropout gain disabled the layout's xi block is just eta, and
    # the leading mN rows of calM are exactly its linear coefficients.
    g[: layout.n_xi] = (moments.calM @ Ax)[: layout.n_xi]

    if layout.include_theta and layout.n_theta:
        # trace(Thetaᵀ Sigma_S Theta Sigma_e) restricted to free entries:
        # H[(r,c),(r',c')] = 2 * Sigma_S[r,r'] * Sigma_e[c,c'].
        rows = np.array([rc[0] for rc in layout.theta_entries])
        cols = np.array([rc[1] for rc in layout.theta_entries])
        H[layout.i_theta0: layout.i_theta0 + layout.n_theta,
          layout.i_theta0: layout.i_theta0 + layout.n_theta] = \
            2.0 * moments.Sigma_S[np.ix_(rows, rows)] * moments.Sigma_e[np.ix_(cols, cols)]
        M_lin = moments.mu_S.T @ lifted.calB.T @ lifted.calQ @ lifted.calD \
            @ moments.Sigma_e_prime
        g[layout.i_theta0: layout.i_theta0 + layout.n_theta] = 2.0 * M_lin[rows, cols]

    if layout.with_regularizer:
        g[layout.i_s0: layout.i_s0 + layout.N] = mu

    c0 = float(Ax @ (lifted.calQ @ Ax)
               + np.trace(lifted.calD.T @ lifted.calQ @ lifted.calD @ moments.Sigma_W))
    return H, g, c0


def build_input_bounds(layout: VariableLayout, u_max: float,
                       phi_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows enforcing |u| <= u_max for every dropout/saturation realization:

        |eta_i + 0.5 Lam_i 1| + 0.5 ||Lam_i||_1 + phi_max ||Theta_i||_1 <= u_max

    linearized through the a/b/c auxiliaries."""
    if u_max <= 0 or phi_max <= 0:
        raise ValueError("u_max and phi_max must be positive")
    rows = []
    rhs = []
    n = layout.n_vars
    lam_by_row: dict[int, list[int]] = {}
    for e, (row, _) in enumerate(layout.lam_entries):
        lam_by_row.setdefault(row, []).append(e)
    th_by_row: dict[int, list[int]] = {}
    for e, (row, _) in enumerate(layout.theta_entries):
        th_by_row.setdefault(row, []).append(e)

    for i in range(layout.n_eta):
        for sgn in (+1.0, -1.0):
            r = np.zeros(n)
            r[i] = sgn
            for e in lam_by_row.get(i, ()):
                r[layout.i_lam0 + e] = 0.5 * sgn
            r[layout.i_a0 + i] = -1.0
            rows.append(r)
            rhs.append(0.0)
    for e in range(layout.n_lam):
        for sgn in (+1.0, -1.0):
            r = np.zeros(n)
            r[layout.i_lam0 + e] = sgn
            r[layout.i_b0 + e] = -1.0
            rows.append(r)
            rhs.append(0.0)
    for e in range(layout.n_theta):
        for sgn in (+1.0, -1.0):
            r = np.zeros(n)
            r[layout.i_theta0 + e] = sgn
            r[layout.i_c0 + e] = -1.0
            rows.append(r)
            rhs.append(0.0)
    for i in range(layout.n_eta):
        r = np.zeros(n)
        r[layout.i_a0 + i] = 1.0
        for e in lam_by_row.get(i, ()):
            r[layout.i_b0 + e] = 0.5
        for e in th_by_row.get(i, ()):
            r[layout.i_c0 + e] = phi_max
        rows.append(r)
        rhs.append(u_max)
    return np.array(rows), np.array(rhs)


def build_regularizer_rows(layout: VariableLayout) -> tuple[np.ndarray, np.ndarray]:
    """Epigraph rows: s_k dominates |every parameter feeding stage k|."""
    if not layout.with_regularizer:
        return np.zeros((0, layout.n_vars)), np.zeros(0)
    rows = []
    n = layout.n_vars
    m = layout.m

    def add(var_index: int, stage: int) -> None:
        for sgn in (+1.0, -1.0):
            r = np.zeros(n)
            r[var_index] = sgn
            r[layout.i_s0 + stage] = -1.0
            rows.append(r)

    for i in range(layout.n_eta):
        add(i, i // m)
    for e, (row, _) in enumerate(layout.lam_entries):
        add(layout.i_lam0 + e, row // m)
    for e, (row, _) in enumerate(layout.theta_entries):
        add(layout.i_theta0 + e, row // m)
    return np.array(rows), np.zeros(len(rows))


def stability_pattern(x_orth: np.ndarray, r: float, epsilon: float) -> tuple:
    """Per-coordinate activation: +1 above r+eps, -1 below -(r+eps), else 0."""
    thr = r + epsilon
    return tuple(int(np.sign(v)) if abs(v) >= thr else 0 for v in x_orth)


def build_stability_constraints(dec: OrthoSchurDecomposition,
                                reach: ReachabilityData,
                                spec: StabilityConstraintSpec,
                                x_t: np.ndarray, p_design: float,
                                layout: VariableLayout
                                ) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Constant-negative-drift rows on the expected first-cycle controls.

    For each orthogonal coordinate j far from the origin, the expectation of
    (A_oᵏ)ᵀ R_k u over the first kappa blocks (eta plus p times the Lambda
    row sums; the noise gain has zero mean) is pushed past -zeta (or +zeta on
    the negative side).  Coordinates inside the band contribute no row.
    """
    x_orth = dec.orthogonal_state(np.asarray(x_t, dtype=float).ravel())
    pattern = stability_pattern(x_orth, spec.r, spec.epsilon)
    kappa = reach.kappa
    m = layout.m
    W = np.linalg.matrix_power(dec.A_o, kappa).T @ reach.R_kappa  # d_o x kappa*m
    rows = []
    rhs = []
    n = layout.n_vars
    for j, sgn in enumerate(pattern):
        if sgn == 0:
            continue
        r = np.zeros(n)
        r[: kappa * m] = sgn * W[j]
        for e, (row, _) in enumerate(layout.lam_entries):
            if row < kappa * m:
                r[layout.i_lam0 + e] = sgn * p_design * W[j, row]
        rows.append(r)
        rhs.append(-spec.zeta)
    if rows:
        return np.array(rows), np.array(rhs), pattern
    return np.zeros((0, n)), np.zeros(0), pattern


def fallback_policy(dec: OrthoSchurDecomposition, reach: ReachabilityData,
                    spec: StabilityConstraintSpec, x_t: np.ndarray,
                    layout: VariableLayout) -> PolicyParams:
    """Feasibility-certifying point: first-cycle offsets steer the orthogonal
    state by the saturated drift target, all gains zero."""
    x_orth = dec.orthogonal_state(np.asarray(x_t, dtype=float).ravel())
    Ak = np.linalg.matrix_power(dec.A_o, reach.kappa)
    eta_head = -reach.R_kappa_pinv @ Ak @ drift_saturation(x_orth, spec.r, spec.zeta)
    params = PolicyParams.zeros(layout.N, layout.m, layout.d)
    eta = params.eta.copy()
    eta[: reach.kappa * layout.m] = eta_head
    return PolicyParams(eta=eta, Theta=params.Theta, Lambda=params.Lambda,
                        N=layout.N, m=layout.m, d=layout.d)


def solve(problem: QpProblem, tol: float = 1e-6, max_iter: int = 20000,
          warm_start: Optional[PolicyParams] = None,
          workspace: Optional[AdmmWorkspace] = None,
          raise_on_failure: bool = False
          ) -> tuple[PolicyParams, float, QpSolution]:
    """Solve the program and unpack the policy (structural zeros exact).

    The reported value re-evaluates the objective on the canonical decision
    vector of the returned policy, so slack in constraint-only auxiliaries
    cannot leak into it.
    """
    ws = workspace if workspace is not None else AdmmWorkspace(problem.H, problem.Aineq)
    z0 = problem.var_map.z_from_policy(warm_start) if warm_start is not None else None
    sol = ws.solve(problem.g, problem.bineq, z0=z0, tol=tol, max_iter=max_iter)
    if raise_on_failure and not sol.stats.certified:
        raise SolverFailure(
            f"uncertified solve: iters={sol.stats.iterations} "
            f"residuals=({sol.stats.primal_residual:.2e}, "
            f"{sol.stats.dual_residual:.2e}, {sol.stats.duality_gap:.2e})")
    params = problem.var_map.policy_from_z(sol.z)
    z_canon = problem.var_map.z_from_policy(params)
    value = float(0.5 * z_canon @ (problem.H @ z_canon) + problem.g @ z_canon
                  + problem.c0)
    return params, value, sol


def export_triplets(problem: QpProblem, path: str) -> None:
    """Plain-text sparse-triplet dump (H, g, A, b) for external verification."""
    with open(path, "w") as fh:
        fh.write(f"# qp n={problem.var_map.n_vars} mcon={problem.Aineq.shape[0]} "
                 f"c0={problem.c0!r}\n")
        for i, j in zip(*np.nonzero(problem.H)):
            fh.write(f"H {i} {j} {problem.H[i, j]!r}\n")
        for i in np.nonzero(problem.g)[0]:
            fh.write(f"g {i} {problem.g[i]!r}\n")
        for i, j in zip(*np.nonzero(problem.Aineq)):
            fh.write(f"A {i} {j} {problem.Aineq[i, j]!r}\n")
        for i in range(problem.bineq.size):
            fh.write(f"b {i} {problem.bineq[i]!r}\n")
