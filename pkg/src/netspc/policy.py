"""Affine dropout and saturated-noise feedback policies.

Over a horizon of N stages the computed controls are

    u = eta + Theta @ sat_noise + Lambda @ dropouts,

where eta stacks N offset blocks of size m, Theta (mN x d(N-1)) feeds back
saturated reconstructed noise, and Lambda (mN x (N-1)) feeds back acknowledged
channel outcomes.  Both gain matrices are strictly lower block triangular so
the policy is causal: stage k only sees data from stages before k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRUCT_TOL = 1e-14


class StructureViolation(ValueError):
    """A structurally-zero gain entry is nonzero beyond tolerance."""


def theta_mask(N: int, m: int, d: int) -> np.ndarray:
    """Boolean mask of the free entries of Theta (block (k, l) free iff l < k)."""
    mask = np.zeros((m * N, d * (N - 1)), dtype=bool)
    for k in range(1, N):
        mask[k * m:(k + 1) * m, : k * d] = True
    return mask

def lambda_mask(N: int, m: int) -> np.ndarray:
    """Boolean mask of the free entries of Lambda (block row k uses cols < k)."""
    mask = np.zeros((m * N, N - 1), dtype=bool)
    for k in range(1, N):
        mask[k * m:(k + 1) * m, :k] = True
    return mask


@dataclass(frozen=True)
class PolicyParams:
    """One horizon's policy: offsets eta, noise gain Theta, dropout gain Lambda."""

    eta: np.ndarray
    Theta: np.ndarray
    Lambda: np.ndarray
    N: int
    m: int
    d: int

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float).ravel()
        Theta = np.asarray(self.Theta, dtype=float).reshape(self.m * self.N, self.d * (self.N - 1))
        Lam = np.asarray(self.Lambda, dtype=float).reshape(self.m * self.N, self.N - 1)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "Theta", Theta)
        object.__setattr__(self, "Lambda", Lam)
        if eta.size != self.m * self.N:
            raise ValueError(f"eta must have length {self.m * self.N}")

    @classmethod
    def zeros(cls, N: int, m: int, d: int) -> "PolicyParams":
        return cls(eta=np.zeros(m * N), Theta=np.zeros((m * N, d * (N - 1))),
                   Lambda=np.zeros((m * N, N - 1)), N=N, m=m, d=d)

    def check_structure(self, tol: float = STRUCT_TOL) -> None:
        bad_t = np.abs(self.Theta[~theta_mask(self.N, self.m, self.d)])
        bad_l = np.abs(self.Lambda[~lambda_mask(self.N, self.m)])
        worst = max(bad_t.max() if bad_t.size else 0.0, bad_l.max() if bad_l.size else 0.0)
        if worst > tol:
            raise StructureViolation(f"structural-zero entry of size {worst:.3g}")


@dataclass(frozen=True)
class PackedDecision:
    """Flat encoding of a policy.

    xi = [eta; lambda_tilde] where lambda_tilde concatenates, column by
    column, the nonzero tail of each Lambda column (column l keeps its last
    m(N-1-l) entries).  theta_free lists the free Theta entries block row by
    block row, row-major inside each block row.
    """

    xi: np.ndarray
    theta_free: np.ndarray
    N: int
    m: int
    d: int


def xi_length(N: int, m: int) -> int:
    return m * N + m * N * (N - 1) // 2


def theta_free_length(N: int, m: int, d: int) -> int:
    return m * d * N * (N - 1) // 2


def pack(params: PolicyParams) -> PackedDecision:
    """Flatten a structured policy; exact inverse of :func:`unpack`."""
    params.check_structure()
    N, m, d = params.N, params.m, params.d
    tails = [params.Lambda[(j + 1) * m:, j] for j in range(N - 1)]
    lam_tilde = np.concatenate(tails) if tails else np.zeros(0)
    rows = [params.Theta[k * m:(k + 1) * m, : k * d].ravel() for k in range(1, N)]
    theta_free = np.concatenate(rows) if rows else np.zeros(0)
    return PackedDecision(xi=np.concatenate([params.eta, lam_tilde]),
                          theta_free=theta_free, N=N, m=m, d=d)


def unpack(packed: PackedDecision) -> PolicyParams:
    """Rebuild the structured policy; structural zeros are restored exactly."""
    N, m, d = packed.N, packed.m, packed.d
    eta = np.array(packed.xi[: m * N], dtype=float)
    Lam = np.zeros((m * N, N - 1))
    pos = m * N
    for j in range(N - 1):
        n_tail = m * (N - 1 - j)
        Lam[(j + 1) * m:, j] = packed.xi[pos: pos + n_tail]
        pos += n_tail
    Theta = np.zeros((m * N, d * (N - 1)))
    pos = 0
    for k in range(1, N):
        n_row = m * k * d
        Theta[k * m:(k + 1) * m, : k * d] = packed.theta_free[pos: pos + n_row].reshape(m, k * d)
        pos += n_row
    return PolicyParams(eta=eta, Theta=Theta, Lambda=Lam, N=N, m=m, d=d)


def evaluate_controls(params: PolicyParams, sat_noise: np.ndarray,
                      dropouts: np.ndarray) -> np.ndarray:
    """Computed controls u = eta + Theta @ sat_noise + Lambda @ dropouts."""
    sat_noise = np.asarray(sat_noise, dtype=float).ravel()
    dropouts = np.asarray(dropouts, dtype=float).ravel()
    if sat_noise.size != params.d * (params.N - 1):
        raise ValueError(f"sat_noise must have length {params.d * (params.N - 1)}")
    if dropouts.size != params.N - 1:
        raise ValueError(f"dropouts must have length {params.N - 1}")
    # Association fixed as offsets + (feedback sum): the step-by-step
    # controller uses the same grouping, keeping the two paths bit-identical.
    return params.eta + (params.Theta @ sat_noise + params.Lambda @ dropouts)


def stage_rows(params: PolicyParams) -> np.ndarray:
    """N rows, one per stage, collecting every parameter that feeds that
    stage's control (offset block, Theta block row, Lambda block row)."""
    N, m = params.N, params.m
    rows = np.empty((N, m * (params.d * (N - 1) + (N - 1) + 1)))
    for k in range(N):
        rows[k] = np.concatenate([
            params.eta[k * m:(k + 1) * m],
            params.Theta[k * m:(k + 1) * m, :].ravel(),
            params.Lambda[k * m:(k + 1) * m, :].ravel(),
        ])
    return rows


def regularizer(params: PolicyParams) -> float:
    """Sum over stages of the infinity norm of that stage's parameters.

    Penalizing the per-stage max drives whole stages to exact zero, which is
    what makes the transmitted control sparse in time.
    """
    return float(np.abs(stage_rows(params)).max(axis=1).sum())


def null_control_instants(params: PolicyParams, tol_sparse: float = 1e-6) -> set[int]:
    """Stages whose every parameter is below tol_sparse in magnitude."""
    norms = np.abs(stage_rows(params)).max(axis=1)
    return {int(k) for k in np.nonzero(norms <= tol_sparse)[0]}


def packed_header(N: int, m: int, d: int) -> list[str]:
    """Column names for :func:`packed_row` (xi entries then theta_free)."""
    names = [f"eta_{i}" for i in range(m * N)]
    for j in range(N - 1):
        names += [f"lam_c{j}_r{r}" for r in range((j + 1) * m, m * N)]
    for k in range(1, N):
        names += [f"theta_b{k}_{i}" for i in range(m * k * d)]
    return names


def packed_row(params: PolicyParams) -> np.ndarray:
    """Policy as one flat CSV-ready row in :func:`packed_header` order."""
    p = pack(params)
    return np.concatenate([p.xi, p.theta_free])
