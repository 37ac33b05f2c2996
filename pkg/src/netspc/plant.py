"""Plant models, lossless/stable spectral splitting, and reachability analysis.

The stability machinery needs the state matrix split into an orthogonal part
(eigenvalues on the unit circle) and a Schur-stable part (eigenvalues strictly
inside).  The split is computed with a sorted real Schur form so that all data
stays real and the change of basis is orthogonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .stochastics import NoiseSpec


class NotLyapunovStable(ValueError):
    """Raised when A has an eigenvalue outside the closed unit disc, or a
    defective eigenvalue on the unit circle."""


class NotReachable(ValueError):
    """Raised when the orthogonal pair never reaches full rank within the
    allowed horizon (the pair is not stabilizable)."""


class DecompositionError(ValueError):
    """Raised when no orthogonal change of basis block-diagonalizes A into an
    orthogonal and a Schur-stable part (the two invariant subspaces are not
    mutually orthogonal)."""


@dataclass(frozen=True)
class PlantModel:
    """Discrete-time LTI plant x+ = A x + B u + w with a box input bound."""

    A: np.ndarray
    B: np.ndarray
    u_max: float
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got {B.shape}")
        if not self.u_max > 0:
            raise ValueError("u_max must be positive")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class OrthoSchurDecomposition:
    """Orthogonal similarity T with Tᵀ A T = blkdiag(A_o, A_s).

    A_o is orthogonal (all eigenvalues on the unit circle), A_s is Schur
    stable.  B splits conformally into (B_o, B_s).
    """

    T: np.ndarray
    A_o: np.ndarray
    A_s: np.ndarray
    B_o: np.ndarray
    B_s: np.ndarray

    @property
    def d_o(self) -> int:
        return self.A_o.shape[0]

    @property
    def d_s(self) -> int:
        return self.A_s.shape[0]

    @property
    def d(self) -> int:
        return self.d_o + self.d_s

    def reconstruction_error(self, A: np.ndarray) -> float:
        blk = scipy.linalg.block_diag(self.A_o, self.A_s)
        return float(np.abs(self.T @ blk @ self.T.T - A).max()) if self.d else 0.0

    def orthogonal_state(self, x: np.ndarray) -> np.ndarray:
        """Coordinates of x on the lossless (orthogonal) part."""
        return (self.T.T @ x)[: self.d_o]


@dataclass(frozen=True)
class ReachabilityData:
    """Reachability index and matrix of the orthogonal pair (A_o, B_o)."""

    kappa: int
    R_kappa: np.ndarray
    R_kappa_pinv: np.ndarray
    sigma1_pinv: float

    @property
    def is_empty(self) -> bool:
        return self.R_kappa.shape[0] == 0


def _unit_circle_defective(A: np.ndarray, eigvals: np.ndarray, tol: float) -> bool:
    """True when some eigenvalue with |λ| within tol of 1 has geometric
    multiplicity below its algebraic multiplicity."""
    d = A.shape[0]
    on_circle = eigvals[np.abs(np.abs(eigvals) - 1.0) <= tol]
    remaining = list(on_circle)
    while remaining:
        lam = remaining.pop()
        cluster = [lam] + [z for z in remaining if abs(z - lam) <= 10 * tol]
        remaining = [z for z in remaining if abs(z - lam) > 10 * tol]
        alg = len(cluster)
        geo = d - np.linalg.matrix_rank(A - lam * np.eye(d), tol=tol * max(1.0, np.abs(A).max()))
        if geo < alg:
            return True
    return False


def decompose(model: PlantModel, unit_circle_tol: float = 1e-8,
              tol_orth: float = 1e-9) -> OrthoSchurDecomposition:
    """Split A into its orthogonal (unit-circle) and Schur-stable parts.

    Eigenvalues with modulus in [1 - unit_circle_tol, 1 + unit_circle_tol] are
    treated as lying on the unit circle and must be semisimple.

    Raises
    ------
    NotLyapunovStable
        if some |λ| exceeds 1 + unit_circle_tol, or a unit-circle eigenvalue
        is defective.
    DecompositionError
        if the sorted Schur form does not yield an orthogonal A_o block with
        negligible coupling (the split requires the invariant subspaces to be
        orthogonal complements).
    """
    A, B = model.A, model.B
    eigvals = np.linalg.eigvals(A)
    if np.any(np.abs(eigvals) > 1.0 + unit_circle_tol):
        raise NotLyapunovStable(
            f"spectral radius {np.abs(eigvals).max():.6g} exceeds 1 + tol")
    if _unit_circle_defective(A, eigvals, unit_circle_tol):
        raise NotLyapunovStable("defective eigenvalue on the unit circle")

    cut = (1.0 - unit_circle_tol) ** 2
    TT, Z, d_o = scipy.linalg.schur(
        A, output="real", sort=lambda re, im: re * re + im * im >= cut)
    A_o = TT[:d_o, :d_o]
    A_s = TT[d_o:, d_o:]
    coupling = float(np.abs(TT[:d_o, d_o:]).max()) if d_o and d_o < A.shape[0] else 0.0
    orth_err = float(np.abs(A_o.T @ A_o - np.eye(d_o)).max()) if d_o else 0.0
    if coupling > tol_orth or orth_err > tol_orth:
        raise DecompositionError(
            "no orthogonal basis block-diagonalizes A "
            f"(coupling {coupling:.3g}, orthogonality defect {orth_err:.3g})")
    TB = Z.T @ B
    return OrthoSchurDecomposition(T=Z, A_o=A_o, A_s=A_s, B_o=TB[:d_o], B_s=TB[d_o:])


def reachability_matrix(A_o: np.ndarray, B_o: np.ndarray, ell: int) -> np.ndarray:
    """R_ell = [A_o^{ell-1} B_o, A_o^{ell-2} B_o, ..., B_o]."""
    blocks = []
    P = np.eye(A_o.shape[0])
    for _ in range(ell):
        blocks.append(P @ B_o)
        P = A_o @ P
    return np.hstack(blocks[::-1]) if blocks else np.zeros((A_o.shape[0], 0))


def reachability(dec: OrthoSchurDecomposition, kappa_max: Optional[int] = None) -> ReachabilityData:
    """Smallest ell with rank(R_ell) = d_o, plus pseudo-inverse data.

    For d_o = 0 the orthogonal part is empty and a distinguished empty value
    with kappa = 1 is returned.
    """
    m = dec.B_o.shape[1] if dec.B_o.ndim == 2 else 1
    if dec.d_o == 0:
        return ReachabilityData(kappa=1, R_kappa=np.zeros((0, m)),
                                R_kappa_pinv=np.zeros((m, 0)), sigma1_pinv=0.0)
    if kappa_max is None:
        kappa_max = dec.d  # reachability index never exceeds the state dimension
    for ell in range(1, kappa_max + 1):
        R = reachability_matrix(dec.A_o, dec.B_o, ell)
        if np.linalg.matrix_rank(R) == dec.d_o:
            U, s, Vt = np.linalg.svd(R, full_matrices=False)
            pinv = Vt.T @ np.diag(1.0 / s) @ U.T
            return ReachabilityData(kappa=ell, R_kappa=R, R_kappa_pinv=pinv,
                                    sigma1_pinv=float(1.0 / s.min()))
    raise NotReachable(
        f"rank(R_ell) < d_o = {dec.d_o} for every ell <= {kappa_max}")


def rescale_inputs(A: np.ndarray, B: np.ndarray,
                   per_axis_bounds: np.ndarray) -> tuple[PlantModel, np.ndarray]:
    """Fold per-axis input bounds |u_i| <= U_i into a single uniform box.

    Column i of B is scaled by U_i / max(U); the physical input is recovered
    as beta * v where v is the solved (uniform-box) input.
    """
    bounds = np.asarray(per_axis_bounds, dtype=float).ravel()
    if np.any(bounds <= 0):
        raise ValueError("all per-axis bounds must be positive")
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if bounds.size != B.shape[1]:
        raise ValueError(f"expected {B.shape[1]} bounds, got {bounds.size}")
    u_max = float(bounds.max())
    beta = bounds / u_max
    B_tilde = B * beta[np.newaxis, :]
    return PlantModel(A=np.asarray(A, dtype=float), B=B_tilde, u_max=u_max), beta
