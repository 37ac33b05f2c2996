"""Lifted horizon matrices and the Monte Carlo moment matrices feeding the QP.

The quadratic program's data separates into channel moments (expectations of
products of the protocol gating matrices, functions of the design success
probability only) and noise moments (covariances of the stacked noise and its
saturation).  Both are estimated once per scenario and cached; the channel
side collapses to exact values when the design probability is 1.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg

from .protocol import PROTOCOLS
from .stochastics import (SOURCE_MOMENTS_CHANNEL, SOURCE_MOMENTS_NOISE,
                          NoiseSpec, SaturationSpec, saturate, stream)

CACHE_FORMAT_VERSION = 2


class NotPSD(ValueError):
    pass


class NotPD(ValueError):
    pass


class IndefiniteL(ValueError):
    """The assembled quadratic-form matrix came out indefinite beyond Monte
    Carlo tolerance; raise the sample count."""


def _check_psd(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if np.abs(M - M.T).max() > 1e-10 * max(1.0, np.abs(M).max()):
        raise NotPSD(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise NotPSD(f"{name} must be positive semidefinite")
    return M


def _check_pd(M: np.ndarray, name: str) -> np.ndarray:
    M = _check_psd(M, name)
    if np.linalg.eigvalsh(0.5 * (M + M.T)).min() <= 0:
        raise NotPD(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class LiftedDynamics:
    """Stacked N-step description x_{0:N} = calA x0 + calB u + calD w together
    with the block cost weights and the control-side Hessian alpha."""

    calA: np.ndarray
    calB: np.ndarray
    calD: np.ndarray
    calQ: np.ndarray
    calR: np.ndarray
    alpha: np.ndarray
    N: int
    d: int
    m: int


def build_lifted(A: np.ndarray, B: np.ndarray, Q: np.ndarray, Q_f: np.ndarray,
                 R: np.ndarray, N: int) -> LiftedDynamics:
    """Assemble the lifted matrices for an N-stage horizon."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    d, m = B.shape
    Q = _check_psd(Q, "Q")
    Q_f = _check_psd(Q_f, "Q_f")
    R = _check_pd(np.atleast_2d(np.asarray(R, dtype=float)), "R")

    powers = [np.eye(d)]
    for _ in range(N):
        powers.append(A @ powers[-1])
    calA = np.vstack(powers)
    calB = np.zeros((d * (N + 1), m * N))
    calD = np.zeros((d * (N + 1), d * N))
    for i in range(1, N + 1):
        for j in range(i):
            calB[i * d:(i + 1) * d, j * m:(j + 1) * m] = powers[i - 1 - j] @ B
            calD[i * d:(i + 1) * d, j * d:(j + 1) * d] = powers[i - 1 - j]
    calQ = scipy.linalg.block_diag(*([Q] * N + [Q_f]))
    calR = scipy.linalg.block_diag(*([R] * N))
    alpha = calB.T @ calQ @ calB + calR
    return LiftedDynamics(calA=calA, calB=calB, calD=calD, calQ=calQ,
                          calR=calR, alpha=alpha, N=N, d=d, m=m)


def trim_matrix(N: int, m: int, ell: int) -> np.ndarray:
    """Tail selector: keeps the last m(N-ell) coordinates of an mN vector."""
    C = np.zeros((m * N, m * (N - ell)))
    C[m * ell:, :] = np.eye(m * (N - ell))
    return C


@dataclass(frozen=True)
class ChannelMoments:
    """Channel-side expectations entering the QP (protocol dependent)."""

    Sigma_G: np.ndarray
    Sigma_SG_tilde: np.ndarray
    Sigma_Snl_tilde: np.ndarray
    mu_G: np.ndarray
    mu_S_tilde: np.ndarray
    mu_S: np.ndarray
    Sigma_S: np.ndarray
    sample_count: int
    p_design: float
    protocol: str
    deterministic: bool = False


@dataclass(frozen=True)
class NoiseMoments:
    """Noise-side covariances: saturation, noise/saturation cross, and raw."""

    Sigma_e: np.ndarray
    Sigma_e_prime: np.ndarray
    Sigma_W: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class MomentSet:
    """Everything the QP needs, with the assembled quadratic blocks."""

    Sigma_G: np.ndarray
    Sigma_SG_tilde: np.ndarray
    Sigma_Snl_tilde: np.ndarray
    mu_G: np.ndarray
    mu_S_tilde: np.ndarray
    mu_S: np.ndarray
    Sigma_S: np.ndarray
    Sigma_e: np.ndarray
    Sigma_e_prime: np.ndarray
    Sigma_W: np.ndarray
    calL: np.ndarray
    calM: np.ndarray
    sample_count: int
    p_design: float
    protocol: str
    min_eig_raw: float
    deterministic: bool = False


def _gating_vectors(nu: np.ndarray, N: int, N_r: int, m: int,
                    protocol: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample diagonals of S and of the square offset gate.

    Under tp1 the offsets route through S itself; under tp2 the offset gate
    upgrades the per-instant indicators to their running maximum (buffering).
    nu has shape (K, n_nu) with n_nu >= N_r; returns (s, g), each (K, mN).
    """
    K = nu.shape[0]
    s = np.ones((K, m * N))
    s[:, : m * N_r] = np.repeat(nu[:, :N_r], m, axis=1)
    if protocol == "tp1":
        return s, s
    g = np.ones((K, m * N))
    rho = np.maximum.accumulate(nu[:, :N_r], axis=1)
    g[:, : m * N_r] = np.repeat(rho, m, axis=1)
    return s, g


def estimate_channel_moments(alpha: np.ndarray, protocol: str, p_design: float,
                             N: int, N_r: int, m: int, samples: int = 100_000,
                             seed: int = 0, chunk: int = 1 << 14) -> ChannelMoments:
    """Monte Carlo channel moments at design probability p_design under
    independent per-instant dropouts.

    Sampling is chunked with an independent substream per chunk, so estimates
    are reproducible and chunks could be evaluated concurrently.  A design
    probability of 1 makes every draw identical; a single deterministic draw
    is then used and the result is exact.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if not 0.0 < p_design <= 1.0:
        raise ValueError("need 0 < p_design <= 1")
    alpha = np.asarray(alpha, dtype=float)
    n_nu = max(N_r, N - 1)
    deterministic = p_design == 1.0
    draws_total = 1 if deterministic else int(samples)
    if not deterministic and draws_total < 10_000:
        raise ValueError("need at least 10^4 samples")

    mN = m * N
    acc_gg = np.zeros((mN, mN))
    acc_ss = np.zeros((mN, mN))
    acc_s = np.zeros(mN)
    acc_g = np.zeros(mN)
    acc_sl = np.zeros((N - 1, mN))
    acc_gsl = np.zeros((N - 1, mN, mN))
    acc_ssnl = np.zeros((N - 1, N - 1, mN, mN))

    done = 0
    chunk_idx = 0
    while done < draws_total:
        K = min(chunk, draws_total - done)
        if deterministic:
            nu = np.ones((K, n_nu))
        else:
            rng = stream(seed, SOURCE_MOMENTS_CHANNEL, chunk_idx)
            nu = (rng.random((K, n_nu)) < p_design).astype(float)
        s, g = _gating_vectors(nu, N, N_r, m, protocol)
        acc_ss += s.T @ s
        acc_gg += g.T @ g
        acc_s += s.sum(axis=0)
        acc_g += g.sum(axis=0)
        for ell in range(1, N):
            ws = nu[:, ell - 1:ell] * s
            acc_sl[ell - 1] += ws.sum(axis=0)
            acc_gsl[ell - 1] += g.T @ ws
            for n in range(1, ell + 1):
                M = (nu[:, n - 1:n] * s).T @ ws
                acc_ssnl[n - 1, ell - 1] += M
                if n != ell:
                    acc_ssnl[ell - 1, n - 1] += M.T
        done += K
        chunk_idx += 1

    inv = 1.0 / draws_total
    Sigma_S = alpha * (acc_ss * inv)
    mu_S = np.diag(acc_s * inv)
    Sigma_G = alpha * (acc_gg * inv)
    mu_G = np.diag(acc_g * inv)

    C = [trim_matrix(N, m, ell) for ell in range(N)]
    sg_blocks = [(alpha * (acc_gsl[ell - 1] * inv)) @ C[ell] for ell in range(1, N)]
    mu_blocks = [np.diag(acc_sl[ell - 1] * inv) @ C[ell] for ell in range(1, N)]
    Sigma_SG_tilde = np.hstack(sg_blocks) if sg_blocks else np.zeros((mN, 0))
    mu_S_tilde = np.hstack(mu_blocks) if mu_blocks else np.zeros((mN, 0))

    nl_rows = []
    for n in range(1, N):
        row = [C[n].T @ (alpha * (acc_ssnl[n - 1, ell - 1] * inv)) @ C[ell]
               for ell in range(1, N)]
        nl_rows.append(np.hstack(row))
    size_lam = mN * (N - 1) // 2
    Sigma_Snl_tilde = np.vstack(nl_rows) if nl_rows else np.zeros((size_lam, size_lam))

    return ChannelMoments(Sigma_G=Sigma_G, Sigma_SG_tilde=Sigma_SG_tilde,
                          Sigma_Snl_tilde=Sigma_Snl_tilde, mu_G=mu_G,
                          mu_S_tilde=mu_S_tilde, mu_S=mu_S, Sigma_S=Sigma_S,
                          sample_count=draws_total, p_design=p_design,
                          protocol=protocol, deterministic=deterministic)


def _distinct_power(p: float, *block_indices) -> float:
    """p raised to the number of distinct dropout indices involved.

    Each argument is either a dropout index (int) or None (no dropout)."""
    return p ** len({b for b in block_indices if b is not None})


def exact_tp1_channel_moments(alpha: np.ndarray, p: float, N: int, N_r: int,
                              m: int) -> ChannelMoments:
    """Closed-form tp1 channel moments (polynomials in p); test oracle.

    The tp1 gates are diagonal in the per-instant indicators, so every entry
    of every moment is alpha_ij times p to the number of distinct indicators
    in the product.
    """
    mN = m * N
    blk = [i // m if i // m < N_r else None for i in range(mN)]
    E_ss = np.array([[_distinct_power(p, blk[i], blk[j]) for j in range(mN)]
                     for i in range(mN)])
    Sigma_S = alpha * E_ss
    mu_S = np.diag([_distinct_power(p, blk[i]) for i in range(mN)])
    C = [trim_matrix(N, m, ell) for ell in range(N)]
    sg_blocks, mu_blocks = [], []
    for ell in range(1, N):
        M = np.array([[_distinct_power(p, ell - 1, blk[i], blk[j])
                       for j in range(mN)] for i in range(mN)])
        sg_blocks.append((alpha * M) @ C[ell])
        mu_blocks.append(np.diag([_distinct_power(p, ell - 1, blk[i])
                                  for i in range(mN)]) @ C[ell])
    nl_rows = []
    for n in range(1, N):
        row = []
        for ell in range(1, N):
            M = np.array([[_distinct_power(p, n - 1, ell - 1, blk[i], blk[j])
                           for j in range(mN)] for i in range(mN)])
            row.append(C[n].T @ (alpha * M) @ C[ell])
        nl_rows.append(np.hstack(row))
    size_lam = mN * (N - 1) // 2
    return ChannelMoments(
        Sigma_G=Sigma_S,
        Sigma_SG_tilde=np.hstack(sg_blocks) if sg_blocks else np.zeros((mN, 0)),
        Sigma_Snl_tilde=np.vstack(nl_rows) if nl_rows else np.zeros((size_lam, size_lam)),
        mu_G=mu_S, mu_S_tilde=np.hstack(mu_blocks) if mu_blocks else np.zeros((mN, 0)),
        mu_S=mu_S, Sigma_S=Sigma_S, sample_count=0, p_design=p, protocol="tp1",
        deterministic=True)


def exact_mu_S(p: float, N: int, N_r: int, m: int) -> np.ndarray:
    """E of the transmission gate: blkdiag(p I_m, ..., p I_m, I_{m(N-N_r)})."""
    diag = np.ones(m * N)
    diag[: m * N_r] = p
    return np.diag(diag)


def estimate_noise_moments(noise: NoiseSpec, sat: SaturationSpec, N: int,
                           samples: int = 100_000, seed: int = 0,
                           chunk: int = 1 << 14) -> NoiseMoments:
    """Monte Carlo noise moments over one horizon.

    Sigma_e and the noise/saturation cross covariance are sampled; the raw
    covariance of the stacked noise is exact block-diagonal (i.i.d. Gaussian,
    no sampling needed).
    """
    if samples < 10_000:
        raise ValueError("need at least 10^4 samples")
    d = noise.d
    n_e = d * (N - 1)
    n_w = d * N
    L = noise.factor()
    acc_ee = np.zeros((n_e, n_e))
    acc_we = np.zeros((n_w, n_e))
    done = 0
    chunk_idx = 0
    while done < samples:
        K = min(chunk, samples - done)
        rng = stream(seed, SOURCE_MOMENTS_NOISE, chunk_idx)
        w = rng.standard_normal((K, N, d)) @ L.T
        w = w.reshape(K, n_w)
        if n_e:
            e = saturate(sat, w[:, :n_e])
            acc_ee += e.T @ e
            acc_we += w.T @ e
        done += K
        chunk_idx += 1
    inv = 1.0 / samples
    Sigma_W = scipy.linalg.block_diag(*([noise.covariance] * N))
    return NoiseMoments(Sigma_e=acc_ee * inv, Sigma_e_prime=acc_we * inv,
                        Sigma_W=Sigma_W, sample_count=samples)


def assemble(lifted: LiftedDynamics, channel: ChannelMoments,
             noise: NoiseMoments, indefinite_tol: float = 1e-8) -> MomentSet:
    """Combine channel and noise moments into the QP blocks.

    The quadratic-form matrix over (eta, lambda_tilde) is symmetrized and its
    Monte Carlo eigenvalue jitter floored at zero; anything below
    -indefinite_tol times its norm raises IndefiniteL.
    """
    calL = np.block([[channel.Sigma_G, channel.Sigma_SG_tilde],
                     [channel.Sigma_SG_tilde.T, channel.Sigma_Snl_tilde]])
    calL = 0.5 * (calL + calL.T)
    w, V = np.linalg.eigh(calL)
    scale = max(abs(w).max(), 1e-30)
    min_eig_raw = float(w.min())
    if min_eig_raw < -indefinite_tol * scale:
        raise IndefiniteL(
            f"min eigenvalue {min_eig_raw:.3g} below -{indefinite_tol:g} * {scale:.3g}; "
            "raise the sample count")
    if min_eig_raw < 0:
        calL = (V * np.clip(w, 0.0, None)) @ V.T
        calL = 0.5 * (calL + calL.T)
    QB = lifted.calQ @ lifted.calB
    # C-contiguous so a cache round trip reproduces the same BLAS paths.
    calM = np.ascontiguousarray(
        2.0 * np.hstack([QB @ channel.mu_G, QB @ channel.mu_S_tilde]).T)
    return MomentSet(Sigma_G=channel.Sigma_G, Sigma_SG_tilde=channel.Sigma_SG_tilde,
                     Sigma_Snl_tilde=channel.Sigma_Snl_tilde, mu_G=channel.mu_G,
                     mu_S_tilde=channel.mu_S_tilde, mu_S=channel.mu_S,
                     Sigma_S=channel.Sigma_S, Sigma_e=noise.Sigma_e,
                     Sigma_e_prime=noise.Sigma_e_prime, Sigma_W=noise.Sigma_W,
                     calL=calL, calM=calM,
                     sample_count=max(channel.sample_count, noise.sample_count),
                     p_design=channel.p_design, protocol=channel.protocol,
                     min_eig_raw=min_eig_raw, deterministic=channel.deterministic)


# ---------------------------------------------------------------------------
# Moment cache: one binary sidecar file per scenario, keyed by content hash.

_ARRAY_FIELDS = ("Sigma_G", "Sigma_SG_tilde", "Sigma_Snl_tilde", "mu_G",
                 "mu_S_tilde", "mu_S", "Sigma_S", "Sigma_e", "Sigma_e_prime",
                 "Sigma_W", "calL", "calM")


def cache_key(payload: dict) -> str:
    """Content hash of every input the moments depend on."""
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:24]


def save_moments(ms: MomentSet, path: str) -> None:
    arrays = {name: np.ascontiguousarray(getattr(ms, name), dtype=np.float64)
              for name in _ARRAY_FIELDS}
    meta = dict(format_version=CACHE_FORMAT_VERSION, sample_count=ms.sample_count,
                p_design=ms.p_design, protocol=ms.protocol,
                min_eig_raw=ms.min_eig_raw, deterministic=ms.deterministic)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, __meta__=json.dumps(meta, sort_keys=True), **arrays)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_moments(path: str) -> MomentSet:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta["format_version"] != CACHE_FORMAT_VERSION:
            raise ValueError(f"unsupported cache format {meta['format_version']}")
        arrays = {name: data[name] for name in _ARRAY_FIELDS}
    return MomentSet(**arrays, sample_count=int(meta["sample_count"]),
                     p_design=float(meta["p_design"]), protocol=meta["protocol"],
                     min_eig_raw=float(meta["min_eig_raw"]),
                     deterministic=bool(meta["deterministic"]))
