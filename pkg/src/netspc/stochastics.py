"""Process-noise sampling, component-wise saturations, and dropout channels.

All randomness flows through counter-based Philox streams keyed by
(seed, source, path), so every sample path and every source of randomness is
an independent, replayable substream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SOURCE_NOISE = 1
SOURCE_CHANNEL = 2
SOURCE_MOMENTS_CHANNEL = 3
SOURCE_MOMENTS_NOISE = 4


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent reproducible generator for the (seed, *key) tuple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seed=ss))


@dataclass(frozen=True)
class NoiseSpec:
    """Zero-mean i.i.d. Gaussian process noise with covariance `covariance`."""

    covariance: np.ndarray
    seed: int = 0
    kind: str = "gaussian_iid"

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        object.__setattr__(self, "covariance", cov)
        if self.kind != "gaussian_iid":
            raise ValueError(f"unsupported noise kind {self.kind!r}")
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if np.abs(cov - cov.T).max() > 1e-12 * max(1.0, np.abs(cov).max()):
            raise ValueError("covariance must be symmetric")
        w = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise ValueError("covariance must be positive semidefinite")

    @property
    def d(self) -> int:
        return self.covariance.shape[0]

    def factor(self) -> np.ndarray:
        """Matrix L with L Lᵀ = covariance (Cholesky, eigen fallback for
        singular covariances)."""
        cov = 0.5 * (self.covariance + self.covariance.T)
        try:
            return np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            w, V = np.linalg.eigh(cov)
            w = np.clip(w, 0.0, None)
            return V * np.sqrt(w)[np.newaxis, :]

    def rng(self, path: int = 0) -> np.random.Generator:
        return stream(self.seed, SOURCE_NOISE, path)


@dataclass(frozen=True)
class SaturationSpec:
    """Odd component-wise saturation bounded by phi_max.

    kinds: "sigmoid" (scaled logistic (1-e^-x)/(1+e^-x)), "hard_sat" (clip),
    "piecewise_linear" (clip with unit slope inside the band).
    """

    kind: str = "sigmoid"
    phi_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("sigmoid", "hard_sat", "piecewise_linear"):
            raise ValueError(f"unknown saturation kind {self.kind!r}")
        if not self.phi_max > 0:
            raise ValueError("phi_max must be positive")


def saturate(spec: SaturationSpec, w: np.ndarray) -> np.ndarray:
    """Apply the saturation to every scalar coordinate of w."""
    w = np.asarray(w, dtype=float)
    if spec.kind == "sigmoid":
        # sign(x) * tanh(|x|/2) == (1-e^-x)/(1+e^-x), and is exactly odd.
        return spec.phi_max * np.sign(w) * np.tanh(0.5 * np.abs(w))
    return np.clip(w, -spec.phi_max, spec.phi_max)


@dataclass(frozen=True)
class ChannelSpec:
    """Erasure channel for the controller-to-actuator link.

    "bernoulli_iid": i.i.d. success indicators with mean p (p > 0 required:
    the closed-loop guarantees need a nonzero success probability).

    "gilbert_elliott": two-state Markov chain; success probability p1 in the
    good state and p2 in the bad state, transition probabilities p12
    (good -> bad) and p21 (bad -> good).  The initial state is sampled from
    the stationary distribution unless initial="good".
    """

    kind: str = "bernoulli_iid"
    p: float = 1.0
    p1: float = 1.0
    p2: float = 0.0
    p12: float = 0.0
    p21: float = 1.0
    seed: int = 0
    initial: str = "stationary"

    def __post_init__(self):
        if self.kind == "bernoulli_iid":
            if not 0.0 < self.p <= 1.0:
                raise ValueError("bernoulli_iid requires 0 < p <= 1")
        elif self.kind == "gilbert_elliott":
            for name in ("p1", "p2", "p12", "p21"):
                v = getattr(self, name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{name} must lie in [0, 1]")
            if self.initial not in ("stationary", "good"):
                raise ValueError("initial must be 'stationary' or 'good'")
        else:
            raise ValueError(f"unknown channel kind {self.kind!r}")

    def stationary_good_probability(self) -> float:
        if self.kind == "bernoulli_iid":
            return 1.0
        denom = self.p12 + self.p21
        return 1.0 if denom == 0.0 else self.p21 / denom

    def design_success_probability(self) -> float:
        """Success probability used by the i.i.d. design model: p for the
        Bernoulli channel, the stationary success rate for the Markov one."""
        if self.kind == "bernoulli_iid":
            return self.p
        pg = self.stationary_good_probability()
        return pg * self.p1 + (1.0 - pg) * self.p2

    def rng(self, path: int = 0) -> np.random.Generator:
        return stream(self.seed, SOURCE_CHANNEL, path)


def sample_noise(spec: NoiseSpec, horizon: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Stacked draw (w_0, ..., w_{horizon-1}) of length d * horizon."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    z = rng.standard_normal((horizon, spec.d))
    return (z @ spec.factor().T).ravel()


def sample_dropouts(spec: ChannelSpec, horizon: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Success indicators nu_0..nu_{horizon-1}; the Markov channel also
    returns its hidden state trace (0 = good, 1 = bad)."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if spec.kind == "bernoulli_iid":
        nu = (rng.random(horizon) < spec.p).astype(np.int8)
        return nu, None
    states = np.empty(horizon, dtype=np.int8)
    nu = np.empty(horizon, dtype=np.int8)
    if spec.initial == "good":
        state = 0
    else:
        state = 0 if rng.random() < spec.stationary_good_probability() else 1
    for t in range(horizon):
        states[t] = state
        succ = spec.p1 if state == 0 else spec.p2
        nu[t] = 1 if rng.random() < succ else 0
        flip = spec.p12 if state == 0 else spec.p21
        if rng.random() < flip:
            state = 1 - state
    return nu, states
