"""Scenario configuration: JSON schema, validation, grid expansion.

A config describes one scenario plus an optional grid (success probability,
noise scale, protocol, regularizer weight).  Every grid point resolves to a
concrete :class:`netspc.sim.Scenario`; the fully-defaulted form is written
back out as the resolved config so no default stays implicit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Any, Iterator, Optional

import numpy as np

from .sim import DEFAULT_MU_SCALE, Scenario, StabilitySettings
from .stochastics import ChannelSpec, NoiseSpec, SaturationSpec


class ConfigError(ValueError):
    """Invalid or missing configuration field; carries the field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


def _get(cfg: dict, path: str, required: bool = True, default: Any = None) -> Any:
    node: Any = cfg
    walked = []
    for part in path.split("."):
        walked.append(part)
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(".".join(walked), "missing required field")
            return default
        node = node[part]
    return node


def _matrix(cfg: dict, path: str) -> np.ndarray:
    raw = _get(cfg, path)
    try:
        arr = np.array(raw, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, f"not a numeric array: {exc}") from None
    return arr


def _positive(cfg: dict, path: str, default=None) -> float:
    v = _get(cfg, path, required=default is None, default=default)
    if not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(path, "must be a positive number")
    return float(v)


def parse_channel(cfg: dict, base: str = "channel") -> ChannelSpec:
    kind = _get(cfg, f"{base}.kind")
    seed = int(_get(cfg, f"{base}.seed", required=False, default=0))
    if kind == "bernoulli_iid":
        p = _get(cfg, f"{base}.p")
        try:
            return ChannelSpec(kind=kind, p=float(p), seed=seed)
        except ValueError as exc:
            raise ConfigError(f"{base}.p", str(exc)) from None
    if kind == "gilbert_elliott":
        vals = {k: float(_get(cfg, f"{base}.{k}")) for k in ("p1", "p2", "p12", "p21")}
        initial = _get(cfg, f"{base}.initial", required=False, default="stationary")
        try:
            return ChannelSpec(kind=kind, seed=seed, initial=initial, **vals)
        except ValueError as exc:
            raise ConfigError(base, str(exc)) from None
    raise ConfigError(f"{base}.kind", f"unknown channel kind {kind!r}")


@dataclass(frozen=True)
class GridConfig:
    """Parsed config: a base scenario and the grid axes."""

    name: str
    base: Scenario
    grid_p: tuple
    grid_sigma: tuple
    grid_protocol: tuple
    grid_mu: tuple
    resolved: dict

    def labels(self) -> list[str]:
        return [label for label, _ in self.points()]

    def points(self) -> Iterator[tuple[str, Scenario]]:
        """Concrete scenarios, one per grid point, with stable labels."""
        from dataclasses import replace
        for proto in self.grid_protocol:
            for p in self.grid_p:
                for sig in self.grid_sigma:
                    for mu in self.grid_mu:
                        scn = self.base
                        parts = [proto]
                        if p is not None:
                            if scn.channel.kind == "bernoulli_iid":
                                channel = replace(scn.channel, p=float(p))
                            else:
                                channel = replace(scn.channel, p1=float(p))
                            scn = replace(scn, channel=channel)
                            parts.append(f"p{p:g}")
                        if sig is not None:
                            noise = NoiseSpec(
                                covariance=float(sig) * self.base.noise.covariance,
                                seed=self.base.noise.seed)
                            scn = replace(scn, noise=noise)
                            parts.append(f"s{sig:g}")
                        if mu is not None:
                            scn = replace(scn, mu=float(mu))
                            parts.append(f"mu{mu:g}")
                        scn = replace(scn, protocol=proto)
                        yield "_".join(parts), scn

    def grid_coords(self, label: str) -> dict:
        """Numeric coordinates of a labelled grid point (for report tables)."""
        for lab, scn in self.points():
            if lab == label:
                if scn.channel.kind == "bernoulli_iid":
                    p = scn.channel.p
                else:
                    p = scn.channel.p1
                sigma_scale = None
                base_cov = self.base.noise.covariance
                if np.abs(base_cov).max() > 0:
                    ratio = scn.noise.covariance / np.where(base_cov == 0, 1, base_cov)
                    sigma_scale = float(np.median(ratio[base_cov != 0]))
                return {"protocol": scn.protocol, "p": p,
                        "sigma_scale": sigma_scale, "mu": scn.mu}
        raise KeyError(label)


def load_config(path: str) -> GridConfig:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<document>", f"invalid JSON: {exc}") from None
    return parse_config(cfg, name=_get(cfg, "name", required=False,
                                       default=path.rsplit("/", 1)[-1].removesuffix(".json")))


def parse_config(cfg: dict, name: str = "scenario") -> GridConfig:
    A = _matrix(cfg, "model.A")
    B = _matrix(cfg, "model.B")
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    bounds = _get(cfg, "model.bounds", required=False)
    if bounds is not None:
        from .plant import rescale_inputs
        model, _beta = rescale_inputs(A, B, np.array(bounds, dtype=float))
        A, B, u_max = model.A, model.B, model.u_max
    else:
        u_max = _positive(cfg, "model.u_max")

    Q = _matrix(cfg, "weights.Q")
    Q_f = _matrix(cfg, "weights.Q_f")
    R = np.atleast_2d(_matrix(cfg, "weights.R"))
    N = int(_get(cfg, "horizon.N"))
    N_r = int(_get(cfg, "horizon.N_r"))
    protocol = _get(cfg, "protocol", required=False, default="tp1")
    if protocol not in ("tp1", "tp2"):
        raise ConfigError("protocol", f"unknown protocol {protocol!r}")

    channel = parse_channel(cfg)
    cov = _matrix(cfg, "noise.covariance")
    noise_seed = int(_get(cfg, "noise.seed", required=False, default=0))
    try:
        noise = NoiseSpec(covariance=cov, seed=noise_seed)
    except ValueError as exc:
        raise ConfigError("noise.covariance", str(exc)) from None
    sat_kind = _get(cfg, "saturation.kind", required=False, default="sigmoid")
    phi_max = _positive(cfg, "saturation.phi_max", default=1.0)
    try:
        sat = SaturationSpec(kind=sat_kind, phi_max=phi_max)
    except ValueError as exc:
        raise ConfigError("saturation", str(exc)) from None

    mu = float(_get(cfg, "mu", required=False, default=0.0))
    if mu < 0:
        raise ConfigError("mu", "must be nonnegative")
    mu_scale = float(_get(cfg, "mu_scale", required=False, default=DEFAULT_MU_SCALE))
    stab_raw = _get(cfg, "stability", required=False, default={})
    def _opt(name):
        v = stab_raw.get(name)
        return None if v is None else float(v)
    stability = StabilitySettings(enabled=bool(stab_raw.get("enabled", False)),
                                  r=_opt("r"), epsilon=_opt("epsilon"),
                                  zeta=_opt("zeta"))

    steps = int(_get(cfg, "sim.steps"))
    paths = int(_get(cfg, "sim.paths"))
    x0 = _matrix(cfg, "sim.x0").ravel()
    if steps < 1 or paths < 1:
        raise ConfigError("sim", "steps and paths must be >= 1")
    if x0.size != A.shape[0]:
        raise ConfigError("sim.x0", f"expected length {A.shape[0]}")

    samples = int(_get(cfg, "moments.samples", required=False, default=100_000))
    mseed = int(_get(cfg, "moments.seed", required=False, default=0))
    solver_tol = float(_get(cfg, "solver.tol", required=False, default=1e-6))
    tol_sparse = float(_get(cfg, "tol_sparse", required=False, default=1e-6))

    try:
        base = Scenario(A=A, B=B, u_max=u_max, Q=Q, Q_f=Q_f, R=R, N=N, N_r=N_r,
                        protocol=protocol, channel=channel, noise=noise, sat=sat,
                        mu=mu, stability=stability, steps=steps, paths=paths,
                        x0=x0, moment_samples=samples, moment_seed=mseed,
                        mu_scale=mu_scale, tol_sparse=tol_sparse,
                        solver_tol=solver_tol)
    except ValueError as exc:
        raise ConfigError("horizon", str(exc)) from None

    grid = _get(cfg, "grid", required=False, default={})
    grid_p = tuple(grid.get("p", [None]))
    grid_sigma = tuple(grid.get("sigma_scale", [None]))
    grid_protocol = tuple(grid.get("protocol", [protocol]))
    grid_mu = tuple(grid.get("mu", [None]))
    for proto in grid_protocol:
        if proto not in ("tp1", "tp2"):
            raise ConfigError("grid.protocol", f"unknown protocol {proto!r}")

    resolved = resolved_config(name, base, grid_p, grid_sigma, grid_protocol, grid_mu)
    return GridConfig(name=name, base=base, grid_p=grid_p, grid_sigma=grid_sigma,
                      grid_protocol=grid_protocol, grid_mu=grid_mu, resolved=resolved)


def resolved_config(name: str, scn: Scenario, grid_p, grid_sigma, grid_protocol,
                    grid_mu) -> dict:
    """Canonical fully-explicit form of a parsed config."""
    ch = scn.channel
    channel = {"kind": ch.kind, "seed": ch.seed}
    if ch.kind == "bernoulli_iid":
        channel["p"] = ch.p
    else:
        channel.update(p1=ch.p1, p2=ch.p2, p12=ch.p12, p21=ch.p21, initial=ch.initial)
    return {
        "name": name,
        "model": {"A": scn.A.tolist(), "B": scn.B.tolist(), "u_max": scn.u_max},
        "weights": {"Q": scn.Q.tolist(), "Q_f": scn.Q_f.tolist(), "R": scn.R.tolist()},
        "horizon": {"N": scn.N, "N_r": scn.N_r},
        "protocol": scn.protocol,
        "channel": channel,
        "noise": {"kind": scn.noise.kind, "covariance": scn.noise.covariance.tolist(),
                  "seed": scn.noise.seed},
        "saturation": {"kind": scn.sat.kind, "phi_max": scn.sat.phi_max},
        "mu": scn.mu,
        "mu_scale": scn.mu_scale,
        "stability": {"enabled": scn.stability.enabled, "r": scn.stability.r,
                      "epsilon": scn.stability.epsilon, "zeta": scn.stability.zeta},
        "sim": {"steps": scn.steps, "steps_effective": scn.steps_effective,
                "paths": scn.paths, "x0": scn.x0.tolist()},
        "moments": {"samples": scn.moment_samples, "seed": scn.moment_seed},
        "solver": {"tol": scn.solver_tol},
        "tol_sparse": scn.tol_sparse,
        "grid": {"p": list(grid_p), "sigma_scale": list(grid_sigma),
                 "protocol": list(grid_protocol), "mu": list(grid_mu)},
    }


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
