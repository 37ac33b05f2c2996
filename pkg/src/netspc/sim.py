"""Receding-horizon closed loop, metrics, and baselines.

A scenario pins one concrete experiment: plant, weights, horizon, protocol,
channel, noise, regularizer weight, stability settings, and the simulation
batch (paths, steps, initial state).  Running it solves the policy program
every N_r steps and plays the transmission protocol step by step against the
sampled channel and noise.

Modes: "proposed" (full policy), "spc_disturbance_only" (dropout gain off),
"dropout_only" (noise gain off), and the certainty-equivalent baselines
"ce_mpc" / "packetized_mpc" which optimize an open-loop sequence for the
nominal (noise-free, drop-free) model and transmit it tp1- / tp2-style.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import moments as moments_mod
from . import ocp
from .moments import MomentSet, build_lifted
from .plant import PlantModel, decompose, reachability
from .policy import PolicyParams, null_control_instants
from .protocol import ActuatorState, ProtocolSpec, actuator_step, make_packet
from .qp import AdmmWorkspace
from .stochastics import (ChannelSpec, NoiseSpec, SaturationSpec,
                          sample_dropouts, sample_noise, saturate)

MODES = ("proposed", "spc_disturbance_only", "dropout_only",
         "ce_mpc", "packetized_mpc")

# Scenario-level regularizer weights are quoted in the desk-experiment
# convention, whose unstated normalization makes them about 20x larger than
# the per-horizon objective's natural scale; the per-solve weight is
# mu * mu_scale.  Set mu_scale = 1 for the plain per-horizon objective.
DEFAULT_MU_SCALE = 0.05


@dataclass(frozen=True)
class StabilitySettings:
    """Drift-constraint settings.

    The default drift demand is deliberately gentle (5% of the feasibility
    bound): boundedness only needs some strictly negative drift outside the
    r-ball, and a gentle demand leaves the cost-optimal policy essentially
    undistorted while still forcing a minimum of actuation whenever the
    lossless state strays.  Raise zeta toward the bound for a harder drift.
    """

    enabled: bool = False
    r: Optional[float] = None        # None: 1.0
    epsilon: Optional[float] = None  # None: 0.1
    zeta: Optional[float] = None     # None: 0.05 * the feasibility bound


@dataclass(frozen=True)
class Scenario:
    """One fully-resolved experiment (a single grid point)."""

    A: np.ndarray
    B: np.ndarray
    u_max: float
    Q: np.ndarray
    Q_f: np.ndarray
    R: np.ndarray
    N: int
    N_r: int
    protocol: str
    channel: ChannelSpec
    noise: NoiseSpec
    sat: SaturationSpec
    mu: float
    stability: StabilitySettings
    steps: int
    paths: int
    x0: np.ndarray
    moment_samples: int = 100_000
    moment_seed: int = 0
    mu_scale: float = DEFAULT_MU_SCALE
    tol_sparse: float = 1e-6
    solver_tol: float = 1e-6

    def __post_init__(self):
        for name in ("A", "B", "Q", "Q_f", "R", "x0"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.N_r > self.N:
            raise ValueError("need N_r <= N")

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1] if self.B.ndim == 2 else 1

    @property
    def steps_effective(self) -> int:
        q, r = divmod(self.steps, self.N_r)
        return self.steps if r == 0 else (q + 1) * self.N_r

    @property
    def qp_mu(self) -> float:
        return self.mu * self.mu_scale


@dataclass
class TraceBatch:
    """Per-path, per-step record of one run."""

    x: np.ndarray            # (paths, T+1, d)
    u: np.ndarray            # (paths, T, m) computed controls
    ua: np.ndarray           # (paths, T, m) applied controls
    nu: np.ndarray           # (paths, T)
    payload: np.ndarray      # (paths, T) transmitted scalars
    stage_cost: np.ndarray   # (paths, T)
    null_flag: np.ndarray    # (paths, T)
    w_rec: np.ndarray        # (paths, T, d) reconstructed noise
    mode: str
    protocol: str

    @property
    def paths(self) -> int:
        return self.x.shape[0]

    @property
    def steps(self) -> int:
        return self.u.shape[1]

    def to_packet_csv(self, path: str, N_r: int) -> None:
        """Per-transmission log: (path, t, ell, protocol, nu, payload)."""
        with open(path, "w", newline="") as fh:
            fh.write("path,t,ell,protocol,nu,payload_scalars\n")
            for p in range(self.paths):
                for t in range(self.steps):
                    fh.write(f"{p},{t},{t % N_r},{self.protocol},"
                             f"{int(self.nu[p, t])},{int(self.payload[p, t])}\n")

    def to_csv(self, path: str) -> None:
        d = self.x.shape[2]
        m = self.u.shape[2]
        cols = (["path", "t"] + [f"x{i}" for i in range(d)]
                + [f"u{i}" for i in range(m)] + [f"ua{i}" for i in range(m)]
                + ["nu", "payload", "stage_cost", "null_control"])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for p in range(self.paths):
                for t in range(self.steps):
                    vals = ([str(p), str(t)]
                            + [repr(v) for v in self.x[p, t]]
                            + [repr(v) for v in self.u[p, t]]
                            + [repr(v) for v in self.ua[p, t]]
                            + [str(int(self.nu[p, t])), str(int(self.payload[p, t])),
                               repr(self.stage_cost[p, t]), str(int(self.null_flag[p, t]))])
                    fh.write(",".join(vals) + "\n")


def metrics(batch: TraceBatch) -> dict:
    """Summary metrics of a run.

    Three readings of the mean-square level are reported: msb is the running
    maximum (max over t of the path-mean squared state norm), msb_time_avg
    averages the same curve over the whole run, and msb_tail_avg averages its
    second half only, which isolates the stationary regime from the initial
    transient.
    """
    if batch.paths == 0:
        raise ValueError("empty trace batch")
    sq = np.einsum("ptd,ptd->pt", batch.x, batch.x)
    mean_sq = sq.mean(axis=0)
    energy = float(np.einsum("ptm,ptm->pt", batch.ua, batch.ua).mean()) if batch.steps else 0.0
    return {
        "msb": float(mean_sq.max()),
        "msb_time_avg": float(mean_sq.mean()),
        "msb_tail_avg": float(mean_sq[mean_sq.size // 2:].mean()),
        "actuator_energy": energy,
        "sparsity_pct": float(100.0 * batch.null_flag.mean()) if batch.steps else 0.0,
        "avg_cost": float(batch.stage_cost.mean()) if batch.steps else 0.0,
        "paths": batch.paths,
        "steps": batch.steps,
    }


def moment_cache_payload(scn: Scenario) -> dict:
    return {
        "A": scn.A.tolist(), "B": scn.B.tolist(), "Q": scn.Q.tolist(),
        "Q_f": scn.Q_f.tolist(), "R": scn.R.tolist(), "N": scn.N, "N_r": scn.N_r,
        "protocol": scn.protocol,
        "p_design": scn.channel.design_success_probability(),
        "noise_cov": scn.noise.covariance.tolist(),
        "sat": [scn.sat.kind, scn.sat.phi_max],
        "seed": scn.moment_seed, "samples": scn.moment_samples,
    }


def get_moments(scn: Scenario, cache_dir: Optional[str] = None) -> MomentSet:
    """Load the scenario's moments from cache, estimating them on a miss."""
    lifted = build_lifted(scn.A, scn.B, scn.Q, scn.Q_f, scn.R, scn.N)
    key = moments_mod.cache_key(moment_cache_payload(scn))
    path = os.path.join(cache_dir, f"moments_{key}.npz") if cache_dir else None
    if path and os.path.exists(path):
        try:
            return moments_mod.load_moments(path)
        except ValueError:
            pass  # stale format version: re-estimate and overwrite
    ch = moments_mod.estimate_channel_moments(
        lifted.alpha, scn.protocol, scn.channel.design_success_probability(),
        scn.N, scn.N_r, scn.m, samples=scn.moment_samples, seed=scn.moment_seed)
    nm = moments_mod.estimate_noise_moments(
        scn.noise, scn.sat, scn.N, samples=scn.moment_samples, seed=scn.moment_seed)
    ms = moments_mod.assemble(lifted, ch, nm)
    if path:
        moments_mod.save_moments(ms, path)
    return ms


def shift_policy(params: PolicyParams, shift: int) -> PolicyParams:
    """Time-shift a policy by `shift` stages (warm start for the next cycle)."""
    N, m, d = params.N, params.m, params.d
    out = PolicyParams.zeros(N, m, d)
    eta = out.eta.copy()
    Theta = out.Theta.copy()
    Lam = out.Lambda.copy()
    keep = N - shift
    if keep > 0:
        eta[: keep * m] = params.eta[shift * m:]
        Theta[: keep * m, : (N - 1 - shift) * d] = \
            params.Theta[shift * m:, shift * d:]
        Lam[: keep * m, : N - 1 - shift] = params.Lambda[shift * m:, shift:]
    return PolicyParams(eta=eta, Theta=Theta, Lambda=Lam, N=N, m=m, d=d)


class Prepared:
    """Scenario with everything x-independent precomputed."""

    def __init__(self, scn: Scenario, mode: str = "proposed",
                 cache_dir: Optional[str] = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.scn = scn
        self.mode = mode
        self.model = PlantModel(A=scn.A, B=scn.B, u_max=scn.u_max, noise=scn.noise)
        self.lifted = build_lifted(scn.A, scn.B, scn.Q, scn.Q_f, scn.R, scn.N)
        self.ce_mode = mode in ("ce_mpc", "packetized_mpc")
        # Certainty-equivalent baselines fix their own transmission style.
        style = {"ce_mpc": "tp1", "packetized_mpc": "tp2"}.get(mode, scn.protocol)
        self.style = style
        self.protocol = ProtocolSpec(kind=style, N=scn.N, N_r=scn.N_r)
        self.dec = None
        self.reach = None
        self.stab: Optional[ocp.StabilityConstraintSpec] = None

        if scn.stability.enabled and not self.ce_mode:
            self.dec = decompose(self.model)
            self.reach = reachability(self.dec)
            if self.dec.d_o and scn.N_r != self.reach.kappa:
                raise ValueError(
                    f"stability constraints need N_r = reachability index "
                    f"({self.reach.kappa}), got N_r = {scn.N_r}")
            zeta = scn.stability.zeta
            bound = ocp.zeta_upper_bound(scn.u_max, self.dec.d_o, self.reach.sigma1_pinv)
            if zeta is None:
                zeta = 0.05 * bound
            if not 0.0 < zeta < bound:
                raise ValueError(f"zeta must lie in (0, {bound:.6g}), got {zeta}")
            r = 1.0 if scn.stability.r is None else scn.stability.r
            epsilon = 0.1 if scn.stability.epsilon is None else scn.stability.epsilon
            self.stab = ocp.StabilityConstraintSpec(r=r, epsilon=epsilon, zeta=zeta)

        if self.ce_mode:
            mN = scn.m * scn.N
            self.ce_H = 2.0 * self.lifted.alpha
            self.ce_A = np.vstack([np.eye(mN), -np.eye(mN)])
            self.ce_b = np.full(2 * mN, scn.u_max)
            self.ce_ws = AdmmWorkspace(self.ce_H, self.ce_A)
            self.ce_gmat = 2.0 * self.lifted.calB.T @ self.lifted.calQ @ self.lifted.calA
            self.moments = None
        else:
            self.moments = get_moments(scn, cache_dir)
            self.layout = ocp.VariableLayout.build(
                scn.N, scn.m, scn.d,
                include_theta=(mode != "dropout_only"),
                include_lambda=(mode != "spc_disturbance_only"),
                with_regularizer=(mode == "proposed" and scn.qp_mu > 0))
            mu = scn.qp_mu if mode == "proposed" else 0.0
            self.mu = mu
            Ab, bb = ocp.build_input_bounds(self.layout, scn.u_max, scn.sat.phi_max)
            Ar, br = ocp.build_regularizer_rows(self.layout)
            self.A_base = np.vstack([Ab, Ar]) if Ar.size else Ab
            self.b_base = np.concatenate([bb, br])
            # H and the theta-side linear term do not depend on x.
            self.H, self._g0, _ = ocp.build_objective(
                self.layout, self.moments, self.lifted, np.zeros(scn.d), mu)
            self._workspaces: dict[tuple, AdmmWorkspace] = {}

    def _workspace(self, pattern: tuple, A_stab: np.ndarray) -> AdmmWorkspace:
        ws = self._workspaces.get(pattern)
        if ws is None:
            A = np.vstack([self.A_base, A_stab]) if A_stab.size else self.A_base
            ws = AdmmWorkspace(self.H, A)
            self._workspaces[pattern] = ws
        return ws

    def solve_policy(self, x_t: np.ndarray,
                     warm: Optional[PolicyParams]) -> tuple[PolicyParams, float, object]:
        """One receding-horizon solve at state x_t."""
        scn = self.scn
        H, g, c0 = ocp.build_objective(self.layout, self.moments, self.lifted,
                                       x_t, self.mu)
        if self.stab is not None and self.dec is not None and self.dec.d_o:
            A_stab, b_stab, pattern = ocp.build_stability_constraints(
                self.dec, self.reach, self.stab, x_t,
                scn.channel.design_success_probability(), self.layout)
            fallback = ocp.fallback_policy(self.dec, self.reach, self.stab,
                                           x_t, self.layout)
            if np.abs(fallback.eta).max(initial=0.0) > scn.u_max + 1e-9:
                raise ocp.SolverFailure(
                    "fallback policy violates the input box; zeta is misconfigured")
            if warm is None:
                warm = fallback
        else:
            A_stab = np.zeros((0, self.layout.n_vars))
            b_stab = np.zeros(0)
            pattern = ()
        ws = self._workspace(pattern, A_stab)
        b = np.concatenate([self.b_base, b_stab])
        problem = ocp.QpProblem(H=self.H, g=g, c0=c0,
                                Aineq=ws.A, bineq=b, var_map=self.layout,
                                mu=self.mu, stability_pattern=pattern)
        return ocp.solve(problem, tol=scn.solver_tol, warm_start=warm,
                         workspace=ws, raise_on_failure=True)

    def solve_ce(self, x_t: np.ndarray, warm: Optional[np.ndarray]) -> np.ndarray:
        """Certainty-equivalent open-loop sequence at state x_t."""
        g = self.ce_gmat @ x_t
        sol = self.ce_ws.solve(g, self.ce_b, z0=warm, tol=self.scn.solver_tol)
        if not sol.stats.certified:
            raise ocp.SolverFailure("uncertified certainty-equivalent solve")
        return sol.z


def one_step_residual(A: np.ndarray, B: np.ndarray, x: np.ndarray,
                      x_next: np.ndarray, ua: np.ndarray) -> np.ndarray:
    """Noise reconstruction from consecutive states and the applied control.

    Both the plant step and the controller-side reconstruction funnel through
    this helper so the recovered noise is bit-identical to the recorded one.
    """
    return x_next - (A @ x + B @ ua)


def run_path(prep: Prepared, path: int) -> dict:
    """Simulate one sample path; returns the per-step arrays."""
    scn = prep.scn
    T = scn.steps_effective
    d, m, N, N_r = scn.d, scn.m, scn.N, scn.N_r
    A, B = scn.A, scn.B

    w_all = sample_noise(scn.noise, T, scn.noise.rng(path)).reshape(T, d)
    nu_all, _ = sample_dropouts(scn.channel, T, scn.channel.rng(path))

    x = np.array(scn.x0, dtype=float)
    out = dict(
        x=np.empty((T + 1, d)), u=np.empty((T, m)), ua=np.empty((T, m)),
        nu=np.empty(T, dtype=np.int8), payload=np.empty(T, dtype=np.int64),
        stage_cost=np.empty(T), null_flag=np.empty(T, dtype=np.int8),
        w_rec=np.empty((T, d)),
    )
    out["x"][0] = x

    warm_policy: Optional[PolicyParams] = None
    warm_ce: Optional[np.ndarray] = None
    act = ActuatorState(kind=prep.style, m=m)

    for t0 in range(0, T, N_r):
        if prep.ce_mode:
            useq = prep.solve_ce(x, warm_ce)
            warm_ce = np.concatenate([useq[N_r * m:], np.zeros(N_r * m)])
            eta_like = useq
            null_stage = [bool(np.abs(useq[k * m:(k + 1) * m]).max() <= scn.tol_sparse)
                          for k in range(N)]
        else:
            params, _, _ = prep.solve_policy(x, warm_policy)
            warm_policy = shift_policy(params, N_r)
            eta_like = params.eta
            nulls = null_control_instants(params, scn.tol_sparse)
            null_stage = [k in nulls for k in range(N)]

        act.reset()
        any_ack = False
        sat_feat = np.zeros(d * (N - 1))
        nu_hist = np.zeros(N - 1)

        for ell in range(N_r):
            t = t0 + ell
            if prep.ce_mode:
                u_ell = eta_like[ell * m:(ell + 1) * m]
            else:
                # Full-width matvec on zero-padded features: unknown future
                # entries multiply structural zeros, so this equals the
                # horizon-wide evaluation bit for bit.
                feedback = params.Theta @ sat_feat + params.Lambda @ nu_hist
                u_ell = (params.eta[ell * m:(ell + 1) * m]
                         + feedback[ell * m:(ell + 1) * m])
            burst = prep.style == "tp2" and not any_ack
            packet = make_packet(prep.protocol, eta_like, u_ell, ell, m,
                                 burst_active=burst)
            nu = int(nu_all[t])
            applied, act = actuator_step(act, packet if nu else None, ell)
            any_ack = any_ack or bool(nu)

            x_next = A @ x + B @ applied + w_all[t]
            w_rec = one_step_residual(A, B, x, x_next, applied)

            out["u"][t] = u_ell
            out["ua"][t] = applied
            out["nu"][t] = nu
            out["payload"][t] = packet.payload_scalars
            out["stage_cost"][t] = float(x @ (scn.Q @ x) + applied @ (scn.R @ applied))
            out["null_flag"][t] = int(null_stage[ell])
            out["w_rec"][t] = w_rec
            out["x"][t + 1] = x_next

            if ell < N - 1:
                sat_feat[ell * d:(ell + 1) * d] = saturate(scn.sat, w_rec)
                nu_hist[ell] = nu
            x = x_next
    return out


def _run_block(args) -> list[dict]:
    scn, mode, cache_dir, lo, hi = args
    prep = Prepared(scn, mode=mode, cache_dir=cache_dir)
    return [run_path(prep, p) for p in range(lo, hi)]


def run_closed_loop(scn: Scenario, mode: str = "proposed", jobs: int = 1,
                    cache_dir: Optional[str] = None) -> TraceBatch:
    """Simulate all sample paths of a scenario under the given mode."""
    paths = scn.paths
    if jobs > 1 and paths > 1 and cache_dir is not None:
        # Make sure the moment cache exists before fanning out.
        if mode not in ("ce_mpc", "packetized_mpc"):
            get_moments(scn, cache_dir)
        bounds = np.linspace(0, paths, min(jobs, paths) + 1).astype(int)
        tasks = [(scn, mode, cache_dir, int(lo), int(hi))
                 for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        results: list[dict] = []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for block in pool.map(_run_block, tasks):
                results.extend(block)
    else:
        prep = Prepared(scn, mode=mode, cache_dir=cache_dir)
        results = [run_path(prep, p) for p in range(paths)]

    T = scn.steps_effective
    batch = TraceBatch(
        x=np.stack([r["x"] for r in results]),
        u=np.stack([r["u"] for r in results]),
        ua=np.stack([r["ua"] for r in results]),
        nu=np.stack([r["nu"] for r in results]),
        payload=np.stack([r["payload"] for r in results]),
        stage_cost=np.stack([r["stage_cost"] for r in results]),
        null_flag=np.stack([r["null_flag"] for r in results]),
        w_rec=np.stack([r["w_rec"] for r in results]),
        mode=mode, protocol=scn.protocol)
    assert batch.steps == T
    return batch


def run_baseline(scn: Scenario, kind: str, jobs: int = 1,
                 cache_dir: Optional[str] = None) -> TraceBatch:
    """Run one of the comparison controllers on the same random numbers."""
    if kind not in MODES or kind == "proposed":
        raise ValueError(f"unknown baseline {kind!r}")
    return run_closed_loop(scn, mode=kind, jobs=jobs, cache_dir=cache_dir)
