"""Transmission protocols: what the controller sends, what the channel drops,
what the actuator applies.

Two protocols are supported.  Under "tp1" only the current control value is
transmitted each step; a dropped packet means zero control at that instant.
Under "tp2" the controller additionally retransmits the remaining offset
blocks of the current plan until the first packet gets through; the actuator
buffers them and, on later dropouts, falls back to the buffered offset for
that instant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .policy import PolicyParams, evaluate_controls

PROTOCOLS = ("tp1", "tp2")


class BufferUnderrun(RuntimeError):
    """Actuator needed a buffered offset block that was never received."""


@dataclass(frozen=True)
class ProtocolSpec:
    kind: str
    N: int
    N_r: int

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.kind!r}")
        if not 1 <= self.N_r <= self.N:
            raise ValueError("need 1 <= N_r <= N")


def rho_sequence(nu: np.ndarray) -> np.ndarray:
    """rho_l = 1 iff some transmission succeeded at or before instant l."""
    nu = np.asarray(nu)
    return np.maximum.accumulate(nu.astype(np.int8))


def s_diagonal(nu: np.ndarray, N: int, N_r: int, m: int) -> np.ndarray:
    """Diagonal of S: per-instant pass/zero gate on the first N_r blocks,
    identity on the trailing prediction blocks."""
    nu = np.asarray(nu, dtype=float).ravel()
    if nu.size != N_r:
        raise ValueError(f"need {N_r} dropout values, got {nu.size}")
    return np.concatenate([np.repeat(nu, m), np.ones(m * (N - N_r))])


def build_S(nu: np.ndarray, N: int, N_r: int, m: int) -> np.ndarray:
    return np.diag(s_diagonal(nu, N, N_r, m))


def g_diagonal(nu: np.ndarray, N: int, N_r: int, m: int) -> np.ndarray:
    """Diagonal of the square offset gate of the repeat protocol (length mN).

    It is the transmission gate S with the per-instant indicators upgraded to
    their running maximum: offset block i routes whenever some packet of the
    cycle has arrived by instant i (buffered on earlier success), and the
    trailing prediction blocks pass unchanged.  The rectangular G of
    :func:`build_G` is this gate's first m(N-1) columns.
    """
    nu = np.asarray(nu).ravel()
    if nu.size != N_r:
        raise ValueError(f"need {N_r} dropout values, got {nu.size}")
    rho = rho_sequence(nu).astype(float)
    diag = np.ones(m * N)
    diag[: m * N_r] = np.repeat(rho, m)
    return diag


def build_G(nu: np.ndarray, N: int, N_r: int, m: int) -> np.ndarray:
    """Offset-routing matrix of the repeat protocol, mN x m(N-1)."""
    return np.diag(g_diagonal(nu, N, N_r, m))[:, : m * (N - 1)]


def applied_controls(spec: ProtocolSpec, params: PolicyParams,
                     sat_noise: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Horizon-wide applied controls for one dropout/noise realization.

    nu must carry max(N_r, N-1) outcomes: the first N_r gate the
    transmissions, the first N-1 feed the dropout-gain term.  Only the first
    N_r blocks are ever applied to the plant by the simulator.
    """
    N, N_r, m = spec.N, spec.N_r, params.m
    nu = np.asarray(nu, dtype=float).ravel()
    if nu.size < max(N_r, N - 1):
        raise ValueError(f"need at least {max(N_r, N - 1)} dropout values")
    s = s_diagonal(nu[:N_r], N, N_r, m)
    if spec.kind == "tp1":
        return s * evaluate_controls(params, sat_noise, nu[: N - 1])
    g = g_diagonal(nu[:N_r], N, N_r, m)
    feedback = (params.Theta @ np.asarray(sat_noise, dtype=float).ravel()
                + params.Lambda @ nu[: N - 1])
    return g * params.eta + s * feedback


@dataclass(frozen=True)
class Packet:
    """One transmission: the control value for this instant, plus (repeat
    protocol, while no packet has been acknowledged yet) the remaining offset
    blocks of the current plan keyed by instant."""

    control: np.ndarray
    offsets: Optional[dict[int, np.ndarray]] = None

    @property
    def payload_scalars(self) -> int:
        n = int(np.asarray(self.control).size)
        if self.offsets:
            n += sum(int(np.asarray(v).size) for v in self.offsets.values())
        return n


@dataclass
class ActuatorState:
    """Actuator-side memory: offset buffer (repeat protocol only) and whether
    any packet of the current plan has arrived."""

    kind: str
    m: int
    buffer: dict[int, np.ndarray] = field(default_factory=dict)
    last_rho: int = 0

    def reset(self) -> None:
        self.buffer = {}
        self.last_rho = 0


def make_packet(spec: ProtocolSpec, params_eta: np.ndarray, u_value: np.ndarray,
                ell: int, m: int, burst_active: bool) -> Packet:
    """Controller-side packet for instant ell of the current plan."""
    if spec.kind == "tp1" or not burst_active:
        return Packet(control=np.asarray(u_value, dtype=float))
    offsets = {j: np.array(params_eta[j * m:(j + 1) * m], dtype=float)
               for j in range(ell + 1, spec.N_r)}
    return Packet(control=np.asarray(u_value, dtype=float), offsets=offsets)


def actuator_step(state: ActuatorState, packet: Optional[Packet],
                  ell: int) -> tuple[np.ndarray, ActuatorState]:
    """Apply one instant's event: a received packet or a drop (packet=None).

    Returns the control block applied to the plant and the updated state.
    The acknowledgement seen by the controller is `packet is not None`.
    """
    if packet is not None:
        if state.kind == "tp2":
            if packet.offsets:
                state.buffer.update(packet.offsets)
            state.last_rho = 1
        return np.array(packet.control, dtype=float), state
    if state.kind == "tp2" and state.last_rho:
        if ell not in state.buffer:
            raise BufferUnderrun(f"no buffered offset for instant {ell}")
        return np.array(state.buffer[ell], dtype=float), state
    return np.zeros(state.m), state
