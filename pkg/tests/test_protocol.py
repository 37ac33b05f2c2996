import itertools

import numpy as np
import pytest

from netspc.policy import PolicyParams, evaluate_controls
from netspc.protocol import (ActuatorState, BufferUnderrun, Packet, ProtocolSpec,
                             actuator_step, applied_controls, build_G, build_S,
                             g_diagonal, make_packet, rho_sequence, s_diagonal)
from _helpers import random_params


class TestRho:
    @pytest.mark.parametrize("nu,expected", [
        ([1, 0, 0], [1, 1, 1]),
        ([0, 1, 0], [0, 1, 1]),
        ([0, 0, 0], [0, 0, 0]),
    ])
    def test_examples(self, nu, expected):
        assert rho_sequence(np.array(nu)).tolist() == expected

    def test_monotone(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            rho = rho_sequence(rng.integers(0, 2, 8))
            assert np.all(np.diff(rho) >= 0)


class TestGates:
    def test_S_identity(self):
        assert np.array_equal(build_S([1, 1], 2, 2, 1), np.eye(2))

    def test_S_simple(self):
        assert np.array_equal(build_S([0, 1], 2, 2, 1), np.diag([0.0, 1.0]))

    def test_S_trailing_identity(self):
        assert np.array_equal(build_S([1, 0, 0], 4, 3, 1), np.diag([1.0, 0, 0, 1.0]))

    def test_G_all_success(self):
        G = build_G([1, 1, 1], 4, 3, 1)
        assert G.shape == (4, 3)
        assert np.array_equal(G, np.vstack([np.eye(3), np.zeros((1, 3))]))

    def test_G_partial(self):
        # N=3, N_r=2, nu=(0,1): diagonal blocks are (rho0, rho1) = (0, 1)
        G = build_G([0, 1], 3, 2, 1)
        assert np.array_equal(G, np.array([[0.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))

    def test_G_all_drop(self):
        assert np.array_equal(build_G([0, 0], 3, 2, 1), np.zeros((3, 2)))

    def test_G_block_structure_multi_input(self):
        G = build_G([0, 1], 3, 2, 2)
        assert G.shape == (6, 4)
        # row block 2 passes (rho_1 = 1), others zero
        assert np.array_equal(G[2:4, 2:4], np.eye(2))
        assert np.abs(G).sum() == 2.0

    def test_nonexpansive(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            N, N_r, m = 4, 3, 2
            nu = rng.integers(0, 2, N_r)
            S = build_S(nu, N, N_r, m)
            v = rng.standard_normal(m * N)
            assert np.abs(S @ v).max() <= np.abs(v).max() + 1e-15
            G = build_G(nu, N, N_r, m)
            # each row has at most one nonzero entry, equal to 0 or 1
            assert np.all((np.abs(G) > 0).sum(axis=1) <= 1)
            assert set(np.unique(G)) <= {0.0, 1.0}


class TestAppliedControls:
    def test_all_success_matches_computed(self):
        rng = np.random.default_rng(2)
        params = random_params(4, 1, 3, rng)
        e = rng.standard_normal(9)
        nu = np.ones(3)
        u = evaluate_controls(params, e, nu)
        for kind in ("tp1", "tp2"):
            spec = ProtocolSpec(kind=kind, N=4, N_r=3)
            ua = applied_controls(spec, params, e, nu)
            assert np.abs(ua[:3] - u[:3]).max() <= 1e-12

    @pytest.mark.parametrize("kind", ["tp1", "tp2"])
    def test_all_drop_zero_prefix(self, kind):
        rng = np.random.default_rng(3)
        params = random_params(4, 1, 3, rng)
        e = rng.standard_normal(9)
        spec = ProtocolSpec(kind=kind, N=4, N_r=3)
        ua = applied_controls(spec, params, e, np.zeros(3))
        assert np.array_equal(ua[:3], np.zeros(3))


def emulate_cycle(kind, params, e, nu, N, N_r, m):
    """Event-level cycle: per-instant packets through the channel into the
    actuator; returns the applied control blocks.

    The controller only ever knows the features observed so far; the zero
    padding stands in for the unknown future entries, which multiply
    structural zeros of the gains.
    """
    spec = ProtocolSpec(kind=kind, N=N, N_r=N_r)
    state = ActuatorState(kind=kind, m=m)
    applied = np.empty(m * N_r)
    any_ack = False
    d = params.d
    e = np.asarray(e, dtype=float)
    e_known = np.zeros(d * (N - 1))
    nu_hist = np.zeros(N - 1)
    for ell in range(N_r):
        feedback = params.Theta @ e_known + params.Lambda @ nu_hist
        u_ell = params.eta[ell * m:(ell + 1) * m] + feedback[ell * m:(ell + 1) * m]
        packet = make_packet(spec, params.eta, u_ell, ell, m,
                             burst_active=(kind == "tp2" and not any_ack))
        block, state = actuator_step(state, packet if nu[ell] else None, ell)
        applied[ell * m:(ell + 1) * m] = block
        any_ack = any_ack or bool(nu[ell])
        if ell < N - 1:
            nu_hist[ell] = nu[ell]
            e_known[ell * d:(ell + 1) * d] = e[ell * d:(ell + 1) * d]
    return applied


class TestActuatorEventEquivalence:
    @pytest.mark.parametrize("kind", ["tp1", "tp2"])
    def test_matches_matrix_form_on_all_patterns(self, kind):
        rng = np.random.default_rng(4)
        N, N_r, m, d = 4, 3, 2, 2
        for trial in range(5):
            params = random_params(N, m, d, rng)
            e = rng.standard_normal(d * (N - 1))
            for bits in itertools.product((0, 1), repeat=N_r):
                nu = np.array(bits + (0,) * (max(N_r, N - 1) - N_r), dtype=float)
                spec = ProtocolSpec(kind=kind, N=N, N_r=N_r)
                ua = applied_controls(spec, params, e, nu)[: m * N_r]
                ev = emulate_cycle(kind, params, e, bits, N, N_r, m)
                assert np.array_equal(ev, ua), (kind, bits, trial)

    def test_tp1_drop_applies_zero(self):
        state = ActuatorState(kind="tp1", m=2)
        block, state = actuator_step(state, None, 0)
        assert np.array_equal(block, np.zeros(2))

    def test_tp2_buffer_bridging(self):
        eta = np.arange(1.0, 5.0)
        spec = ProtocolSpec(kind="tp2", N=4, N_r=3)
        state = ActuatorState(kind="tp2", m=1)
        # drop at 0, success with burst at 1, drop at 2 -> buffered eta[2]
        b0, state = actuator_step(state, None, 0)
        pkt = make_packet(spec, eta, np.array([9.0]), 1, 1, burst_active=True)
        assert pkt.payload_scalars == 2  # control + one remaining offset block
        b1, state = actuator_step(state, pkt, 1)
        b2, state = actuator_step(state, None, 2)
        assert (b0.tolist(), b1.tolist(), b2.tolist()) == ([0.0], [9.0], [3.0])

    def test_tp2_underrun_on_malformed_packet(self):
        state = ActuatorState(kind="tp2", m=1)
        _, state = actuator_step(state, Packet(control=np.array([1.0])), 0)
        with pytest.raises(BufferUnderrun):
            actuator_step(state, None, 1)

    def test_payload_sizes(self):
        spec = ProtocolSpec(kind="tp2", N=4, N_r=3)
        eta = np.zeros(4)
        full = make_packet(spec, eta, np.zeros(1), 0, 1, burst_active=True)
        assert full.payload_scalars == 3   # control + offsets for instants 1, 2
        bare = make_packet(spec, eta, np.zeros(1), 0, 1, burst_active=False)
        assert bare.payload_scalars == 1
        tp1 = make_packet(ProtocolSpec(kind="tp1", N=4, N_r=3), eta, np.zeros(1),
                          0, 1, burst_active=True)
        assert tp1.payload_scalars == 1
