import numpy as np
import pytest

from netspc import sim
from netspc.policy import PolicyParams
from netspc.sim import (Scenario, StabilitySettings, TraceBatch, metrics,
                        one_step_residual, run_baseline, run_closed_loop,
                        shift_policy)
from netspc.stochastics import ChannelSpec, NoiseSpec, SaturationSpec


def make_scenario(demo_system, demo_weights, *, p=0.9, sigma=1.0, protocol="tp1",
                  mu=0.0, stability=False, steps=24, paths=2, x0=(10.0, 10.0, -10.0),
                  samples=20_000, mu_scale=sim.DEFAULT_MU_SCALE):
    A, B = demo_system
    Q, Q_f, R = demo_weights
    return Scenario(
        A=A, B=B, u_max=15.0, Q=Q, Q_f=Q_f, R=R, N=4, N_r=3, protocol=protocol,
        channel=ChannelSpec(kind="bernoulli_iid", p=p, seed=101),
        noise=NoiseSpec(covariance=sigma * np.eye(3), seed=202),
        sat=SaturationSpec(), mu=mu, mu_scale=mu_scale,
        stability=StabilitySettings(enabled=stability),
        steps=steps, paths=paths, x0=np.array(x0), moment_samples=samples)


class TestClosedLoop:
    def test_equilibrium_stays_at_zero(self, demo_system, demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=1.0, sigma=0.0,
                            x0=(0.0, 0.0, 0.0), steps=12, paths=1)
        batch = run_closed_loop(scn, cache_dir=str(tmp_path))
        assert np.abs(batch.x).max() <= 1e-6
        assert np.abs(batch.ua).max() <= 1e-6

    def test_perfect_channel_applies_computed_controls(self, demo_system,
                                                       demo_weights, tmp_path):
        for protocol in ("tp1", "tp2"):
            scn = make_scenario(demo_system, demo_weights, p=1.0, protocol=protocol,
                                steps=24, paths=2)
            batch = run_closed_loop(scn, cache_dir=str(tmp_path))
            assert np.array_equal(batch.ua, batch.u)
            assert np.all(batch.nu == 1)

    def test_reconstruction_is_bit_exact(self, demo_system, demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=0.4, sigma=2.0,
                            protocol="tp2", steps=24, paths=2)
        batch = run_closed_loop(scn, cache_dir=str(tmp_path))
        A, B = demo_system
        for p in range(batch.paths):
            for t in range(batch.steps):
                rec = one_step_residual(A, B, batch.x[p, t], batch.x[p, t + 1],
                                        batch.ua[p, t])
                assert np.array_equal(rec, batch.w_rec[p, t])

    def test_applied_controls_within_box(self, demo_system, demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=0.3, sigma=10.0,
                            protocol="tp2", mu=1000.0, stability=True,
                            steps=30, paths=3)
        batch = run_closed_loop(scn, cache_dir=str(tmp_path))
        assert np.abs(batch.ua).max() <= 15.0 + 1e-7
        assert np.abs(batch.u).max() <= 15.0 + 1e-7

    def test_step_padding_to_cycle_multiple(self, demo_system, demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, steps=10, paths=1)
        assert scn.steps_effective == 12
        batch = run_closed_loop(scn, cache_dir=str(tmp_path))
        assert batch.steps == 12

    def test_determinism_and_parallel_agreement(self, demo_system, demo_weights,
                                                tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=0.6, sigma=1.0,
                            protocol="tp2", mu=1000.0, stability=True,
                            steps=12, paths=4)
        b1 = run_closed_loop(scn, cache_dir=str(tmp_path))
        b2 = run_closed_loop(scn, cache_dir=str(tmp_path))
        b3 = run_closed_loop(scn, jobs=2, cache_dir=str(tmp_path))
        for a, b in ((b1, b2), (b1, b3)):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.ua, b.ua)
            assert np.array_equal(a.payload, b.payload)

    def test_transient_peak_not_exceeded_later(self, demo_system, demo_weights,
                                               tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=0.5, sigma=1.0,
                            stability=True, mu=1000.0, steps=120, paths=10)
        batch = run_closed_loop(scn, cache_dir=str(tmp_path))
        mean_sq = np.einsum("ptd,ptd->pt", batch.x, batch.x).mean(axis=0)
        assert mean_sq[60:].max() <= mean_sq[:60].max()

    def test_common_random_numbers_across_protocols(self, demo_system,
                                                    demo_weights, tmp_path):
        a = run_closed_loop(make_scenario(demo_system, demo_weights, p=0.5,
                                          protocol="tp1", steps=12, paths=2),
                            cache_dir=str(tmp_path))
        b = run_closed_loop(make_scenario(demo_system, demo_weights, p=0.5,
                                          protocol="tp2", steps=12, paths=2),
                            cache_dir=str(tmp_path))
        assert np.array_equal(a.nu, b.nu)   # same channel stream
        assert np.array_equal(a.w_rec.shape, b.w_rec.shape)


class TestBaselines:
    def test_ce_equals_proposed_in_deterministic_limit(self, demo_system,
                                                       demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=1.0, sigma=0.0,
                            mu=0.0, steps=24, paths=1)
        prop = run_closed_loop(scn, cache_dir=str(tmp_path))
        ce = run_baseline(scn, "ce_mpc", cache_dir=str(tmp_path))
        assert np.abs(prop.ua - ce.ua).max() <= 1e-4

    def test_packetized_equals_ce_at_p_one(self, demo_system, demo_weights,
                                           tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=1.0, sigma=1.0,
                            steps=24, paths=2)
        ce = run_baseline(scn, "ce_mpc", cache_dir=str(tmp_path))
        pk = run_baseline(scn, "packetized_mpc", cache_dir=str(tmp_path))
        assert np.array_equal(ce.ua, pk.ua)
        assert np.array_equal(ce.x, pk.x)

    def test_disturbance_only_matches_proposed_at_p_one(self, demo_system,
                                                        demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=1.0, sigma=1.0,
                            mu=0.0, steps=24, paths=2)
        prop = run_closed_loop(scn, cache_dir=str(tmp_path))
        spc = run_baseline(scn, "spc_disturbance_only", cache_dir=str(tmp_path))
        assert np.abs(prop.ua - spc.ua).max() <= 1e-4

    def test_dropout_only_runs_and_ignores_noise_gain(self, demo_system,
                                                      demo_weights, tmp_path):
        scn = make_scenario(demo_system, demo_weights, p=0.5, sigma=1.0,
                            mu=0.0, steps=12, paths=1)
        batch = run_baseline(scn, "dropout_only", cache_dir=str(tmp_path))
        assert batch.steps == 12

    def test_unknown_baseline_rejected(self, demo_system, demo_weights):
        scn = make_scenario(demo_system, demo_weights)
        with pytest.raises(ValueError):
            run_baseline(scn, "proposed")


class TestMetrics:
    def _batch(self, x, ua, cost, null):
        paths, T1, d = x.shape
        T = T1 - 1
        m = ua.shape[2]
        return TraceBatch(x=x, u=ua.copy(), ua=ua,
                          nu=np.ones((paths, T)), payload=np.ones((paths, T)),
                          stage_cost=cost, null_flag=null,
                          w_rec=np.zeros((paths, T, d)), mode="proposed",
                          protocol="tp1")

    def test_zero_trace(self):
        b = self._batch(np.zeros((1, 5, 2)), np.zeros((1, 4, 1)),
                        np.zeros((1, 4)), np.zeros((1, 4)))
        m = metrics(b)
        assert m["msb"] == 0 and m["actuator_energy"] == 0
        assert m["sparsity_pct"] == 0 and m["avg_cost"] == 0

    def test_constant_unit_state(self):
        x = np.zeros((1, 5, 2))
        x[:, :, 0] = 1.0
        b = self._batch(x, np.zeros((1, 4, 1)), np.zeros((1, 4)), np.zeros((1, 4)))
        m = metrics(b)
        assert m["msb"] == 1.0 and m["msb_time_avg"] == 1.0
        assert m["msb_tail_avg"] == 1.0
        assert m["actuator_energy"] == 0.0

    def test_path_average_then_max(self):
        # two paths with squared norms {2, 4} at one instant, <= 1 elsewhere
        x = np.zeros((2, 3, 1))
        x[0, 1, 0] = np.sqrt(2)
        x[1, 1, 0] = 2.0
        b = self._batch(x, np.zeros((2, 2, 1)), np.zeros((2, 2)), np.zeros((2, 2)))
        assert metrics(b)["msb"] == pytest.approx(3.0)

    def test_sparsity_share(self):
        null = np.array([[1, 0, 0, 1]])
        b = self._batch(np.zeros((1, 5, 1)), np.zeros((1, 4, 1)),
                        np.zeros((1, 4)), null)
        assert metrics(b)["sparsity_pct"] == pytest.approx(50.0)


class TestShiftPolicy:
    def test_shift_moves_stages_forward(self):
        rng = np.random.default_rng(0)
        from _helpers import random_params
        params = random_params(4, 2, 3, rng)
        shifted = shift_policy(params, 3)
        assert np.array_equal(shifted.eta[:2], params.eta[6:])
        assert np.array_equal(shifted.eta[2:], np.zeros(6))
        shifted.check_structure()

    def test_full_shift_zeroes(self):
        params = PolicyParams(eta=np.ones(4), Theta=np.zeros((4, 9)),
                              Lambda=np.zeros((4, 3)), N=4, m=1, d=3)
        shifted = shift_policy(params, 4)
        assert np.abs(shifted.eta).max() == 0.0
