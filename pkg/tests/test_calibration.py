import json
import math

import numpy as np
import pytest

from stepquant.calibration import (CalibrationConfig, CalibState, build_calibration_round,
                                   criterion_s1, criterion_s2, run_calibration, select_timestep,
                                   selection_scores)
from stepquant.diffusion import Architecture, default_schedule, init_params
from stepquant.groupsearch import GroupSearchState
from stepquant.quantizer import quantize_weights


def frozen_state(T, sigma):
    st = GroupSearchState(T, len(sigma[0]), {"fc1": 1.0}, 8, 0.8,
                          np.log(np.maximum(np.asarray(sigma, dtype=np.float64), 1e-300)))
    return st


class TestCriteria:
    def test_s1_examples(self):
        assert criterion_s1(frozen_state(1, [[1 / 8] * 8]), 1) == pytest.approx(2.07944, abs=1e-5)
        assert criterion_s1(frozen_state(1, [[1.0, 0.0]]), 1) == pytest.approx(0.0, abs=1e-12)
        assert criterion_s1(frozen_state(1, [[0.9, 0.1]]), 1) == pytest.approx(0.32508, abs=1e-5)

    def test_s1_cold_start_is_uniform(self):
        assert criterion_s1(None, 5, 8) == pytest.approx(math.log(8))

    def test_s2_examples(self):
        c = CalibState(4)
        c.counts[:] = [0, 3, 10, 1000]
        assert criterion_s2(c, 1) == 1.0 and criterion_s2(c, 2) == 0.25
        vals = [criterion_s2(c, t) for t in (1, 2, 3, 4)]
        assert vals == sorted(vals, reverse=True) and vals[-1] < 1e-3


class TestSelection:
    def test_cold_tie_picks_first(self):
        c = CalibState(10, eta=1.5)
        t, rec = select_timestep(frozen_state(10, [[1.0, 0.0]] * 10), c, None)
        assert t == 1 and rec["score"] == pytest.approx(1.5)
        assert c.counts.tolist() == [1] + [0] * 9

    def test_least_sampled_wins(self):
        c = CalibState(2, eta=1.5)
        c.counts[:] = [2, 0]
        t, _ = select_timestep(frozen_state(2, [[0.5, 0.5]] * 2), c, None)
        assert t == 2

    @pytest.mark.parametrize("k", [1, 3])
    def test_coverage_law(self, k):
        T = 20
        st = frozen_state(T, [[0.25] * 4] * T)
        c = CalibState(T, eta=1.5)
        order = []
        for r in range(k * T):
            t, _ = select_timestep(st, c, None, 4)
            order.append(t)
            assert c.counts.max() - c.counts.min() <= 1
        assert c.counts.tolist() == [k] * T
        assert order[:T] == list(range(1, T + 1))

    def test_eta_zero_is_entropy_argmax(self):
        sig = [[0.5, 0.5], [0.9, 0.1], [1.0, 0.0]]
        c = CalibState(3, eta=0.0)
        c.counts[:] = [50, 0, 0]
        assert select_timestep(frozen_state(3, sig), c, None)[0] == 1

    def test_large_eta_is_least_sampled(self):
        sig = [[0.5, 0.5], [0.9, 0.1], [1.0, 0.0]]
        c = CalibState(3, eta=1e6)
        c.counts[:] = [1, 1, 0]
        assert select_timestep(frozen_state(3, sig), c, None)[0] == 3

    def test_ucb_full_score(self):
        c = CalibState(3, eta=2.0, strategy="ucb-full")
        c.counts[:] = [4, 1, 0]
        st = frozen_state(3, [[0.5, 0.5]] * 3)
        _, explore, score = selection_scores(st, c)
        expected = np.sqrt(np.log(6.0) / np.array([5.0, 2.0, 1.0]))
        np.testing.assert_allclose(explore, expected)
        np.testing.assert_allclose(score, math.log(2) + 2.0 * expected)

    def test_random_is_uniform_and_seeded(self):
        a = CalibState(10, strategy="random")
        b = CalibState(10, strategy="random")
        ra, rb = np.random.default_rng(0), np.random.default_rng(0)
        ta = [select_timestep(None, a, ra)[0] for _ in range(5000)]
        tb = [select_timestep(None, b, rb)[0] for _ in range(5000)]
        assert ta == tb and set(ta) == set(range(1, 11))
        assert np.all(np.abs(a.counts / 5000 - 0.1) < 0.02)

    def test_heuristic_clamped_and_centred(self):
        c = CalibState(100, strategy="heuristic")
        rng = np.random.default_rng(1)
        ts = np.array([select_timestep(None, c, rng)[0] for _ in range(4000)])
        assert ts.min() >= 1 and ts.max() <= 100
        assert c.heuristic_mu == 40.0
        inner = ts[(ts > 1) & (ts < 100)]
        assert abs(np.median(inner) - 40) < 6

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            CalibState(10, strategy="greedy")

    def test_counts_track_rounds(self):
        c = CalibState(5, strategy="random")
        rng = np.random.default_rng(2)
        for r in range(1, 8):
            select_timestep(None, c, rng)
            assert c.rounds == r == c.counts.sum()


@pytest.fixture(scope="module")
def small_model():
    p = init_params(Architecture(emb_dim=8, hidden=(16, 16)), np.random.default_rng(0))
    return p, default_schedule()


class TestRounds:
    def test_round_at_T_is_gaussian_draw(self, small_model):
        p, s = small_model
        x = build_calibration_round(p, s, s.T, 8, np.random.default_rng(3))
        np.testing.assert_array_equal(x, np.random.default_rng(3).standard_normal((8, 2)))

    def test_same_seed_same_round(self, small_model):
        p, s = small_model
        a = build_calibration_round(p, s, 17, 8, np.random.default_rng(3))
        b = build_calibration_round(p, s, 17, 8, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_state_add_validates(self):
        c = CalibState(5)
        with pytest.raises(ValueError):
            c.add(np.zeros((2, 2)), 6)


def small_config(**kw):
    base = dict(n_groups=4, calib_size=128, round_size=32, batch_size=32, epochs=2)
    base.update(kw)
    return CalibrationConfig(**base)


class TestRun:
    def test_default_sized_set(self, small_model):
        p, s = small_model
        qp, wq = quantize_weights(p, 8)
        cfg = small_config(calib_size=1024, round_size=64, batch_size=64, epochs=0)
        res = run_calibration(p, qp, wq, s, cfg, np.random.default_rng(0))
        assert res.calib.size == 1024 and res.calib.rounds == 16

    def test_single_round(self, small_model):
        p, s = small_model
        qp, wq = quantize_weights(p, 8)
        cfg = small_config(calib_size=64, round_size=64, batch_size=64, epochs=0)
        res = run_calibration(p, qp, wq, s, cfg, np.random.default_rng(0))
        assert res.calib.size == 64 and res.calib.counts.sum() == 1
        assert np.count_nonzero(res.calib.counts) == 1

    def test_strategies_share_shape(self, small_model):
        p, s = small_model
        qp, wq = quantize_weights(p, 8)
        out = {}
        for strategy in ("active", "random"):
            out[strategy] = run_calibration(p, qp, wq, s, small_config(strategy=strategy),
                                            np.random.default_rng(4))
        a, r = out["active"], out["random"]
        assert len(a.steps) == len(r.steps) and len(a.selections) == len(r.selections)
        assert a.calib.size == r.calib.size
        assert a.calib.counts.tolist() != r.calib.counts.tolist()

    def test_assignment_and_tables(self, small_model):
        p, s = small_model
        qp, wq = quantize_weights(p, 6)
        res = run_calibration(p, qp, wq, s, small_config(act_bits=6), np.random.default_rng(1))
        g = res.assignment.groups
        assert g.shape == (100,) and g.min() >= 0 and g.max() < 4
        assert sorted(res.tables) == ["fc0", "fc1", "fc2"]
        assert all(len(t.groups) == 4 for t in res.tables.values())
        assert all(q.bits == 6 and q.scale > 0 for q in res.tables["fc1"].groups)

    def test_logs(self, small_model, tmp_path):
        p, s = small_model
        qp, wq = quantize_weights(p, 8)
        res = run_calibration(p, qp, wq, s, small_config(), np.random.default_rng(1))
        res.write_logs(tmp_path)
        sel = (tmp_path / "selections.csv").read_text().splitlines()
        assert sel[0] == "round,strategy,t,s1,s2,score" and len(sel) == 1 + 4
        hist = json.loads((tmp_path / "counts.json").read_text())
        assert sum(hist["counts"]) == 4 and hist["size"] == 128
        assert len((tmp_path / "counts_history.csv").read_text().splitlines()) == 5
        assert (tmp_path / "loss.csv").exists() and (tmp_path / "sigma.csv").exists()
        trace = res.entropy_trace()
        assert trace[0]["epoch"] == 0 and len(trace) == 1 + 4 + 2

    def test_initial_lr(self):
        assert CalibrationConfig(act_bits=8).initial_lr() == 5e-3
        assert CalibrationConfig(act_bits=6).initial_lr() == 3e-3
        assert CalibrationConfig(lr=1e-2).initial_lr() == 1e-2

    def test_too_small_for_a_round(self, small_model):
        p, s = small_model
        qp, wq = quantize_weights(p, 8)
        with pytest.raises(ValueError):
            run_calibration(p, qp, wq, s, small_config(calib_size=16), np.random.default_rng(0))
