import numpy as np
import pytest

from flowq.dqn import TrainHyper
from flowq.simulator import PhaseConfig, SynthDistConfig
from flowq.training import (
    TrainLog,
    Trainer,
    converged_bands,
    count_reversals,
    default_curriculum,
    evaluate,
    evaluate_grid,
    smoothed,
)

TINY_HYPER = TrainHyper(
    batch=16,
    episode_length=20,
    replay_capacity=400,
    learn_start=40,
    update_every=1,
)


def tiny_curriculum(episodes=(3, 3)):
    return [
        PhaseConfig(a=40.0, b=20.0, rho=1.0, episodes=episodes[0]),
        PhaseConfig(a=40.0, b=10.0, rho=0.7, episodes=episodes[1]),
    ]


class TestCurriculumDefaults:
    def test_four_phases(self):
        cur = default_curriculum()
        assert [(p.a, p.b) for p in cur] == [(40, 20), (40, 10), (20, 10), (20, 10)]
        assert [p.rho for p in cur] == [1.0, 1.0, 1.0, 0.7]
        assert all(p.rot_deg == 70.0 for p in cur)

    def test_axes_non_increasing(self):
        cur = default_curriculum()
        for prev, nxt in zip(cur, cur[1:]):
            assert nxt.a <= prev.a and nxt.b <= prev.b


class TestTrainLog:
    def test_append_monotonic(self):
        log = TrainLog()
        log.append(0, 1, 1.0)
        with pytest.raises(ValueError):
            log.append(0, 1, 2.0)

    def test_csv_round_trip(self, tmp_path):
        log = TrainLog()
        log.phase_starts = [0, 2]
        for i, (p, r) in enumerate([(1, 0.5), (1, -1.25), (2, 3.75), (2, 7.0)]):
            log.append(i, p, r)
        path = tmp_path / "log.csv"
        log.to_csv(path)
        back = TrainLog.from_csv(path)
        assert back.rows == log.rows
        assert back.phase_starts == log.phase_starts

    def test_summary_fields(self):
        log = TrainLog()
        for i in range(5):
            log.append(i, 1, float(i))
        doc = log.summary()
        assert doc["episodes"] == 5
        assert doc["phases"]["1"]["episodes"] == 5


class TestSmoothed:
    def test_window_average(self):
        out = smoothed([1.0, 2.0, 3.0, 4.0], window=2)
        assert out == [1.0, 1.5, 2.5, 3.5]

    def test_head_uses_short_window(self):
        out = smoothed([4.0, 8.0], window=30)
        assert out == [4.0, 6.0]


class TestTrainerDeterminism:
    def test_identical_seeds_identical_runs(self):
        a = Trainer(tiny_curriculum(), TINY_HYPER, seed=5)
        log_a = a.run()
        b = Trainer(tiny_curriculum(), TINY_HYPER, seed=5)
        log_b = b.run()
        assert log_a.rows == log_b.rows
        assert np.array_equal(a.policy.params.flat, b.policy.params.flat)
        assert np.array_equal(a.target.params.flat, b.target.params.flat)

    def test_different_seeds_differ(self):
        a = Trainer(tiny_curriculum(), TINY_HYPER, seed=5)
        b = Trainer(tiny_curriculum(), TINY_HYPER, seed=6)
        assert a.run().rows != b.run().rows

    def test_zero_episode_phase_is_noop(self):
        tr = Trainer([PhaseConfig(a=40, b=20, episodes=0)], TINY_HYPER, seed=0)
        before = tr.policy.params.flat.copy()
        log = tr.run()
        assert log.rows == []
        assert np.array_equal(tr.policy.params.flat, before)

    def test_phase_boundaries_recorded(self):
        tr = Trainer(tiny_curriculum(), TINY_HYPER, seed=1)
        log = tr.run()
        assert log.phase_starts == [0, 3]
        assert [p for _, p, _ in log.rows] == [1, 1, 1, 2, 2, 2]


class TestCheckpointResume:
    def test_resume_matches_uninterrupted(self, tmp_path):
        out_a = tmp_path / "a"
        out_a.mkdir()
        a = Trainer(tiny_curriculum((3, 4)), TINY_HYPER, seed=9, out_dir=str(out_a))
        log_a = a.run()

        b = Trainer.load(out_a / "checkpoint_phase1.npz")
        assert b.next_phase == 1
        log_b = b.run()
        assert np.array_equal(b.policy.params.flat, a.policy.params.flat)
        assert np.array_equal(b.target.params.flat, a.target.params.flat)
        assert b.optimizer.t == a.optimizer.t
        assert np.array_equal(b.optimizer.m.flat, a.optimizer.m.flat)
        phase2_rows = [row for row in log_a.rows if row[1] == 2]
        assert log_b.rows == phase2_rows

    def test_checkpoints_written_per_phase(self, tmp_path):
        tr = Trainer(tiny_curriculum(), TINY_HYPER, seed=2, out_dir=str(tmp_path))
        tr.run()
        assert (tmp_path / "checkpoint_phase1.npz").exists()
        assert (tmp_path / "checkpoint_phase2.npz").exists()
        assert (tmp_path / "trainlog.csv").exists()
        assert (tmp_path / "summary.json").exists()


class TestConvergenceHelpers:
    def test_converged_bands_accepts_tail_inside(self):
        qs = [300.0] * 80 + [100.0] * 20
        us = [230.0] * 80 + [210.0] * 20
        assert converged_bands(qs, us)

    def test_converged_bands_rejects_single_excursion(self):
        qs = [100.0] * 100
        us = [210.0] * 100
        qs[-3] = 115.0
        assert not converged_bands(qs, us)

    def test_converged_bands_edges_inclusive(self):
        assert converged_bands([90.0] * 20, [220.0] * 20)
        assert not converged_bands([89.9] * 20, [210.0] * 20)

    def test_short_series_not_converged(self):
        assert not converged_bands([100.0] * 5, [210.0] * 5)

    def test_count_reversals(self):
        assert count_reversals([5, -5, 5]) == 2
        assert count_reversals([5, 0, -5, 0, -5]) == 1
        assert count_reversals([0, 0, 0]) == 0
        assert count_reversals([]) == 0
        assert count_reversals([10, 10, -5, -10, 5]) == 2


class TestEvaluate:
    def test_rollout_shape_and_determinism(self):
        tr = Trainer(tiny_curriculum((1, 1)), TINY_HYPER, seed=3)
        tr.run()
        r1 = evaluate(tr.policy, 150.0, 190.0, steps=60, rho=0.7, seed=4)
        r2 = evaluate(tr.policy, 150.0, 190.0, steps=60, rho=0.7, seed=4)
        assert len(r1.rows) == 60
        assert r1.rows == r2.rows
        assert isinstance(r1.converged, bool)

    def test_eval_rho_one_has_no_misreports(self):
        tr = Trainer(tiny_curriculum((1, 1)), TINY_HYPER, seed=3)
        tr.run()
        res = evaluate(tr.policy, 100.0, 210.0, steps=30, rho=1.0, seed=5)
        assert all(r.shown_class == r.truth_class for r in res.rows)

    def test_grid_covers_21_starts(self):
        tr = Trainer(tiny_curriculum((1, 1)), TINY_HYPER, seed=3)
        tr.run()
        grid = evaluate_grid(tr.policy, rho=0.7, seed=0, steps=30)
        assert grid["total"] == 21
        assert set(grid["results"]) == {
            (q, u)
            for q in (30.0, 60.0, 80.0, 120.0, 150.0, 200.0, 300.0)
            for u in (190.0, 210.0, 230.0)
        }
