"""Optimizer, schedule, training loop, and gradient-check plumbing."""

import math

import numpy as np
import numpy.testing as npt
import pytest

import oracles
from ppvit import (AdamWState, ConfigError, DivergenceError, NonFiniteError,
                   SyntheticDataset, Tensor, TrainConfig, adamw_step,
                   build_model, evaluate, gradcheck_suite, lr_at, preset,
                   train)
from ppvit.training import records_to_csv


def nano_setup(num_classes=2, steps=5, samples=8, seed=0):
    cfg = preset("nano", num_classes=num_classes)
    net = build_model(cfg, seed=seed)
    ds = SyntheticDataset("blobs", samples, 32, num_classes, seed=3)
    tc = TrainConfig(lr=1e-3, weight_decay=0.01, warmup_steps=2,
                     total_steps=steps, batch_size=4, seed=1)
    return net, ds, tc


class TestSchedule:
    TC = TrainConfig(lr=0.4, warmup_steps=10, total_steps=40)

    def test_starts_at_zero(self):
        assert lr_at(self.TC, 0) == 0.0

    def test_warmup_is_linear(self):
        assert lr_at(self.TC, 5) == pytest.approx(0.2)
        assert lr_at(self.TC, 1) == pytest.approx(0.04)

    def test_peak_at_warmup_end(self):
        assert lr_at(self.TC, 10) == pytest.approx(0.4)

    def test_cosine_midpoint(self):
        assert lr_at(self.TC, 25) == pytest.approx(0.2)

    def test_ends_at_zero(self):
        assert abs(lr_at(self.TC, 40)) < 1e-12 * self.TC.lr + 1e-18

    def test_no_warmup_starts_at_peak(self):
        tc = TrainConfig(lr=0.4, warmup_steps=0, total_steps=10)
        assert lr_at(tc, 0) == pytest.approx(0.4)

    def test_step_range_enforced(self):
        with pytest.raises(ConfigError):
            lr_at(self.TC, -1)
        with pytest.raises(ConfigError):
            lr_at(self.TC, 41)

    def test_warmup_longer_than_run_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=11, total_steps=10)


class TestAdamW:
    def test_zero_grad_zero_decay_is_identity(self):
        p = Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
        before = p.data.copy()
        named = [("p", p)]
        state = AdamWState.for_params(named)
        tc = TrainConfig(lr=0.1, weight_decay=0.0, total_steps=10)
        adamw_step(named, [np.zeros(3)], state, tc, 1)
        npt.assert_array_equal(p.data, before)

    def test_single_step_descends_quadratic(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        named = [("p", p)]
        state = AdamWState.for_params(named)
        tc = TrainConfig(lr=0.1, weight_decay=0.0, warmup_steps=0,
                         total_steps=10)
        adamw_step(named, [2.0 * p.data], state, tc, 1)
        assert 0 < p.data[0] < 1.0

    def test_five_step_trajectory_matches_hand_oracle(self):
        tc = TrainConfig(lr=0.05, weight_decay=0.1, warmup_steps=2,
                         total_steps=5)
        x0 = np.array([1.0, -3.0, 0.5])
        p = Tensor(x0.copy(), requires_grad=True)
        named = [("p", p)]
        state = AdamWState.for_params(named)
        mine = []
        for step in range(1, 6):
            adamw_step(named, [2.0 * p.data], state, tc, step)
            mine.append(p.data.copy())
        ref = oracles.adamw_hand(x0, lambda x: 2.0 * x,
                                 lambda t: lr_at(tc, t), 0.1, 5)
        for a, b in zip(mine, ref):
            npt.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_applied_lr_is_returned(self):
        tc = TrainConfig(lr=0.4, warmup_steps=10, total_steps=40)
        p = Tensor(np.ones(2), requires_grad=True)
        named = [("p", p)]
        state = AdamWState.for_params(named)
        assert adamw_step(named, [np.ones(2)], state, tc, 5) == lr_at(tc, 5)

    def test_nan_gradient_names_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        named = [("stem.conv.weight", p)]
        state = AdamWState.for_params(named)
        tc = TrainConfig(total_steps=5)
        with pytest.raises(NonFiniteError, match="stem.conv.weight"):
            adamw_step(named, [np.array([1.0, np.nan])], state, tc, 1)

    def test_misaligned_grads_rejected(self):
        p = Tensor(np.ones(2), requires_grad=True)
        named = [("p", p)]
        state = AdamWState.for_params(named)
        tc = TrainConfig(total_steps=5)
        with pytest.raises(ConfigError):
            adamw_step(named, [np.ones(2), np.ones(2)], state, tc, 1)
        with pytest.raises(ConfigError):
            adamw_step(named, [np.ones(3)], state, tc, 1)


class TestTrainLoop:
    def test_two_runs_identical(self):
        net_a, ds, tc = nano_setup()
        net_b, _, _ = nano_setup()
        assert train(net_a, ds, tc) == train(net_b, ds, tc)

    def test_one_record_per_step(self):
        net, ds, tc = nano_setup(steps=4)
        records = train(net, ds, tc)
        assert [r.step for r in records] == [1, 2, 3, 4]

    def test_recorded_lr_follows_schedule(self):
        net, ds, tc = nano_setup(steps=6)
        for rec in train(net, ds, tc):
            assert rec.lr == lr_at(tc, min(rec.step, tc.total_steps))

    def test_class_count_mismatch(self):
        net, _, tc = nano_setup(num_classes=2)
        ds = SyntheticDataset("blobs", 8, 32, 4, seed=3)
        with pytest.raises(ConfigError, match="classes"):
            train(net, ds, tc)

    def test_batch_larger_than_dataset(self):
        net, ds, _ = nano_setup()
        tc = TrainConfig(total_steps=2, batch_size=16)
        with pytest.raises(ConfigError):
            train(net, ds, tc)

    def test_divergence_reports_step(self):
        # normalization rescales mere magnitude away, so poison a weight
        # outright; the first forward pass must trip the finite guard
        net, ds, tc = nano_setup(steps=3)
        net.stem.weight.data[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError, match="diverged at step 1") as exc:
            train(net, ds, tc)
        assert exc.value.step == 1

    def test_artifacts_written(self, tmp_path):
        from ppvit import load_checkpoint

        net, ds, tc = nano_setup(steps=3)
        metrics = tmp_path / "metrics.csv"
        ckpt = tmp_path / "model.ckpt"
        records = train(net, ds, tc, metrics_path=metrics, checkpoint_path=ckpt)
        assert metrics.read_text() == records_to_csv(records)
        _, manifest = load_checkpoint(ckpt)
        assert manifest["extra"]["steps"] == 3
        assert manifest["extra"]["final_loss"] == records[-1].loss

    def test_evaluate_bounds(self):
        net, ds, _ = nano_setup()
        loss, acc = evaluate(net, ds, batch_size=3)
        assert math.isfinite(loss) and loss > 0
        assert 0.0 <= acc <= 1.0


class TestMetricsCsv:
    def test_schema_and_round_trip(self):
        net, ds, tc = nano_setup(steps=3)
        records = train(net, ds, tc)
        lines = records_to_csv(records).strip().splitlines()
        assert lines[0] == "step,loss,train_accuracy,lr"
        assert len(lines) == 4
        for line, rec in zip(lines[1:], records):
            step, loss, acc, lr = line.split(",")
            assert int(step) == rec.step
            assert float(loss) == pytest.approx(rec.loss, abs=1e-8)
            assert float(acc) == pytest.approx(rec.train_accuracy, abs=1e-6)
            assert float(lr) == pytest.approx(rec.lr, rel=1e-9)


class TestOverfitDynamics:
    """Sanity properties of the frozen desk-scale run (shared fixture)."""

    def test_lr_trace_pointwise(self, overfit_run):
        _, _, tc, records = overfit_run
        for rec in records:
            assert rec.lr == lr_at(tc, min(rec.step, tc.total_steps))

    def test_loss_trend_after_warmup(self, overfit_run):
        _, _, tc, records = overfit_run
        losses = np.array([r.loss for r in records])
        window = 25
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        lag = 100
        for i in range(tc.warmup_steps, len(smooth) - lag):
            assert smooth[i + lag] <= 1.05 * smooth[i] + 1e-9

    def test_final_loss_far_below_start(self, overfit_run):
        _, _, _, records = overfit_run
        assert records[-1].loss < 0.05 * records[0].loss


class TestGradcheckPlumbing:
    def test_unknown_scope_rejected(self):
        with pytest.raises(ConfigError):
            gradcheck_suite("everything")

    def test_ops_scope_reports_cases(self):
        report = gradcheck_suite("ops")
        assert report.scope == "ops"
        assert len(report.cases) > 20
        assert report.all_passed
        for case in report.cases:
            assert case.max_rel_err < case.tolerance
