import io
import json
import math

import numpy as np
import pytest

from dss.autograd import Parameter, Tensor
from dss.dssformer import BlockConfig, Encoder, EncoderConfig, Variant
from dss.errors import DivergenceError, DomainError, NumericError, UsageError
from dss.layer import DssModule, dss_kernel
from dss.training import (
    METRIC_FIELDS,
    AdamW,
    EigenTracker,
    EigenTrajectory,
    OptimizerConfig,
    Task,
    ToyModel,
    ToyTaskSpec,
    backward,
    grad_check,
    make_dataset,
    numeric_grad_check,
    one_cycle_lr,
    track_eigen_trajectories,
    train_toy,
    write_metrics,
)

SMALL = BlockConfig(model_dim=4, ffn_dim=8, heads=2, head_dim=2, dss_states=4)


class TestBackward:
    def test_disconnected_parameters_get_exact_zeros(self):
        model = ToyModel(EncoderConfig(SMALL), ToyTaskSpec(sequence_length=8))
        x = np.random.default_rng(0).standard_normal((2, 1, 8))
        grads = backward(model.encoder.input_proj(x).sum(), model)
        for name, g in grads.items():
            if name.startswith("encoder.input_proj"):
                assert np.any(g != 0)
            else:
                assert np.array_equal(g, np.zeros_like(g)), name

    def test_unrecorded_graph_is_usage_error(self):
        model = ToyModel(EncoderConfig(SMALL), ToyTaskSpec(sequence_length=8))
        with pytest.raises(UsageError):
            backward(Tensor(np.array(1.0)), model)
        with pytest.raises(UsageError):
            Tensor(np.ones(3)).backward()

    def test_gradient_shapes_mirror_parameters(self):
        model = ToyModel(EncoderConfig(SMALL), ToyTaskSpec(sequence_length=8))
        x, y = make_dataset(model._task, 3, np.random.default_rng(1))
        grads = backward(model.loss(x, y)[0], model)
        for name, p in model.named_parameters():
            assert grads[name].shape == p.shape
            assert np.all(np.isfinite(grads[name]))


class TestGradCheck:
    def test_quadratic_loss_on_w(self):
        rng = np.random.default_rng(2)
        m = DssModule(1, 2, rng)  # h = 2 channels, N = 2
        named = [("w_re", m.w_re), ("w_im", m.w_im)]

        def loss():
            k = dss_kernel(m.eig_re, m.eig_im, m.w_re, m.w_im, m.log_delta, 8)
            return 0.5 * (k * k).sum()

        assert numeric_grad_check(loss, named, 1e-5).max_rel_error <= 1e-7

    def test_full_module(self):
        rng = np.random.default_rng(3)
        m = DssModule(4, 4, rng)  # d=4, h=8, N=4
        for p in m.parameters():
            p.data += 0.1 * rng.standard_normal(p.shape)
        x = rng.standard_normal((4, 16))
        proj = rng.standard_normal((4, 16))
        report = numeric_grad_check(lambda: (m(x) * proj).sum(), m.named_parameters(), 5e-5)
        assert report.max_rel_error <= 1e-5, report.per_parameter

    @pytest.mark.parametrize("variant", list(Variant))
    def test_end_to_end(self, variant):
        cfg = EncoderConfig(BlockConfig(model_dim=4, ffn_dim=8, heads=2, head_dim=2, dss_states=4, variant=variant))
        report = grad_check(cfg, seed=0, epsilon=5e-5)
        assert report.max_rel_error <= 1e-5, report.worst()
        assert report.coordinates == Encoder(cfg).num_parameters()

    def test_halving_epsilon_is_consistent(self):
        cfg = EncoderConfig(SMALL, seed=1)
        coarse = grad_check(cfg, seed=1, epsilon=1e-4).max_rel_error
        fine = grad_check(cfg, seed=1, epsilon=5e-5).max_rel_error
        assert fine <= 4 * coarse

    def test_preconditions(self):
        p = Parameter(np.ones(2))
        with pytest.raises(DomainError):
            numeric_grad_check(lambda: (p * p).sum(), [("p", p)], 1e-3)
        q = Parameter(np.ones(2, dtype=np.float32))
        with pytest.raises(DomainError):
            numeric_grad_check(lambda: (q * q).sum(), [("q", q)], 1e-5)
        with pytest.raises(NumericError):
            numeric_grad_check(lambda: (p * np.inf).sum(), [("p", p)], 1e-5)


class TestSchedule:
    def test_endpoints_and_peak(self):
        total, peak, floor = 100, 1e-2, 1e-3
        assert one_cycle_lr(0, total, peak, floor, 0.3) == floor
        assert one_cycle_lr(30, total, peak, floor, 0.3) == peak
        assert one_cycle_lr(100, total, peak, floor, 0.3) == 0.0

    def test_piecewise_linear(self):
        total, peak, floor = 100, 1e-2, 1e-3
        assert one_cycle_lr(15, total, peak, floor, 0.3) == pytest.approx((floor + peak) / 2, rel=1e-14)
        assert one_cycle_lr(65, total, peak, floor, 0.3) == pytest.approx(peak / 2, rel=1e-14)
        lrs = [one_cycle_lr(s, total, peak, floor, 0.3) for s in range(total + 1)]
        assert np.all(np.diff(lrs[:31]) > 0) and np.all(np.diff(lrs[30:]) < 0)
        assert np.allclose(np.diff(lrs[30:], 2), 0, atol=1e-15)


class TestAdamW:
    def _params(self):
        return [("lin.weight", Parameter(np.ones((2, 2)))), ("lin.bias", Parameter(np.ones((2, 1))))]

    def test_zero_gradient_without_decay_is_exact_noop(self):
        params = self._params()
        for _, p in params:
            p.grad = np.zeros_like(p.data)
        AdamW(params, OptimizerConfig(weight_decay=0.0)).step(0.1)
        for _, p in params:
            assert np.array_equal(p.data, np.ones_like(p.data))

    def test_zero_gradient_with_decay_only_decays(self):
        params = self._params()
        for _, p in params:
            p.grad = np.zeros_like(p.data)
        AdamW(params, OptimizerConfig(weight_decay=0.5)).step(0.1)
        np.testing.assert_array_equal(params[0][1].data, np.full((2, 2), 1 - 0.1 * 0.5))
        np.testing.assert_array_equal(params[1][1].data, np.ones((2, 1)))  # biases are not decayed

    def test_eigen_multiplier_and_first_step_size(self):
        params = [("m.eig_re", Parameter(np.zeros(3))), ("m.w_re", Parameter(np.zeros(3)))]
        for _, p in params:
            p.grad = np.array([1.0, -2.0, 0.5])
        AdamW(params, OptimizerConfig(eigen_lr_multiplier=0.1)).step(0.01)
        # a bias-corrected first Adam step moves each coordinate by lr * sign(g)
        np.testing.assert_allclose(params[1][1].data, -0.01 * np.sign(params[1][1].grad), rtol=1e-6)
        np.testing.assert_allclose(params[0][1].data, -0.001 * np.sign(params[0][1].grad), rtol=1e-6)

    def test_gradient_clipping(self):
        a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        opt = AdamW([("a.w", a), ("b.w", b)], OptimizerConfig(grad_clip=1.0, weight_decay=0.0))
        opt.step(0.1)
        np.testing.assert_allclose(opt.m["a.w"], [0.1 * 0.6])
        np.testing.assert_allclose(opt.m["b.w"], [0.1 * 0.8])


class TestDatasets:
    def test_freq_classify(self):
        spec = ToyTaskSpec(sequence_length=64, num_classes=4, noise=0.0)
        x, y = make_dataset(spec, 50, np.random.default_rng(0))
        assert x.shape == (50, 1, 64) and y.shape == (50,)
        assert set(np.unique(y)) <= set(range(4))
        # the labelled sinusoid dominates the periodogram of a noiseless sample
        omega = spec.frequencies()
        t = np.arange(64)
        power = np.abs(np.exp(-1j * omega[:, None] * t) @ x[:, 0, :].T)
        assert np.mean(power.argmax(axis=0) == y) > 0.9

    def test_periods(self):
        spec = ToyTaskSpec(periods=(10, 40), num_classes=3)
        np.testing.assert_allclose(2 * np.pi / spec.frequencies(), [40, 20, 10])
        with pytest.raises(DomainError):
            ToyTaskSpec(periods=(8, 8))

    def test_delayed_echo(self):
        spec = ToyTaskSpec(Task.DELAYED_ECHO, sequence_length=16, delay=3)
        x, y = make_dataset(spec, 4, np.random.default_rng(1))
        np.testing.assert_array_equal(y[..., 3:], x[..., :13])
        np.testing.assert_array_equal(y[..., :3], 0.0)

    def test_adding(self):
        spec = ToyTaskSpec(Task.ADDING, sequence_length=20)
        x, y = make_dataset(spec, 30, np.random.default_rng(2))
        assert x.shape == (30, 2, 20)
        np.testing.assert_array_equal(x[:, 1].sum(axis=1), 2.0)
        np.testing.assert_allclose((x[:, 0] * x[:, 1]).sum(axis=1), y)

    def test_validation(self):
        with pytest.raises(DomainError):
            ToyTaskSpec(sequence_length=4)
        with pytest.raises(DomainError):
            ToyTaskSpec(task="parity")


class TestTraining:
    TASK = ToyTaskSpec(sequence_length=16, train_samples=48, test_samples=16, noise=0.3)

    def test_deterministic(self):
        opt = OptimizerConfig(epochs=2, batch_size=16)
        cfg = EncoderConfig(SMALL, seed=4)
        a = train_toy(self.TASK, cfg, opt)
        b = train_toy(self.TASK, cfg, opt)
        assert a.history == b.history
        assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]

    def test_history_and_metrics_file(self):
        result = train_toy(self.TASK, EncoderConfig(SMALL), OptimizerConfig(epochs=2, batch_size=16))
        assert [h["epoch"] for h in result.history] == [1, 2]
        assert result.history[-1]["step"] == result.steps == 6
        assert result.history[-1]["lr"] == pytest.approx(one_cycle_lr(5, 6, 5e-3, 5e-4, 1 / 3))
        buf = io.StringIO()
        write_metrics(buf, result.history)
        lines = buf.getvalue().splitlines()
        assert len(lines) == 2
        assert all(tuple(json.loads(line)) == METRIC_FIELDS for line in lines)

    def test_zero_epochs(self):
        result = train_toy(self.TASK, EncoderConfig(SMALL), OptimizerConfig(epochs=0))
        assert result.history == [] and result.steps == 0
        assert result.trajectory.steps == [0]

    def test_echo_without_delay_fits_in_three_epochs(self):
        task = ToyTaskSpec(Task.DELAYED_ECHO, sequence_length=32, delay=0, train_samples=512, test_samples=128)
        opt = OptimizerConfig(peak_lr=1e-2, epochs=3, batch_size=16)
        result = train_toy(task, EncoderConfig(BlockConfig(), seed=0), opt)
        # unit-variance targets: held-out MSE below 0.1 means R^2 above 0.9
        assert result.history[-1]["test_loss"] < 0.1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self):
        cfg = EncoderConfig(BlockConfig(model_dim=4, ffn_dim=8, heads=2, head_dim=2, variant="depthwise-conv"))
        with pytest.raises(DivergenceError) as info:
            train_toy(self.TASK, cfg, OptimizerConfig(peak_lr=1e100, floor_lr=1e100, epochs=2, batch_size=16))
        assert info.value.step >= 1 and not math.isfinite(info.value.loss)

    def test_float32_fast_path(self):
        result = train_toy(self.TASK, EncoderConfig(SMALL), OptimizerConfig(epochs=1, batch_size=16), dtype=np.float32)
        assert all(p.data.dtype == np.float32 for p in result.model.parameters())
        assert math.isfinite(result.history[0]["loss"])


class TestEigenTracking:
    def test_s4d_lin_slope_is_pi_at_step_zero(self):
        enc = Encoder(EncoderConfig(BlockConfig(dss_states=16, variant="dss-replaces-mhsa"), n_blocks=2))
        rows = track_eigen_trajectories(enc).summary()
        assert len(rows) == 4
        assert all(r["slope_im"] == math.pi and r["mean_re"] == -0.5 for r in rows)

    def test_snapshots_of_untrained_model_match_and_do_not_mutate(self):
        enc = Encoder(EncoderConfig(SMALL, n_blocks=2))
        before = enc.state_dict()
        tracker = EigenTracker(enc, interval=5)
        tracker.snapshot(0)
        tracker.maybe_snapshot(3)
        tracker.maybe_snapshot(5)
        traj = tracker.trajectory
        assert traj.steps == [0, 5]
        np.testing.assert_array_equal(traj.re[0], traj.re[1])
        np.testing.assert_array_equal(traj.im[0], traj.im[1])
        after = enc.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_csv_round_trip(self):
        traj = EigenTrajectory()
        rng = np.random.default_rng(5)
        for step in (0, 10):
            traj.append(step, rng.standard_normal((2, 3)), rng.standard_normal((2, 3)))
        buf = io.StringIO()
        assert traj.write_csv(buf) == 12
        assert buf.getvalue().splitlines()[0] == "layer,step,n,re,im"
        back = EigenTrajectory.read_csv(buf.getvalue())
        assert back.steps == traj.steps
        for a, b in zip(back.re + back.im, traj.re + traj.im):
            np.testing.assert_array_equal(a, b)

    def test_shape_must_stay_constant(self):
        traj = EigenTrajectory()
        traj.append(0, np.zeros((1, 3)), np.zeros((1, 3)))
        with pytest.raises(DomainError):
            traj.append(1, np.zeros((1, 4)), np.zeros((1, 4)))

    def test_trained_run_reports_finite_slopes(self):
        task = ToyTaskSpec(sequence_length=16, train_samples=32, test_samples=8)
        result = train_toy(task, EncoderConfig(SMALL, n_blocks=2), OptimizerConfig(epochs=1, batch_size=8, snapshot_interval=2))
        traj = track_eigen_trajectories(result)
        assert traj.steps == [0, 2, 4]
        final = traj.final_summary()
        assert [r["layer"] for r in final] == [0, 1]
        assert all(math.isfinite(r["slope_im"]) and math.isfinite(r["mean_re"]) for r in final)
        assert final[0]["slope_im"] != math.pi

    def test_tracker_needs_dss_layers(self):
        with pytest.raises(DomainError):
            EigenTracker(Encoder(EncoderConfig(BlockConfig(variant="depthwise-conv"))))
