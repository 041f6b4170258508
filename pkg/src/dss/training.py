"""Gradients, finite-difference checks, toy-task training and eigenvalue tracking."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable

import numpy as np

from .autograd import Parameter, Tensor, cross_entropy, mse
from .dssformer import EncoderConfig, Encoder
from .errors import DivergenceError, DomainError, NumericError, UsageError
from .nn import Linear, Module

__all__ = [
    "Task",
    "ToyTaskSpec",
    "OptimizerConfig",
    "make_dataset",
    "ToyModel",
    "AdamW",
    "one_cycle_lr",
    "backward",
    "GradCheckReport",
    "numeric_grad_check",
    "grad_check",
    "EigenTrajectory",
    "EigenTracker",
    "track_eigen_trajectories",
    "TrainResult",
    "train_toy",
    "write_metrics",
    "METRIC_FIELDS",
]

METRIC_FIELDS = ("step", "epoch", "lr", "loss", "accuracy")
TRAJECTORY_HEADER = "layer,step,n,re,im"


# ---------------------------------------------------------------------------
# toy tasks


class Task(str, enum.Enum):
    FREQ_CLASSIFY = "freq-classify"
    DELAYED_ECHO = "delayed-echo"
    ADDING = "adding"

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise DomainError(f"unknown task {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class ToyTaskSpec:
    """A synthetic sequence task.

    FREQ_CLASSIFY: which of ``num_classes`` sinusoids carries the largest amplitude;
    their periods are geometrically spaced over ``periods`` (in steps).
    DELAYED_ECHO: reproduce the input ``delay`` steps later (per-step regression).
    ADDING: sum of the two values flagged in a marker channel (scalar regression).
    ``noise`` is additive Gaussian noise on the FREQ_CLASSIFY signal only.
    """

    task: Task = Task.FREQ_CLASSIFY
    sequence_length: int = 64
    num_classes: int = 4
    noise: float = 0.5
    delay: int = 0
    periods: tuple[float, float] = (5.0, 40.0)
    train_samples: int = 512
    test_samples: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", Task.parse(self.task))
        if self.sequence_length < 8:
            raise DomainError(f"sequence_length must be >= 8, got {self.sequence_length}")
        if self.task is Task.FREQ_CLASSIFY and self.num_classes < 2:
            raise DomainError("need at least two classes")
        if not 0 <= self.delay < self.sequence_length:
            raise DomainError("delay must lie in [0, sequence_length)")
        if self.noise < 0:
            raise DomainError("noise must be non-negative")
        lo, hi = (float(v) for v in self.periods)
        if not 2 <= lo < hi:
            raise DomainError(f"periods must satisfy 2 <= shortest < longest, got {self.periods}")
        object.__setattr__(self, "periods", (lo, hi))
        if self.train_samples < 1 or self.test_samples < 1:
            raise DomainError("need at least one train and one test sample")

    @property
    def input_dim(self) -> int:
        return 2 if self.task is Task.ADDING else 1

    @property
    def is_classification(self) -> bool:
        return self.task is Task.FREQ_CLASSIFY

    def frequencies(self) -> np.ndarray:
        """Angular frequencies (radians per step) of the candidate sinusoids."""
        lo, hi = self.periods
        return 2 * np.pi / np.geomspace(hi, lo, self.num_classes)


def make_dataset(spec: ToyTaskSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` samples; inputs are n x input_dim x L."""
    L = spec.sequence_length
    t = np.arange(L)
    if spec.task is Task.FREQ_CLASSIFY:
        omega = spec.frequencies()
        labels = rng.integers(spec.num_classes, size=n)
        amp = rng.uniform(0.0, 0.5, (n, spec.num_classes))
        amp[np.arange(n), labels] = 1.0
        phase = rng.uniform(0, 2 * np.pi, (n, spec.num_classes))
        x = np.einsum("nc,nct->nt", amp, np.sin(omega[None, :, None] * t + phase[:, :, None]))
        x += spec.noise * rng.standard_normal((n, L))
        return x[:, None, :], labels
    if spec.task is Task.DELAYED_ECHO:
        x = rng.standard_normal((n, 1, L))
        y = np.zeros_like(x)
        y[..., spec.delay :] = x[..., : L - spec.delay]
        return x, y
    values = rng.uniform(0, 1, (n, L))
    marks = np.zeros((n, L))
    half = L // 2
    first = rng.integers(half, size=n)
    second = half + rng.integers(L - half, size=n)
    marks[np.arange(n), first] = 1.0
    marks[np.arange(n), second] = 1.0
    y = values[np.arange(n), first] + values[np.arange(n), second]
    x = np.stack([values, marks], axis=1)
    return x, y


class ToyModel(Module):
    """Encoder plus a task head (mean-pool classifier/regressor or per-step readout)."""

    def __init__(self, encoder_config: EncoderConfig, task: ToyTaskSpec):
        if encoder_config.input_dim != task.input_dim:
            encoder_config = replace(encoder_config, input_dim=task.input_dim)
        self.encoder = Encoder(encoder_config)
        rng = np.random.default_rng([encoder_config.seed, 1])
        d = encoder_config.block.model_dim
        out = task.num_classes if task.is_classification else 1
        self.head = Linear(d, out, rng)
        self._task = task

    def dss_modules(self):
        return self.encoder.dss_modules()

    def forward(self, x) -> Tensor:
        h = self.encoder(x)
        if self._task.task is Task.DELAYED_ECHO:
            return self.head(h)  # B x 1 x L
        pooled = h.mean(axis=-1, keepdims=True)
        out = self.head(pooled)  # B x C x 1
        return out.reshape(out.shape[0], out.shape[1]) if self._task.is_classification else out.reshape(out.shape[0])

    def loss(self, x, y) -> tuple[Tensor, np.ndarray]:
        """Scalar loss and the per-sample correctness indicator."""
        out = self(x)
        if self._task.is_classification:
            correct = out.data.argmax(axis=-1) == y
            return cross_entropy(out, y), correct
        err = np.abs(out.data - y)
        correct = err.reshape(err.shape[0], -1).max(axis=-1) < 0.1
        return mse(out, y), correct


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class OptimizerConfig:
    peak_lr: float = 5e-3
    floor_lr: float | None = None  # defaults to peak_lr / 10
    warmup_fraction: float = 1 / 3
    epochs: int = 10
    weight_decay: float = 0.01
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eigen_lr_multiplier: float = 1.0
    grad_clip: float | None = None
    snapshot_interval: int = 0  # 0: one snapshot per epoch

    def __post_init__(self) -> None:
        if self.peak_lr <= 0:
            raise DomainError("peak_lr must be positive")
        if not 0 <= self.warmup_fraction <= 1:
            raise DomainError("warmup_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs must be >= 0 and batch_size >= 1")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")

    @property
    def start_lr(self) -> float:
        return self.peak_lr / 10 if self.floor_lr is None else self.floor_lr


def one_cycle_lr(step: int, total_steps: int, peak: float, floor: float, warmup_fraction: float) -> float:
    """Piecewise-linear one-cycle schedule over steps 0..total_steps.

    Rises from ``floor`` at step 0 to ``peak`` at the warmup boundary
    round(warmup_fraction * total_steps), then falls linearly to 0 at
    ``total_steps``.
    """
    if total_steps <= 0:
        return floor
    warm = int(round(warmup_fraction * total_steps))
    step = min(max(step, 0), total_steps)
    if step < warm:
        return floor + (peak - floor) * step / warm
    if warm == total_steps:
        return peak
    return peak * (total_steps - step) / (total_steps - warm)


_NO_DECAY = ("bias", "gamma", "beta", "skip", "eig_re", "eig_im", "log_delta", "w_re", "w_im", "w_back_re", "w_back_im")
_EIGEN = ("eig_re", "eig_im")


class AdamW:
    """Adam with decoupled weight decay (p -= lr * wd * p alongside the Adam step)."""

    def __init__(self, named_params: Iterable[tuple[str, Parameter]], config: OptimizerConfig):
        self.params = list(named_params)
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        c = self.config
        self.t += 1
        b1c = 1 - c.beta1**self.t
        b2c = 1 - c.beta2**self.t
        scale = 1.0
        if c.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for _, p in self.params if p.grad is not None))
            if norm > c.grad_clip:
                scale = c.grad_clip / norm
        for name, p in self.params:
            leaf = name.rsplit(".", 1)[-1]
            plr = lr * (c.eigen_lr_multiplier if leaf in _EIGEN else 1.0)
            if c.weight_decay and leaf not in _NO_DECAY:
                p.data = p.data - (plr * c.weight_decay) * p.data
            if p.grad is None:
                continue
            g = p.grad * scale
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.data = p.data - plr * (m / b1c) / (np.sqrt(v / b2c) + c.eps)


# ---------------------------------------------------------------------------
# gradients


def backward(loss: Tensor, model: Module) -> dict[str, np.ndarray]:
    """Run reverse mode from ``loss``; return one gradient array per parameter.

    Parameters the loss does not depend on get exact zeros.
    """
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise UsageError("loss was not produced by a recorded forward pass")
    model.zero_grad()
    loss.backward()
    return {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in model.named_parameters()
    }


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_parameter: dict[str, float]
    coordinates: int

    def worst(self) -> str:
        return max(self.per_parameter, key=self.per_parameter.get)


def numeric_grad_check(
    loss_fn: Callable[[], Tensor],
    named_params: Iterable[tuple[str, Parameter]],
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences, coordinate by coordinate.

    Relative error per coordinate is |a - n| / max(1e-8, |a| + |n|).
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise DomainError(f"epsilon must lie in [1e-6, 1e-4], got {epsilon}")
    named_params = list(named_params)
    for _, p in named_params:
        if p.data.dtype != np.float64:
            raise DomainError("gradient checks need double precision parameters")
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise NumericError(f"non-finite loss {loss.data}")
    loss.backward()
    per, total = {}, 0
    for name, p in named_params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = float(loss_fn().data)
            flat[i] = orig - epsilon
            down = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * epsilon)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
        per[name] = worst
        total += flat.size
    return GradCheckReport(max(per.values(), default=0.0), per, total)


def grad_check(config: EncoderConfig, seed: int = 0, epsilon: float = 1e-5, length: int = 16) -> GradCheckReport:
    """End-to-end check of an encoder on a random linear functional of its output."""
    model = Encoder(config)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((config.input_dim, length))
    proj = rng.standard_normal((config.block.model_dim, length))

    def loss_fn() -> Tensor:
        return (model(x) * proj).sum()

    return numeric_grad_check(loss_fn, model.named_parameters(), epsilon)


# ---------------------------------------------------------------------------
# eigenvalue trajectories


def _ls_slope(y: np.ndarray) -> float:
    """Least-squares slope of y against 0..N-1, evaluated in exact rationals.

    The inputs are binary floats, so the rational result is exact and the one
    final rounding makes the slope of pi * n come out as float pi.
    """
    n = len(y)
    if n < 2:
        return float("nan")
    ys = [Fraction(float(v)) for v in y]
    n_bar = Fraction(n - 1, 2)
    y_bar = sum(ys) / n
    num = sum((k - n_bar) * (v - y_bar) for k, v in enumerate(ys))
    den = sum((k - n_bar) ** 2 for k in range(n))
    return float(num / den)


@dataclass
class EigenTrajectory:
    """Snapshots of every DSS layer's eigenvalues: re/im arrays are steps x layers x N."""

    steps: list[int] = field(default_factory=list)
    re: list[np.ndarray] = field(default_factory=list)
    im: list[np.ndarray] = field(default_factory=list)

    def append(self, step: int, re: np.ndarray, im: np.ndarray) -> None:
        if self.re and re.shape != self.re[0].shape:
            raise DomainError(f"snapshot shape {re.shape} differs from {self.re[0].shape}")
        self.steps.append(int(step))
        self.re.append(np.array(re, dtype=np.float64))
        self.im.append(np.array(im, dtype=np.float64))

    @property
    def n_layers(self) -> int:
        return self.re[0].shape[0] if self.re else 0

    def summary(self) -> list[dict]:
        """Per layer and snapshot: least-squares slope of Im(lambda_n) on n, mean Re."""
        rows = []
        for step, re, im in zip(self.steps, self.re, self.im):
            for layer in range(re.shape[0]):
                rows.append(
                    {
                        "layer": layer,
                        "step": step,
                        "slope_im": _ls_slope(im[layer]),
                        "mean_re": math.fsum(re[layer]) / re.shape[1],
                    }
                )
        return rows

    def final_summary(self) -> list[dict]:
        """Summary rows of the last snapshot only."""
        if not self.steps:
            return []
        last = self.steps[-1]
        rows = [r for r in self.summary() if r["step"] == last]
        return rows[-self.n_layers :]

    def write_csv(self, fh) -> int:
        fh.write(TRAJECTORY_HEADER + "\n")
        count = 0
        for step, re, im in zip(self.steps, self.re, self.im):
            for layer in range(re.shape[0]):
                for n in range(re.shape[1]):
                    fh.write(f"{layer},{step},{n},{re[layer, n]:.17g},{im[layer, n]:.17g}\n")
                    count += 1
        return count

    @classmethod
    def read_csv(cls, fh) -> "EigenTrajectory":
        if isinstance(fh, str):
            fh = io.StringIO(fh)
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRAJECTORY_HEADER.split(","):
            raise DomainError(f"unexpected trajectory header {reader.fieldnames}")
        data: dict[int, dict[tuple[int, int], tuple[float, float]]] = {}
        for row in reader:
            data.setdefault(int(row["step"]), {})[int(row["layer"]), int(row["n"])] = (float(row["re"]), float(row["im"]))
        traj = cls()
        for step in sorted(data):
            entries = data[step]
            layers = 1 + max(k[0] for k in entries)
            n = 1 + max(k[1] for k in entries)
            re = np.full((layers, n), np.nan)
            im = np.full((layers, n), np.nan)
            for (layer, i), (r, m) in entries.items():
                re[layer, i] = r
                im[layer, i] = m
            if np.isnan(re).any():
                raise DomainError(f"trajectory snapshot at step {step} is incomplete")
            traj.append(step, re, im)
        return traj


class EigenTracker:
    """Read-only tap copying every DSS layer's eigenvalues at a fixed step interval."""

    def __init__(self, model: Module, interval: int = 1):
        mods = model.dss_modules()
        if not mods:
            raise DomainError("model has no DSS modules to track")
        if interval < 1:
            raise DomainError("snapshot interval must be >= 1")
        self._mods = mods
        self.interval = interval
        self.trajectory = EigenTrajectory()

    def snapshot(self, step: int) -> None:
        if self.trajectory.steps and self.trajectory.steps[-1] == step:
            return
        re = np.stack([m.eig_re.data.astype(np.float64) for m in self._mods])
        im = np.stack([m.eig_im.data.astype(np.float64) for m in self._mods])
        self.trajectory.append(step, re, im)

    def maybe_snapshot(self, step: int) -> None:
        if step % self.interval == 0:
            self.snapshot(step)


def track_eigen_trajectories(run: "TrainResult | Module", interval: int = 1) -> EigenTrajectory:
    """Trajectory recorded during a run, or a single step-0 snapshot of a model."""
    if isinstance(run, TrainResult):
        return run.trajectory
    tracker = EigenTracker(run, interval)
    tracker.snapshot(0)
    return tracker.trajectory


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    history: list[dict]
    trajectory: EigenTrajectory
    model: ToyModel
    steps: int


def _evaluate(model: ToyModel, x: np.ndarray, y: np.ndarray, batch: int, dtype) -> tuple[float, float]:
    losses, correct = [], []
    for i in range(0, len(x), batch):
        xb = x[i : i + batch].astype(dtype)
        loss, ok = model.loss(xb, y[i : i + batch])
        losses.append(float(loss.data) * len(xb))
        correct.append(ok)
    return sum(losses) / len(x), float(np.concatenate(correct).mean())


def train_toy(
    task: ToyTaskSpec,
    model_config: EncoderConfig,
    optimizer: OptimizerConfig,
    dtype=np.float64,
    stop_at_accuracy: float | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train a :class:`ToyModel` with AdamW and a one-cycle schedule.

    One history record per epoch: ``step`` (updates so far), ``epoch``, ``lr``
    (last rate used), ``loss`` (mean training loss over the epoch),
    ``accuracy`` (held-out) and ``test_loss``.  Deterministic for a fixed seed.
    Raises :class:`DivergenceError` with the step index on a non-finite loss.
    """
    data_rng = np.random.default_rng([task.seed, 0])
    x_train, y_train = make_dataset(task, task.train_samples, data_rng)
    x_test, y_test = make_dataset(task, task.test_samples, data_rng)

    model = ToyModel(model_config, task).astype(dtype)
    model.encoder.set_dropout_rng(np.random.default_rng([model_config.seed, 2]))
    opt = AdamW(model.named_parameters(), optimizer)
    order_rng = np.random.default_rng([task.seed, model_config.seed, 3])

    bs = optimizer.batch_size
    per_epoch = math.ceil(len(x_train) / bs)
    total = optimizer.epochs * per_epoch
    interval = optimizer.snapshot_interval or per_epoch
    tracker = EigenTracker(model, interval) if model.dss_modules() else None
    if tracker:
        tracker.snapshot(0)

    history: list[dict] = []
    step = 0
    lr = optimizer.start_lr
    for epoch in range(optimizer.epochs):
        model.train()
        perm = order_rng.permutation(len(x_train))
        running = 0.0
        for i in range(0, len(perm), bs):
            idx = perm[i : i + bs]
            lr = one_cycle_lr(step, total, optimizer.peak_lr, optimizer.start_lr, optimizer.warmup_fraction)
            loss, _ = model.loss(x_train[idx].astype(dtype), y_train[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(step, value)
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            running += value * len(idx)
            step += 1
            if tracker:
                tracker.maybe_snapshot(step)
        model.eval()
        test_loss, acc = _evaluate(model, x_test, y_test, 4 * bs, dtype)
        record = {
            "step": step,
            "epoch": epoch + 1,
            "lr": lr,
            "loss": running / len(x_train),
            "accuracy": acc,
            "test_loss": test_loss,
        }
        history.append(record)
        if log:
            log(record)
        if stop_at_accuracy is not None and acc >= stop_at_accuracy:
            break
    if tracker:
        tracker.snapshot(step)
    model.eval()
    return TrainResult(history, tracker.trajectory if tracker else EigenTrajectory(), model, step)


def write_metrics(fh, history: Iterable[dict]) -> None:
    """Newline-delimited JSON, one object per record with the metric fields."""
    for rec in history:
        fh.write(json.dumps({k: rec[k] for k in METRIC_FIELDS}) + "\n")
