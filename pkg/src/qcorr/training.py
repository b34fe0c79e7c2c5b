"""Dataset construction, splitting, losses, Adam and the training loop.

Sliding windows advance one sample at a time; the target is the next value
immediately following each window.  The window count follows the stated
formula (trace length minus window length minus 1) unless the "natural"
count is selected.  Splits are contiguous and chronological - train earliest,
test latest - so the test epoch is never seen during training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import engine as engine_mod
from . import neural
from .trace import Trace, TraceSet, validate_traceset

STREAM_NAMES = ("probe_pre", "conj_pre", "conj_post", "probe_truth")

# Hyperparameter search ranges (inclusive).
RANGES = {
    "window_len": (2, 100),
    "hidden_len": (2, 64),
    "batch_size": (100, 1000),
    "epochs": (10, 100),
    "learning_rate": (0.001, 0.1),
}


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes NaN."""


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.64
    val_frac: float = 0.16
    test_frac: float = 0.20

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")


@dataclass(frozen=True)
class Hyperparams:
    window_len: int = 50
    hidden_len: int = 32
    batch_size: int = 500
    epochs: int = 100
    learning_rate: float = 0.001
    loss_kind: str = "mse"
    seed: int = 1234
    combiner_sign: float = 1.0
    forget_bias_one: bool = True
    engine: str = "fast"
    window_formula: str = "paper"
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.loss_kind not in ("mse", "mae"):
            raise ValueError(f"loss_kind must be mse or mae, got {self.loss_kind!r}")
        if self.window_formula not in ("paper", "natural"):
            raise ValueError("window_formula must be 'paper' or 'natural'")
        if self.engine not in ("fast", "reference"):
            raise ValueError("engine must be 'fast' or 'reference'")
        if not self.allow_out_of_range:
            for name, (lo, hi) in RANGES.items():
                value = getattr(self, name)
                if not lo <= value <= hi:
                    raise ValueError(
                        f"{name}={value} outside search range [{lo}, {hi}] "
                        f"(set allow_out_of_range to override)")

    @property
    def loss_id(self) -> int:
        return engine_mod.MSE if self.loss_kind == "mse" else engine_mod.MAE


@dataclass(frozen=True)
class NormParams:
    """Per-stream affine [0, 1] mapping, retained for exact inversion."""

    ranges: dict  # name -> (min, max)

    def normalize(self, name: str, values: np.ndarray) -> np.ndarray:
        lo, hi = self.ranges[name]
        return (values - lo) / (hi - lo)

    def denormalize(self, name: str, values: np.ndarray) -> np.ndarray:
        lo, hi = self.ranges[name]
        return values * (hi - lo) + lo


def normalize(ts: TraceSet):
    """Map each stream to [0, 1] by its own (min, max)."""
    ranges = {}
    new = {}
    traces = {"probe_pre": ts.probe_pre, "conj_pre": ts.conj_pre,
              "conj_post": ts.conj_post}
    if ts.probe_truth is not None:
        traces["probe_truth"] = ts.probe_truth
    for name, tr in traces.items():
        lo, hi = float(tr.samples.min()), float(tr.samples.max())
        if lo == hi:
            raise ValueError(f"zero-range stream: {name}")
        ranges[name] = (lo, hi)
        new[name] = tr.with_samples((tr.samples - lo) / (hi - lo), label=tr.label)
    norm = NormParams(ranges)
    return TraceSet(new["probe_pre"], new["conj_pre"], new["conj_post"],
                    new.get("probe_truth")), norm


def window_count(length: int, window_len: int, formula: str = "paper") -> int:
    """Number of sliding windows: length - window - 1 by the stated formula,
    or the natural length - window."""
    count = length - window_len - 1 if formula == "paper" else length - window_len
    if count < 1:
        raise ValueError(f"window_len {window_len} too long for trace of length {length}")
    return count


@dataclass(frozen=True)
class WindowDataset:
    """Windows referenced by start index into shared full streams.

    ``streams`` is (n_streams, L); the sample for start i is the three
    windows streams[:, i:i+window_len] with scalar target targets[i +
    window_len].
    """

    streams: np.ndarray
    targets: np.ndarray
    window_len: int
    starts: np.ndarray

    @property
    def count(self) -> int:
        return self.starts.size

    def target_values(self, starts: np.ndarray) -> np.ndarray:
        return self.targets[starts + self.window_len]

    def subset(self, positions: np.ndarray) -> "WindowDataset":
        return WindowDataset(self.streams, self.targets, self.window_len,
                             self.starts[positions])

    def windows(self, position: int):
        """Materialized windows of one sample (for the reference path)."""
        st = int(self.starts[position])
        return [self.streams[k, st:st + self.window_len]
                for k in range(self.streams.shape[0])]


def make_windows(ts: TraceSet, window_len: int, target_stream: str = "probe_truth",
                 formula: str = "paper") -> WindowDataset:
    """Single-point sliding windows over the three input streams."""
    if target_stream not in STREAM_NAMES:
        raise ValueError(f"unknown target stream {target_stream!r}")
    traces = {"probe_pre": ts.probe_pre, "conj_pre": ts.conj_pre,
              "conj_post": ts.conj_post, "probe_truth": ts.probe_truth}
    if traces[target_stream] is None:
        raise ValueError(f"target stream {target_stream} missing from trace set")
    length = ts.probe_pre.samples.size
    count = window_count(length, window_len, formula)
    streams = np.stack([ts.probe_pre.samples, ts.conj_pre.samples,
                        ts.conj_post.samples])
    return WindowDataset(streams, np.asarray(traces[target_stream].samples),
                         window_len, np.arange(count, dtype=np.int64))


def make_single_stream_windows(t: Trace, window_len: int,
                               formula: str = "paper") -> WindowDataset:
    """Windows of one stream predicting its own next value (verification runs)."""
    count = window_count(t.samples.size, window_len, formula)
    stream = t.samples[None, :]
    return WindowDataset(stream, np.asarray(t.samples), window_len,
                         np.arange(count, dtype=np.int64))


def split_sizes(count: int, spec: SplitSpec = SplitSpec()):
    """(n_train, n_val, n_test): floor for val/test, remainder to train."""
    n_val = int(np.floor(count * spec.val_frac))
    n_test = int(np.floor(count * spec.test_frac))
    n_train = count - n_val - n_test
    return n_train, n_val, n_test


def split_dataset(ds: WindowDataset, spec: SplitSpec = SplitSpec()):
    """Contiguous chronological split: train earliest, test latest."""
    if ds.count < 5:
        raise ValueError(f"too few windows to split: {ds.count}")
    n_train, n_val, n_test = split_sizes(ds.count, spec)
    idx = np.arange(ds.count)
    return (ds.subset(idx[:n_train]),
            ds.subset(idx[n_train:n_train + n_val]),
            ds.subset(idx[n_train + n_val:]))


def batch_iter(ds: WindowDataset, batch_size: int, shuffle: bool, seed: int = 0):
    """Yield (starts, targets) batches; the final partial batch is kept.

    The permutation is a pure function of the seed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(ds.count)
    if shuffle:
        order = np.random.default_rng(seed).permutation(ds.count)
    for lo in range(0, ds.count, batch_size):
        pos = order[lo:lo + batch_size]
        starts = ds.starts[pos]
        yield starts, ds.target_values(starts)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient w.r.t. predictions."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0 or pred.shape != target.shape:
        raise ValueError("pred and target must be equal-length and nonempty")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / pred.size


def mae_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its subgradient (0 at equality)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0 or pred.shape != target.shape:
        raise ValueError("pred and target must be equal-length and nonempty")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / pred.size


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(np.zeros(n_params), np.zeros(n_params))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """Standard Adam update with bias correction; returns (params, state)."""
    if params.shape != grads.shape:
        raise ValueError("params and grads shape mismatch")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(m, v, step, state.beta1, state.beta2, state.eps)


@dataclass
class TrainingReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    test_loss: float = float("nan")
    wall_time_s: float = 0.0

    @property
    def epochs(self) -> int:
        return len(self.train_losses)

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,val_loss\n")
            for e, (tr, va) in enumerate(zip(self.train_losses, self.val_losses), 1):
                fh.write(f"{e},{tr!r},{va!r}\n")


def _loss_fn(loss_kind: str):
    return mse_loss if loss_kind == "mse" else mae_loss


def _train_on_dataset(model, ds: WindowDataset, hp: Hyperparams,
                      split: SplitSpec = SplitSpec()):
    """Algorithm core: per epoch a train phase (forward, loss, backward, Adam
    step per batch) then a validation phase (forward + loss only); after all
    epochs a single test pass."""
    t0 = time.perf_counter()
    train_ds, val_ds, test_ds = split_dataset(ds, split)
    eng = engine_mod.make_engine(model, hp.engine)
    streams = eng.pack_streams(ds.streams)
    params = neural.params_to_vector(model)
    state = AdamState.zeros(params.size)
    loss_fn = _loss_fn(hp.loss_kind)
    report = TrainingReport()
    for epoch in range(hp.epochs):
        sq_sum = 0.0
        n_seen = 0
        for starts, targets in batch_iter(train_ds, hp.batch_size, shuffle=True,
                                          seed=_epoch_seed(hp.seed, epoch)):
            preds, grad = eng.train_batch(streams, starts, targets, hp.loss_id)
            batch_loss, _ = loss_fn(preds, targets)
            if np.isnan(batch_loss):
                raise TrainingDiverged(
                    f"NaN loss at epoch {epoch + 1} after {n_seen} samples")
            sq_sum += batch_loss * starts.size
            n_seen += starts.size
            params, state = adam_step(params, grad, state, hp.learning_rate)
            neural.set_params_from_vector(model, params)
            eng.refresh_params()
        report.train_losses.append(sq_sum / max(n_seen, 1))
        val_loss = _evaluate_loss(eng, streams, val_ds, hp)
        if np.isnan(val_loss):
            raise TrainingDiverged(f"NaN validation loss at epoch {epoch + 1}")
        report.val_losses.append(val_loss)
    report.test_loss = _evaluate_loss(eng, streams, test_ds, hp)
    report.wall_time_s = time.perf_counter() - t0
    return model, report


def _epoch_seed(seed: int, epoch: int) -> int:
    # derive a distinct, stable shuffle seed per epoch
    return int(np.random.SeedSequence((seed, 7919, epoch)).generate_state(1)[0])


def _evaluate_loss(eng, streams, ds: WindowDataset, hp: Hyperparams) -> float:
    if ds.count == 0:
        return float("nan")
    loss_fn = _loss_fn(hp.loss_kind)
    total = 0.0
    for starts, targets in batch_iter(ds, hp.batch_size, shuffle=False):
        preds = eng.eval_batch(streams, starts)
        batch_loss, _ = loss_fn(preds, targets)
        total += batch_loss * starts.size
    return total / ds.count


def run_training(ts: TraceSet, hp: Hyperparams, split: SplitSpec = SplitSpec()):
    """Train the three-block recovery model on a simulated trace set.

    The training target is the undisrupted-probe ground truth aligned with
    the conj_post epoch, so ``ts.probe_truth`` must be present.
    """
    problems = validate_traceset(ts)
    if problems:
        raise ValueError("invalid trace set: " + "; ".join(problems))
    if ts.probe_truth is None:
        raise ValueError("run_training requires probe_truth as the target stream")
    norm_ts, norm = normalize(ts)
    ds = make_windows(norm_ts, hp.window_len, "probe_truth", hp.window_formula)
    model = neural.init_recovery_model(
        hp.hidden_len, hp.window_len, hp.seed, forget_bias_one=hp.forget_bias_one,
        combiner_sign=hp.combiner_sign)
    model, report = _train_on_dataset(model, ds, hp, split)
    return model, report, norm


def run_single_stream_training(t: Trace, hp: Hyperparams,
                               split: SplitSpec = SplitSpec()):
    """Train a single-block model to predict one undisrupted stream."""
    lo, hi = float(t.samples.min()), float(t.samples.max())
    if lo == hi:
        raise ValueError("zero-range stream")
    norm = NormParams({"stream": (lo, hi)})
    normalized = t.with_samples((t.samples - lo) / (hi - lo), label=t.label)
    ds = make_single_stream_windows(normalized, hp.window_len, hp.window_formula)
    model = neural.init_single_model(hp.hidden_len, hp.window_len, hp.seed,
                                     forget_bias_one=hp.forget_bias_one)
    model, report = _train_on_dataset(model, ds, hp, split)
    return model, report, norm


def reconstruct(model, ts: TraceSet, norm: NormParams,
                split: SplitSpec = SplitSpec(), engine: str = "fast",
                formula: str = "paper") -> Trace:
    """Predict the test-split windows and denormalize to digitization levels.

    The prediction for the window starting at i corresponds to original
    sample index i + window_len; the output trace covers the test split, so
    its first sample sits at absolute index (n_train + n_val) + window_len.
    """
    streams_norm = [norm.normalize(name, tr.samples) for name, tr in
                    (("probe_pre", ts.probe_pre), ("conj_pre", ts.conj_pre),
                     ("conj_post", ts.conj_post))]
    length = ts.probe_pre.samples.size
    count = window_count(length, model.window_len, formula)
    ds = WindowDataset(np.stack(streams_norm), np.zeros(length), model.window_len,
                       np.arange(count, dtype=np.int64))
    _, _, test_ds = split_dataset(ds, split)
    eng = engine_mod.make_engine(model, engine)
    streams = eng.pack_streams(ds.streams)
    preds = np.concatenate([eng.eval_batch(streams, starts)
                            for starts, _ in batch_iter(test_ds, 4096, shuffle=False)])
    values = norm.denormalize("probe_truth", preds)
    return Trace(values, ts.probe_pre.sample_rate_hz, "reconstructed_probe")


def reconstruct_single(model, t: Trace, norm: NormParams,
                       split: SplitSpec = SplitSpec(), engine: str = "fast",
                       formula: str = "paper") -> Trace:
    """Test-split reconstruction of a single stream (verification runs)."""
    lo, hi = norm.ranges["stream"]
    normalized = (t.samples - lo) / (hi - lo)
    count = window_count(t.samples.size, model.window_len, formula)
    ds = WindowDataset(normalized[None, :], np.zeros(t.samples.size),
                       model.window_len, np.arange(count, dtype=np.int64))
    _, _, test_ds = split_dataset(ds, split)
    eng = engine_mod.make_engine(model, engine)
    streams = eng.pack_streams(ds.streams)
    preds = np.concatenate([eng.eval_batch(streams, starts)
                            for starts, _ in batch_iter(test_ds, 4096, shuffle=False)])
    return Trace(preds * (hi - lo) + lo, t.sample_rate_hz,
                 (t.label or "stream") + "_reconstructed")
