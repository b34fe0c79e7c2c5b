"""Recovery model: LSTM blocks, hidden-state combiner, linear head.

This is the reference implementation of the model math, in double precision:
the standard LSTM recurrence for each of the three input streams (forget,
input, cell, output gates; concatenation order [h_{t-1}, x_t]; zero initial
state per window), the elementwise combiner

    h_target = h_conj_post + sign * (h_conj_pre - h_probe_pre)

(the sign convention is configurable; +1 follows the architecture as
described, -1 is the physically motivated alternative) and a scalar linear
head.  ``model_backward`` implements exact backpropagation through time;
gradients are validated against central finite differences in the test
suite.  The training engine (:mod:`qcorr.engine`) reproduces this math in a
compiled fast path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

GATE_NAMES = ("W_f", "W_i", "W_g", "W_o")
BIAS_NAMES = ("b_f", "b_i", "b_g", "b_o")
BLOCK_NAMES = ("block_probe_pre", "block_conj_pre", "block_conj_post")

_CKPT_MAGIC = b"QCKP"
_CKPT_VERSION = 1


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class LSTMBlock:
    """One LSTM block; weights are (hidden, hidden + input_dim) per gate."""

    W_f: np.ndarray
    W_i: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        h, d = self.W_f.shape
        for name in GATE_NAMES:
            if getattr(self, name).shape != (h, d):
                raise ValueError(f"{name} shape mismatch")
        for name in BIAS_NAMES:
            if getattr(self, name).shape != (h,):
                raise ValueError(f"{name} shape mismatch")

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def weights(self):
        return tuple(getattr(self, n) for n in GATE_NAMES)

    def biases(self):
        return tuple(getattr(self, n) for n in BIAS_NAMES)


@dataclass(frozen=True)
class LSTMState:
    h: np.ndarray
    c: np.ndarray


def zero_state(hidden_dim: int) -> LSTMState:
    return LSTMState(np.zeros(hidden_dim), np.zeros(hidden_dim))


@dataclass
class LinearHead:
    w: np.ndarray
    b: float


@dataclass
class RecoveryModel:
    """Three independent LSTM blocks + combiner + linear head."""

    block_probe_pre: LSTMBlock
    block_conj_pre: LSTMBlock
    block_conj_post: LSTMBlock
    head: LinearHead
    window_len: int
    combiner_sign: float = 1.0

    def __post_init__(self):
        dims = {b.hidden_dim for b in self.blocks()} | {self.head.w.size}
        if len(dims) != 1:
            raise ValueError("all blocks and the head must share hidden_dim")
        if self.combiner_sign not in (1.0, -1.0):
            raise ValueError("combiner_sign must be +1 or -1")

    def blocks(self):
        return (self.block_probe_pre, self.block_conj_pre, self.block_conj_post)

    @property
    def hidden_dim(self) -> int:
        return self.block_probe_pre.hidden_dim

    def stream_coefficients(self):
        """Combiner weight applied to each stream's final hidden state."""
        s = self.combiner_sign
        return (-s, s, 1.0)


@dataclass
class SingleStreamModel:
    """One LSTM block + head, combiner bypassed (verification runs)."""

    block: LSTMBlock
    head: LinearHead
    window_len: int

    def blocks(self):
        return (self.block,)

    @property
    def hidden_dim(self) -> int:
        return self.block.hidden_dim

    def stream_coefficients(self):
        return (1.0,)


def init_block(hidden_dim: int, input_dim: int, rng: np.random.Generator,
               forget_bias_one: bool = True) -> LSTMBlock:
    """Uniform init in [-1/sqrt(hidden), +1/sqrt(hidden)]; biases zero except
    an optional +1 forget-gate bias."""
    bound = 1.0 / np.sqrt(hidden_dim)
    d = hidden_dim + input_dim
    weights = [rng.uniform(-bound, bound, size=(hidden_dim, d)) for _ in GATE_NAMES]
    biases = [np.zeros(hidden_dim) for _ in BIAS_NAMES]
    if forget_bias_one:
        biases[0] = np.ones(hidden_dim)
    return LSTMBlock(*weights, *biases)


def init_recovery_model(hidden_dim: int, window_len: int, seed: int,
                        input_dim: int = 1, forget_bias_one: bool = True,
                        combiner_sign: float = 1.0) -> RecoveryModel:
    """Seeded initialization; parameter draw order is fixed (three blocks in
    stream order, then the head) so a seed fully determines the model."""
    rng = np.random.default_rng(seed)
    blocks = [init_block(hidden_dim, input_dim, rng, forget_bias_one)
              for _ in range(3)]
    bound = 1.0 / np.sqrt(hidden_dim)
    head = LinearHead(rng.uniform(-bound, bound, size=hidden_dim), 0.0)
    return RecoveryModel(*blocks, head=head, window_len=window_len,
                         combiner_sign=combiner_sign)


def init_single_model(hidden_dim: int, window_len: int, seed: int,
                      input_dim: int = 1, forget_bias_one: bool = True) -> SingleStreamModel:
    rng = np.random.default_rng(seed)
    block = init_block(hidden_dim, input_dim, rng, forget_bias_one)
    bound = 1.0 / np.sqrt(hidden_dim)
    head = LinearHead(rng.uniform(-bound, bound, size=hidden_dim), 0.0)
    return SingleStreamModel(block, head, window_len)


# ---------------------------------------------------------------------------
# forward


def lstm_step(block: LSTMBlock, x_t, state: LSTMState) -> LSTMState:
    """One gate update; concatenation order is [h_{t-1}, x_t]."""
    x_t = np.atleast_1d(np.asarray(x_t, dtype=np.float64))
    if x_t.size != block.input_dim:
        raise ValueError(f"input size {x_t.size} != input_dim {block.input_dim}")
    if state.h.size != block.hidden_dim:
        raise ValueError("state size mismatch")
    z = np.concatenate([state.h, x_t])
    f = _sigmoid(block.W_f @ z + block.b_f)
    i = _sigmoid(block.W_i @ z + block.b_i)
    g = np.tanh(block.W_g @ z + block.b_g)
    o = _sigmoid(block.W_o @ z + block.b_o)
    c_new = f * state.c + i * g
    h_new = o * np.tanh(c_new)
    return LSTMState(h_new, c_new)


class _BlockCache:
    """Per-step intermediates retained for backpropagation through time."""

    __slots__ = ("x", "h_prev", "f", "i", "g", "o", "c", "tanh_c")

    def __init__(self, T, H, input_dim):
        self.x = np.zeros((T, input_dim))
        self.h_prev = np.zeros((T, H))
        self.f = np.zeros((T, H))
        self.i = np.zeros((T, H))
        self.g = np.zeros((T, H))
        self.o = np.zeros((T, H))
        self.c = np.zeros((T, H))
        self.tanh_c = np.zeros((T, H))


def _forward_block(block: LSTMBlock, window: np.ndarray, cache: Optional[_BlockCache]):
    H = block.hidden_dim
    h = np.zeros(H)
    c = np.zeros(H)
    Wf, Wi, Wg, Wo = block.weights()
    bf, bi, bg, bo = block.biases()
    for t in range(window.shape[0]):
        z = np.concatenate([h, window[t]])
        f = _sigmoid(Wf @ z + bf)
        i = _sigmoid(Wi @ z + bi)
        g = np.tanh(Wg @ z + bg)
        o = _sigmoid(Wo @ z + bo)
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        h_new = o * tanh_c
        if cache is not None:
            cache.x[t] = window[t]
            cache.h_prev[t] = h
            cache.f[t], cache.i[t], cache.g[t], cache.o[t] = f, i, g, o
            cache.c[t] = c_new
            cache.tanh_c[t] = tanh_c
        h, c = h_new, c_new
    return h


def _as_window(window, input_dim: int) -> np.ndarray:
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != input_dim:
        raise ValueError(f"window must be (T, {input_dim})")
    if arr.shape[0] == 0:
        raise ValueError("empty window")
    return arr


def lstm_forward(block: LSTMBlock, window) -> np.ndarray:
    """Fold :func:`lstm_step` over a window from the zero state; returns the
    final hidden state."""
    return _forward_block(block, _as_window(window, block.input_dim), None)


def combine_hidden(h_probe_pre, h_conj_pre, h_conj_post, sign: float = 1.0):
    """h_conj_post + sign * (h_conj_pre - h_probe_pre), elementwise."""
    h_probe_pre = np.asarray(h_probe_pre, dtype=np.float64)
    h_conj_pre = np.asarray(h_conj_pre, dtype=np.float64)
    h_conj_post = np.asarray(h_conj_post, dtype=np.float64)
    if not h_probe_pre.shape == h_conj_pre.shape == h_conj_post.shape:
        raise ValueError("hidden states must share shape")
    return h_conj_post + sign * (h_conj_pre - h_probe_pre)


def head_forward(head: LinearHead, h) -> float:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != head.w.shape:
        raise ValueError(f"hidden size {h.shape} != head size {head.w.shape}")
    return float(head.w @ h + head.b)


class ModelCache:
    """Forward intermediates for one sample, consumed by model_backward."""

    def __init__(self, model, block_caches, h_finals):
        self.model = model
        self.block_caches = block_caches
        self.h_finals = h_finals


def model_forward(model: RecoveryModel, win_probe_pre, win_conj_pre, win_conj_post,
                  return_cache: bool = False):
    """End-to-end prediction for one sample (three aligned windows)."""
    windows = [_as_window(w, 1) for w in (win_probe_pre, win_conj_pre, win_conj_post)]
    T = windows[0].shape[0]
    if any(w.shape[0] != T for w in windows):
        raise ValueError("windows must share length")
    caches = None
    h_finals = []
    if return_cache:
        caches = [_BlockCache(T, model.hidden_dim, 1) for _ in range(3)]
    for blk, win, cache in zip(model.blocks(), windows,
                               caches if caches else (None, None, None)):
        h_finals.append(_forward_block(blk, win, cache))
    h_comb = combine_hidden(*h_finals, sign=model.combiner_sign)
    pred = head_forward(model.head, h_comb)
    if return_cache:
        return pred, ModelCache(model, caches, h_finals)
    return pred


@dataclass
class BlockGradients:
    W_f: np.ndarray
    W_i: np.ndarray
    W_g: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray


@dataclass
class Gradients:
    """Same shapes as the model parameters."""

    blocks: tuple
    head_w: np.ndarray
    head_b: float


def _backward_block(block: LSTMBlock, cache: _BlockCache, dh_final) -> BlockGradients:
    H = block.hidden_dim
    D = H + block.input_dim
    T = cache.x.shape[0]
    Wf, Wi, Wg, Wo = block.weights()
    grads = BlockGradients(*[np.zeros((H, D)) for _ in range(4)],
                           *[np.zeros(H) for _ in range(4)])
    dh = np.array(dh_final, dtype=np.float64)
    dc = np.zeros(H)
    for t in range(T - 1, -1, -1):
        f, i, g, o = cache.f[t], cache.i[t], cache.g[t], cache.o[t]
        tanh_c = cache.tanh_c[t]
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c ** 2)
        c_prev = cache.c[t - 1] if t > 0 else np.zeros(H)
        df = dc * c_prev
        di = dc * g
        dg = dc * i
        da_f = df * f * (1.0 - f)
        da_i = di * i * (1.0 - i)
        da_g = dg * (1.0 - g ** 2)
        da_o = do * o * (1.0 - o)
        z = np.concatenate([cache.h_prev[t], cache.x[t]])
        grads.W_f += np.outer(da_f, z)
        grads.W_i += np.outer(da_i, z)
        grads.W_g += np.outer(da_g, z)
        grads.W_o += np.outer(da_o, z)
        grads.b_f += da_f
        grads.b_i += da_i
        grads.b_g += da_g
        grads.b_o += da_o
        dz = Wf.T @ da_f + Wi.T @ da_i + Wg.T @ da_g + Wo.T @ da_o
        dh = dz[:H]
        dc = dc * f
    return grads


def model_backward(model: RecoveryModel, cache: ModelCache, dloss_dpred: float) -> Gradients:
    """Exact gradients of the scalar loss w.r.t. every parameter.

    The combiner routes the hidden-state gradient with coefficients
    (+1, +sign, -sign) into (conj_post, conj_pre, probe_pre); the sign flip
    into the probe_pre block comes from the combiner's subtraction.
    """
    if cache.model is not model:
        raise ValueError("cache does not belong to this model (stale cache)")
    h_comb = combine_hidden(*cache.h_finals, sign=model.combiner_sign)
    head_w_grad = dloss_dpred * h_comb
    head_b_grad = float(dloss_dpred)
    dh_comb = dloss_dpred * model.head.w
    block_grads = []
    for blk, blk_cache, coef in zip(model.blocks(), cache.block_caches,
                                    model.stream_coefficients()):
        block_grads.append(_backward_block(blk, blk_cache, coef * dh_comb))
    return Gradients(tuple(block_grads), head_w_grad, head_b_grad)


# ---------------------------------------------------------------------------
# flat parameter vector (optimizer interface)


def _block_param_arrays(block: LSTMBlock):
    return [getattr(block, n) for n in GATE_NAMES] + [getattr(block, n) for n in BIAS_NAMES]


def params_to_vector(model) -> np.ndarray:
    parts = []
    for blk in model.blocks():
        parts.extend(a.ravel() for a in _block_param_arrays(blk))
    parts.append(np.asarray(model.head.w).ravel())
    parts.append(np.array([model.head.b]))
    return np.concatenate(parts)


def grads_to_vector(model, grads: Gradients) -> np.ndarray:
    parts = []
    for bg in grads.blocks:
        parts.extend(getattr(bg, n).ravel() for n in GATE_NAMES)
        parts.extend(getattr(bg, n).ravel() for n in BIAS_NAMES)
    parts.append(np.asarray(grads.head_w).ravel())
    parts.append(np.array([grads.head_b]))
    return np.concatenate(parts)


def set_params_from_vector(model, vec: np.ndarray) -> None:
    """Write a flat vector back into the model arrays, in place."""
    off = 0
    for blk in model.blocks():
        for arr in _block_param_arrays(blk):
            n = arr.size
            np.copyto(arr, vec[off:off + n].reshape(arr.shape))
            off += n
    n = model.head.w.size
    np.copyto(model.head.w, vec[off:off + n])
    off += n
    model.head.b = float(vec[off])
    off += 1
    if off != vec.size:
        raise ValueError(f"vector length {vec.size} != parameter count {off}")


# ---------------------------------------------------------------------------
# checkpoint container


def _model_sections(model):
    names = BLOCK_NAMES if isinstance(model, RecoveryModel) else ("block",)
    sections = []
    for name, blk in zip(names, model.blocks()):
        for pname in GATE_NAMES + BIAS_NAMES:
            sections.append((f"{name}.{pname}", getattr(blk, pname)))
    sections.append(("head.w", np.asarray(model.head.w)))
    sections.append(("head.b", np.array([model.head.b])))
    return sections


def save_checkpoint(model, path, meta: Optional[dict] = None) -> None:
    """Versioned container with named parameter sections; byte-deterministic."""
    info = dict(meta or {})
    info["kind"] = "recovery" if isinstance(model, RecoveryModel) else "single"
    info["hidden_dim"] = int(model.hidden_dim)
    info["input_dim"] = int(model.blocks()[0].input_dim)
    info["window_len"] = int(model.window_len)
    if isinstance(model, RecoveryModel):
        info["combiner_sign"] = float(model.combiner_sign)
    meta_bytes = json.dumps(info, sort_keys=True, separators=(",", ":")).encode()
    sections = _model_sections(model)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHI", _CKPT_MAGIC, _CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(sections)))
        for name, arr in sections:
            name_b = name.encode()
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, meta); bit-exact inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        head = fh.read(struct.calcsize("<4sHI"))
        magic, version, meta_len = struct.unpack("<4sHI", head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode())
        (n_sections,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    def build_block(prefix):
        return LSTMBlock(*[arrays[f"{prefix}.{n}"] for n in GATE_NAMES],
                         *[arrays[f"{prefix}.{n}"] for n in BIAS_NAMES])
    head_obj = LinearHead(arrays["head.w"], float(arrays["head.b"][0]))
    if meta["kind"] == "recovery":
        model = RecoveryModel(*[build_block(n) for n in BLOCK_NAMES], head=head_obj,
                              window_len=meta["window_len"],
                              combiner_sign=meta.get("combiner_sign", 1.0))
    else:
        model = SingleStreamModel(build_block("block"), head_obj, meta["window_len"])
    return model, meta
