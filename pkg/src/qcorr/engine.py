"""Batched training engine.

Two interchangeable backends drive the training loop:

* :class:`FastEngine` - numba-compiled single-precision kernels, specialized
  per (hidden_dim, window_len, n_blocks) with the dimensions baked in as
  compile-time constants (the compiler only vectorizes these loops well with
  constant trip counts).  Single-threaded and strictly deterministic: samples
  are processed in index order and gradients accumulate into a fixed number
  of chunk buffers that are reduced in fixed order.
* :class:`ReferenceEngine` - the double-precision reference path built on
  :mod:`qcorr.neural`, used for cross-checking and tiny runs.

Windows are never materialized: kernels read them straight out of the full
normalized streams via per-sample start indices.
"""

from __future__ import annotations

import numpy as np
from numba import njit, types
from numba.extending import intrinsic
from llvmlite import ir

from . import neural

N_CHUNKS = 8

MSE = 0
MAE = 1

_F32 = np.float32


@intrinsic
def _bits_to_f32(typingctx, x):
    sig = types.float32(types.int32)

    def codegen(context, builder, signature, args):
        return builder.bitcast(args[0], ir.FloatType())

    return sig, codegen


_LOG2E = _F32(1.4426950408889634)
_LN2_HI = _F32(0.693359375)
_LN2_LO = _F32(-2.12194440e-4)
_HALF = _F32(0.5)
_ONE = _F32(1.0)
_TWO = _F32(2.0)
_ZERO = _F32(0.0)
_CLAMP = _F32(87.0)
_E2 = _F32(0.5)
_E3 = _F32(1.0 / 6.0)
_E4 = _F32(1.0 / 24.0)
_E5 = _F32(1.0 / 120.0)
_E6 = _F32(1.0 / 720.0)
_E7 = _F32(1.0 / 5040.0)
_I127 = np.int32(127)
_I23 = np.int32(23)


@njit(fastmath=True, inline="always")
def _expf(v):
    # range-reduced polynomial expf; ~1 ulp over the clamped range
    v = min(max(v, -_CLAMP), _CLAMP)
    s = _HALF if v >= _ZERO else -_HALF
    n_i = np.int32(v * _LOG2E + s)
    fn = _F32(n_i)
    r = v - fn * _LN2_HI
    r -= fn * _LN2_LO
    p = _E7
    p = _E6 + r * p
    p = _E5 + r * p
    p = _E4 + r * p
    p = _E3 + r * p
    p = _E2 + r * p
    p = _ONE + r * p
    p = _ONE + r * p
    return p * _bits_to_f32((n_i + _I127) << _I23)


@njit(fastmath=True, inline="always")
def _sigmoidf(v):
    return _ONE / (_ONE + _expf(-v))


@njit(fastmath=True, inline="always")
def _tanhf(v):
    e = _expf(-_TWO * v)
    return (_ONE - e) / (_ONE + e)


_KERNELS: dict = {}


def get_kernels(hidden_dim: int, window_len: int, n_blocks: int):
    """Compiled (train, eval) kernel pair for the given dimensions."""
    key = (hidden_dim, window_len, n_blocks)
    if key not in _KERNELS:
        _KERNELS[key] = _build_kernels(*key)
    return _KERNELS[key]


def _build_kernels(H: int, T: int, NB: int):
    G4 = 4 * H
    D = H + 1
    WSZ = D * G4
    CH = N_CHUNKS

    @njit(fastmath=True, nogil=True)
    def train_batch(Wts, Wgs, bs, hw, hb, coefs, streams, starts, y,
                    loss_kind, inv_n, preds, cgW, cgb, cghw, cghb,
                    gates, cc, tc, hh, da_all, pre, h, c, dh, dc, dcjb, hfin):
        B = starts.shape[0]
        for ci in range(CH):
            lo = ci * B // CH
            hi = (ci + 1) * B // CH
            for s in range(lo, hi):
                st = starts[s]
                # forward each block over its stream window
                for nb in range(NB):
                    Wt = Wts[nb]
                    bb = bs[nb]
                    goff = nb * T * G4
                    hoff = nb * T * H
                    for j in range(H):
                        h[j] = _ZERO
                        c[j] = _ZERO
                    for t in range(T):
                        xt = streams[nb, st + t]
                        for j in range(G4):
                            pre[j] = bb[j] + Wt[H * G4 + j] * xt
                        for k0 in range(0, H, 4):
                            h0 = h[k0]
                            h1 = h[k0 + 1]
                            h2 = h[k0 + 2]
                            h3 = h[k0 + 3]
                            b0 = k0 * G4
                            b1 = b0 + G4
                            b2 = b1 + G4
                            b3 = b2 + G4
                            for j in range(G4):
                                pre[j] += (Wt[b0 + j] * h0 + Wt[b1 + j] * h1
                                           + Wt[b2 + j] * h2 + Wt[b3 + j] * h3)
                        gb = goff + t * G4
                        hb_i = hoff + t * H
                        for j in range(2 * H):
                            gates[gb + j] = _sigmoidf(pre[j])
                        for j in range(2 * H, 3 * H):
                            gates[gb + j] = _tanhf(pre[j])
                        for j in range(3 * H, G4):
                            gates[gb + j] = _sigmoidf(pre[j])
                        for j in range(H):
                            cn = (gates[gb + j] * c[j]
                                  + gates[gb + H + j] * gates[gb + 2 * H + j])
                            c[j] = cn
                            cc[hb_i + j] = cn
                            tn = _tanhf(cn)
                            tc[hb_i + j] = tn
                            hn = gates[gb + 3 * H + j] * tn
                            hh[hb_i + j] = hn
                            h[j] = hn
                    for j in range(H):
                        hfin[nb, j] = h[j]
                # head + loss gradient
                p = hb
                for nb in range(NB):
                    cnb = coefs[nb]
                    for j in range(H):
                        p += hw[j] * cnb * hfin[nb, j]
                preds[s] = p
                diff = p - y[s]
                if loss_kind == 0:
                    dpred = _TWO * diff * inv_n
                else:
                    dpred = (_ONE if diff > _ZERO else (-_ONE if diff < _ZERO else _ZERO)) * inv_n
                for nb in range(NB):
                    cnb = coefs[nb]
                    for j in range(H):
                        cghw[ci, j] += dpred * cnb * hfin[nb, j]
                cghb[ci, 0] += dpred
                # backward each block
                for nb in range(NB):
                    cnb = coefs[nb]
                    Wg = Wgs[nb]
                    goff = nb * T * G4
                    hoff = nb * T * H
                    woff = (ci * NB + nb) * WSZ
                    boff = (ci * NB + nb) * G4
                    for j in range(H):
                        dh[j] = dpred * hw[j] * cnb
                        dc[j] = _ZERO
                    for t in range(T - 1, -1, -1):
                        gb = goff + t * G4
                        hb_i = hoff + t * H
                        pb = hb_i - H
                        dab = t * G4
                        for j in range(H):
                            o = gates[gb + 3 * H + j]
                            tcv = tc[hb_i + j]
                            dhj = dh[j]
                            dcj = dc[j] + dhj * o * (_ONE - tcv * tcv)
                            dcjb[j] = dcj
                            da_all[dab + 3 * H + j] = (dhj * tcv) * o * (_ONE - o)
                            dc[j] = dcj * gates[gb + j]
                        if t > 0:
                            for j in range(H):
                                f = gates[gb + j]
                                da_all[dab + j] = (dcjb[j] * cc[pb + j]) * f * (_ONE - f)
                        else:
                            for j in range(H):
                                da_all[dab + j] = _ZERO
                        for j in range(H):
                            i = gates[gb + H + j]
                            g = gates[gb + 2 * H + j]
                            da_all[dab + H + j] = (dcjb[j] * g) * i * (_ONE - i)
                            da_all[dab + 2 * H + j] = (dcjb[j] * i) * (_ONE - g * g)
                        if t > 0:
                            for k in range(H):
                                dh[k] = _ZERO
                            for j0 in range(0, G4, 4):
                                d0 = da_all[dab + j0]
                                d1 = da_all[dab + j0 + 1]
                                d2 = da_all[dab + j0 + 2]
                                d3 = da_all[dab + j0 + 3]
                                c0 = j0 * D
                                c1 = c0 + D
                                c2 = c1 + D
                                c3 = c2 + D
                                for k in range(H):
                                    dh[k] += (Wg[c0 + k] * d0 + Wg[c1 + k] * d1
                                              + Wg[c2 + k] * d2 + Wg[c3 + k] * d3)
                    # weight gradient accumulation (Wt layout)
                    xb = woff + H * G4
                    for t in range(T):
                        dab = t * G4
                        xt = streams[nb, st + t]
                        for j in range(G4):
                            d = da_all[dab + j]
                            cgW[xb + j] += xt * d
                            cgb[boff + j] += d
                    for k0 in range(0, H, 4):
                        kb0 = woff + k0 * G4
                        kb1 = kb0 + G4
                        kb2 = kb1 + G4
                        kb3 = kb2 + G4
                        for t in range(1, T):
                            zb = hoff + (t - 1) * H + k0
                            z0 = hh[zb]
                            z1 = hh[zb + 1]
                            z2 = hh[zb + 2]
                            z3 = hh[zb + 3]
                            dab = t * G4
                            for j in range(G4):
                                d = da_all[dab + j]
                                cgW[kb0 + j] += z0 * d
                                cgW[kb1 + j] += z1 * d
                                cgW[kb2 + j] += z2 * d
                                cgW[kb3 + j] += z3 * d

    @njit(fastmath=True, nogil=True)
    def eval_batch(Wts, bs, hw, hb, coefs, streams, starts, preds, pre, h, c):
        B = starts.shape[0]
        for s in range(B):
            st = starts[s]
            p = hb
            for nb in range(NB):
                Wt = Wts[nb]
                bb = bs[nb]
                for j in range(H):
                    h[j] = _ZERO
                    c[j] = _ZERO
                for t in range(T):
                    xt = streams[nb, st + t]
                    for j in range(G4):
                        pre[j] = bb[j] + Wt[H * G4 + j] * xt
                    for k0 in range(0, H, 4):
                        h0 = h[k0]
                        h1 = h[k0 + 1]
                        h2 = h[k0 + 2]
                        h3 = h[k0 + 3]
                        b0 = k0 * G4
                        b1 = b0 + G4
                        b2 = b1 + G4
                        b3 = b2 + G4
                        for j in range(G4):
                            pre[j] += (Wt[b0 + j] * h0 + Wt[b1 + j] * h1
                                       + Wt[b2 + j] * h2 + Wt[b3 + j] * h3)
                    for j in range(2 * H):
                        pre[j] = _sigmoidf(pre[j])
                    for j in range(2 * H, 3 * H):
                        pre[j] = _tanhf(pre[j])
                    for j in range(3 * H, G4):
                        pre[j] = _sigmoidf(pre[j])
                    for j in range(H):
                        cn = pre[j] * c[j] + pre[H + j] * pre[2 * H + j]
                        c[j] = cn
                        h[j] = pre[3 * H + j] * _tanhf(cn)
                cnb = coefs[nb]
                for j in range(H):
                    p += hw[j] * cnb * h[j]
            preds[s] = p

    return train_batch, eval_batch


def _pack_block(block) -> tuple:
    """(Wt flat (D*G4,), Wg flat (G4*D,), b (G4,)) in float32.

    Wg stacks the four gate matrices row-wise ((G4, D) layout); Wt is its
    transpose ((D, G4) layout) used by the forward GEMV and the weight
    gradient accumulation.
    """
    Wg = np.vstack(block.weights()).astype(_F32)
    Wt = np.ascontiguousarray(Wg.T)
    b = np.concatenate(block.biases()).astype(_F32)
    return Wt.ravel(), Wg.ravel(), b


def _unpack_grad(dWt_flat: np.ndarray, H: int):
    """Inverse of the Wt packing: (D*G4,) -> list of four (H, D) gate grads."""
    D = H + 1
    G4 = 4 * H
    full = dWt_flat.reshape(D, G4).T  # (G4, D) == stacked gate rows
    return [full[g * H:(g + 1) * H] for g in range(4)]


class FastEngine:
    """Compiled f32 engine bound to one model's dimensions."""

    def __init__(self, model):
        self.model = model
        self.n_blocks = len(model.blocks())
        self.hidden_dim = model.hidden_dim
        self.window_len = model.window_len
        if self.hidden_dim % 4 != 0:
            raise ValueError("fast engine requires hidden_dim divisible by 4; "
                             "use the reference engine otherwise")
        self._train, self._eval = get_kernels(self.hidden_dim, self.window_len,
                                              self.n_blocks)
        H, G4, D = self.hidden_dim, 4 * self.hidden_dim, self.hidden_dim + 1
        NB, T, CH = self.n_blocks, self.window_len, N_CHUNKS
        self._cgW = np.zeros(CH * NB * D * G4, _F32)
        self._cgb = np.zeros(CH * NB * G4, _F32)
        self._cghw = np.zeros((CH, H), _F32)
        self._cghb = np.zeros((CH, 1), _F32)
        self._scratch = (
            np.empty(NB * T * G4, _F32), np.empty(NB * T * H, _F32),
            np.empty(NB * T * H, _F32), np.empty(NB * T * H, _F32),
            np.empty(T * G4, _F32), np.empty(G4, _F32), np.empty(H, _F32),
            np.empty(H, _F32), np.empty(H, _F32), np.empty(H, _F32),
            np.empty(H, _F32), np.empty((NB, H), _F32))
        self.refresh_params()

    def refresh_params(self) -> None:
        """Re-pack the model parameters into the f32 kernel layout."""
        packed = [_pack_block(b) for b in self.model.blocks()]
        self._Wts = np.stack([p[0] for p in packed])
        self._Wgs = np.stack([p[1] for p in packed])
        self._bs = np.stack([p[2] for p in packed])
        self._hw = np.asarray(self.model.head.w, dtype=_F32)
        self._hb = _F32(self.model.head.b)
        self._coefs = np.asarray(self.model.stream_coefficients(), dtype=_F32)

    def train_batch(self, streams: np.ndarray, starts: np.ndarray, targets: np.ndarray,
                    loss_kind: int):
        """One forward+backward pass over a batch.

        Returns (predictions float64 (B,), gradient vector float64 matching
        :func:`qcorr.neural.params_to_vector` order).
        """
        B = starts.size
        preds = np.empty(B, _F32)
        self._cgW[:] = 0
        self._cgb[:] = 0
        self._cghw[:] = 0
        self._cghb[:] = 0
        self._train(self._Wts, self._Wgs, self._bs, self._hw, self._hb, self._coefs,
                    streams, starts, targets.astype(_F32), loss_kind, _F32(1.0 / B),
                    preds, self._cgW, self._cgb, self._cghw, self._cghb,
                    *self._scratch)
        return preds.astype(np.float64), self._reduce_grads()

    def _reduce_grads(self) -> np.ndarray:
        H, NB = self.hidden_dim, self.n_blocks
        D, G4, CH = H + 1, 4 * H, N_CHUNKS
        WSZ = D * G4
        gW = self._cgW.astype(np.float64).reshape(CH, NB * WSZ).sum(axis=0)
        gb = self._cgb.astype(np.float64).reshape(CH, NB * G4).sum(axis=0)
        ghw = self._cghw.astype(np.float64).sum(axis=0)
        ghb = self._cghb.astype(np.float64).sum()
        parts = []
        for nb in range(NB):
            for gate_grad in _unpack_grad(gW[nb * WSZ:(nb + 1) * WSZ], H):
                parts.append(gate_grad.ravel())
            bias = gb[nb * G4:(nb + 1) * G4]
            parts.extend(bias[g * H:(g + 1) * H] for g in range(4))
        parts.append(ghw)
        parts.append(np.array([ghb]))
        return np.concatenate(parts)

    def eval_batch(self, streams: np.ndarray, starts: np.ndarray) -> np.ndarray:
        preds = np.empty(starts.size, _F32)
        H, G4 = self.hidden_dim, 4 * self.hidden_dim
        self._eval(self._Wts, self._bs, self._hw, self._hb, self._coefs,
                   streams, starts, preds,
                   np.empty(G4, _F32), np.empty(H, _F32), np.empty(H, _F32))
        return preds.astype(np.float64)

    @staticmethod
    def pack_streams(streams) -> np.ndarray:
        return np.ascontiguousarray(np.stack(streams), dtype=_F32)


class ReferenceEngine:
    """Double-precision engine built on the reference model math.

    Slow (per-sample Python loop); intended for cross-checks and small runs.
    """

    def __init__(self, model):
        self.model = model
        self.n_blocks = len(model.blocks())
        self.window_len = model.window_len

    def refresh_params(self) -> None:
        pass

    def train_batch(self, streams, starts, targets, loss_kind: int):
        B = starts.size
        T = self.window_len
        preds = np.empty(B)
        grad_vec = None
        for idx in range(B):
            st = int(starts[idx])
            wins = [streams[nb, st:st + T] for nb in range(self.n_blocks)]
            pred, cache = self._forward(wins)
            preds[idx] = pred
            diff = pred - targets[idx]
            if loss_kind == MSE:
                dpred = 2.0 * diff / B
            else:
                dpred = float(np.sign(diff)) / B
            g = self._backward(cache, dpred)
            grad_vec = g if grad_vec is None else grad_vec + g
        return preds, grad_vec

    def eval_batch(self, streams, starts):
        T = self.window_len
        preds = np.empty(starts.size)
        for idx in range(starts.size):
            st = int(starts[idx])
            wins = [streams[nb, st:st + T] for nb in range(self.n_blocks)]
            preds[idx] = self._forward(wins, want_cache=False)
        return preds

    def _forward(self, wins, want_cache: bool = True):
        from .neural import RecoveryModel, model_forward, lstm_forward, head_forward
        model = self.model
        if isinstance(model, RecoveryModel):
            return model_forward(model, *wins, return_cache=want_cache)
        # single-stream: combiner bypassed
        if want_cache:
            cache = neural._BlockCache(len(wins[0]), model.hidden_dim, 1)
            h = neural._forward_block(model.block, neural._as_window(wins[0], 1), cache)
            pred = head_forward(model.head, h)
            return pred, neural.ModelCache(model, [cache], [h])
        h = lstm_forward(model.block, wins[0])
        return head_forward(model.head, h)

    def _backward(self, cache, dpred):
        from .neural import RecoveryModel
        model = self.model
        if isinstance(model, RecoveryModel):
            grads = neural.model_backward(model, cache, dpred)
        else:
            head_w_grad = dpred * cache.h_finals[0]
            bg = neural._backward_block(model.block, cache.block_caches[0],
                                        dpred * model.head.w)
            grads = neural.Gradients((bg,), head_w_grad, float(dpred))
        return neural.grads_to_vector(model, grads)

    @staticmethod
    def pack_streams(streams) -> np.ndarray:
        return np.ascontiguousarray(np.stack(streams), dtype=np.float64)


def make_engine(model, kind: str = "fast"):
    if kind == "fast":
        return FastEngine(model)
    if kind == "reference":
        return ReferenceEngine(model)
    raise ValueError(f"unknown engine kind {kind!r}")
