"""Neural building blocks over autodiff tensors.

All layers accept batched input (leading batch axis). The single-sequence
forms ``[n, d]`` are accepted too and return unbatched results.

Convolution uses cross-correlation alignment with "same" zero padding:
output position ``t`` of a width-``k`` filter reads inputs
``t - (k - 1) // 2 ... t - (k - 1) // 2 + k - 1``.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor, record
from .errors import ConfigError, DataError, DimensionError, InputError

GATE_BLOCKS = {"plain": 1, "lstm": 4, "gru": 3}


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float64):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def small_uniform(rng, shape, dtype=np.float64, scale=0.05):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def _param(data, name):
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# parameter aggregates
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    weight: Tensor  # [vocab_size, d]; row 0 is padding

    @classmethod
    def init(cls, rng, vocab_size, dim, dtype=np.float64, name="embedding"):
        w = small_uniform(rng, (vocab_size, dim), dtype)
        w[0] = 0.0
        return cls(_param(w, name))

    @property
    def vocab_size(self):
        return self.weight.shape[0]

    def parameters(self):
        return {self.weight.name: self.weight}


@dataclass
class ConvBlockParams:
    widths: List[int]
    weights: List[Tensor]  # each [k, d_in, channels]
    biases: List[Tensor]  # each [channels]

    def __post_init__(self):
        if list(self.widths) != sorted(set(self.widths)):
            raise ConfigError(f"conv widths must be strictly increasing, got {self.widths}")
        chans = {w.shape[2] for w in self.weights}
        if len(chans) != 1:
            raise ConfigError(f"conv widths must share one channel count, got {sorted(chans)}")

    @classmethod
    def init(cls, rng, widths, d_in, channels, dtype=np.float64, prefix="conv"):
        weights, biases = [], []
        for k in widths:
            weights.append(_param(
                glorot_uniform(rng, (k, d_in, channels), k * d_in, channels, dtype), f"{prefix}.w{k}"))
            biases.append(_param(np.zeros(channels, dtype), f"{prefix}.b{k}"))
        return cls(list(widths), weights, biases)

    @property
    def channels(self):
        return self.weights[0].shape[2]

    @property
    def out_width(self):
        return self.channels * len(self.widths)

    def parameters(self):
        out = {}
        for w, b in zip(self.weights, self.biases):
            out[w.name] = w
            out[b.name] = b
        return out


@dataclass
class RecurrentCellParams:
    kind: str
    W: Tensor  # [d_in, blocks * H]
    U: Tensor  # [H, blocks * H]
    b: Tensor  # [blocks * H]

    def __post_init__(self):
        if self.kind not in GATE_BLOCKS:
            raise ConfigError(f"unknown recurrent cell kind {self.kind!r}")
        G = GATE_BLOCKS[self.kind] * self.hidden_size
        if self.W.shape[1] != G or self.U.shape != (self.hidden_size, G) or self.b.shape != (G,):
            raise DimensionError(
                f"{self.kind} cell shapes inconsistent: W{self.W.shape} U{self.U.shape} b{self.b.shape}")

    @classmethod
    def init(cls, rng, kind, d_in, hidden, dtype=np.float64, prefix="rnn", forget_bias=1.0):
        if kind not in GATE_BLOCKS:
            raise ConfigError(f"unknown recurrent cell kind {kind!r}")
        nb = GATE_BLOCKS[kind]
        W = np.concatenate(
            [glorot_uniform(rng, (d_in, hidden), d_in, hidden, dtype) for _ in range(nb)], axis=1)
        U = np.concatenate(
            [glorot_uniform(rng, (hidden, hidden), hidden, hidden, dtype) for _ in range(nb)], axis=1)
        b = np.zeros(nb * hidden, dtype)
        if kind == "lstm":
            b[hidden:2 * hidden] = forget_bias
        return cls(kind, _param(W, f"{prefix}.W"), _param(U, f"{prefix}.U"), _param(b, f"{prefix}.b"))

    @property
    def hidden_size(self):
        return self.U.shape[0]

    @property
    def input_size(self):
        return self.W.shape[0]

    def parameters(self):
        return {t.name: t for t in (self.W, self.U, self.b)}


@dataclass
class AttentionParams:
    U: Tensor  # [H', A]
    b: Tensor  # [A]
    z: Tensor  # [A]

    def __post_init__(self):
        if self.z.shape != (self.U.shape[1],) or self.b.shape != (self.U.shape[1],):
            raise DimensionError(
                f"attention shapes inconsistent: U{self.U.shape} b{self.b.shape} z{self.z.shape}")

    @classmethod
    def init(cls, rng, d_in, d_att=None, dtype=np.float64, prefix="att"):
        d_att = d_in if d_att is None else d_att
        return cls(
            _param(glorot_uniform(rng, (d_in, d_att), d_in, d_att, dtype), f"{prefix}.U"),
            _param(np.zeros(d_att, dtype), f"{prefix}.b"),
            _param(small_uniform(rng, (d_att,), dtype), f"{prefix}.z"),
        )

    def parameters(self):
        return {t.name: t for t in (self.U, self.b, self.z)}


@dataclass
class DenseParams:
    W: Tensor  # [d_in, d_out]
    b: Tensor  # [d_out]

    @classmethod
    def init(cls, rng, d_in, d_out, dtype=np.float64, prefix="out"):
        return cls(
            _param(glorot_uniform(rng, (d_in, d_out), d_in, d_out, dtype), f"{prefix}.W"),
            _param(np.zeros(d_out, dtype), f"{prefix}.b"),
        )

    def parameters(self):
        return {self.W.name: self.W, self.b.name: self.b}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _lift(x: Tensor, rank: int):
    """Add a batch axis to an unbatched input; returns (tensor, was_unbatched)."""
    if x.data.ndim == rank - 1:
        return ad.reshape(x, (1,) + x.shape), True
    if x.data.ndim != rank:
        raise DimensionError(f"expected a rank-{rank - 1} or rank-{rank} tensor, got shape {x.shape}")
    return x, False


def _drop(x: Tensor, squeeze: bool):
    return ad.reshape(x, x.shape[1:]) if squeeze else x


def _mask_array(mask, shape, dtype):
    """Float mask of ``shape`` ([B, n]); ``None`` means all positions real."""
    if mask is None:
        return np.ones(shape, dtype)
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 1:
        m = m[None, :]
    if m.shape != tuple(shape):
        raise DimensionError(f"mask shape {m.shape} does not match sequence shape {tuple(shape)}")
    return m.astype(dtype)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------


def embed_sequence(token_ids, table: EmbeddingTable) -> Tensor:
    """Row lookup; the padding row (id 0) never receives gradient."""
    ids = np.asarray(token_ids, dtype=np.int64)
    V = table.vocab_size
    bad = np.argwhere((ids < 0) | (ids >= V))
    if bad.size:
        pos = tuple(int(i) for i in bad[0])
        raise DataError(f"token id {int(ids[pos])} at position {pos} outside vocabulary of size {V}")
    W = table.weight
    out = W.data[ids]

    def back(g):
        gw = _kernels.active.embedding_backward(g, ids, V)
        gw[0] = 0.0
        return (gw,)

    return record(out, (W,), back, "embedding")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _conv_cols(X, k):
    B, n, d = X.shape
    left = (k - 1) // 2
    pad = np.zeros((B, n + k - 1, d), X.dtype)
    pad[:, left:left + n] = X
    win = np.lib.stride_tricks.sliding_window_view(pad, k, axis=1)  # [B, n, d, k]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B * n, k * d)


def conv1d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single-width same-length convolution over axis 1 of ``[B, n, d]``."""
    X = x.data
    B, n, d = X.shape
    k, d_w, c = weight.shape
    if d_w != d:
        raise DimensionError(f"conv filter expects {d_w} input features, got {d}")
    left = (k - 1) // 2
    cols = _conv_cols(X, k)
    Wm = weight.data.reshape(k * d, c)
    out = (cols @ Wm).reshape(B, n, c) + bias.data

    def back(g):
        g2 = g.reshape(B * n, c)
        gW = (cols.T @ g2).reshape(k, d, c)
        gb = g2.sum(axis=0)
        gcols = (g2 @ Wm.T).reshape(B, n, k, d)
        gpad = np.zeros((B, n + k - 1, d), g.dtype)
        for j in range(k):
            gpad[:, j:j + n] += gcols[:, :, j]
        return gpad[:, left:left + n], gW, gb

    return record(out, (x, weight, bias), back, "conv1d")


def conv1d_multi(x: Tensor, params: ConvBlockParams) -> Tensor:
    """Every width convolved, relu applied, outputs concatenated on channels."""
    xb, single = _lift(x, 3)
    n = xb.shape[1]
    if n < max(params.widths):
        raise InputError(f"sequence length {n} shorter than widest filter {max(params.widths)}")
    maps = [
        ad.apply_activation(conv1d_same(xb, w, b), "relu")
        for w, b in zip(params.weights, params.biases)
    ]
    out = maps[0] if len(maps) == 1 else ad.concat(maps, axis=-1)
    return _drop(out, single)


def max_pool(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling over time; the last window may be short."""
    if window < 1:
        raise ConfigError(f"pool window must be >= 1, got {window}")
    xb, single = _lift(x, 3)
    n = xb.shape[1]
    out, argidx = _kernels.active.maxpool_forward(xb.data, int(window))
    res = record(out, (xb,), lambda g: (_kernels.active.maxpool_backward(g, argidx, n),), "maxpool")
    return _drop(res, single)


def pool_mask(mask, window):
    """A pooled position is real iff its window holds at least one real token."""
    m = np.asarray(mask, dtype=bool)
    B, n = m.shape
    P = -(-n // window)
    padded = np.zeros((B, P * window), bool)
    padded[:, :n] = m
    return padded.reshape(B, P, window).any(axis=2)


# ---------------------------------------------------------------------------
# recurrent cells (composed from primitives)
# ---------------------------------------------------------------------------


def _check_kind(params, kind):
    if params.kind != kind:
        raise ConfigError(f"expected a {kind} cell, got {params.kind}")


def _check_state(h, params):
    if h.shape[-1] != params.hidden_size:
        raise DimensionError(f"state width {h.shape[-1]} != hidden size {params.hidden_size}")


def lstm_step(x_t: Tensor, state: Tuple[Tensor, Tensor], params: RecurrentCellParams):
    """One LSTM step without peepholes; gate blocks ordered ``[i, f, g, o]``."""
    _check_kind(params, "lstm")
    h, c = state
    _check_state(h, params)
    _check_state(c, params)
    H = params.hidden_size
    a = ad.add(ad.add(ad.matmul(x_t, params.W), ad.matmul(h, params.U)), params.b)
    ax = a.data.ndim - 1
    i = ad.apply_activation(ad.index_select(a, ax, np.arange(0, H)), "sigmoid")
    f = ad.apply_activation(ad.index_select(a, ax, np.arange(H, 2 * H)), "sigmoid")
    g = ad.apply_activation(ad.index_select(a, ax, np.arange(2 * H, 3 * H)), "tanh")
    o = ad.apply_activation(ad.index_select(a, ax, np.arange(3 * H, 4 * H)), "sigmoid")
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.apply_activation(c_new, "tanh"))
    return h_new, c_new


def gru_step(x_t: Tensor, h: Tensor, params: RecurrentCellParams) -> Tensor:
    """One GRU step; the reset gate multiplies ``h`` before ``U_n``."""
    _check_kind(params, "gru")
    _check_state(h, params)
    H = params.hidden_size
    ax = h.data.ndim - 1
    xw = ad.add(ad.matmul(x_t, params.W), params.b)
    U = params.U
    Uz = ad.index_select(U, 1, np.arange(0, H))
    Ur = ad.index_select(U, 1, np.arange(H, 2 * H))
    Un = ad.index_select(U, 1, np.arange(2 * H, 3 * H))
    z = ad.apply_activation(
        ad.add(ad.index_select(xw, ax, np.arange(0, H)), ad.matmul(h, Uz)), "sigmoid")
    r = ad.apply_activation(
        ad.add(ad.index_select(xw, ax, np.arange(H, 2 * H)), ad.matmul(h, Ur)), "sigmoid")
    n = ad.apply_activation(
        ad.add(ad.index_select(xw, ax, np.arange(2 * H, 3 * H)), ad.matmul(ad.mul(r, h), Un)), "tanh")
    # (1 - z) * h + z * n
    return ad.add(h, ad.mul(z, ad.sub(n, h)))


def plain_step(x_t: Tensor, h: Tensor, params: RecurrentCellParams, activation="tanh") -> Tensor:
    _check_kind(params, "plain")
    _check_state(h, params)
    a = ad.add(ad.add(ad.matmul(h, params.U), ad.matmul(x_t, params.W)), params.b)
    return ad.apply_activation(a, activation)


def _masked_carry(new: Tensor, old: Tensor, m: np.ndarray) -> Tensor:
    return ad.add(ad.mul(new, m), ad.mul(old, 1.0 - m))


def run_rnn_unfused(x: Tensor, cell: RecurrentCellParams, direction="forward", mask=None) -> Tensor:
    """Unroll ``cell`` step by step with composed primitives.

    Reference path for the fused kernels and the only path for plain cells.
    """
    xb, single = _lift(x, 3)
    B, T, _ = xb.shape
    if T < 1:
        raise InputError("run_rnn: empty sequence")
    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be forward or backward, got {direction!r}")
    m = _mask_array(mask, (B, T), xb.dtype)
    H = cell.hidden_size
    h = Tensor(np.zeros((B, H), xb.dtype))
    c = Tensor(np.zeros((B, H), xb.dtype))
    order = range(T) if direction == "forward" else range(T - 1, -1, -1)
    outs = [None] * T
    for t in order:
        x_t = ad.index_select(xb, 1, t)
        mt = m[:, t:t + 1]
        if cell.kind == "lstm":
            h_new, c_new = lstm_step(x_t, (h, c), cell)
            c = _masked_carry(c_new, c, mt)
        elif cell.kind == "gru":
            h_new = gru_step(x_t, h, cell)
        else:
            h_new = plain_step(x_t, h, cell)
        h = _masked_carry(h_new, h, mt)
        outs[t] = ad.reshape(h, (B, 1, H))
    out = ad.concat(outs, axis=1)
    return _drop(out, single)


def _fused_sweep(xb: Tensor, cell: RecurrentCellParams, reverse: bool, m: np.ndarray) -> Tensor:
    K = _kernels.active
    X, W, U, b = xb.data, cell.W.data, cell.U.data, cell.b.data
    B, T, d = X.shape
    xw = X @ W + b
    if cell.kind == "lstm":
        saved = K.lstm_forward(xw, U, m, reverse)
        bwd = K.lstm_backward
    else:
        saved = K.gru_forward(xw, U, m, reverse)
        bwd = K.gru_backward
    hs = saved[0]

    def back(g):
        dxw, dU = bwd(np.ascontiguousarray(g), U, m, reverse, *saved)
        flat = dxw.reshape(B * T, -1)
        dW = X.reshape(B * T, d).T @ flat
        db = flat.sum(axis=0)
        dX = dxw @ W.T
        return dX, dW, dU, db

    return record(hs, (xb, cell.W, cell.U, cell.b), back, f"{cell.kind}_sweep")


def run_rnn(x: Tensor, cell: RecurrentCellParams, direction="forward", mask=None) -> Tensor:
    """Hidden state at every position, zero initial state.

    ``direction="backward"`` consumes the sequence from the end; row ``t`` of
    the output still corresponds to input position ``t``. Masked positions
    carry the previous state through unchanged.
    """
    if cell.kind == "plain":
        return run_rnn_unfused(x, cell, direction, mask)
    xb, single = _lift(x, 3)
    B, T, d = xb.shape
    if T < 1:
        raise InputError("run_rnn: empty sequence")
    if direction not in ("forward", "backward"):
        raise ConfigError(f"direction must be forward or backward, got {direction!r}")
    if d != cell.input_size:
        raise DimensionError(f"rnn input width {d} != cell input size {cell.input_size}")
    m = _mask_array(mask, (B, T), xb.dtype)
    out = _fused_sweep(xb, cell, direction == "backward", m)
    return _drop(out, single)


def birnn(x: Tensor, fwd: RecurrentCellParams, bwd: RecurrentCellParams, mask=None) -> Tensor:
    """Per-position concatenation ``[forward ; backward]``, width ``2H``."""
    if fwd.hidden_size != bwd.hidden_size:
        raise ConfigError(
            f"bidirectional hidden sizes differ: {fwd.hidden_size} vs {bwd.hidden_size}")
    return ad.concat([run_rnn(x, fwd, "forward", mask), run_rnn(x, bwd, "backward", mask)], axis=-1)


# ---------------------------------------------------------------------------
# attention and dense
# ---------------------------------------------------------------------------


def attention_pool(h: Tensor, params: AttentionParams, mask=None, beta: float = 1.0):
    """Soft attention over time.

    ``u_t = tanh(U h_t + b)``, ``score_t = u_t . z``, masked scores excluded,
    ``alpha = softmax(score / beta)``, ``c = sum_t alpha_t h_t``.
    Returns ``(c, alpha)``.
    """
    hb, single = _lift(h, 3)
    B, n, Hp = hb.shape
    if params.U.shape[0] != Hp:
        raise DimensionError(f"attention expects width {params.U.shape[0]}, got {Hp}")
    m = None if mask is None else _mask_array(mask, (B, n), np.float64).astype(bool)
    if m is not None and not m.any(axis=1).all():
        raise InputError("attention_pool: a sequence has every position masked")
    u = ad.apply_activation(ad.add(ad.matmul(hb, params.U), params.b), "tanh")
    A = params.z.shape[0]
    scores = ad.reshape(ad.matmul(u, ad.reshape(params.z, (A, 1))), (B, n))
    alpha = ad.softmax_rows(scores, beta, m)
    c = ad.reshape(ad.matmul(ad.reshape(alpha, (B, 1, n)), hb), (B, Hp))
    if single:
        return ad.reshape(c, (Hp,)), ad.reshape(alpha, (n,))
    return c, alpha


def dense(x: Tensor, params: DenseParams, activation: str = "none") -> Tensor:
    if x.shape[-1] != params.W.shape[0]:
        raise DimensionError(f"dense expects width {params.W.shape[0]}, got {x.shape[-1]}")
    y = ad.add(ad.matmul(x, params.W), params.b)
    if activation == "none":
        return y
    return ad.apply_activation(y, activation)
