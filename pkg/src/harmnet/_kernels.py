"""Hot inner loops: fused recurrent sweeps, pooling and scatter-adds.

Every kernel has two implementations with identical signatures:

* a pure-numpy path, vectorised over the batch and feature axes;
* a numba ``@njit`` path with explicit fused loops.

The numba path is used when numba imports and ``HARMNET_DISABLE_NUMBA`` is
unset (or ``0``). Set ``HARMNET_DISABLE_NUMBA=1`` to force numpy. Both paths
are kept importable (``numpy_kernels`` / ``numba_kernels``) so tests and the
benchmark can compare them directly.
"""

import os
import types

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _env_disabled():
    return os.environ.get("HARMNET_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _np_lstm_forward(xw, U, mask, reverse):
    """Masked LSTM sweep.

    ``xw`` holds the input projection ``x @ W + b`` with gate blocks
    ``[i, f, g, o]``. A masked step carries ``(h, c)`` through unchanged.
    Returns ``(hs, cs, gates, tanh_c)``.
    """
    B, T, G = xw.shape
    H = G // 4
    dt = xw.dtype
    hs = np.zeros((B, T, H), dt)
    cs = np.zeros((B, T, H), dt)
    gates = np.zeros((B, T, G), dt)
    tanh_c = np.zeros((B, T, H), dt)
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    for s in range(T):
        t = T - 1 - s if reverse else s
        a = xw[:, t] + h @ U
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[:, t][:, None]
        c = m * c_new + (1.0 - m) * c
        h = m * h_new + (1.0 - m) * h
        hs[:, t] = h
        cs[:, t] = c
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o
        tanh_c[:, t] = tc
    return hs, cs, gates, tanh_c


def _np_lstm_backward(dhs, U, mask, reverse, hs, cs, gates, tanh_c):
    """Backprop through the sweep. Returns ``(dxw, dU)``."""
    B, T, H = dhs.shape
    dt = dhs.dtype
    dxw = np.zeros((B, T, 4 * H), dt)
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, H), dt)
    dc_next = np.zeros((B, H), dt)
    zero = np.zeros((B, H), dt)
    for s in range(T - 1, -1, -1):
        t = T - 1 - s if reverse else s
        if s == 0:
            h_prev = zero
            c_prev = zero
        else:
            tp = t + 1 if reverse else t - 1
            h_prev = hs[:, tp]
            c_prev = cs[:, tp]
        m = mask[:, t][:, None]
        dh = dhs[:, t] + dh_next
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        tc = tanh_c[:, t]
        dh_new = m * dh
        dc_new = m * dc_next + dh_new * o * (1.0 - tc * tc)
        da = np.empty((B, 4 * H), dt)
        da[:, :H] = dc_new * g * i * (1.0 - i)
        da[:, H:2 * H] = dc_new * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc_new * i * (1.0 - g * g)
        da[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
        dxw[:, t] = da
        dU += h_prev.T @ da
        dh_next = da @ U.T + (1.0 - m) * dh
        dc_next = dc_new * f + (1.0 - m) * dc_next
    return dxw, dU


def _np_gru_forward(xw, U, mask, reverse):
    """Masked GRU sweep; gate blocks ``[z, r, n]``, reset applied before ``U_n``.

    Returns ``(hs, gates, rh)`` where ``rh`` is ``r * h_prev`` per step.
    """
    B, T, G = xw.shape
    H = G // 3
    dt = xw.dtype
    hs = np.zeros((B, T, H), dt)
    gates = np.zeros((B, T, G), dt)
    rh_all = np.zeros((B, T, H), dt)
    h = np.zeros((B, H), dt)
    Uzr = U[:, :2 * H]
    Un = U[:, 2 * H:]
    for s in range(T):
        t = T - 1 - s if reverse else s
        a = xw[:, t, :2 * H] + h @ Uzr
        z = _sigmoid(a[:, :H])
        r = _sigmoid(a[:, H:])
        rh = r * h
        n = np.tanh(xw[:, t, 2 * H:] + rh @ Un)
        h_new = (1.0 - z) * h + z * n
        m = mask[:, t][:, None]
        h = m * h_new + (1.0 - m) * h
        hs[:, t] = h
        gates[:, t, :H] = z
        gates[:, t, H:2 * H] = r
        gates[:, t, 2 * H:] = n
        rh_all[:, t] = rh
    return hs, gates, rh_all


def _np_gru_backward(dhs, U, mask, reverse, hs, gates, rh_all):
    B, T, H = dhs.shape
    dt = dhs.dtype
    dxw = np.zeros((B, T, 3 * H), dt)
    dU = np.zeros_like(U)
    Uz = U[:, :H]
    Ur = U[:, H:2 * H]
    Un = U[:, 2 * H:]
    dh_next = np.zeros((B, H), dt)
    zero = np.zeros((B, H), dt)
    for s in range(T - 1, -1, -1):
        t = T - 1 - s if reverse else s
        if s == 0:
            h_prev = zero
        else:
            h_prev = hs[:, t + 1 if reverse else t - 1]
        m = mask[:, t][:, None]
        dh = dhs[:, t] + dh_next
        z = gates[:, t, :H]
        r = gates[:, t, H:2 * H]
        n = gates[:, t, 2 * H:]
        dh_new = m * dh
        dan = dh_new * z * (1.0 - n * n)
        daz = dh_new * (n - h_prev) * z * (1.0 - z)
        drh = dan @ Un.T
        dar = drh * h_prev * r * (1.0 - r)
        dxw[:, t, :H] = daz
        dxw[:, t, H:2 * H] = dar
        dxw[:, t, 2 * H:] = dan
        dU[:, :H] += h_prev.T @ daz
        dU[:, H:2 * H] += h_prev.T @ dar
        dU[:, 2 * H:] += rh_all[:, t].T @ dan
        dh_next = (dh_new * (1.0 - z) + drh * r + daz @ Uz.T + dar @ Ur.T
                   + (1.0 - m) * dh)
    return dxw, dU


def _np_maxpool_forward(x, window):
    """Non-overlapping max over axis 1; returns ``(out, argidx)``.

    ``argidx`` holds the absolute time index of the first maximum.
    """
    B, n, c = x.shape
    P = -(-n // window)
    padded = np.full((B, P * window, c), -np.inf, x.dtype)
    padded[:, :n] = x
    blocks = padded.reshape(B, P, window, c)
    arg = blocks.argmax(axis=2)
    out = np.take_along_axis(blocks, arg[:, :, None, :], axis=2)[:, :, 0, :]
    argidx = arg + (np.arange(P) * window)[None, :, None]
    return np.ascontiguousarray(out), argidx.astype(np.int64)


def _np_maxpool_backward(dout, argidx, n):
    B, P, c = dout.shape
    dx = np.zeros((B, n, c), dout.dtype)
    bi = np.arange(B)[:, None, None]
    ci = np.arange(c)[None, None, :]
    # windows are disjoint so each (b, t, c) target receives at most one value
    dx[bi, argidx, ci] = dout
    return dx


def _np_embedding_backward(dout, ids, vocab_size):
    d = dout.shape[-1]
    grad = np.zeros((vocab_size, d), dout.dtype)
    np.add.at(grad, ids.reshape(-1), dout.reshape(-1, d))
    return grad


numpy_kernels = types.SimpleNamespace(
    lstm_forward=_np_lstm_forward,
    lstm_backward=_np_lstm_backward,
    gru_forward=_np_gru_forward,
    gru_backward=_np_gru_backward,
    maxpool_forward=_np_maxpool_forward,
    maxpool_backward=_np_maxpool_backward,
    embedding_backward=_np_embedding_backward,
)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


def _build_numba_kernels():
    njit = numba.njit(cache=True, fastmath=False)

    # libm tanh is several times dearer than exp per scalar call, and without
    # SVML these loops do not vectorise; both forms agree to rounding
    @njit
    def sig(x):
        return 1.0 / (1.0 + np.exp(-x))

    @njit
    def th(x):
        return 2.0 / (1.0 + np.exp(-2.0 * x)) - 1.0

    @njit
    def lstm_forward(xw, U, mask, reverse):
        B, T, G = xw.shape
        H = G // 4
        hs = np.zeros((B, T, H), xw.dtype)
        cs = np.zeros((B, T, H), xw.dtype)
        gates = np.zeros((B, T, G), xw.dtype)
        tanh_c = np.zeros((B, T, H), xw.dtype)
        h = np.zeros((B, H), xw.dtype)
        c = np.zeros((B, H), xw.dtype)
        for s in range(T):
            t = T - 1 - s if reverse else s
            a = np.dot(h, U)
            for b in range(B):
                if mask[b, t] == 0.0:
                    hs[b, t] = h[b]
                    cs[b, t] = c[b]
                    continue
                for k in range(H):
                    i = sig(xw[b, t, k] + a[b, k])
                    f = sig(xw[b, t, H + k] + a[b, H + k])
                    g = th(xw[b, t, 2 * H + k] + a[b, 2 * H + k])
                    o = sig(xw[b, t, 3 * H + k] + a[b, 3 * H + k])
                    cn = f * c[b, k] + i * g
                    tc = th(cn)
                    c[b, k] = cn
                    h[b, k] = o * tc
                    gates[b, t, k] = i
                    gates[b, t, H + k] = f
                    gates[b, t, 2 * H + k] = g
                    gates[b, t, 3 * H + k] = o
                    tanh_c[b, t, k] = tc
                hs[b, t] = h[b]
                cs[b, t] = c[b]
        return hs, cs, gates, tanh_c

    @njit
    def lstm_backward(dhs, U, mask, reverse, hs, cs, gates, tanh_c):
        B, T, H = dhs.shape
        dxw = np.zeros((B, T, 4 * H), dhs.dtype)
        dU = np.zeros_like(U)
        UT = np.ascontiguousarray(U.T)
        dh_next = np.zeros((B, H), dhs.dtype)
        dc_next = np.zeros((B, H), dhs.dtype)
        h_prev = np.zeros((B, H), dhs.dtype)
        c_prev = np.zeros((B, H), dhs.dtype)
        da = np.zeros((B, 4 * H), dhs.dtype)
        for s in range(T - 1, -1, -1):
            t = T - 1 - s if reverse else s
            if s == 0:
                h_prev[:] = 0.0
                c_prev[:] = 0.0
            else:
                tp = t + 1 if reverse else t - 1
                h_prev[:] = hs[:, tp]
                c_prev[:] = cs[:, tp]
            for b in range(B):
                if mask[b, t] == 0.0:
                    da[b] = 0.0
                    for k in range(H):
                        dh_next[b, k] += dhs[b, t, k]
                    continue
                for k in range(H):
                    dh = dhs[b, t, k] + dh_next[b, k]
                    i = gates[b, t, k]
                    f = gates[b, t, H + k]
                    g = gates[b, t, 2 * H + k]
                    o = gates[b, t, 3 * H + k]
                    tc = tanh_c[b, t, k]
                    dc = dc_next[b, k] + dh * o * (1.0 - tc * tc)
                    da[b, k] = dc * g * i * (1.0 - i)
                    da[b, H + k] = dc * c_prev[b, k] * f * (1.0 - f)
                    da[b, 2 * H + k] = dc * i * (1.0 - g * g)
                    da[b, 3 * H + k] = dh * tc * o * (1.0 - o)
                    dc_next[b, k] = dc * f
                    dh_next[b, k] = 0.0
            dxw[:, t] = da
            dU += np.dot(h_prev.T.copy(), da)
            dh_next += np.dot(da, UT)
        return dxw, dU

    @njit
    def gru_forward(xw, U, mask, reverse):
        B, T, G = xw.shape
        H = G // 3
        hs = np.zeros((B, T, H), xw.dtype)
        gates = np.zeros((B, T, G), xw.dtype)
        rh_all = np.zeros((B, T, H), xw.dtype)
        h = np.zeros((B, H), xw.dtype)
        rh = np.zeros((B, H), xw.dtype)
        Uzr = np.ascontiguousarray(U[:, :2 * H])
        Un = np.ascontiguousarray(U[:, 2 * H:])
        for s in range(T):
            t = T - 1 - s if reverse else s
            a = np.dot(h, Uzr)
            for b in range(B):
                for k in range(H):
                    r = sig(xw[b, t, H + k] + a[b, H + k])
                    gates[b, t, H + k] = r
                    gates[b, t, k] = sig(xw[b, t, k] + a[b, k])
                    rh[b, k] = r * h[b, k]
            an = np.dot(rh, Un)
            for b in range(B):
                rh_all[b, t] = rh[b]
                if mask[b, t] == 0.0:
                    hs[b, t] = h[b]
                    continue
                for k in range(H):
                    z = gates[b, t, k]
                    n = th(xw[b, t, 2 * H + k] + an[b, k])
                    gates[b, t, 2 * H + k] = n
                    h[b, k] = (1.0 - z) * h[b, k] + z * n
                hs[b, t] = h[b]
        return hs, gates, rh_all

    @njit
    def gru_backward(dhs, U, mask, reverse, hs, gates, rh_all):
        B, T, H = dhs.shape
        dxw = np.zeros((B, T, 3 * H), dhs.dtype)
        dU = np.zeros_like(U)
        UzT = np.ascontiguousarray(U[:, :H].T)
        UrT = np.ascontiguousarray(U[:, H:2 * H].T)
        UnT = np.ascontiguousarray(U[:, 2 * H:].T)
        dh_next = np.zeros((B, H), dhs.dtype)
        h_prev = np.zeros((B, H), dhs.dtype)
        dh_new = np.zeros((B, H), dhs.dtype)
        daz = np.zeros((B, H), dhs.dtype)
        dar = np.zeros((B, H), dhs.dtype)
        dan = np.zeros((B, H), dhs.dtype)
        carry = np.zeros((B, H), dhs.dtype)
        for s in range(T - 1, -1, -1):
            t = T - 1 - s if reverse else s
            if s == 0:
                h_prev[:] = 0.0
            else:
                h_prev[:] = hs[:, t + 1 if reverse else t - 1]
            for b in range(B):
                m = mask[b, t]
                for k in range(H):
                    dh = dhs[b, t, k] + dh_next[b, k]
                    if m == 0.0:
                        dh_new[b, k] = 0.0
                        carry[b, k] = dh
                        dan[b, k] = 0.0
                        daz[b, k] = 0.0
                    else:
                        z = gates[b, t, k]
                        n = gates[b, t, 2 * H + k]
                        dh_new[b, k] = dh
                        carry[b, k] = dh * (1.0 - z)
                        dan[b, k] = dh * z * (1.0 - n * n)
                        daz[b, k] = dh * (n - h_prev[b, k]) * z * (1.0 - z)
            drh = np.dot(dan, UnT)
            for b in range(B):
                for k in range(H):
                    r = gates[b, t, H + k]
                    dar[b, k] = drh[b, k] * h_prev[b, k] * r * (1.0 - r)
                    carry[b, k] += drh[b, k] * r
            dxw[:, t, :H] = daz
            dxw[:, t, H:2 * H] = dar
            dxw[:, t, 2 * H:] = dan
            hpT = h_prev.T.copy()
            dU[:, :H] += np.dot(hpT, daz)
            dU[:, H:2 * H] += np.dot(hpT, dar)
            dU[:, 2 * H:] += np.dot(rh_all[:, t].T.copy(), dan)
            dh_next[:] = carry + np.dot(daz, UzT) + np.dot(dar, UrT)
        return dxw, dU

    @njit
    def maxpool_forward(x, window):
        B, n, c = x.shape
        P = (n + window - 1) // window
        out = np.empty((B, P, c), x.dtype)
        argidx = np.empty((B, P, c), np.int64)
        for b in range(B):
            for p in range(P):
                start = p * window
                stop = min(start + window, n)
                for j in range(c):
                    best = x[b, start, j]
                    at = start
                    for t in range(start + 1, stop):
                        if x[b, t, j] > best:
                            best = x[b, t, j]
                            at = t
                    out[b, p, j] = best
                    argidx[b, p, j] = at
        return out, argidx

    @njit
    def maxpool_backward(dout, argidx, n):
        B, P, c = dout.shape
        dx = np.zeros((B, n, c), dout.dtype)
        for b in range(B):
            for p in range(P):
                for j in range(c):
                    dx[b, argidx[b, p, j], j] += dout[b, p, j]
        return dx

    @njit
    def embedding_backward_flat(dflat, flat_ids, vocab_size):
        N, d = dflat.shape
        grad = np.zeros((vocab_size, d), dflat.dtype)
        for r in range(N):
            row = flat_ids[r]
            for k in range(d):
                grad[row, k] += dflat[r, k]
        return grad

    def embedding_backward(dout, ids, vocab_size):
        d = dout.shape[-1]
        return embedding_backward_flat(
            np.ascontiguousarray(dout.reshape(-1, d)),
            np.ascontiguousarray(ids.reshape(-1).astype(np.int64)),
            vocab_size,
        )

    def _contig(fn):
        # numba specialises on layout; feed C-contiguous arrays only
        def wrapper(*args):
            args = tuple(np.ascontiguousarray(a) if isinstance(a, np.ndarray) else a for a in args)
            return fn(*args)

        wrapper.__name__ = fn.__name__
        return wrapper

    return types.SimpleNamespace(
        lstm_forward=_contig(lstm_forward),
        lstm_backward=_contig(lstm_backward),
        gru_forward=_contig(gru_forward),
        gru_backward=_contig(gru_backward),
        maxpool_forward=_contig(maxpool_forward),
        maxpool_backward=_contig(maxpool_backward),
        embedding_backward=embedding_backward,
    )


numba_kernels = _build_numba_kernels() if HAVE_NUMBA else None

active = numba_kernels if USE_NUMBA else numpy_kernels


def backend_name():
    return "numba" if active is numba_kernels else "numpy"
