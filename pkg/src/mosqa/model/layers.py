"""Forward and backward passes of the encoder/decoder building blocks.

Sequences are batched as ``(B, T, D)`` arrays with a ``(B, T)`` validity
mask; every utterance occupies a prefix of the time axis.  Positions past an
utterance's end carry zero outputs, which is also what the pyramid reduction
relies on for zero-padding its final partial group.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def lstm_cell_forward(W, U, b, x_t, h_prev, c_prev):
    """One LSTM step.  Gate blocks in ``W``/``U``/``b`` are ordered (i, f, g, o).

    Returns ``(h_t, c_t)``; works for single vectors or a leading batch axis.
    """
    h_t, c_t, _ = _cell(W, U, b, np.asarray(x_t) @ W + b, h_prev, c_prev)
    return h_t, c_t


def _cell(W, U, b, z_in, h_prev, c_prev):
    width = U.shape[0]
    if h_prev.shape[-1] != width or c_prev.shape[-1] != width or z_in.shape[-1] != 4 * width:
        raise ValueError("LSTM dimension mismatch")
    z = z_in + h_prev @ U
    act = expit(z)
    g = np.tanh(z[..., 2 * width:3 * width])
    act[..., 2 * width:3 * width] = g
    i = act[..., :width]
    f = act[..., width:2 * width]
    o = act[..., 3 * width:]
    c_t = f * c_prev + i * g
    tc = np.tanh(c_t)
    return o * tc, c_t, (act, tc)


class LSTMCache:
    __slots__ = ("x", "acts", "tcs", "h_prev", "c_prev", "mask", "reverse")


def lstm_direction_forward(x, mask, W, U, b, reverse=False):
    """Run one LSTM direction over a masked batch; returns outputs ``(B, T, H)`` and a cache."""
    n_batch, n_steps, _ = x.shape
    width = U.shape[0]
    z_in = x @ W + b
    h = np.zeros((n_batch, width))
    c = np.zeros((n_batch, width))
    y = np.zeros((n_batch, n_steps, width))
    cache = LSTMCache()
    cache.x, cache.mask, cache.reverse = x, mask, reverse
    cache.acts = np.empty((n_batch, n_steps, 4 * width))
    cache.tcs = np.empty((n_batch, n_steps, width))
    cache.h_prev = np.empty((n_batch, n_steps, width))
    cache.c_prev = np.empty((n_batch, n_steps, width))
    steps = range(n_steps - 1, -1, -1) if reverse else range(n_steps)
    for t in steps:
        m = mask[:, t, None]
        cache.h_prev[:, t] = h
        cache.c_prev[:, t] = c
        h_new, c_new, (act, tc) = _cell(W, U, b, z_in[:, t], h, c)
        cache.acts[:, t] = act
        cache.tcs[:, t] = tc
        y[:, t] = m * h_new
        # outside an utterance the state is held (forward) or stays at zero (backward)
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
    return y, cache


def lstm_direction_backward(dy, cache, W, U):
    """Gradients ``(dx, dW, dU, db)`` given the upstream gradient of the outputs."""
    n_batch, n_steps, width = dy.shape
    dz_all = np.zeros((n_batch, n_steps, 4 * width))
    dh = np.zeros((n_batch, width))
    dc = np.zeros((n_batch, width))
    steps = range(n_steps) if cache.reverse else range(n_steps - 1, -1, -1)
    U_T = U.T
    for t in steps:
        m = cache.mask[:, t, None]
        act = cache.acts[:, t]
        i = act[:, :width]
        f = act[:, width:2 * width]
        g = act[:, 2 * width:3 * width]
        o = act[:, 3 * width:]
        tc = cache.tcs[:, t]
        dh_new = m * (dy[:, t] + dh)
        dc_new = m * dc + dh_new * o * (1.0 - tc * tc)
        dz = dz_all[:, t]
        dz[:, :width] = dc_new * g * i * (1.0 - i)
        dz[:, width:2 * width] = dc_new * cache.c_prev[:, t] * f * (1.0 - f)
        dz[:, 2 * width:3 * width] = dc_new * i * (1.0 - g * g)
        dz[:, 3 * width:] = dh_new * tc * o * (1.0 - o)
        dh = (1.0 - m) * dh + dz @ U_T
        dc = (1.0 - m) * dc + dc_new * f
    x = cache.x
    dz_flat = dz_all.reshape(-1, 4 * width)
    dW = x.reshape(-1, x.shape[-1]).T @ dz_flat
    dU = cache.h_prev.reshape(-1, width).T @ dz_flat
    db = dz_flat.sum(axis=0)
    dx = dz_all @ W.T
    return dx, dW, dU, db


def blstm_forward(x, mask, fwd, bwd):
    """Bidirectional layer: ``fwd``/``bwd`` are ``(W, U, b)`` triples; output is ``[forward, backward]``."""
    y_f, cache_f = lstm_direction_forward(x, mask, *fwd, reverse=False)
    y_b, cache_b = lstm_direction_forward(x, mask, *bwd, reverse=True)
    return np.concatenate([y_f, y_b], axis=-1), (cache_f, cache_b)


def blstm_backward(dy, caches, fwd, bwd):
    width = fwd[1].shape[0]
    cache_f, cache_b = caches
    dx_f, *g_f = lstm_direction_backward(dy[..., :width], cache_f, fwd[0], fwd[1])
    dx_b, *g_b = lstm_direction_backward(dy[..., width:], cache_b, bwd[0], bwd[1])
    return dx_f + dx_b, tuple(g_f), tuple(g_b)


def sequence_mask(lengths, n_steps: int) -> np.ndarray:
    return (np.arange(n_steps)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def pyramid_reduce(x, lengths, factor: int):
    """Concatenate each run of ``factor`` consecutive frames; the last partial group is zero-padded.

    ``x`` may be ``(T, D)`` or ``(B, T, D)``.  Returns the reduced sequence and new lengths.
    """
    lengths = np.asarray(lengths)
    single = x.ndim == 2
    if single:
        x = x[None]
    n_batch, n_steps, dim = x.shape
    n_out = -(-n_steps // factor)
    pad = n_out * factor - n_steps
    if pad:
        x = np.concatenate([x, np.zeros((n_batch, pad, dim))], axis=1)
    out = x.reshape(n_batch, n_out, factor * dim)
    new_lengths = -(-lengths // factor)
    return (out[0], new_lengths) if single else (out, new_lengths)


def pyramid_expand(dout, n_steps: int, factor: int):
    """Backward of :func:`pyramid_reduce` for a batched ``(B, T', factor*D)`` gradient."""
    n_batch, n_out, width = dout.shape
    return dout.reshape(n_batch, n_out * factor, width // factor)[:, :n_steps]


def masked_softmax(scores, key_mask):
    s = np.where(key_mask[:, None, :] > 0, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention_forward(h, mask, Wq, Wk, Wv):
    """Scaled dot-product self-attention over a masked batch.

    Returns context vectors ``(B, T, A)``, weights ``(B, T, T)`` and a cache.
    """
    q = h @ Wq
    k = h @ Wk
    v = h @ Wv
    scale = 1.0 / np.sqrt(Wq.shape[1])
    alpha = masked_softmax(q @ k.transpose(0, 2, 1) * scale, mask)
    ctx = alpha @ v
    return ctx, alpha, (h, q, k, v, alpha, scale)


def self_attention_backward(dctx, cache, Wq, Wk, Wv):
    h, q, k, v, alpha, scale = cache
    dalpha = dctx @ v.transpose(0, 2, 1)
    dv = alpha.transpose(0, 2, 1) @ dctx
    ds = alpha * (dalpha - (dalpha * alpha).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    flat_h = h.reshape(-1, h.shape[-1])
    dWq = flat_h.T @ dq.reshape(-1, dq.shape[-1])
    dWk = flat_h.T @ dk.reshape(-1, dk.shape[-1])
    dWv = flat_h.T @ dv.reshape(-1, dv.shape[-1])
    dh = dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
    return dh, dWq, dWk, dWv


def masked_mean(x, mask):
    return (x * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)


def fc_head_forward(pooled, W1, b1, W2, b2):
    pre = pooled @ W1 + b1
    hidden = np.maximum(pre, 0.0)
    y = (hidden @ W2 + b2)[:, 0]
    return y, (pooled, pre, hidden)


def fc_head_backward(dy, cache, W1, W2):
    pooled, pre, hidden = cache
    dy = dy[:, None]
    dW2 = hidden.T @ dy
    db2 = dy.sum(axis=0)
    dhidden = (dy @ W2.T) * (pre > 0)
    dW1 = pooled.T @ dhidden
    db1 = dhidden.sum(axis=0)
    return dhidden @ W1.T, dW1, db1, dW2, db2
