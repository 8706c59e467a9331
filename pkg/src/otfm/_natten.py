"""Neighbourhood attention kernels (numba) wrapped as a torch autograd function.

Layout is channels-first per head: q, k, v are ``(N, heads, d, H, W)``, which
is a plain reshape of a conv feature map. Each query attends to the
``window x window`` neighbourhood centred on it; neighbours outside the image
are skipped, which is the same as masking them. The innermost loops walk
contiguous pixels of one row so they vectorise.
"""
from __future__ import annotations

import numba
import numpy as np
import torch


@numba.njit(cache=True, fastmath=True)
def _forward(q, k, v, bias, window):
    N, Hh, D, H, W = q.shape
    K = window * window
    pad = window // 2
    out = np.zeros_like(q)
    attn = np.empty((N, Hh, K, H, W), dtype=q.dtype)
    mx = np.empty((H, W), dtype=q.dtype)
    tot = np.empty((H, W), dtype=q.dtype)
    for n in range(N):
        for h in range(Hh):
            a = attn[n, h]
            qn = q[n, h]
            kn = k[n, h]
            vn = v[n, h]
            on = out[n, h]
            for o in range(K):
                dy = o // window - pad
                dx = o % window - pad
                y0, y1 = max(0, -dy), min(H, H - dy)
                x0, x1 = max(0, -dx), min(W, W - dx)
                a[o, :, :] = -np.inf
                b = bias[h, o]
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        a[o, y, x] = b
                for c in range(D):
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            a[o, y, x] += qn[c, y, x] * kn[c, y + dy, x + dx]
            mx[:, :] = -np.inf
            for o in range(K):
                for y in range(H):
                    for x in range(W):
                        mx[y, x] = max(mx[y, x], a[o, y, x])
            tot[:, :] = 0.0
            for o in range(K):
                for y in range(H):
                    for x in range(W):
                        e = np.exp(a[o, y, x] - mx[y, x])
                        a[o, y, x] = e
                        tot[y, x] += e
            for y in range(H):
                for x in range(W):
                    tot[y, x] = 1.0 / tot[y, x]
            for o in range(K):
                dy = o // window - pad
                dx = o % window - pad
                y0, y1 = max(0, -dy), min(H, H - dy)
                x0, x1 = max(0, -dx), min(W, W - dx)
                for y in range(H):
                    for x in range(W):
                        a[o, y, x] *= tot[y, x]
                for c in range(D):
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            on[c, y, x] += a[o, y, x] * vn[c, y + dy, x + dx]
    return out, attn


@numba.njit(cache=True, fastmath=True)
def _backward(grad_out, q, k, v, attn, window):
    N, Hh, D, H, W = q.shape
    K = window * window
    pad = window // 2
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gbias = np.zeros((Hh, K), dtype=q.dtype)
    ga = np.zeros((K, H, W), dtype=q.dtype)
    dot = np.empty((H, W), dtype=q.dtype)
    for n in range(N):
        for h in range(Hh):
            a = attn[n, h]
            g = grad_out[n, h]
            qn = q[n, h]
            kn = k[n, h]
            vn = v[n, h]
            gqn = gq[n, h]
            gkn = gk[n, h]
            gvn = gv[n, h]
            dot[:, :] = 0.0
            for o in range(K):
                dy = o // window - pad
                dx = o % window - pad
                y0, y1 = max(0, -dy), min(H, H - dy)
                x0, x1 = max(0, -dx), min(W, W - dx)
                ga[o, :, :] = 0.0
                for c in range(D):
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            ga[o, y, x] += g[c, y, x] * vn[c, y + dy, x + dx]
                            gvn[c, y + dy, x + dx] += a[o, y, x] * g[c, y, x]
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        dot[y, x] += a[o, y, x] * ga[o, y, x]
            for o in range(K):
                dy = o // window - pad
                dx = o % window - pad
                y0, y1 = max(0, -dy), min(H, H - dy)
                x0, x1 = max(0, -dx), min(W, W - dx)
                bsum = 0.0
                for y in range(y0, y1):
                    for x in range(x0, x1):
                        gl = a[o, y, x] * (ga[o, y, x] - dot[y, x])
                        ga[o, y, x] = gl
                        bsum += gl
                gbias[h, o] += bsum
                for c in range(D):
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            gqn[c, y, x] += ga[o, y, x] * kn[c, y + dy, x + dx]
                            gkn[c, y + dy, x + dx] += ga[o, y, x] * qn[c, y, x]
    return gq, gk, gv, gbias


def _np(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().numpy())


class NeighborhoodAttentionFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, q, k, v, bias, window):
        out, attn = _forward(_np(q), _np(k), _np(v), _np(bias.to(q.dtype)), int(window))
        attn_t = torch.from_numpy(attn)
        ctx.save_for_backward(q, k, v, attn_t)
        ctx.window = int(window)
        ctx.bias_dtype = bias.dtype
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        q, k, v, attn = ctx.saved_tensors
        gq, gk, gv, gb = _backward(_np(grad_out), _np(q), _np(k), _np(v), attn.numpy(), ctx.window)
        return (torch.from_numpy(gq), torch.from_numpy(gk), torch.from_numpy(gv),
                torch.from_numpy(gb).to(ctx.bias_dtype), None)


def neighborhood_attention(q, k, v, bias, window: int) -> torch.Tensor:
    """``softmax(q.k + bias)`` over each neighbourhood, applied to ``v``; all ``(N, h, d, H, W)``."""
    return NeighborhoodAttentionFunction.apply(q, k, v, bias, window)
