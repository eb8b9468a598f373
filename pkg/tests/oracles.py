"""Independent reference implementations used as test oracles.

Nothing here calls into foam's autodiff, convolution or transform code. The
functions read raw weight arrays out of the parameter dataclasses and
recompute everything with plain numpy loops, ``np.fft`` and ``math.erf``.
"""

import math

import numpy as np

_erf = np.vectorize(math.erf)


# -- basic building blocks -------------------------------------------------------
def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_loops(x, w, b=None, dilation=1):
    """Six nested loops: out[o,y,x] = sum_c sum_i sum_j w[o,c,i,j] * xpad[c, y+d*i, x+d*j]."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for yy in range(h):
            for xx in range(wd):
                s = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for i in range(k):
                        for j in range(k):
                            sy = yy + dilation * i - pad
                            sx = xx + dilation * j - pad
                            if 0 <= sy < h and 0 <= sx < wd:
                                s += w[o, c, i, j] * x[c, sy, sx]
                out[o, yy, xx] = s
    return out


def conv_taps(x, w, b=None, dilation=1):
    """Same arithmetic as conv_loops, vectorized over space only (fast enough for 20-seed sweeps)."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for c in range(c_in):
            for i in range(k):
                for j in range(k):
                    out[o] += w[o, c, i, j] * xp[c, dilation * i : dilation * i + h, dilation * j : dilation * j + wd]
        if b is not None:
            out[o] += b[o]
    return out


def depthwise_taps(x, w, dilation):
    c, h, wd = x.shape
    k = w.shape[-1]
    pad = dilation * (k - 1) // 2
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    out = np.zeros_like(x, dtype=np.float64)
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                out[ch] += w[ch, i, j] * xp[ch, dilation * i : dilation * i + h, dilation * j : dilation * j + wd]
    return out


def conv_p(x, p):
    return conv_taps(x, p.weight.data, None if p.bias is None else p.bias.data, p.dilation)


def dd_p(x, p):
    return conv_p(depthwise_taps(x, p.depthwise.data, p.dilation), p.pointwise)


def expand_dd_kernel(dw, pw, dilation):
    """Fold depthwise (C x k x k, dilated) + pointwise (O x C) into one dense O x C x K x K kernel."""
    c, k, _ = dw.shape
    big = dilation * (k - 1) + 1
    dense_dw = np.zeros((c, big, big))
    dense_dw[:, ::dilation, ::dilation] = dw
    return pw[:, :, None, None] * dense_dw[None]


def gelu(x):
    return x * 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def instance_norm(x, scale, shift, eps=1e-5):
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = ((x - mu) ** 2).mean(axis=(1, 2), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale[:, None, None] + shift[:, None, None]


def sigma_real(x, p):
    y = conv_p(x, p.conv1)
    y = np.maximum(instance_norm(y, p.scale.data, p.shift.data), 0.0)
    return sigmoid(conv_p(y, p.conv2))


def sigma_complex(z, p):
    return sigma_real(z.real, p) + 1j * sigma_real(z.imag, p)


# -- the block -------------------------------------------------------------------
def sdca(x, p):
    c, h, w = x.shape
    n = h * w

    def branch(embed, a, b):
        e = conv_p(x, embed)
        return np.concatenate([dd_p(e, a), dd_p(e, b)]).reshape(c, n)

    q = branch(p.embed_q, p.q3, p.q5)
    k = branch(p.embed_k, p.k3, p.k5)
    v = branch(p.embed_v, p.v3, p.v5)
    attn = softmax_rows(q @ k.T / math.sqrt(n))
    attended = (attn @ v).reshape(c, h, w)
    residual = np.concatenate([dd_p(x, p.res3), dd_p(x, p.res5)])
    return conv_p(np.concatenate([attended, residual]), p.fuse)


def fdba(x, p, norm="backward"):
    c, h, w = x.shape
    spec = np.fft.fft2(x, norm=norm)
    mag = np.abs(spec).reshape(c, h * w)
    phase = np.angle(spec)
    attn = softmax_rows(mag.T @ mag / math.sqrt(c))
    refined = (attn @ mag.T).T.reshape(c, h, w)
    corrected = np.fft.ifft2(refined * np.exp(1j * phase), norm=norm).real
    freq_res = np.fft.ifft2(sigma_complex(spec, p.sigma), norm=norm).real
    return conv_p(np.concatenate([corrected, freq_res]), p.fuse)


def fsfn(x, p, norm="backward"):
    spec = np.fft.fft2(x, norm=norm)
    s = np.abs(sigma_complex(spec, p.sigma1) * spec)
    freq1 = gelu(s) * s
    spat = dd_p(x, p.gate)
    spat1 = gelu(spat) * spat
    joint = np.concatenate([spat1, freq1])
    jspec = np.fft.fft2(joint, norm=norm)
    freq2 = np.abs(np.fft.ifft2(sigma_complex(jspec, p.sigma2) * jspec, norm=norm))
    spat2 = dd_p(joint, p.joint)
    return conv_p(np.concatenate([freq2, spat2]), p.fuse)


def fstb(x, p):
    ps = sdca(x, p.sdca)
    pf = fdba(x, p.fdba, p.fft_norm)
    merged = conv_p(np.concatenate([ps, pf]), p.combine)
    out = fsfn(merged, p.fsfn, p.fft_norm)
    return out + x if p.residual else out


# -- transforms and losses ---------------------------------------------------------
def dft2_matrix(x, inverse=False):
    """Textbook double-sum DFT written as two explicit kernel products."""
    h, w = x.shape[-2:]
    sign = 1.0 if inverse else -1.0
    kh = np.exp(sign * 2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    kw = np.exp(sign * 2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    out = kh @ x @ kw
    return out / (h * w) if inverse else out


def kl_loop(target, pred):
    """Per-channel spatial-softmax KL(target || pred), averaged over channels, with explicit loops."""
    c = target.shape[0]
    total = 0.0
    for ch in range(c):
        t = target[ch].ravel()
        q = pred[ch].ravel()
        pt = np.exp(t - t.max())
        pt /= pt.sum()
        pq = np.exp(q - q.max())
        pq /= pq.sum()
        total += sum(a * math.log(a / b) for a, b in zip(pt, pq))
    return total / c


def type2_loop(a, b):
    c, h, w = a.shape
    s = 0.0
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                s += (a[ch, y, x] - b[ch, y, x]) ** 2
    return s / (h * w)
