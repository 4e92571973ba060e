"""Direct-loop grouped convolution kernels compiled with numba.

Inputs arrive zero-padded and split into stride phases: plane
``(c * s + i % s) * s + j % s`` of ``xph`` holds samples
``xp[c, (r * s) + i % s, (col * s) + j % s]``, so tap (i, j) of output row y
reads phase row ``y + i // s`` at column offset ``j // s`` with unit stride.
Every inner loop is therefore a contiguous, vectorizable slice.  Accumulation
is float64 and the reduction order is fixed (bit-reproducible).

Inner loops index freshly sliced views rather than ``base[x + q]``: an
offset index defeats numba's non-negative-index proof and blocks SIMD.
"""

import numba
import numpy as np

_FLAGS = dict(nopython=True, cache=True, fastmath={"contract", "reassoc"})


@numba.jit(**_FLAGS)
def conv_fwd(xph, k, out, stride, groups):
    b_n, o_n, ho, wo = out.shape
    cg, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    s = stride
    og = o_n // groups
    row = np.zeros(wo)
    for b in range(b_n):
        for o in range(o_n):
            c0 = (o // og) * cg
            for y in range(ho):
                row[:] = 0.0
                for ci in range(cg):
                    for i in range(kh):
                        r = y + i // s
                        base = ((c0 + ci) * s + i % s) * s
                        if kw == 5:
                            # one pass per kernel row keeps ``row`` traffic down
                            w0 = np.float64(k[o, ci, i, 0])
                            w1 = np.float64(k[o, ci, i, 1])
                            w2 = np.float64(k[o, ci, i, 2])
                            w3 = np.float64(k[o, ci, i, 3])
                            w4 = np.float64(k[o, ci, i, 4])
                            p0 = xph[b, base, r, 0:wo]
                            p1 = xph[b, base + 1 % s, r, 1 // s : 1 // s + wo]
                            p2 = xph[b, base + 2 % s, r, 2 // s : 2 // s + wo]
                            p3 = xph[b, base + 3 % s, r, 3 // s : 3 // s + wo]
                            p4 = xph[b, base + 4 % s, r, 4 // s : 4 // s + wo]
                            for x in range(wo):
                                row[x] += (
                                    w0 * p0[x] + w1 * p1[x] + w2 * p2[x] + w3 * p3[x] + w4 * p4[x]
                                )
                            continue
                        for j in range(kw):
                            wv = np.float64(k[o, ci, i, j])
                            q = j // s
                            src = xph[b, base + j % s, r, q : q + wo]
                            for x in range(wo):
                                row[x] += wv * src[x]
                dst = out[b, o, y]
                for x in range(wo):
                    dst[x] += row[x]


@numba.jit(**_FLAGS)
def conv_bwd_kernel(xph, go, gk, stride, groups):
    b_n, o_n, ho, wo = go.shape
    cg, kh, kw = gk.shape[1], gk.shape[2], gk.shape[3]
    s = stride
    og = o_n // groups
    acc = np.zeros((kh, kw))
    g = np.zeros(wo)
    for o in range(o_n):
        c0 = (o // og) * cg
        for ci in range(cg):
            acc[:, :] = 0.0
            for b in range(b_n):
                for y in range(ho):
                    gsrc = go[b, o, y]
                    for x in range(wo):
                        g[x] = gsrc[x]
                    for i in range(kh):
                        r = y + i // s
                        base = ((c0 + ci) * s + i % s) * s
                        if kw == 5:
                            p0 = xph[b, base, r, 0:wo]
                            p1 = xph[b, base + 1 % s, r, 1 // s : 1 // s + wo]
                            p2 = xph[b, base + 2 % s, r, 2 // s : 2 // s + wo]
                            p3 = xph[b, base + 3 % s, r, 3 // s : 3 // s + wo]
                            p4 = xph[b, base + 4 % s, r, 4 // s : 4 // s + wo]
                            t0 = t1 = t2 = t3 = t4 = 0.0
                            for x in range(wo):
                                gv = g[x]
                                t0 += gv * p0[x]
                                t1 += gv * p1[x]
                                t2 += gv * p2[x]
                                t3 += gv * p3[x]
                                t4 += gv * p4[x]
                            acc[i, 0] += t0
                            acc[i, 1] += t1
                            acc[i, 2] += t2
                            acc[i, 3] += t3
                            acc[i, 4] += t4
                            continue
                        for j in range(kw):
                            q = j // s
                            src = xph[b, base + j % s, r, q : q + wo]
                            t = 0.0
                            for x in range(wo):
                                t += g[x] * src[x]
                            acc[i, j] += t
            for i in range(kh):
                for j in range(kw):
                    gk[o, ci, i, j] += acc[i, j]


@numba.jit(**_FLAGS)
def conv_bwd_input(go, k, dph, stride, groups):
    """Scatter ``go`` through the kernel into phase-split input gradients."""
    b_n, o_n, ho, wo = go.shape
    cg, kh, kw = k.shape[1], k.shape[2], k.shape[3]
    s = stride
    og = o_n // groups
    g = np.zeros(wo)
    for b in range(b_n):
        for o in range(o_n):
            c0 = (o // og) * cg
            for y in range(ho):
                gsrc = go[b, o, y]
                for x in range(wo):
                    g[x] = gsrc[x]
                for ci in range(cg):
                    for i in range(kh):
                        r = y + i // s
                        for j in range(kw):
                            wv = np.float64(k[o, ci, i, j])
                            p = ((c0 + ci) * s + i % s) * s + j % s
                            q = j // s
                            dst = dph[b, p, r, q : q + wo]
                            for x in range(wo):
                                dst[x] += wv * g[x]


@numba.jit(**_FLAGS)
def pad_phase_split(x, pad, s, out):
    """Zero-pad ``x`` by ``pad`` and gather it into stride phases in one pass.

    ``out`` must be zero-filled with shape (b, c*s*s, hq, wq).
    """
    b_n, c_n, h, w = x.shape
    hq, wq = out.shape[2], out.shape[3]
    for pj in range(s):
        # phase column col holds input column col*s + pj - pad
        lo = max(0, (pad - pj + s - 1) // s)
        hi = min(wq, (w - 1 + pad - pj) // s + 1)
        if hi <= lo:
            continue
        off = lo * s + pj - pad
        for b in range(b_n):
            for c in range(c_n):
                for pi in range(s):
                    p = (c * s + pi) * s + pj
                    for r in range(hq):
                        yy = r * s + pi - pad
                        if yy < 0 or yy >= h:
                            continue
                        src = x[b, c, yy, off:]
                        dst = out[b, p, r, lo:hi]
                        for t in range(hi - lo):
                            dst[t] = src[t * s]


@numba.jit(**_FLAGS)
def phase_merge_crop(ph, pad, s, out):
    """Inverse of :func:`pad_phase_split`, dropping the padding border."""
    b_n, c_n, h, w = out.shape
    wq = ph.shape[3]
    for pj in range(s):
        lo = max(0, (pad - pj + s - 1) // s)
        hi = min(wq, (w - 1 + pad - pj) // s + 1)
        if hi <= lo:
            continue
        off = lo * s + pj - pad
        for b in range(b_n):
            for c in range(c_n):
                for y in range(h):
                    yy = y + pad
                    p = (c * s + yy % s) * s + pj
                    src = ph[b, p, yy // s, lo:hi]
                    dst = out[b, c, y, off:]
                    for t in range(hi - lo):
                        dst[t * s] = src[t]


@numba.jit(**_FLAGS)
def channel_moments(x):
    """Per-channel mean and biased variance over (batch, H, W), two-pass."""
    b_n, c_n = x.shape[0], x.shape[1]
    n = b_n * x.shape[2] * x.shape[3]
    mean = np.zeros(c_n)
    var = np.zeros(c_n)
    for c in range(c_n):
        acc = 0.0
        for b in range(b_n):
            plane = x[b, c].ravel()
            for t in range(plane.size):
                acc += plane[t]
        m = acc / n
        acc = 0.0
        for b in range(b_n):
            plane = x[b, c].ravel()
            for t in range(plane.size):
                d = plane[t] - m
                acc += d * d
        mean[c] = m
        var[c] = acc / n
    return mean, var


@numba.jit(**_FLAGS)
def bn_relu_fwd(x, mean, inv_std, gamma, beta, xhat, out):
    b_n, c_n = x.shape[0], x.shape[1]
    for b in range(b_n):
        for c in range(c_n):
            src = x[b, c].ravel()
            xh = xhat[b, c].ravel()
            dst = out[b, c].ravel()
            m, k, g, bt = mean[c], inv_std[c], gamma[c], beta[c]
            for t in range(src.size):
                v = (src[t] - m) * k
                xh[t] = v
                v = g * v + bt
                dst[t] = v if v > 0.0 else 0.0


@numba.jit(**_FLAGS)
def bn_relu_bwd(go, out, xhat, inv_std, gamma, training, gx):
    """Backward through ReLU(BN(x)); returns (grad_gamma, grad_beta)."""
    b_n, c_n = go.shape[0], go.shape[1]
    n = b_n * go.shape[2] * go.shape[3]
    gg = np.zeros(c_n)
    gb = np.zeros(c_n)
    for c in range(c_n):
        s1 = 0.0
        s2 = 0.0
        for b in range(b_n):
            g = go[b, c].ravel()
            o = out[b, c].ravel()
            xh = xhat[b, c].ravel()
            for t in range(g.size):
                d = g[t] if o[t] > 0.0 else 0.0
                s1 += d
                s2 += d * xh[t]
        gb[c] = s1
        gg[c] = s2
        scale = gamma[c] * inv_std[c]
        for b in range(b_n):
            g = go[b, c].ravel()
            o = out[b, c].ravel()
            xh = xhat[b, c].ravel()
            dst = gx[b, c].ravel()
            if training:
                for t in range(g.size):
                    d = g[t] if o[t] > 0.0 else 0.0
                    dst[t] = scale * (d - (s1 + xh[t] * s2) / n)
            else:
                for t in range(g.size):
                    dst[t] = scale * (g[t] if o[t] > 0.0 else 0.0)
    return gg, gb
