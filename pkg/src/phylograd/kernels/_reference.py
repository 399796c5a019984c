"""Pure numpy implementation of the block kernels.

Same signatures and semantics as the compiled module.  A launch range of
blocks is executed as vectorised segments (one per rate or node), but every
accumulation runs in the same order as the compiled loops, so both
implementations agree to within a few ulps and are each deterministic.
"""

import numpy as np


def _segments(lo, hi, n_cb, cbs, total):
    """Split blocks ``[lo, hi)`` into ``(outer, c0, c1)`` column segments."""
    b = lo
    while b < hi:
        outer = b // n_cb
        end = min(hi, (outer + 1) * n_cb)
        c0 = (b % n_cb) * cbs
        c1 = min(total, ((end - 1) % n_cb + 1) * cbs)
        yield outer, c0, c1
        b = end


def _expand_tip(codes, masks, c0, c1, S):
    block = codes[c0:c1]
    out = np.zeros((block.size, S))
    known = block >= 0
    out[np.flatnonzero(known), block[known]] = 1.0
    if not known.all():
        out[~known] = masks[-block[~known] - 1]
    return out


def _stage_child(child, r, c0, c1, n_tips, post, codes, masks):
    if child < n_tips:
        return _expand_tip(codes[child], masks, c0, c1, post.shape[3])
    return np.ascontiguousarray(post[child - n_tips, r, c0:c1])


def _apply(A, transpose, x, pbs):
    """out[c, s] = sum_t A'[t, s] * x[c, t], staged ``pbs`` rows at a time."""
    S = A.shape[0]
    out = np.zeros_like(x)
    for t0 in range(0, S, pbs):
        t1 = min(S, t0 + pbs)
        stage = np.ascontiguousarray(A[:, t0:t1].T if transpose else A[t0:t1])
        for t in range(t0, t1):
            out += stage[t - t0] * x[:, t, None]
    return out


def postorder(lo, hi, cbs, pbs, node, child_a, child_b, n_tips, mats, post, codes, masks, scratch):
    C = post.shape[2]
    n_cb = -(-C // cbs)
    for r, c0, c1 in _segments(lo, hi, n_cb, cbs, C):
        xa = _stage_child(child_a, r, c0, c1, n_tips, post, codes, masks)
        acc_a = _apply(mats[child_a, r], False, xa, pbs)
        xb = _stage_child(child_b, r, c0, c1, n_tips, post, codes, masks)
        acc_b = _apply(mats[child_b, r], False, xb, pbs)
        post[node - n_tips, r, c0:c1] = acc_a * acc_b


def preorder(lo, hi, cbs, pbs, node, parent, sibling, n_tips, mats, mats_node, pretransposed,
             post, pre, codes, masks, scratch):
    C = pre.shape[2]
    n_cb = -(-C // cbs)
    for r, c0, c1 in _segments(lo, hi, n_cb, cbs, C):
        qs = np.ascontiguousarray(pre[parent, r, c0:c1])
        xs = _stage_child(sibling, r, c0, c1, n_tips, post, codes, masks)
        phi = qs * _apply(mats[sibling, r], False, xs, pbs)
        pre[node, r, c0:c1] = _apply(mats_node[node, r], not pretransposed, phi, pbs)


def gradient(lo, hi, cbs, pbs, rate_block, n_tips, generators, weights, post, pre, codes, masks,
             columns, scratch):
    R, C, S = pre.shape[1:]
    n_cb = -(-C // cbs)
    for node, c0, c1 in _segments(lo, hi, n_cb, cbs, C):
        phi = np.zeros((c1 - c0, S))
        om = np.zeros((c1 - c0, S))
        for r0 in range(0, R, rate_block):
            cache = weights[r0 : r0 + rate_block].copy()
            for r in range(r0, min(R, r0 + rate_block)):
                w = cache[r - r0]
                ps = _stage_child(node, r, c0, c1, n_tips, post, codes, masks)
                qs = np.ascontiguousarray(pre[node, r, c0:c1])
                om += ps * qs * w
                phi += ps * _apply(generators[r], False, qs, pbs) * w
        sphi = np.zeros(c1 - c0)
        som = np.zeros(c1 - c0)
        for s in range(S):
            sphi += phi[:, s]
            som += om[:, s]
        with np.errstate(divide="ignore", invalid="ignore"):
            columns[node, c0:c1] = np.where(som != 0.0, sphi / np.where(som != 0.0, som, 1.0), np.nan)


def transpose(lo, hi, mbs, src, dst, scratch):
    S = src.shape[1]
    side = -(-S // mbs)
    for b in range(lo, hi):
        r0 = (b // side) * mbs
        c0 = (b % side) * mbs
        tile = np.array(src[:, r0 : r0 + mbs, c0 : c0 + mbs])
        dst[:, c0 : c0 + mbs, r0 : r0 + mbs] = np.swapaxes(tile, 1, 2)


def rescale(lo, hi, cbs, buf, logs):
    C = buf.shape[1]
    c0, c1 = lo * cbs, min(C, hi * cbs)
    if c0 >= c1:
        return
    seg = buf[:, c0:c1]
    m = seg.max(axis=(0, 2))
    ok = m > 0
    if ok.any():
        seg[:, ok] = seg[:, ok] / m[None, ok, None]
    logs[c0:c1] = np.log(np.where(ok, m, 1.0))


def reduce(lo, hi, width, values, weights, partial, scratch):
    C = values.shape[1]
    n_rb = -(-C // width)
    padded = np.zeros(n_rb * width)
    w = np.zeros(n_rb * width)
    w[:C] = weights
    for row, k0, k1 in _segments(lo, hi, n_rb, 1, n_rb):
        padded[:C] = values[row]
        v = (w * padded).reshape(n_rb, width)[k0:k1].copy()
        half = width // 2
        while half >= 1:
            v[:, :half] = v[:, :half] + v[:, half : 2 * half]
            half //= 2
        partial[row, k0:k1] = v[:, 0]
