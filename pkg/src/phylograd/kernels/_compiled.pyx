# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled block kernels.

Each entry point executes the blocks ``lo <= b < hi`` of one launch.  A
block stages its operands into the caller's ``scratch`` arena before
computing, mirroring shared-memory staging on a GPU; the GIL is released
for the whole block loop so several workers can run launches concurrently.

Array conventions (S is the padded state count):

* ``mats[b, r, t, s]`` -- column-major transition matrix, ``P[s, t]``
* ``post[k - N, r, c, s]`` -- post-order partials of internal node ``k``
* ``pre[i, r, c, s]`` -- pre-order partials of every node
* ``codes[n, c]`` -- tip code: state if >= 0, else mask row ``-code - 1``
"""

from libc.math cimport log, NAN
from libc.string cimport memcpy, memset

ctypedef double f64
ctypedef int i32


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef void _expand_tip(const i32* codes, const f64* masks, Py_ssize_t c0, Py_ssize_t n,
                      Py_ssize_t S, f64* dst) noexcept nogil:
    cdef Py_ssize_t c, code
    memset(dst, 0, n * S * sizeof(f64))
    for c in range(n):
        code = codes[c0 + c]
        if code >= 0:
            dst[c * S + code] = 1.0
        else:
            memcpy(dst + c * S, masks + (-code - 1) * S, S * sizeof(f64))


cdef void _apply(const f64* A, bint transpose, const f64* x, Py_ssize_t n, Py_ssize_t S,
                 Py_ssize_t pbs, f64* acc, f64* stage) noexcept nogil:
    """acc[c, s] = sum_t A'[t, s] * x[c, t] with A' = A, or A transposed.

    A' rows are staged ``pbs`` at a time (S x PBS entries per stage).
    """
    cdef Py_ssize_t t0, t1, t, c, s
    cdef f64 xv
    cdef f64* row
    cdef f64* out
    memset(acc, 0, n * S * sizeof(f64))
    t0 = 0
    while t0 < S:
        t1 = _imin(S, t0 + pbs)
        if transpose:
            for t in range(t0, t1):
                for s in range(S):
                    stage[(t - t0) * S + s] = A[s * S + t]
        else:
            memcpy(stage, A + t0 * S, (t1 - t0) * S * sizeof(f64))
        for c in range(n):
            out = acc + c * S
            for t in range(t0, t1):
                xv = x[c * S + t]
                if xv == 0.0:
                    continue
                row = stage + (t - t0) * S
                for s in range(S):
                    out[s] += row[s] * xv
        t0 = t1


cdef void _stage_child(Py_ssize_t child, Py_ssize_t r, Py_ssize_t c0, Py_ssize_t n,
                       Py_ssize_t n_tips, Py_ssize_t S, f64[:, :, :, ::1] post,
                       const i32[:, ::1] codes, const f64[:, ::1] masks, f64* dst) noexcept nogil:
    if child < n_tips:
        _expand_tip(&codes[child, 0], &masks[0, 0], c0, n, S, dst)
    else:
        memcpy(dst, &post[child - n_tips, r, c0, 0], n * S * sizeof(f64))


def postorder(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t cbs, Py_ssize_t pbs,
              Py_ssize_t node, Py_ssize_t child_a, Py_ssize_t child_b, Py_ssize_t n_tips,
              const f64[:, :, :, ::1] mats, f64[:, :, :, ::1] post,
              const i32[:, ::1] codes, const f64[:, ::1] masks, f64[::1] scratch):
    cdef Py_ssize_t R = post.shape[1], C = post.shape[2], S = post.shape[3]
    cdef Py_ssize_t n_cb = (C + cbs - 1) // cbs
    cdef Py_ssize_t b, r, c0, n, k, i
    cdef f64* xs = &scratch[0]
    cdef f64* acc_a = xs + cbs * S
    cdef f64* acc_b = acc_a + cbs * S
    cdef f64* stage = acc_b + cbs * S
    cdef f64* out
    with nogil:
        for b in range(lo, hi):
            r = b // n_cb
            c0 = (b % n_cb) * cbs
            n = _imin(cbs, C - c0)
            _stage_child(child_a, r, c0, n, n_tips, S, post, codes, masks, xs)
            _apply(&mats[child_a, r, 0, 0], False, xs, n, S, pbs, acc_a, stage)
            _stage_child(child_b, r, c0, n, n_tips, S, post, codes, masks, xs)
            _apply(&mats[child_b, r, 0, 0], False, xs, n, S, pbs, acc_b, stage)
            out = &post[node - n_tips, r, c0, 0]
            for i in range(n * S):
                out[i] = acc_a[i] * acc_b[i]


def preorder(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t cbs, Py_ssize_t pbs,
             Py_ssize_t node, Py_ssize_t parent, Py_ssize_t sibling, Py_ssize_t n_tips,
             const f64[:, :, :, ::1] mats, const f64[:, :, :, ::1] mats_node, bint pretransposed,
             f64[:, :, :, ::1] post, f64[:, :, :, ::1] pre,
             const i32[:, ::1] codes, const f64[:, ::1] masks, f64[::1] scratch):
    cdef Py_ssize_t R = pre.shape[1], C = pre.shape[2], S = pre.shape[3]
    cdef Py_ssize_t n_cb = (C + cbs - 1) // cbs
    cdef Py_ssize_t b, r, c0, n, i
    cdef f64* xs = &scratch[0]
    cdef f64* phi = xs + cbs * S
    cdef f64* qs = phi + cbs * S
    cdef f64* omega = qs + cbs * S
    cdef f64* stage = omega + cbs * S
    with nogil:
        for b in range(lo, hi):
            r = b // n_cb
            c0 = (b % n_cb) * cbs
            n = _imin(cbs, C - c0)
            memcpy(qs, &pre[parent, r, c0, 0], n * S * sizeof(f64))
            _stage_child(sibling, r, c0, n, n_tips, S, post, codes, masks, xs)
            _apply(&mats[sibling, r, 0, 0], False, xs, n, S, pbs, phi, stage)
            for i in range(n * S):
                phi[i] = qs[i] * phi[i]
            _apply(&mats_node[node, r, 0, 0], not pretransposed, phi, n, S, pbs, omega, stage)
            memcpy(&pre[node, r, c0, 0], omega, n * S * sizeof(f64))


def gradient(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t cbs, Py_ssize_t pbs,
             Py_ssize_t rate_block, Py_ssize_t n_tips,
             const f64[:, :, ::1] generators, const f64[::1] weights,
             f64[:, :, :, ::1] post, f64[:, :, :, ::1] pre,
             const i32[:, ::1] codes, const f64[:, ::1] masks,
             f64[:, ::1] columns, f64[::1] scratch):
    cdef Py_ssize_t R = pre.shape[1], C = pre.shape[2], S = pre.shape[3]
    cdef Py_ssize_t n_cb = (C + cbs - 1) // cbs
    cdef Py_ssize_t b, node, r, r0, r1, c0, n, c, s, i
    cdef f64 w, sphi, som
    cdef f64* ps = &scratch[0]
    cdef f64* qs = ps + cbs * S
    cdef f64* delta = qs + cbs * S
    cdef f64* phi = delta + cbs * S
    cdef f64* om = phi + cbs * S
    cdef f64* stage = om + cbs * S
    cdef f64* wcache = stage + pbs * S
    with nogil:
        for b in range(lo, hi):
            node = b // n_cb
            c0 = (b % n_cb) * cbs
            n = _imin(cbs, C - c0)
            memset(phi, 0, n * S * sizeof(f64))
            memset(om, 0, n * S * sizeof(f64))
            r0 = 0
            while r0 < R:
                r1 = _imin(R, r0 + rate_block)
                for r in range(r0, r1):
                    wcache[r - r0] = weights[r]
                for r in range(r0, r1):
                    w = wcache[r - r0]
                    _stage_child(node, r, c0, n, n_tips, S, post, codes, masks, ps)
                    memcpy(qs, &pre[node, r, c0, 0], n * S * sizeof(f64))
                    for i in range(n * S):
                        om[i] += ps[i] * qs[i] * w
                    _apply(&generators[r, 0, 0], False, qs, n, S, pbs, delta, stage)
                    for i in range(n * S):
                        phi[i] += ps[i] * delta[i] * w
                r0 = r1
            for c in range(n):
                sphi = 0.0
                som = 0.0
                for s in range(S):
                    sphi += phi[c * S + s]
                    som += om[c * S + s]
                columns[node, c0 + c] = sphi / som if som != 0.0 else NAN


def transpose(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t mbs,
              const f64[:, :, ::1] src, f64[:, :, ::1] dst, f64[::1] scratch):
    cdef Py_ssize_t M = src.shape[0], S = src.shape[1]
    cdef Py_ssize_t side = (S + mbs - 1) // mbs
    cdef Py_ssize_t b, m, a, e, r0, c0, nr, nc
    cdef f64* tile = &scratch[0]
    with nogil:
        for b in range(lo, hi):
            r0 = (b // side) * mbs
            c0 = (b % side) * mbs
            nr = _imin(mbs, S - r0)
            nc = _imin(mbs, S - c0)
            for m in range(M):
                for a in range(nr):
                    for e in range(nc):
                        tile[a * mbs + e] = src[m, r0 + a, c0 + e]
                for a in range(nr):
                    for e in range(nc):
                        dst[m, c0 + e, r0 + a] = tile[a * mbs + e]


def rescale(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t cbs,
            f64[:, :, ::1] buf, f64[::1] logs):
    cdef Py_ssize_t R = buf.shape[0], C = buf.shape[1], S = buf.shape[2]
    cdef Py_ssize_t b, c, c1, r, s
    cdef f64 m
    with nogil:
        for b in range(lo, hi):
            c1 = _imin(C, (b + 1) * cbs)
            for c in range(b * cbs, c1):
                m = 0.0
                for r in range(R):
                    for s in range(S):
                        if buf[r, c, s] > m:
                            m = buf[r, c, s]
                if m > 0.0:
                    for r in range(R):
                        for s in range(S):
                            buf[r, c, s] = buf[r, c, s] / m
                    logs[c] = log(m)
                else:
                    logs[c] = 0.0


def reduce(Py_ssize_t lo, Py_ssize_t hi, Py_ssize_t width,
           const f64[:, ::1] values, const f64[::1] weights, f64[:, ::1] partial,
           f64[::1] scratch):
    cdef Py_ssize_t B = values.shape[0], C = values.shape[1]
    cdef Py_ssize_t n_rb = (C + width - 1) // width
    cdef Py_ssize_t b, row, c0, k, half
    cdef f64* v = &scratch[0]
    with nogil:
        for b in range(lo, hi):
            row = b // n_rb
            c0 = (b % n_rb) * width
            for k in range(width):
                if c0 + k < C:
                    v[k] = weights[c0 + k] * values[row, c0 + k]
                else:
                    v[k] = 0.0
            half = width // 2
            while half >= 1:
                for k in range(half):
                    v[k] = v[k] + v[k + half]
                half //= 2
            partial[row, b % n_rb] = v[0]
