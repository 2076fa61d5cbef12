"""Minimal reverse-mode autodiff on numpy arrays.

Just the ops the encoder/decoder stacks need: dense and convolution layers
(im2col backed by BLAS), ReLU/sigmoid, nearest-neighbor upsampling, row
gathers for batch routing, and the summed per-sample L2-norm reconstruction
loss. Convolutions use SAME padding in the TensorFlow sense (asymmetric when
kernel minus stride is odd).

Set `DEBUG_CHECKS = True` to assert finite values after every op.
"""

from __future__ import annotations

import threading

import numpy as np

DEBUG_CHECKS = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        if DEBUG_CHECKS and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in forward pass")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, seed=None):
        """Backpropagate from this node (scalar unless `seed` is given)."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed needs a scalar")
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if DEBUG_CHECKS:
                    for p in node._parents:
                        if p.grad is not None and not np.all(np.isfinite(p.grad)):
                            raise FloatingPointError("non-finite gradient")


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor(out_data, parents=(a, b), backward=backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor(out_data, parents=(a, b), backward=backward)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    out_data = np.where(keep, a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.where(keep, g, 0))

    return Tensor(out_data, parents=(a,), backward=backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, parents=(a,), backward=backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), parents=(a,), backward=backward)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)

    return Tensor(a.data[idx], parents=(a,), backward=backward)


def _same_pads(size: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)  # ceil division
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


# conv scratch buffers are tiled to this size and reused per thread, so the
# big im2col matrices neither blow up RAM nor pay page-fault costs each call
CONV_TILE_BYTES = 24 << 20

try:  # JIT patch gather/scatter; the numpy fallback is ~3x slower
    import numba

    # numba's own scheduler coexists with the BLAS thread pool; TBB/OpenMP
    # layers oversubscribe the cores and slow everything down
    numba.config.THREADING_LAYER = "workqueue"

    @numba.njit(parallel=True, fastmath=True, cache=True)
    def _im2col_kernel(xp, patches, oh, ow, k, s):
        nb, _, _, c = xp.shape
        for br in numba.prange(nb * oh):
            b = br // oh
            r = br % oh
            for q in range(ow):
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            patches[b, r, q, ki, kj, ch] = xp[
                                b, r * s + ki, q * s + kj, ch
                            ]

    @numba.njit(parallel=True, fastmath=True, cache=True)
    def _col2im_kernel(dxp, dcol, oh, ow, k, s):
        nb, _, _, c = dxp.shape
        for b in numba.prange(nb):
            for r in range(oh):
                for q in range(ow):
                    for ki in range(k):
                        for kj in range(k):
                            for ch in range(c):
                                dxp[b, r * s + ki, q * s + kj, ch] += dcol[
                                    b, r, q, ki, kj, ch
                                ]

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

_scratch_local = threading.local()


def _scratch(tag: str, shape, dtype):
    """Reusable per-thread array; valid until the next request with same tag."""
    store = getattr(_scratch_local, "bufs", None)
    if store is None:
        store = _scratch_local.bufs = {}
    dtype = np.dtype(dtype)
    need = int(np.prod(shape)) * dtype.itemsize
    buf = store.get(tag)
    if buf is None or len(buf) < need:
        buf = store[tag] = np.empty(max(need, 1), dtype=np.uint8)
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(shape))).reshape(shape)


class _ConvGeometry:
    """Padding, tiling and im2col/col2im plumbing shared by the conv ops."""

    def __init__(self, x_shape, k: int, stride: int, dtype):
        self.bsz, self.h, self.w, self.cin = x_shape
        self.k = k
        self.stride = stride
        self.dtype = dtype
        self.pt, self.pb = _same_pads(self.h, k, stride)
        self.pl, self.pr = _same_pads(self.w, k, stride)
        self.oh = (self.h + self.pt + self.pb - k) // stride + 1
        self.ow = (self.w + self.pl + self.pr - k) // stride + 1
        self.m = self.bsz * self.oh * self.ow
        per_sample = self.oh * self.ow * k * k * self.cin * dtype.itemsize
        self.tile_b = max(1, min(self.bsz, CONV_TILE_BYTES // max(per_sample, 1)))

    def padded(self, data):
        xp = np.zeros(
            (self.bsz, self.h + self.pt + self.pb, self.w + self.pl + self.pr, self.cin),
            dtype=data.dtype,
        )
        xp[:, self.pt: self.pt + self.h, self.pl: self.pl + self.w, :] = data
        return xp

    def unpad(self, xp):
        return np.ascontiguousarray(
            xp[:, self.pt: self.pt + self.h, self.pl: self.pl + self.w, :]
        )

    def im2col(self, xp, b0: int, b1: int):
        """Patch matrix ((b1-b0)*OH*OW, k*k*cin) for a batch tile, in scratch."""
        k, s, c = self.k, self.stride, self.cin
        nb = b1 - b0
        patches = _scratch("im2col", (nb, self.oh, self.ow, k, k, c), xp.dtype)
        if HAVE_NUMBA:
            _im2col_kernel(xp[b0:b1], patches, self.oh, self.ow, k, s)
        else:
            rows = xp[b0:b1].reshape(nb, xp.shape[1], -1)
            win = np.lib.stride_tricks.sliding_window_view(rows, k * c, axis=2)
            flat5 = patches.reshape(nb, self.oh, self.ow, k, k * c)
            for ki in range(k):
                flat5[:, :, :, ki, :] = win[
                    :, ki: ki + s * self.oh: s, 0: s * c * self.ow: s * c
                ]
        return patches.reshape(nb * self.oh * self.ow, k * k * c)

    def col2im_into(self, dxp, dcol, b0: int, b1: int):
        """Scatter-add a tile's patch gradient into the padded input gradient."""
        k, s, c = self.k, self.stride, self.cin
        d6 = dcol.reshape(b1 - b0, self.oh, self.ow, k, k, c)
        view = dxp[b0:b1]
        if HAVE_NUMBA:
            _col2im_kernel(view, d6, self.oh, self.ow, k, s)
        else:
            for ki in range(k):
                for kj in range(k):
                    view[:, ki: ki + s * self.oh: s, kj: kj + s * self.ow: s, :] += d6[
                        :, :, :, ki, kj, :
                    ]

    def tiles(self, b0: int, b1: int):
        for t0 in range(b0, b1, self.tile_b):
            yield t0, min(t0 + self.tile_b, b1)


def _conv_forward(xp, geo: _ConvGeometry, wmats, biases, group_of):
    """Tiled im2col + GEMM; `group_of` maps a batch index to its weight set."""
    rows_per = geo.oh * geo.ow
    cout = wmats[0].shape[1]
    out = np.empty((geo.bsz, geo.oh, geo.ow, cout), dtype=geo.dtype)
    bounds = _group_bounds(group_of, geo.bsz)
    for g, (g0, g1) in enumerate(bounds):
        for t0, t1 in geo.tiles(g0, g1):
            flat = geo.im2col(xp, t0, t1)
            y = flat @ wmats[g]
            y += biases[g]
            out[t0:t1] = y.reshape(t1 - t0, geo.oh, geo.ow, cout)
    return out


def _conv_backward(g, xp, geo: _ConvGeometry, wmats, group_of, need_dx, need_dw):
    rows_per = geo.oh * geo.ow
    cout = wmats[0].shape[1]
    gf = g.reshape(geo.bsz, rows_per * cout)
    dws = [np.zeros_like(w) if need_dw else None for w in wmats]
    dbs = [None] * len(wmats)
    dxp = np.zeros_like(xp) if need_dx else None
    bounds = _group_bounds(group_of, geo.bsz)
    for gi, (g0, g1) in enumerate(bounds):
        dbs[gi] = g[g0:g1].reshape(-1, cout).sum(axis=0)
        for t0, t1 in geo.tiles(g0, g1):
            gtile = gf[t0:t1].reshape((t1 - t0) * rows_per, cout)
            if need_dw:
                flat = geo.im2col(xp, t0, t1)
                dws[gi] += flat.T @ gtile
            if need_dx:
                dcol = _scratch("dcol", (gtile.shape[0], wmats[gi].shape[0]), geo.dtype)
                np.matmul(gtile, wmats[gi].T, out=dcol)
                geo.col2im_into(dxp, dcol, t0, t1)
    return dws, dbs, dxp


def _group_bounds(group_of, bsz):
    if group_of == 1:
        return [(0, bsz)]
    per = bsz // group_of
    return [(g * per, (g + 1) * per) for g in range(group_of)]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """SAME-padded 2D convolution, NHWC layout, kernel (kh, kw, cin, cout)."""
    kh, kw, cin_w, cout = w.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if x.shape[3] != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {cin_w}")
    geo = _ConvGeometry(x.shape, kh, stride, np.dtype(x.dtype))
    xp = geo.padded(x.data)
    wmat = w.data.reshape(kh * kw * geo.cin, cout)
    out_data = _conv_forward(xp, geo, [wmat], [b.data], 1)

    def backward(g):
        dws, dbs, dxp = _conv_backward(
            g, xp, geo, [wmat], 1, x.requires_grad, w.requires_grad
        )
        if w.requires_grad:
            w._accumulate(dws[0].reshape(w.shape))
        if b.requires_grad:
            b._accumulate(dbs[0])
        if x.requires_grad:
            x._accumulate(geo.unpad(dxp))

    return Tensor(out_data, parents=(x, w, b), backward=backward)


def conv2d_grouped(x: Tensor, ws: list[Tensor], bs: list[Tensor], stride: int = 1) -> Tensor:
    """Per-group convolution: batch rows split evenly over len(ws) weight sets.

    Routing a balanced batch through n decoders this way shares the im2col
    work they would otherwise repeat; group g's weights only receive
    gradients from its own rows.
    """
    groups = len(ws)
    if x.shape[0] % groups != 0:
        raise ValueError("batch size must divide evenly into groups")
    kh, kw, cin_w, cout = ws[0].shape
    if x.shape[3] != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[3]}, kernel {cin_w}")
    geo = _ConvGeometry(x.shape, kh, stride, np.dtype(x.dtype))
    xp = geo.padded(x.data)
    wmats = [w.data.reshape(kh * kw * geo.cin, cout) for w in ws]
    out_data = _conv_forward(xp, geo, wmats, [b.data for b in bs], groups)

    def backward(g):
        need_dw = any(w.requires_grad for w in ws)
        dws, dbs, dxp = _conv_backward(
            g, xp, geo, wmats, groups, x.requires_grad, need_dw
        )
        for j, (w, b) in enumerate(zip(ws, bs)):
            if w.requires_grad:
                w._accumulate(dws[j].reshape(w.shape))
            if b.requires_grad:
                b._accumulate(dbs[j])
        if x.requires_grad:
            x._accumulate(geo.unpad(dxp))

    return Tensor(out_data, parents=(x, *ws, *bs), backward=backward)


def dense_grouped(x: Tensor, ws: list[Tensor], bs: list[Tensor]) -> Tensor:
    """Per-group dense layer over a (G*bg, nin) batch in group order."""
    groups = len(ws)
    if x.shape[0] % groups != 0:
        raise ValueError("batch size must divide evenly into groups")
    bg = x.shape[0] // groups
    wstack = np.stack([w.data for w in ws])
    bstack = np.stack([b.data for b in bs])
    xg = x.data.reshape(groups, bg, -1)
    out_data = (np.matmul(xg, wstack) + bstack[:, None, :]).reshape(
        x.shape[0], -1
    )

    def backward(g):
        gf = g.reshape(groups, bg, -1)
        for j, (w, b) in enumerate(zip(ws, bs)):
            if w.requires_grad:
                w._accumulate(xg[j].T @ gf[j])
            if b.requires_grad:
                b._accumulate(gf[j].sum(axis=0))
        if x.requires_grad:
            x._accumulate(
                np.matmul(gf, wstack.transpose(0, 2, 1)).reshape(x.shape)
            )

    return Tensor(out_data, parents=(x, *ws, *bs), backward=backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor x2 upsampling over the two spatial axes (NHWC)."""
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        if x.requires_grad:
            bsz, h, w, c = x.shape
            x._accumulate(g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)))

    return Tensor(out_data, parents=(x,), backward=backward)


def l2_reconstruction_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Sum over the batch of un-squared per-sample L2 reconstruction norms."""
    r = pred.data.reshape(len(pred.data), -1) - target.reshape(len(target), -1)
    norms = np.linalg.norm(r, axis=1)
    out_data = np.array(norms.sum(), dtype=pred.dtype)

    def backward(g):
        if pred.requires_grad:
            scale = g / np.maximum(norms, eps)
            pred._accumulate((r * scale[:, None]).reshape(pred.shape).astype(pred.dtype))

    return Tensor(out_data, parents=(pred,), backward=backward)


def add_scalars(terms: list[Tensor]) -> Tensor:
    out_data = np.array(sum(t.data for t in terms))

    def backward(g):
        for t in terms:
            if t.requires_grad:
                t._accumulate(np.asarray(g, dtype=t.dtype))

    return Tensor(out_data, parents=tuple(terms), backward=backward)
