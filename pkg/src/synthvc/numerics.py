"""Dense float tensors with reverse-mode autodiff on an explicit tape.

float32 is the storage dtype for everything trained; float64 tensors are
permitted so the finite-difference oracles can run at full precision.
Reductions (sums, means, cross entropy) accumulate in float64 regardless
of the storage dtype. Every forward result is checked for NaN/Inf.

A tape is single-threaded: activate it with `with tape:` around the forward
pass, call `tape.backward(loss)` afterwards, and build a fresh tape per
training step. Ops called with no active tape run as pure functions.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import (
    ArtifactFormatError,
    ConfigError,
    DegenerateBatchError,
    DeterminismError,
    NumericsError,
    ShapeError,
)

Array = np.ndarray
STORAGE_DTYPE = np.float32

_ACTIVE: "Tape | None" = None


def _finite_or_raise(arr: Array, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op}: non-finite values in forward output")


class Tensor:
    """Immutable dense array plus a requires-grad flag."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        src = np.asarray(data)
        if dtype is None:
            dtype = src.dtype if src.dtype in (np.float32, np.float64) else STORAGE_DTYPE
        arr = np.array(src, dtype=dtype)
        arr.flags.writeable = False
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _wrap(arr: Array, requires_grad: bool = False) -> Tensor:
    t = Tensor.__new__(Tensor)
    try:
        arr.flags.writeable = False
    except ValueError:
        pass  # read-only view of a read-only base
    t.data = arr
    t.requires_grad = requires_grad
    return t


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


class TapeNode:
    """One recorded operation: kind, parent ids, cached output, per-parent vjps."""

    __slots__ = ("op", "parents", "out", "vjps")

    def __init__(self, op, parents, out, vjps):
        self.op = op
        self.parents = parents
        self.out = out
        self.vjps = vjps


class Tape:
    """Flat record of ops in construction order; node ids are topological."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._ids: dict[int, int] = {}
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise NumericsError("a tape is already active; tapes do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def _enroll(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(TapeNode("leaf", (), t.data, None))
            self._ids[id(t)] = nid
            self._tensors[nid] = t
        return nid

    def tid_of(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def record(self, op: str, parents: Sequence[Tensor], out: Tensor,
               vjps: tuple[Callable[[Array], Array] | None, ...]) -> None:
        pids = tuple(self._enroll(p) for p in parents)
        nid = len(self.nodes)
        self.nodes.append(TapeNode(op, pids, out.data, vjps))
        self._ids[id(out)] = nid
        self._tensors[nid] = out

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients for every requires-grad leaf, keyed by node id."""
        lid = self._ids.get(id(loss))
        if lid is None:
            raise NumericsError("backward: loss tensor is not on this tape")
        if loss.data.shape != ():
            raise NumericsError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, Array] = {lid: np.ones((), dtype=loss.data.dtype)}
        for nid in range(lid, -1, -1):
            node = self.nodes[nid]
            g = grads.get(nid)
            if g is None or node.vjps is None:
                continue
            for pid, fn in zip(node.parents, node.vjps):
                if fn is None:
                    continue
                contrib = fn(g)
                prev = grads.get(pid)
                grads[pid] = contrib if prev is None else prev + contrib
        out: dict[int, Tensor] = {}
        for nid, node in enumerate(self.nodes):
            if node.op == "leaf" and nid in grads:
                t = self._tensors[nid]
                if t.requires_grad:
                    out[nid] = _wrap(np.ascontiguousarray(grads[nid]))
        return out

    def grad_for(self, grads: dict[int, Tensor], t: Tensor) -> Array | None:
        nid = self._ids.get(id(t))
        if nid is None:
            return None
        g = grads.get(nid)
        return None if g is None else g.data

    def reset(self) -> None:
        self.nodes.clear()
        self._ids.clear()
        self._tensors.clear()


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Backward on the active tape (module-level convenience)."""
    if _ACTIVE is None:
        raise NumericsError("backward: no active tape")
    return _ACTIVE.backward(loss)


def _apply(op: str, parents: Sequence[Tensor], out_arr: Array,
           vjps_builder: Callable[[], tuple]) -> Tensor:
    _finite_or_raise(out_arr, op)
    req = any(p.requires_grad for p in parents)
    out = _wrap(out_arr, requires_grad=req)
    if _ACTIVE is not None and req:
        _ACTIVE.record(op, parents, out, vjps_builder())
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def build():
        fa = (lambda g: _unbroadcast(g, a.data.shape)) if a.requires_grad else None
        fb = (lambda g: _unbroadcast(g, b.data.shape)) if b.requires_grad else None
        return (fa, fb)

    return _apply("add", (a, b), out, build)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def build():
        fa = (lambda g: _unbroadcast(g, a.data.shape)) if a.requires_grad else None
        fb = (lambda g: _unbroadcast(-g, b.data.shape)) if b.requires_grad else None
        return (fa, fb)

    return _apply("sub", (a, b), out, build)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def build():
        ad, bd = a.data, b.data
        fa = (lambda g: _unbroadcast(g * bd, ad.shape)) if a.requires_grad else None
        fb = (lambda g: _unbroadcast(g * ad, bd.shape)) if b.requires_grad else None
        return (fa, fb)

    return _apply("mul", (a, b), out, build)


def scale(a: Tensor, c: float) -> Tensor:
    cc = a.data.dtype.type(c)
    out = a.data * cc

    def build():
        return ((lambda g: g * cc) if a.requires_grad else None,)

    return _apply("scale", (a,), out, build)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def build():
        ad, bd = a.data, b.data

        def fa(g):
            return _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)

        def fb(g):
            return _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)

        return (fa if a.requires_grad else None, fb if b.requires_grad else None)

    return _apply("matmul", (a, b), out, build)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def build():
        inv = tuple(np.argsort(axes))
        return ((lambda g: np.ascontiguousarray(np.transpose(g, inv)))
                if a.requires_grad else None,)

    return _apply("transpose", (a,), out, build)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def build():
        orig = a.data.shape
        return ((lambda g: g.reshape(orig)) if a.requires_grad else None,)

    return _apply("reshape", (a,), out, build)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def build():
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def make(i):
            lo, hi = offsets[i], offsets[i + 1]

            def fn(g):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                return np.ascontiguousarray(g[tuple(sl)])

            return fn

        return tuple(make(i) if t.requires_grad else None for i, t in enumerate(tensors))

    return _apply("concat", tuple(tensors), out, build)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.data.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for axis of size {n}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def build():
        shape = a.data.shape

        def fn(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[tuple(sl)] = g
            return full

        return (fn if a.requires_grad else None,)

    return _apply("narrow", (a,), out, build)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def silu(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    out = x * sig

    def build():
        def fn(g):
            return g * sig * (1.0 + x * (1.0 - sig))

        return (fn if a.requires_grad else None,)

    return _apply("silu", (a,), out, build)


def softmax(a: Tensor) -> Tensor:
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("softmax: last dimension must be >= 1")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def build():
        s = out

        def fn(g):
            return s * (g - (g * s).sum(axis=-1, keepdims=True))

        return (fn if a.requires_grad else None,)

    return _apply("softmax", (a,), out, build)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    arr, gn = x.data, gain.data
    d = arr.shape[-1]
    if gn.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match last axis {d}")
    ms = np.mean(arr.astype(np.float64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(arr.dtype)
    out = arr * inv * gn

    def build():
        def fx(g):
            gp = g * gn
            dot = (gp * arr).sum(axis=-1, keepdims=True)
            return gp * inv - arr * (inv ** 3) * (dot / d)

        def fg(g):
            prod = g * arr * inv
            return prod.reshape(-1, d).sum(axis=0)

        return (fx if x.requires_grad else None, fg if gain.requires_grad else None)

    return _apply("rms_norm", (x, gain), out, build)


def rope_apply(x: Tensor, positions, theta_base: float = 10000.0) -> Tensor:
    arr = x.data
    d = arr.shape[-1]
    if d % 2 != 0:
        raise ConfigError(f"rope_apply: head dimension must be even, got {d}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (arr.shape[0],):
        raise ShapeError(f"rope_apply: positions length {pos.shape} does not match axis 0 of {arr.shape}")
    half = d // 2
    freqs = theta_base ** (-(2.0 * np.arange(half, dtype=np.float64)) / d)
    ang = pos[:, None] * freqs[None, :]
    bshape = (arr.shape[0],) + (1,) * (arr.ndim - 2) + (half,)
    cos = np.cos(ang).astype(arr.dtype).reshape(bshape)
    sin = np.sin(ang).astype(arr.dtype).reshape(bshape)
    xe, xo = arr[..., 0::2], arr[..., 1::2]
    out = np.empty_like(arr)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def build():
        def fn(g):
            ge, go = g[..., 0::2], g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = ge * cos + go * sin
            gx[..., 1::2] = -ge * sin + go * cos
            return gx

        return (fn if x.requires_grad else None,)

    return _apply("rope_apply", (x,), out, build)


# ---------------------------------------------------------------------------
# lookups, reductions, losses


def embedding_lookup(table: Tensor, ids) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)
    v = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = idx[(idx < 0) | (idx >= v)][0]
        raise IndexError(f"embedding_lookup: id {bad} out of range [0, {v})")
    out = table.data[idx]

    def build():
        shape = table.data.shape

        def fn(g):
            gt = np.zeros(shape, dtype=g.dtype)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
            return gt

        return (fn if table.requires_grad else None,)

    return _apply("embedding_lookup", (table,), out, build)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.data.dtype)

    def build():
        shape, dt = a.data.shape, a.data.dtype
        return ((lambda g: np.full(shape, g, dtype=dt)) if a.requires_grad else None,)

    return _apply("sum_all", (a,), out, build)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(np.sum(a.data, dtype=np.float64) / n, dtype=a.data.dtype)

    def build():
        shape, dt = a.data.shape, a.data.dtype
        return ((lambda g: np.full(shape, g / n, dtype=dt)) if a.requires_grad else None,)

    return _apply("mean_all", (a,), out, build)


def mean_axis(a: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    n = a.data.shape[axis]
    out = (np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64) / n).astype(a.data.dtype)

    def build():
        shape = a.data.shape

        def fn(g):
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, shape).astype(g.dtype) / n

        return (fn if a.requires_grad else None,)

    return _apply("mean_axis", (a,), out, build)


def cross_entropy(logits: Tensor, targets, mask=None, allow_empty: bool = False) -> Tensor:
    """Mean negative log-softmax over unmasked positions.

    The forward value is accumulated in float64 and rounded once to the
    logits dtype, so independent float64 recomputation matches to ~1 ulp.
    With allow_empty, a fully masked batch contributes an exact zero and the
    returned tensor carries `degenerate = True`.
    """
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-D (T, C), got {logits.shape}")
    t_idx = np.asarray(targets, dtype=np.int64)
    n_rows, n_cls = x.shape
    if t_idx.shape != (n_rows,):
        raise ShapeError(f"cross_entropy: targets shape {t_idx.shape} does not match {n_rows} rows")
    m = np.ones(n_rows, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != (n_rows,):
        raise ShapeError(f"cross_entropy: mask shape {m.shape} does not match {n_rows} rows")
    n_live = int(m.sum())
    if n_live == 0:
        if not allow_empty:
            raise DegenerateBatchError("cross_entropy: all positions masked")
        zero = _apply("cross_entropy", (logits,), np.asarray(0.0, dtype=x.dtype),
                      lambda: ((lambda g: np.zeros_like(x)) if logits.requires_grad else None,))
        zero.degenerate = True
        return zero
    live_t = t_idx[m]
    if live_t.min() < 0 or live_t.max() >= n_cls:
        bad = live_t[(live_t < 0) | (live_t >= n_cls)][0]
        raise IndexError(f"cross_entropy: target {bad} out of range [0, {n_cls})")

    x64 = x.astype(np.float64)
    mx = x64.max(axis=1, keepdims=True)
    z = x64 - mx
    lse = mx[:, 0] + np.log(np.exp(z).sum(axis=1))
    logp_t = x64[np.arange(n_rows), np.clip(t_idx, 0, n_cls - 1)] - lse
    loss64 = -np.sum(logp_t[m]) / n_live
    out = np.asarray(loss64, dtype=x.dtype)

    def build():
        def fn(g):
            p = np.exp(x64 - lse[:, None])
            p[np.arange(n_rows), np.clip(t_idx, 0, n_cls - 1)] -= 1.0
            p[~m] = 0.0
            return (p * (float(g) / n_live)).astype(x.dtype)

        return (fn if logits.requires_grad else None,)

    return _apply("cross_entropy", (logits,), out, build)


def unfold_time(x: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Sliding windows along the time axis, flattened per step (im2col).

    x is (T, F) or (B, T, F); output is (T', kernel*F) or (B, T', kernel*F)
    with zero padding of `pad` frames at both ends.
    """
    arr = x.data
    batched = arr.ndim == 3
    a3 = arr if batched else arr[None]
    b, t, f = a3.shape
    tp = t + 2 * pad
    if tp < kernel:
        raise ShapeError(f"unfold_time: padded length {tp} shorter than kernel {kernel}")
    padded = np.zeros((b, tp, f), dtype=arr.dtype)
    padded[:, pad:pad + t] = a3
    n_out = (tp - kernel) // stride + 1
    idx = np.arange(n_out)[:, None] * stride + np.arange(kernel)[None, :]
    out = padded[:, idx, :].reshape(b, n_out, kernel * f)
    if not batched:
        out = out[0]

    def build():
        def fn(g):
            g4 = g.reshape(b, n_out, kernel, f)
            gp = np.zeros((b, tp, f), dtype=g.dtype)
            np.add.at(gp, (slice(None), idx), g4)
            gx = gp[:, pad:pad + t]
            return np.ascontiguousarray(gx if batched else gx[0])

        return (fn if x.requires_grad else None,)

    return _apply("unfold_time", (x,), out, build)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-4) -> float:
    """Worst per-coordinate relative error between tape gradients and
    central finite differences, both evaluated in float64."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def run(arr: Array) -> float:
        out = f(_wrap(np.array(arr), requires_grad=False))
        return float(out.data)

    y1, y2 = run(base), run(base)
    if not (y1 == y2):
        raise DeterminismError("grad_check: repeated evaluation mismatch, f is not deterministic")

    t = Tape()
    with t:
        xt = Tensor(base, requires_grad=True, dtype=np.float64)
        loss = f(xt)
    grads = t.backward(loss)
    analytic = t.grad_for(grads, xt)
    if analytic is None:
        analytic = np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    an_flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] = flat[i] + step
        fp = run(probe.reshape(base.shape))
        probe[i] = flat[i] - step
        fm = run(probe.reshape(base.shape))
        fd = (fp - fm) / (2.0 * step)
        an = an_flat[i]
        denom = max(abs(fd), abs(an))
        if denom < 1e-10:
            continue
        worst = max(worst, abs(fd - an) / denom)
    return worst


# ---------------------------------------------------------------------------
# serialization: named tensor records (little-endian)


def write_tensor_record(fh: BinaryIO, name: str, arr: Array) -> None:
    """name length (u32), name bytes, rank (u32), dims (u32 each), f32 payload."""
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_record(fh: BinaryIO) -> tuple[str, Array] | None:
    """Read one record; None at clean EOF."""
    head = fh.read(4)
    if head == b"":
        return None
    if len(head) != 4:
        raise ArtifactFormatError("tensor record: truncated name length")
    (nlen,) = struct.unpack("<I", head)
    nb = fh.read(nlen)
    if len(nb) != nlen:
        raise ArtifactFormatError("tensor record: truncated name")
    rank_b = fh.read(4)
    if len(rank_b) != 4:
        raise ArtifactFormatError("tensor record: truncated rank")
    (rank,) = struct.unpack("<I", rank_b)
    dims = []
    for _ in range(rank):
        db = fh.read(4)
        if len(db) != 4:
            raise ArtifactFormatError("tensor record: truncated dims")
        dims.append(struct.unpack("<I", db)[0])
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise ArtifactFormatError("tensor record: truncated payload")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return nb.decode("utf-8"), arr
