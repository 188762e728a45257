"""Small dense-tensor engine with reverse-mode differentiation.

Graphs are recorded while ops run (define-by-run).  Shapes are explicit:
``add`` only broadcasts a 1-D bias over the last axis, every other op
requires matching shapes.  Float64 is the default so finite-difference checks
can be held to tight tolerances; ``set_precision("float32")`` switches new
tensors to single precision.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphStateError, ShapeError, ValidationError

_DTYPE = np.float64


def set_precision(name: str) -> None:
    global _DTYPE
    if name not in ("float32", "float64"):
        raise ValidationError(f"unsupported precision {name!r}")
    _DTYPE = np.dtype(name).type


def get_dtype():
    return _DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf",
                 name=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data, parents, backward_fn, op) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward_fn if needs else None, op)


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


# --------------------------------------------------------------------------- ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)x(k,m), got {a.shape} x {b.shape}")

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)
    return _node(a.data @ b.data, (a, b), bw, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def bw(g):
            _acc(a, g)
            _acc(b, g)
        return _node(a.data + b.data, (a, b), bw, "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        def bw_bias(g):
            _acc(a, g)
            _acc(b, g.reshape(-1, b.shape[0]).sum(axis=0))
        return _node(a.data + b.data, (a, b), bw_bias, "add_bias")
    raise ShapeError(f"add needs equal shapes or a trailing bias, got {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub needs equal shapes, got {a.shape} - {b.shape}")

    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} * {b.shape}")

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _node(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.data * s, (a,), lambda g: _acc(a, g * s), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: _acc(a, g * pos), "relu")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _node(a.data.reshape(shape), (a,), lambda g: _acc(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"bad transpose axes {axes} for shape {a.shape}")
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: _acc(a, g.transpose(inv)),
                 "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    nd = tensors[0].data.ndim
    ax = axis % nd
    for t in tensors:
        if t.data.ndim != nd or any(t.shape[k] != tensors[0].shape[k]
                                    for k in range(nd) if k != ax):
            raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * nd
            sl[ax] = slice(lo, hi)
            _acc(t, g[tuple(sl)])
    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def gather_rows(table: Tensor, index) -> Tensor:
    """``table[index]`` for a 2-D table; output shape ``index.shape + (cols,)``."""
    idx = np.asarray(index)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather index out of range for {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.ravel(), g.reshape(-1, table.shape[1]))
        _acc(table, full)
    return _node(table.data[idx], (table,), bw, "gather_rows")


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Stabilized softmax; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e.sum(axis=axis, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def bw(g):
        _acc(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))
    return _node(p, (a,), bw, "softmax")


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum, e.g. ``"qhd,qkhd->qhk"``; no repeated labels per operand."""
    ins, out = spec.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ShapeError(f"repeated label in einsum operand {s!r}")
    if len(sa) != a.data.ndim or len(sb) != b.data.ndim:
        raise ShapeError(f"einsum {spec} rank mismatch for {a.shape}, {b.shape}")
    dims = {}
    for s, t in ((sa, a), (sb, b)):
        for lab, n in zip(s, t.shape):
            if dims.setdefault(lab, n) != n:
                raise ShapeError(f"einsum {spec}: label {lab} has sizes {dims[lab]} and {n}")
    for lab in sa:
        if lab not in out and lab not in sb:
            raise ShapeError(f"einsum {spec}: label {lab} summed inside one operand")
    for lab in sb:
        if lab not in out and lab not in sa:
            raise ShapeError(f"einsum {spec}: label {lab} summed inside one operand")

    def bw(g):
        if a.requires_grad:
            _acc(a, np.einsum(f"{out},{sb}->{sa}", g, b.data))
        if b.requires_grad:
            _acc(b, np.einsum(f"{out},{sa}->{sb}", g, a.data))
    return _node(np.einsum(spec, a.data, b.data), (a, b), bw, "einsum")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        n = x.shape[-1]
        gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                        - y * (g * y).sum(axis=-1, keepdims=True))
        _acc(a, gx)
    return _node(y, (a,), bw, "layer_norm")


def sum_all(a: Tensor) -> Tensor:
    return _node(a.data.sum(), (a,), lambda g: _acc(a, np.full(a.shape, g)), "sum")


def mean_sq(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.mean(a.data**2), (a,), lambda g: _acc(a, g * 2.0 * a.data / n), "mean_sq")


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Summed cross-entropy of rows of ``logits`` (n, L) against integer targets."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy needs (n,L) logits and (n,) targets, "
                         f"got {logits.shape}, {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise ShapeError("cross entropy target out of range")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    rows = np.arange(len(t))
    loss = float((lse[:, 0] - x[rows, t]).sum())

    def bw(g):
        p = np.exp(x - lse)
        p[rows, t] -= 1.0
        _acc(logits, g * p)
    return _node(loss, (logits,), bw, "cross_entropy")


def nearest_upsample_3d(a: Tensor, out_shape) -> Tensor:
    """(..., n1, n2, n3, C) -> (..., *out_shape, C) by 2x nearest repetition, cropped.

    An optional leading batch axis is carried through untouched.
    """
    out_shape = tuple(int(s) for s in out_shape)
    if a.data.ndim not in (4, 5) or len(out_shape) != 3:
        raise ShapeError(f"upsample needs (n1,n2,n3,C) or (B,n1,n2,n3,C), got {a.shape}")
    spatial = a.shape[-4:-1]
    if any(not (2 * n - 1 <= o <= 2 * n) for n, o in zip(spatial, out_shape)):
        raise ShapeError(f"cannot upsample {spatial} to {out_shape}")
    ix = [np.arange(o) // 2 for o in out_shape]
    lead = (slice(None),) if a.data.ndim == 5 else ()
    sel = lead + np.ix_(*ix)
    src = a.data[sel]

    def bw(g):
        full = np.zeros_like(a.data)
        if lead:
            # np.add.at cannot mix a slice with open-mesh indices; loop the batch
            for b in range(a.shape[0]):
                np.add.at(full[b], np.ix_(*ix), g[b])
        else:
            np.add.at(full, np.ix_(*ix), g)
        _acc(a, full)
    return _node(src, (a,), bw, "upsample")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data.copy())


def straight_through(x: Tensor, replacement, offset=None) -> Tensor:
    """Value ``replacement``, gradient copied unchanged to ``x``.

    Computed as ``x + const`` with ``const = replacement - x``; passing a
    stored ``offset`` instead reproduces the same surrogate at other points,
    which is what finite-difference checks need.
    """
    r = replacement.data if isinstance(replacement, Tensor) else replacement
    shift = (np.asarray(r, dtype=x.data.dtype) - x.data) if offset is None else offset
    if shift.shape != x.shape:
        raise ShapeError(f"straight-through replacement shape {shift.shape} != {x.shape}")
    out = _node(x.data + shift, (x,), lambda g: _acc(x, g), "straight_through")
    out.name = "ste"
    return out


def sparse_apply(matrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times a vector or column block."""
    A = sp.csr_matrix(matrix)
    if A.shape[1] != a.shape[0]:
        raise ShapeError(f"sparse operator {A.shape} cannot act on {a.shape}")
    return _node(A @ a.data, (a,), lambda g: _acc(a, A.T @ g), "sparse_apply")


# ------------------------------------------------------------------- backward

def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable parameter."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise GraphStateError("backward needs a scalar tensor produced by a forward pass")
    if not loss.requires_grad or loss.backward_fn is None:
        raise GraphStateError("loss has no recorded graph (run the forward pass first)")
    order = topological_order(loss)
    interm = {}
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
        interm[id(node)] = node
    for node in interm.values():
        node.grad = None


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam with bias correction; steps with non-finite gradients are skipped."""

    def __init__(self, params: Iterable[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self) -> bool:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return False
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


# ----------------------------------------------------------------- checkpoints

def save_params(prefix, params: dict[str, Tensor]) -> Path:
    """Write ``<prefix>.json`` (names, shapes, offsets) and ``<prefix>.bin``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest, blobs, offset = {"dtype": "<f8", "tensors": []}, [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(arr.ravel())
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=1) + "\n")
    data = np.concatenate(blobs) if blobs else np.zeros(0)
    data.astype("<f8").tofile(prefix.with_suffix(".bin"))
    return json_path


def load_params(prefix) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    data = np.fromfile(prefix.with_suffix(".bin"), dtype=manifest["dtype"])
    out = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"]))
        out[e["name"]] = data[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return out
