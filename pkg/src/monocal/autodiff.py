"""Reverse-mode automatic differentiation on a flat tape.

Values are held in ``Var`` handles pointing into a ``Tape``.  A Var wraps a
float64 numpy payload of any shape: shape () is a scalar, shape (H, W) or
(H, W, C) is a dense grid.  Every operation appends one tape node holding the
parent ids and a vector-Jacobian closure, so grid operations are fused (one
node per grid op, not per pixel).  ``backward`` runs a single reverse sweep in
construction order, which is a valid reverse topological order because parent
ids are always smaller than child ids.

Plain floats and numpy arrays mix freely with Vars in arithmetic; they are
treated as constants and receive no gradient.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """Raised when a backward sweep meets a NaN or infinite adjoint."""


class Tape:
    """Append-only record of operations plus the instance RNG.

    A tape is single-writer: one optimization instance owns one tape and one
    seeded random stream, which makes every stochastic op reproducible for a
    fixed ``rng_seed``.
    """

    def __init__(self, rng_seed=0):
        self.nodes = []        # (parents tuple, vjp callable or None, name)
        self.leaf_ids = []
        self.leaf_shapes = {}
        self.rng_seed = int(rng_seed)
        self.rng = np.random.default_rng(self.rng_seed)
        self.norm_clamp_count = 0  # diagnostic: negative-variance clamps

    def __len__(self):
        return len(self.nodes)

    def _append(self, data, parents, vjp, name):
        nid = len(self.nodes)
        self.nodes.append((parents, vjp, name))
        return Var(self, nid, data)

    def variable(self, value, name="var"):
        """Create a leaf variable that will receive a gradient."""
        data = np.asarray(value, dtype=np.float64)
        v = self._append(data, (), None, name)
        self.leaf_ids.append(v.id)
        self.leaf_shapes[v.id] = data.shape
        return v

    def constant(self, value, name="const"):
        """Create a non-leaf node with no parents (no gradient flows)."""
        data = np.asarray(value, dtype=np.float64)
        return self._append(data, (), None, name)


class Var:
    """Handle to one tape node: a float64 array plus its node id."""

    __slots__ = ("tape", "id", "data")

    # make numpy defer to Var's reflected operators instead of building
    # object arrays elementwise
    __array_ufunc__ = None

    def __init__(self, tape, nid, data):
        self.tape = tape
        self.id = nid
        self.data = np.asarray(data, dtype=np.float64)

    # -- Scalar / DiffGrid views ------------------------------------------
    @property
    def value(self):
        """Payload as float for scalars, ndarray otherwise."""
        return float(self.data) if self.data.ndim == 0 else self.data

    @property
    def tape_id(self):
        return self.id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2] if self.data.ndim == 3 else 1

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.data.shape})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _data(x):
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("no Var among operands")


def _unbroadcast(g, shape):
    """Sum g down to `shape` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, out, vjp_a, vjp_b, name):
    if not isinstance(a, Var) and not isinstance(b, Var):
        return out
    tape = _tape_of(a, b)
    if isinstance(a, Var) and isinstance(b, Var):
        return tape._append(out, (a.id, b.id), lambda g: (vjp_a(g), vjp_b(g)), name)
    if isinstance(a, Var):
        return tape._append(out, (a.id,), lambda g: (vjp_a(g),), name)
    return tape._append(out, (b.id,), lambda g: (vjp_b(g),), name)


# -- arithmetic -------------------------------------------------------------
# Every public math function falls back to plain numpy when no operand is a
# Var, so geometry code can be written once and run on or off the tape.

def add(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad + bd,
                   lambda g: _unbroadcast(g, ad.shape),
                   lambda g: _unbroadcast(g, bd.shape), "add")


def sub(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad - bd,
                   lambda g: _unbroadcast(g, ad.shape),
                   lambda g: _unbroadcast(-g, bd.shape), "sub")


def mul(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad * bd,
                   lambda g: _unbroadcast(g * bd, ad.shape),
                   lambda g: _unbroadcast(g * ad, bd.shape), "mul")


def div(a, b):
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad / bd,
                   lambda g: _unbroadcast(g / bd, ad.shape),
                   lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape), "div")


def neg(a):
    if not isinstance(a, Var):
        return -_data(a)
    return a.tape._append(-a.data, (a.id,), lambda g: (-g,), "neg")


def power(a, p):
    p = float(p)
    if not isinstance(a, Var):
        return _data(a) ** p
    ad = a.data
    return a.tape._append(ad ** p, (a.id,),
                          lambda g: (g * p * ad ** (p - 1.0),), "pow")


def square(a):
    if not isinstance(a, Var):
        d = _data(a)
        return d * d
    ad = a.data
    return a.tape._append(ad * ad, (a.id,), lambda g: (2.0 * g * ad,), "square")


def sqrt(a):
    if not isinstance(a, Var):
        return np.sqrt(_data(a))
    out = np.sqrt(a.data)
    return a.tape._append(out, (a.id,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a):
    if not isinstance(a, Var):
        return np.exp(_data(a))
    out = np.exp(a.data)
    return a.tape._append(out, (a.id,), lambda g: (g * out,), "exp")


def log(a):
    if not isinstance(a, Var):
        return np.log(_data(a))
    ad = a.data
    return a.tape._append(np.log(ad), (a.id,), lambda g: (g / ad,), "log")


def sin(a):
    if not isinstance(a, Var):
        return np.sin(_data(a))
    ad = a.data
    return a.tape._append(np.sin(ad), (a.id,), lambda g: (g * np.cos(ad),), "sin")


def cos(a):
    if not isinstance(a, Var):
        return np.cos(_data(a))
    ad = a.data
    return a.tape._append(np.cos(ad), (a.id,), lambda g: (-g * np.sin(ad),), "cos")


def absolute(a):
    if not isinstance(a, Var):
        return np.abs(_data(a))
    ad = a.data
    return a.tape._append(np.abs(ad), (a.id,), lambda g: (g * np.sign(ad),), "abs")


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    if not isinstance(a, Var):
        d = _data(a)
        return _sigmoid(np.atleast_1d(d)).reshape(d.shape)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.data.shape)
    return a.tape._append(out, (a.id,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + exp(x)), the positive depth parameterization."""
    if not isinstance(a, Var):
        return np.logaddexp(0.0, _data(a))
    ad = a.data
    out = np.logaddexp(0.0, ad)
    sig = _sigmoid(np.atleast_1d(ad)).reshape(ad.shape)
    return a.tape._append(out, (a.id,), lambda g: (g * sig,), "softplus")


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    ad, bd = _data(a), _data(b)
    keep_a = ad >= bd
    return _binary(a, b, np.maximum(ad, bd),
                   lambda g: _unbroadcast(g * keep_a, ad.shape),
                   lambda g: _unbroadcast(g * ~keep_a, bd.shape), "maximum")


def where(cond, a, b):
    """Select a where cond else b; cond is a plain boolean array."""
    cond = np.asarray(cond, dtype=bool)
    ad, bd = _data(a), _data(b)
    return _binary(a, b, np.where(cond, ad, bd),
                   lambda g: _unbroadcast(np.where(cond, g, 0.0), ad.shape),
                   lambda g: _unbroadcast(np.where(cond, 0.0, g), bd.shape), "where")


# -- shape & indexing -------------------------------------------------------

def _is_basic_index(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def getitem(a, idx):
    if not isinstance(a, Var):
        return _data(a)[idx]
    ad = a.data
    out = ad[idx]
    basic = _is_basic_index(idx)  # basic indices never repeat an element

    def vjp(g):
        z = np.zeros_like(ad)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return a.tape._append(out, (a.id,), vjp, "getitem")


def reshape(a, shape):
    if not isinstance(a, Var):
        return _data(a).reshape(shape)
    old = a.data.shape
    return a.tape._append(a.data.reshape(shape), (a.id,),
                          lambda g: (g.reshape(old),), "reshape")


def stack(parts, axis=-1):
    """Stack Vars (and constants) along a new axis."""
    if not any(isinstance(p, Var) for p in parts):
        return np.stack([_data(p) for p in parts], axis=axis)
    tape = _tape_of(*[p for p in parts if isinstance(p, Var)])
    parts = [p if isinstance(p, Var) else tape.constant(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)
    ids = tuple(p.id for p in parts)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(ids)))

    return tape._append(out, ids, vjp, "stack")


def concat(parts, axis=0):
    if not any(isinstance(p, Var) for p in parts):
        return np.concatenate([_data(p) for p in parts], axis=axis)
    tape = _tape_of(*[p for p in parts if isinstance(p, Var)])
    parts = [p if isinstance(p, Var) else tape.constant(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._append(out, tuple(p.id for p in parts), vjp, "concat")


def stop_gradient(a):
    """Detach: same payload, no gradient path."""
    if not isinstance(a, Var):
        return _data(a)
    return a.tape.constant(a.data, name="stop_gradient")


# -- reductions -------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return _data(a).sum(axis=axis, keepdims=keepdims)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ad.shape).copy(),)

    return a.tape._append(out, (a.id,), vjp, "sum")


def mean_(a, axis=None, keepdims=False):
    if not isinstance(a, Var):
        return _data(a).mean(axis=axis, keepdims=keepdims)
    ad = a.data
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


# -- small linear algebra ----------------------------------------------------

def apply_matrix(points, m):
    """Rotate/transform (..., 3) points by a 3x3 matrix: out_i = sum_j M_ij p_j."""
    pd, md = _data(points), _data(m)
    out = np.einsum("...j,ij->...i", pd, md)

    def vjp_p(g):
        return np.einsum("...i,ij->...j", g, md)

    def vjp_m(g):
        return g.reshape(-1, g.shape[-1]).T @ pd.reshape(-1, pd.shape[-1])

    return _binary(points, m, out, vjp_p, vjp_m, "apply_matrix")


def matmul33(a, b):
    """3x3 @ 3x3 product."""
    ad, bd = _data(a), _data(b)
    return _binary(a, b, ad @ bd,
                   lambda g: g @ bd.T,
                   lambda g: ad.T @ g, "matmul33")


# -- backward ----------------------------------------------------------------

def backward(root):
    """Gradient of a scalar root w.r.t. every leaf variable on its tape.

    Returns {leaf id: gradient array}; leaves unreached by the root get
    zeros.  Raises NonFiniteGradientError naming the first tape node whose
    adjoint is not finite.
    """
    if not isinstance(root, Var):
        raise TypeError("backward root must be a Var")
    if root.data.ndim != 0:
        raise ValueError("backward root must be a scalar (shape ())")
    tape = root.tape
    nodes = tape.nodes
    adjoint = [None] * (root.id + 1)
    adjoint[root.id] = np.ones((), dtype=np.float64)
    for nid in range(root.id, -1, -1):
        g = adjoint[nid]
        if g is None:
            continue
        parents, vjp, name = nodes[nid]
        # one-pass screen; the exact check only runs on suspicion (a huge
        # but finite adjoint can overflow the screening sum)
        if not np.isfinite(np.sum(g)) and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                f"non-finite gradient at tape node {nid} ({name})")
        if vjp is None:
            continue  # leaf or constant: adjoint stays for collection below
        for pid, contrib in zip(parents, vjp(g)):
            c = np.asarray(contrib, dtype=np.float64)
            adjoint[pid] = c if adjoint[pid] is None else adjoint[pid] + c
        adjoint[nid] = None
    grads = {}
    for lid in tape.leaf_ids:
        if lid <= root.id and adjoint[lid] is not None:
            grads[lid] = adjoint[lid]
        else:
            grads[lid] = np.zeros(tape.leaf_shapes[lid], dtype=np.float64)
    return grads
