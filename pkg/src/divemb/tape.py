"""Dense 2-D float arrays with reverse-mode differentiation.

Everything the model needs is expressed over row-major 2-D float64 arrays
(vectors are 1xD or Dx1 matrices).  Each operation computes its value
eagerly with numpy; when the inputs belong to a :class:`Tape`, the
operation additionally records a backward closure so that
:meth:`Tape.backward` can propagate adjoints in exact reverse order.

Ops called on tape-free inputs run eagerly with zero recording overhead,
which is the inference path.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import erf

_SQRT_2 = np.sqrt(2.0)
_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class Var:
    """A 2-D float64 array, optionally attached to a tape."""

    __slots__ = ("value", "tape")

    def __init__(self, value, tape=None):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"Var requires a 2-D array, got shape {arr.shape}")
        self.value = arr
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on non-scalar Var of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Var(shape={self.shape}, taped={self.tape is not None})"


def constant(value) -> Var:
    """An input that never receives an adjoint."""
    return Var(value, tape=None)


class Tape:
    """Ordered record of primitive applications plus an adjoint buffer.

    Single-owner: a tape must not be shared across threads while
    recording.  ``backward`` visits records in exact reverse order of the
    forward pass; adjoints of values not on the path to the seeded output
    stay zero.
    """

    def __init__(self):
        self._nodes = []  # (out Var, parent Vars, backward closure)
        self._adjoints = {}

    def var(self, value) -> Var:
        """Create a leaf variable whose adjoint will be tracked."""
        return Var(value, tape=self)

    def __len__(self):
        return len(self._nodes)

    def record(self, out: Var, parents, backward):
        self._nodes.append((out, tuple(parents), backward))

    def backward(self, out: Var, seed=None):
        """Accumulate adjoints of everything that fed ``out``.

        ``seed`` defaults to ones (the usual choice for a 1x1 loss).
        Resets any previous adjoint buffer.
        """
        self._adjoints = {}
        if seed is None:
            seed = np.ones_like(out.value)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != out.value.shape:
                raise ValueError("seed shape must match output shape")
        self._adjoints[id(out)] = seed.copy()
        for node_out, parents, bwd in reversed(self._nodes):
            g = self._adjoints.get(id(node_out))
            if g is None:
                continue
            parent_grads = bwd(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or p.tape is not self:
                    continue
                acc = self._adjoints.get(id(p))
                if acc is None:
                    # copy: closures may hand back the incoming adjoint itself
                    self._adjoints[id(p)] = np.array(pg, dtype=np.float64)
                else:
                    acc += pg

    def grad(self, var: Var):
        """Adjoint of ``var`` after :meth:`backward` (zeros if untouched)."""
        g = self._adjoints.get(id(var))
        if g is None:
            return np.zeros_like(var.value)
        return g


def _tape_of(*vars_):
    tape = None
    for v in vars_:
        if v.tape is not None:
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise ValueError("operands belong to different tapes")
    return tape


def _emit(value, parents, backward) -> Var:
    tape = _tape_of(*parents)
    out = Var(value, tape)
    if tape is not None:
        tape.record(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.value.shape} x {b.value.shape}"
        )
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return _emit(a.value.T, (a,), lambda g: (g.T,))


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Var, s: float) -> Var:
    s = float(s)
    return _emit(a.value * s, (a,), lambda g: (g * s,))


def add_scalar(a: Var, s: float) -> Var:
    s = float(s)
    return _emit(a.value + s, (a,), lambda g: (g,))


def add_const(a: Var, const) -> Var:
    """Elementwise sum with a non-differentiated array."""
    c = np.asarray(const, dtype=np.float64)
    return _emit(a.value + c, (a,), lambda g: (g,))


def mul_elems(a: Var, const) -> Var:
    """Elementwise product with a non-differentiated array (masks etc.)."""
    c = np.asarray(const, dtype=np.float64)
    return _emit(a.value * c, (a,), lambda g: (g * c,))


def add_rowvec(m: Var, v: Var) -> Var:
    """Add a 1xD row vector to every row of m."""
    if v.value.shape != (1, m.value.shape[1]):
        raise ValueError("add_rowvec expects v of shape (1, cols)")
    return _emit(
        m.value + v.value, (m, v),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def add_outer(col: Var, row: Var) -> Var:
    """Broadcast sum of a Kx1 column and a 1xM row into a KxM matrix."""
    if col.value.shape[1] != 1 or row.value.shape[0] != 1:
        raise ValueError("add_outer expects (K,1) and (1,M)")
    return _emit(
        col.value + row.value, (col, row),
        lambda g: (g.sum(axis=1, keepdims=True), g.sum(axis=0, keepdims=True)),
    )


def reshape(a: Var, rows: int, cols: int) -> Var:
    orig = a.value.shape
    return _emit(
        a.value.reshape(rows, cols), (a,),
        lambda g: (g.reshape(orig),),
    )


def sum_all(a: Var) -> Var:
    shp = a.value.shape
    return _emit(
        np.array([[a.value.sum()]]), (a,),
        lambda g: (np.full(shp, g[0, 0]),),
    )


def sum_over_axis(a: Var, axis: str) -> Var:
    """Sum over "cols" -> (rows,1) or over "rows" -> (1,cols)."""
    _check_axis(axis)
    if axis == "cols":
        val = a.value.sum(axis=1, keepdims=True)
        bwd = lambda g: (np.broadcast_to(g, a.value.shape).copy(),)
    else:
        val = a.value.sum(axis=0, keepdims=True)
        bwd = lambda g: (np.broadcast_to(g, a.value.shape).copy(),)
    return _emit(val, (a,), bwd)


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    val = np.exp(a.value)
    return _emit(val, (a,), lambda g: (g * val,))


def sigmoid(a: Var) -> Var:
    val = 1.0 / (1.0 + np.exp(-a.value))
    return _emit(val, (a,), lambda g: (g * val * (1.0 - val),))


def max_over_axis(a: Var, axis: str) -> Var:
    """Max over "cols" -> (rows,1) or "rows" -> (1,cols).

    Gradient is routed to the first maximal entry of each slice
    (deterministic tie-break).
    """
    _check_axis(axis)
    v = a.value
    if axis == "cols":
        idx = np.argmax(v, axis=1)
        val = v[np.arange(v.shape[0]), idx][:, None]

        def bwd(g):
            out = np.zeros_like(v)
            out[np.arange(v.shape[0]), idx] = g[:, 0]
            return (out,)
    else:
        idx = np.argmax(v, axis=0)
        val = v[idx, np.arange(v.shape[1])][None, :]

        def bwd(g):
            out = np.zeros_like(v)
            out[idx, np.arange(v.shape[1])] = g[0, :]
            return (out,)
    return _emit(val, (a,), bwd)


def softmax_over_axis(a: Var, axis: str) -> Var:
    """Softmax along each row ("cols") or each column ("rows").

    Max-subtracted for stability; each slice sums to 1.
    """
    _check_axis(axis)
    ax = 1 if axis == "cols" else 0
    shifted = a.value - a.value.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - inner),)

    return _emit(s, (a,), bwd)


def lse_over_axis(a: Var, axis: str) -> Var:
    """log-sum-exp per slice, max-subtracted.  Gradient is the softmax."""
    _check_axis(axis)
    ax = 1 if axis == "cols" else 0
    m = a.value.max(axis=ax, keepdims=True)
    e = np.exp(a.value - m)
    se = e.sum(axis=ax, keepdims=True)
    val = m + np.log(se)
    soft = e / se

    def bwd(g):
        return (soft * np.broadcast_to(g, a.value.shape),)

    return _emit(val, (a,), bwd)


def layer_norm(m: Var, gain: Var, bias: Var, eps: float = 1e-6) -> Var:
    """Per-row standardization followed by a learned affine map.

    ``gain`` and ``bias`` are 1xD.  A zero-variance row maps to the bias
    (the eps keeps the denominator finite).
    """
    d = m.value.shape[1]
    if gain.value.shape != (1, d) or bias.value.shape != (1, d):
        raise ValueError("layer_norm gain/bias must have shape (1, cols)")
    mu = m.value.mean(axis=1, keepdims=True)
    var = m.value.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (m.value - mu) * inv
    gv = gain.value
    val = xhat * gv + bias.value

    def bwd(g):
        dxhat = g * gv
        dgain = (g * xhat).sum(axis=0, keepdims=True)
        dbias = g.sum(axis=0, keepdims=True)
        mean_dxhat = dxhat.mean(axis=1, keepdims=True)
        mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
        dm = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
        return (dm, dgain, dbias)

    return _emit(val, (m, gain, bias), bwd)


def gelu(m: Var, exact: bool = True) -> Var:
    """Gaussian error linear unit, exact-erf form or tanh approximation."""
    x = m.value
    if exact:
        phi = 0.5 * (1.0 + erf(x / _SQRT_2))
        val = x * phi
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        dval = phi + x * pdf

        def bwd(g):
            return (g * dval,)
    else:
        u = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
        t = np.tanh(u)
        val = 0.5 * x * (1.0 + t)
        du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x**2)
        dval = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du

        def bwd(g):
            return (g * dval,)

    return _emit(val, (m,), bwd)


def l2_normalize_rows(m: Var, eps: float = 1e-12) -> Var:
    """Unit-normalize each row; rows with norm <= eps map to zero rows."""
    x = m.value
    n = np.linalg.norm(x, axis=1, keepdims=True)
    safe = n > eps
    denom = np.where(safe, n, 1.0)
    y = np.where(safe, x / denom, 0.0)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        dx = np.where(safe, (g - y * dot) / denom, 0.0)
        return (dx,)

    return _emit(y, (m,), bwd)


def normalize_columns(a: Var, eps: float = 1e-8) -> Var:
    """Divide each column by its sum plus eps (attention renormalization)."""
    colsum = a.value.sum(axis=0, keepdims=True) + eps
    val = a.value / colsum

    def bwd(g):
        dsum = -(g * a.value).sum(axis=0, keepdims=True) / (colsum * colsum)
        return (g / colsum + dsum,)

    return _emit(val, (a,), bwd)


def concat_rows(parts) -> Var:
    """Stack matrices with equal column counts along the row axis."""
    parts = list(parts)
    cols = parts[0].value.shape[1]
    for p in parts:
        if p.value.shape[1] != cols:
            raise ValueError("concat_rows requires equal column counts")
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _emit(np.vstack([p.value for p in parts]), parts, bwd)


def gather_pairs(m: Var, rows, cols) -> Var:
    """Pick entries m[rows[p], cols[p]] into a (P, 1) column.

    Backward scatter-adds, so repeated indices accumulate.
    """
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ValueError("rows and cols must be parallel 1-D index arrays")
    val = m.value[rows, cols][:, None]

    def bwd(g):
        out = np.zeros_like(m.value)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _emit(val, (m,), bwd)


def sqnorm_rows(a: Var) -> Var:
    """Squared L2 norm of each row, as a (rows, 1) column."""
    val = (a.value * a.value).sum(axis=1, keepdims=True)
    return _emit(val, (a,), lambda g: (2.0 * a.value * g,))


def affine_scalar(m: Var, a: Var, b: Var) -> Var:
    """a * m + b with 1x1 scalar Vars a and b (both differentiable)."""
    if a.value.shape != (1, 1) or b.value.shape != (1, 1):
        raise ValueError("affine_scalar expects 1x1 scalars")
    av = a.value[0, 0]
    mv = m.value

    def bwd(g):
        return (g * av,
                np.array([[(g * mv).sum()]]),
                np.array([[g.sum()]]))

    return _emit(av * mv + b.value[0, 0], (m, a, b), bwd)


def _check_axis(axis):
    if axis not in ("rows", "cols"):
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")


# ---------------------------------------------------------------------------
# binary dump format: "DIVM", u32 rows, u32 cols, f32 row-major payload
# ---------------------------------------------------------------------------

MATRIX_MAGIC = b"DIVM"


def write_matrix(fh, m) -> None:
    arr = np.ascontiguousarray(np.asarray(m), dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("write_matrix expects a 2-D array")
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
    fh.write(arr.astype("<f4").tobytes())


def read_matrix(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise ValueError(f"bad matrix magic: {magic!r}")
    rows, cols = struct.unpack("<II", fh.read(8))
    payload = fh.read(rows * cols * 4)
    if len(payload) != rows * cols * 4:
        raise ValueError("truncated matrix payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return arr.reshape(rows, cols)
