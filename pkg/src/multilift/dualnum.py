"""Forward-mode automatic differentiation on numpy arrays.

Two vectorized dual types are provided.  ``Dual`` carries a value of
shape S together with derivatives of shape S+(d,) against a shared seed
space of dimension d, and is used for Jacobians of dynamics and cost
gradients.  ``Dual2`` additionally carries the Hessian, shape S+(d,d),
and is used for the second derivatives of Hamiltonians and costs.

Numeric code elsewhere in the package is written against the generic
helpers at the bottom of this module (``stack``, ``sqrt``, ``matvec``,
...) so the same dynamics and cost functions evaluate on plain numpy
arrays, on ``Dual``, or on ``Dual2`` without modification.
"""

import numpy as np


def _expand_key(key, ndim):
    # Resolve Ellipsis against the *value* ndim so the extra trailing
    # derivative axes are never touched by user indexing.
    if not isinstance(key, tuple):
        return (key,)
    if Ellipsis not in key:
        return key
    n_used = sum(1 for k in key if k is not None and k is not Ellipsis)
    i = key.index(Ellipsis)
    return key[:i] + (slice(None),) * (ndim - n_used) + key[i + 1:]


class Dual:
    """Array of scalars with first derivatives against a d-dim seed."""

    __slots__ = ("val", "der")
    __array_ufunc__ = None  # force numpy to defer to our reflected ops

    def __init__(self, val, der):
        self.val = val if type(val) is np.ndarray else np.asarray(val, dtype=float)
        self.der = der if type(der) is np.ndarray else np.asarray(der, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def nseed(self):
        return self.der.shape[-1]

    def _lift(self, other):
        if isinstance(other, Dual):
            return other
        other = np.asarray(other, dtype=float)
        return Dual(other, np.zeros(other.shape + (self.nseed,)))

    def __add__(self, other):
        if isinstance(other, Dual):
            val = self.val + other.val
            return Dual(val, _bc(self.der, val) + _bc(other.der, val))
        val = self.val + other
        return Dual(val, _bc(self.der, val))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, other):
        if isinstance(other, Dual):
            val = self.val * other.val
            return Dual(val, _bc(self.der * other.val[..., None], val)
                        + _bc(other.der * self.val[..., None], val))
        other = np.asarray(other, dtype=float)
        val = self.val * other
        return Dual(val, _bc(self.der * other[..., None], val))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return self * other._recip()
        other = np.asarray(other, dtype=float)
        val = self.val / other
        return Dual(val, _bc(self.der / other[..., None], val))

    def __rtruediv__(self, other):
        return self._recip() * other

    def _recip(self):
        inv = 1.0 / self.val
        return Dual(inv, -(inv * inv)[..., None] * self.der)

    def __pow__(self, n):
        if n == 2:
            return self * self
        return Dual(self.val ** n, (n * self.val ** (n - 1))[..., None] * self.der)

    def __getitem__(self, key):
        key = _expand_key(key, self.val.ndim)
        return Dual(self.val[key], self.der[key + (slice(None),)])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(self.val.reshape(shape), self.der.reshape(shape + (self.nseed,)))

    def sum(self, axis=None):
        if axis is None:
            return Dual(self.val.sum(), self.der.reshape(-1, self.nseed).sum(0))
        axis = axis % self.val.ndim
        return Dual(self.val.sum(axis), self.der.sum(axis))

    def transpose_last2(self):
        return Dual(self.val.swapaxes(-1, -2), self.der.swapaxes(-2, -3))


class Dual2:
    """Array of scalars with first and second derivatives."""

    __slots__ = ("val", "jac", "hess")
    __array_ufunc__ = None

    def __init__(self, val, jac, hess):
        self.val = val if type(val) is np.ndarray else np.asarray(val, dtype=float)
        self.jac = jac if type(jac) is np.ndarray else np.asarray(jac, dtype=float)
        self.hess = hess if type(hess) is np.ndarray \
            else np.asarray(hess, dtype=float)

    @property
    def shape(self):
        return self.val.shape

    @property
    def nseed(self):
        return self.jac.shape[-1]

    def __add__(self, other):
        if isinstance(other, Dual2):
            val = self.val + other.val
            return Dual2(val, _bc(self.jac, val) + _bc(other.jac, val),
                         _bc2(self.hess, val) + _bc2(other.hess, val))
        val = self.val + other
        return Dual2(val, _bc(self.jac, val), _bc2(self.hess, val))

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, Dual2) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return Dual2(-self.val, -self.jac, -self.hess)

    def __mul__(self, other):
        if isinstance(other, Dual2):
            val = self.val * other.val
            outer = self.jac[..., :, None] * other.jac[..., None, :]
            hess = (self.hess * other.val[..., None, None]
                    + other.hess * self.val[..., None, None]
                    + outer + np.swapaxes(outer, -1, -2))
            jac = self.jac * other.val[..., None] + other.jac * self.val[..., None]
            return Dual2(val, _bc(jac, val), _bc2(hess, val))
        other = np.asarray(other, dtype=float)
        val = self.val * other
        return Dual2(val, _bc(self.jac * other[..., None], val),
                     _bc2(self.hess * other[..., None, None], val))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual2):
            return self * other._recip()
        other = np.asarray(other, dtype=float)
        return self * (1.0 / other)

    def __rtruediv__(self, other):
        return self._recip() * other

    def _recip(self):
        return self._unary(1.0 / self.val, -1.0 / self.val ** 2, 2.0 / self.val ** 3)

    def __pow__(self, n):
        if n == 2:
            return self * self
        return self._unary(self.val ** n, n * self.val ** (n - 1),
                           n * (n - 1) * self.val ** (n - 2))

    def _unary(self, f, fp, fpp):
        outer = self.jac[..., :, None] * self.jac[..., None, :]
        return Dual2(f, fp[..., None] * self.jac,
                     fp[..., None, None] * self.hess + fpp[..., None, None] * outer)

    def __getitem__(self, key):
        key = _expand_key(key, self.val.ndim)
        s = (slice(None),)
        return Dual2(self.val[key], self.jac[key + s], self.hess[key + s + s])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        d = self.nseed
        return Dual2(self.val.reshape(shape), self.jac.reshape(shape + (d,)),
                     self.hess.reshape(shape + (d, d)))

    def sum(self, axis=None):
        d = self.nseed
        if axis is None:
            return Dual2(self.val.sum(), self.jac.reshape(-1, d).sum(0),
                         self.hess.reshape(-1, d, d).sum(0))
        axis = axis % self.val.ndim
        return Dual2(self.val.sum(axis), self.jac.sum(axis), self.hess.sum(axis))

    def transpose_last2(self):
        return Dual2(self.val.swapaxes(-1, -2), self.jac.swapaxes(-2, -3),
                     self.hess.swapaxes(-3, -4))


def _bc(der, val):
    # broadcast a derivative array to match a broadcasted value shape
    target = val.shape + der.shape[-1:]
    return der if der.shape == target else np.broadcast_to(der, target)


def _bc2(hess, val):
    target = val.shape + hess.shape[-2:]
    return hess if hess.shape == target else np.broadcast_to(hess, target)


def seed(*arrays):
    """Lift arrays (..., n_i) to Duals sharing one seed space."""
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    d = sum(a.shape[-1] for a in arrays)
    out, off = [], 0
    for a in arrays:
        n = a.shape[-1]
        der = np.zeros(a.shape + (d,))
        for j in range(n):
            der[..., j, off + j] = 1.0
        out.append(Dual(a, der))
        off += n
    return out if len(out) > 1 else out[0]


def seed2(*arrays):
    """Lift arrays (..., n_i) to Dual2 sharing one seed space."""
    arrays = [np.asarray(a, dtype=float) for a in arrays]
    d = sum(a.shape[-1] for a in arrays)
    out, off = [], 0
    for a in arrays:
        n = a.shape[-1]
        jac = np.zeros(a.shape + (d,))
        for j in range(n):
            jac[..., j, off + j] = 1.0
        out.append(Dual2(a, jac, np.zeros(a.shape + (d, d))))
        off += n
    return out if len(out) > 1 else out[0]


def constant_like(x, template):
    """Lift a plain array to the dual type of ``template`` with zero derivative."""
    x = np.asarray(x, dtype=float)
    if isinstance(template, Dual):
        return Dual(x, np.zeros(x.shape + (template.nseed,)))
    if isinstance(template, Dual2):
        d = template.nseed
        return Dual2(x, np.zeros(x.shape + (d,)), np.zeros(x.shape + (d, d)))
    return x


# ---------------------------------------------------------------------------
# Generic math that dispatches on plain arrays / Dual / Dual2.

def _apply(x, f, fp, fpp):
    if isinstance(x, Dual):
        return Dual(f(x.val), fp(x.val)[..., None] * x.der)
    if isinstance(x, Dual2):
        return x._unary(f(x.val), fp(x.val), fpp(x.val))
    return f(np.asarray(x, dtype=float))


def sqrt(x):
    return _apply(x, np.sqrt, lambda v: 0.5 / np.sqrt(v),
                  lambda v: -0.25 * v ** -1.5)


def exp(x):
    return _apply(x, np.exp, np.exp, np.exp)


def log(x):
    return _apply(x, np.log, lambda v: 1.0 / v, lambda v: -1.0 / v ** 2)


def sin(x):
    return _apply(x, np.sin, np.cos, lambda v: -np.sin(v))


def cos(x):
    return _apply(x, np.cos, lambda v: -np.sin(v), lambda v: -np.cos(v))


def tanh(x):
    return _apply(x, np.tanh, lambda v: 1.0 - np.tanh(v) ** 2,
                  lambda v: -2.0 * np.tanh(v) * (1.0 - np.tanh(v) ** 2))


def stack(parts, axis=-1):
    """Stack scalars/vectors along a new axis (value axes only)."""
    ref = next((p for p in parts if isinstance(p, (Dual, Dual2))), None)
    if ref is None:
        return np.stack([np.asarray(p, dtype=float) for p in parts], axis=axis)
    shape = ref.val.shape
    parts = [p if isinstance(p, type(ref))
             else constant_like(np.broadcast_to(np.asarray(p, dtype=float), shape), ref)
             for p in parts]
    ax = axis % (ref.val.ndim + 1)
    if isinstance(ref, Dual):
        return Dual(np.stack([p.val for p in parts], ax),
                    np.stack([p.der for p in parts], ax))
    return Dual2(np.stack([p.val for p in parts], ax),
                 np.stack([p.jac for p in parts], ax),
                 np.stack([p.hess for p in parts], ax))


def concat(parts, axis=-1):
    ref = next((p for p in parts if isinstance(p, (Dual, Dual2))), None)
    if ref is None:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts], axis=axis)
    parts = [p if isinstance(p, type(ref)) else constant_like(p, ref) for p in parts]
    ax = axis % ref.val.ndim
    if isinstance(ref, Dual):
        return Dual(np.concatenate([p.val for p in parts], ax),
                    np.concatenate([p.der for p in parts], ax))
    return Dual2(np.concatenate([p.val for p in parts], ax),
                 np.concatenate([p.jac for p in parts], ax),
                 np.concatenate([p.hess for p in parts], ax))


def dot(a, b):
    return (a * b).sum(-1)


def cross(a, b):
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])


def norm(a):
    return sqrt(dot(a, a))


def matvec(m, x):
    """(..., r, c) times (..., c) with batch broadcasting on either side."""
    if isinstance(x, (Dual, Dual2)):
        return (m * x[..., None, :]).sum(-1)
    x = np.asarray(x, dtype=float)
    if isinstance(m, (Dual, Dual2)):
        return (m * x[..., None, :]).sum(-1)
    return (np.asarray(m) * x[..., None, :]).sum(-1)


def matmul(a, b):
    if isinstance(a, (Dual, Dual2)) or isinstance(b, (Dual, Dual2)):
        ai = a[..., :, :, None] if isinstance(a, (Dual, Dual2)) else np.asarray(a)[..., :, :, None]
        bi = b[..., None, :, :] if isinstance(b, (Dual, Dual2)) else np.asarray(b)[..., None, :, :]
        return (ai * bi).sum(-2)
    return np.asarray(a) @ np.asarray(b)


def transpose_last2(x):
    if isinstance(x, (Dual, Dual2)):
        return x.transpose_last2()
    return np.swapaxes(np.asarray(x), -1, -2)


def value(x):
    return x.val if isinstance(x, (Dual, Dual2)) else np.asarray(x, dtype=float)
