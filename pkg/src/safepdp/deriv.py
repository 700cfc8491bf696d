"""Second-order forward-mode differentiation with hyper-dual numbers.

A :class:`HyperDual` carries ``value + d1*e1 + d2*e2 + d12*e1*e2`` with
``e1**2 = e2**2 = 0``.  Seeding ``e1`` along coordinate ``i`` and ``e2`` along
coordinate ``j`` makes ``d12`` the exact mixed partial ``d2f/dz_i dz_j``.

The four components may be numpy arrays.  Derivative parts carry a trailing
axis indexing (e1, e2) direction pairs, so every pair needed for a Hessian
block is propagated in a single evaluation.  Values may also carry a leading
batch axis (time steps), which lets one call differentiate a stage function
at every knot of a trajectory.

User functions are written componentwise with numpy: ``x[0]``, ``np.sin``,
``np.array([...])``, ``A @ x``.  The same function then runs on float arrays
and on object arrays of :class:`HyperDual`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError

BLOCKS = ("x", "u", "theta")


class HyperDual:
    __slots__ = ("value", "d1", "d2", "d12")

    def __init__(self, value, d1=0.0, d2=0.0, d12=0.0):
        self.value = np.asarray(value, dtype=float)
        self.d1 = d1
        self.d2 = d2
        self.d12 = d12

    def __repr__(self):
        return f"HyperDual({self.value!r}, d1={self.d1!r}, d2={self.d2!r}, d12={self.d12!r})"

    # -- helpers -----------------------------------------------------------
    def _ev(self):
        # value with a trailing axis so it broadcasts against derivative parts
        return self.value[..., None]

    def _chain(self, f0, f1, f2):
        """Apply a scalar function given its value and first two derivatives."""
        f1e = np.asarray(f1)[..., None]
        f2e = np.asarray(f2)[..., None]
        return HyperDual(f0, f1e * self.d1, f1e * self.d2, f1e * self.d12 + f2e * (self.d1 * self.d2))

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, HyperDual):
            return HyperDual(self.value + other.value, self.d1 + other.d1,
                             self.d2 + other.d2, self.d12 + other.d12)
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        return HyperDual(self.value + other, self.d1, self.d2, self.d12)

    __radd__ = __add__

    def __neg__(self):
        return HyperDual(-self.value, -self.d1, -self.d2, -self.d12)

    def __pos__(self):
        return self

    def __sub__(self, other):
        if isinstance(other, HyperDual):
            return HyperDual(self.value - other.value, self.d1 - other.d1,
                             self.d2 - other.d2, self.d12 - other.d12)
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        return HyperDual(self.value - other, self.d1, self.d2, self.d12)

    def __rsub__(self, other):
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        return HyperDual(other - self.value, -self.d1, -self.d2, -self.d12)

    def __mul__(self, other):
        if isinstance(other, HyperDual):
            a, b = self._ev(), other._ev()
            # cross terms grouped first so swapping (e1, e2) seeds is bitwise symmetric
            cross = self.d1 * other.d2 + self.d2 * other.d1
            return HyperDual(self.value * other.value,
                             a * other.d1 + b * self.d1,
                             a * other.d2 + b * self.d2,
                             (a * other.d12 + b * self.d12) + cross)
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        c = np.asarray(other, dtype=float)[..., None]
        return HyperDual(self.value * other, c * self.d1, c * self.d2, c * self.d12)

    __rmul__ = __mul__

    def reciprocal(self):
        v = self.value
        return self._chain(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def __truediv__(self, other):
        if isinstance(other, HyperDual):
            return self * other.reciprocal()
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        if isinstance(other, np.ndarray) and other.ndim > 0:
            return NotImplemented
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, HyperDual):
            return (p * self.log()).exp()
        p = float(p)
        v = self.value
        if p == 0.0:
            return HyperDual(np.ones_like(v))
        if p == 1.0:
            return self
        if p == 2.0:
            return self._chain(v * v, 2.0 * v, 2.0 * np.ones_like(v))
        return self._chain(v**p, p * v ** (p - 1.0), p * (p - 1.0) * v ** (p - 2.0))

    def __rpow__(self, base):
        return (self * np.log(base)).exp()

    # -- elementary functions (numpy calls these on object arrays) ---------
    def exp(self):
        e = np.exp(self.value)
        return self._chain(e, e, e)

    def log(self):
        v = self.value
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._chain(np.log(v), 1.0 / v, -1.0 / v**2)

    def sin(self):
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(s, c, -s)

    def cos(self):
        s, c = np.sin(self.value), np.cos(self.value)
        return self._chain(c, -s, -c)

    def tanh(self):
        t = np.tanh(self.value)
        d = 1.0 - t * t
        return self._chain(t, d, -2.0 * t * d)

    def sqrt(self):
        s = np.sqrt(self.value)
        with np.errstate(divide="ignore", invalid="ignore"):
            return self._chain(s, 0.5 / s, -0.25 / (s * self.value))

    def square(self):
        return self ** 2

    def conjugate(self):
        return self

    _UFUNCS = {
        np.add: lambda a, b: a + b,
        np.subtract: lambda a, b: a - b,
        np.multiply: lambda a, b: a * b,
        np.true_divide: lambda a, b: a / b,
        np.power: lambda a, b: a ** b,
        np.negative: lambda a: -a,
        np.positive: lambda a: a,
        np.square: lambda a: a * a,
        np.exp: lambda a: a.exp(),
        np.log: lambda a: a.log(),
        np.sin: lambda a: a.sin(),
        np.cos: lambda a: a.cos(),
        np.tanh: lambda a: a.tanh(),
        np.sqrt: lambda a: a.sqrt(),
    }

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs or ufunc not in self._UFUNCS:
            return NotImplemented
        if any(isinstance(i, np.ndarray) and i.ndim > 0 for i in inputs):
            # broadcast over an array operand: fall back to object-dtype loops
            objs = [np.asarray(i, dtype=object) if isinstance(i, np.ndarray) else _obj0(i) for i in inputs]
            return ufunc(*objs)
        args = [HyperDual(i) if not isinstance(i, HyperDual) else i for i in inputs]
        return self._UFUNCS[ufunc](*args)


def _obj0(v):
    out = np.empty((), dtype=object)
    out[()] = v
    return out


@dataclass(frozen=True)
class Point:
    """Evaluation point ``(x, u, theta)``; unused blocks may be empty."""

    x: np.ndarray
    u: np.ndarray
    theta: np.ndarray

    @classmethod
    def of(cls, x=(), u=(), theta=()):
        return cls(np.atleast_1d(np.asarray(x, dtype=float)),
                   np.atleast_1d(np.asarray(u, dtype=float)),
                   np.atleast_1d(np.asarray(theta, dtype=float)))

    def block(self, name):
        return {"x": self.x, "u": self.u, "theta": self.theta}[name]


@dataclass
class Expansion:
    """Batched derivatives of a vector function along a trajectory.

    ``value``: (B, k); ``jac[b]``: (B, k, dim_b); ``hess[(a, b)]``: (B, k, dim_a, dim_b).
    """

    value: np.ndarray
    jac: dict
    hess: dict


def _check_block(name):
    if name not in BLOCKS:
        raise ValueError(f"unknown block {name!r}; expected one of {BLOCKS}")


def expand(fn: Callable, xs, us, theta, first: Sequence[str] = (), second: Sequence[tuple] = (),
           name: str = "function", batched: bool = True) -> Expansion:
    """Differentiate ``fn(x, u, theta)`` at B points in one pass.

    ``xs`` is (B, n) and ``us`` is (B, m) when ``batched``; theta is shared.
    ``first`` lists blocks for Jacobians, ``second`` lists (a, b) Hessian blocks.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    if not batched:
        xs, us = xs[None, :], us[None, :]
    if xs.ndim != 2 or us.ndim != 2 or xs.shape[0] != us.shape[0]:
        raise ValueError(f"{name}: batched x and u must be 2-D with equal length, got {xs.shape}, {us.shape}")
    B = xs.shape[0]
    dims = {"x": xs.shape[1], "u": us.shape[1], "theta": theta.size}
    offs = {"x": 0, "u": dims["x"], "theta": dims["x"] + dims["u"]}
    nz = sum(dims.values())

    i1, i2, slots = [], [], {}
    for b in first:
        _check_block(b)
        start = len(i1)
        i1.extend(range(offs[b], offs[b] + dims[b]))
        i2.extend([-1] * dims[b])
        slots[b] = slice(start, len(i1))
    for a, b in second:
        _check_block(a)
        _check_block(b)
        start = len(i1)
        for i in range(dims[a]):
            for j in range(dims[b]):
                i1.append(offs[a] + i)
                i2.append(offs[b] + j)
        slots[(a, b)] = slice(start, len(i1))
    i1 = np.asarray(i1, dtype=int)
    i2 = np.asarray(i2, dtype=int)
    P = i1.size

    def seed(k):
        s1 = (i1 == k).astype(float)
        s2 = (i2 == k).astype(float)
        return (s1 if s1.any() else 0.0), (s2 if s2.any() else 0.0)

    def lift(values, off):
        out = np.empty(len(values), dtype=object)
        for i, v in enumerate(values):
            s1, s2 = seed(off + i)
            out[i] = HyperDual(v, s1, s2, 0.0)
        return out

    x_hd = lift(xs.T, offs["x"])
    u_hd = lift(us.T, offs["u"])
    th_hd = lift(theta, offs["theta"])
    with np.errstate(all="ignore"):
        out = fn(x_hd, u_hd, th_hd)
    out = np.atleast_1d(np.asarray(out, dtype=object))
    if out.ndim != 1:
        raise ValueError(f"{name} must return a scalar or 1-D vector")
    k = out.size
    value = np.zeros((B, k))
    D1 = np.zeros((B, k, P))
    D12 = np.zeros((B, k, P))
    for c, o in enumerate(out):
        if isinstance(o, HyperDual):
            value[:, c] = np.broadcast_to(o.value, (B,))
            if P:
                D1[:, c, :] = np.broadcast_to(o.d1, (B, P))
                D12[:, c, :] = np.broadcast_to(o.d12, (B, P))
        else:
            value[:, c] = float(o)
    _ensure_finite(name, value, D1, D12)

    jac = {b: D1[:, :, slots[b]] for b in first}
    hess = {(a, b): D12[:, :, slots[(a, b)]].reshape(B, k, dims[a], dims[b]) for a, b in second}
    return Expansion(value, jac, hess)


def _ensure_finite(name, *arrays):
    for arr in arrays:
        if arr.size and not np.all(np.isfinite(arr)):
            bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
            steps = np.flatnonzero(bad)
            raise NonFiniteError(f"{name} produced a non-finite value at time step(s) {steps.tolist()}")


def jacobian(fn: Callable, at: Point, block: str) -> np.ndarray:
    """Exact Jacobian of ``fn(x, u, theta)`` with respect to one block."""
    e = expand(fn, at.x, at.u, at.theta, first=(block,), batched=False, name=getattr(fn, "__name__", "fn"))
    return e.jac[block][0]


def hessian_block(fn: Callable, at: Point, block_a: str, block_b: str) -> np.ndarray:
    """Exact second-derivative block of a scalar ``fn`` (rows: block_a, cols: block_b)."""
    e = expand(fn, at.x, at.u, at.theta, second=((block_a, block_b),), batched=False,
               name=getattr(fn, "__name__", "fn"))
    if e.value.shape[1] != 1:
        raise ValueError("hessian_block requires a scalar-valued function")
    return e.hess[(block_a, block_b)][0, 0]


def evaluate(fn: Callable, xs, us, theta, name: str = "function") -> np.ndarray:
    """Evaluate ``fn`` at B points at once (no derivatives); returns (B, k)."""
    return expand(fn, xs, us, theta, name=name).value
