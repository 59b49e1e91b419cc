"""Minimal reverse-mode differentiation over numpy arrays.

Ops accept either a `Var` (tracked) or a plain ndarray (constant). When the
tape is None every op degrades to its plain numpy forward computation, so the
same model code serves both training and inference.
"""
from __future__ import annotations

import numpy as np


class Tape:
    """Records backward closures; replayed in exact reverse order."""

    def __init__(self):
        self._ops = []

    def record(self, fn) -> None:
        self._ops.append(fn)

    def run_backward(self) -> None:
        for fn in reversed(self._ops):
            fn()


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def val(x):
    return x.value if isinstance(x, Var) else x


def _out(tape, value):
    return Var(value) if tape is not None else value


def matmul(tape, a, b):
    av, bv = val(a), val(b)
    out = _out(tape, av @ bv)
    if tape is not None:
        def back():
            g = out.grad
            if isinstance(a, Var):
                a.grad += g @ bv.T
            if isinstance(b, Var):
                b.grad += av.T @ g
        tape.record(back)
    return out


def matmul_nt(tape, a, b):
    """a @ b.T without materializing the transpose on the tape."""
    av, bv = val(a), val(b)
    out = _out(tape, av @ bv.T)
    if tape is not None:
        def back():
            g = out.grad
            if isinstance(a, Var):
                a.grad += g @ bv
            if isinstance(b, Var):
                b.grad += g.T @ av
        tape.record(back)
    return out


def add(tape, a, b):
    av, bv = val(a), val(b)
    out = _out(tape, av + bv)
    if tape is not None:
        def back():
            g = out.grad
            if isinstance(a, Var):
                a.grad += _unbroadcast(g, av.shape)
            if isinstance(b, Var):
                b.grad += _unbroadcast(g, bv.shape)
        tape.record(back)
    return out


def mul(tape, a, b):
    av, bv = val(a), val(b)
    out = _out(tape, av * bv)
    if tape is not None:
        def back():
            g = out.grad
            if isinstance(a, Var):
                a.grad += _unbroadcast(g * bv, av.shape)
            if isinstance(b, Var):
                b.grad += _unbroadcast(g * av, bv.shape)
        tape.record(back)
    return out


def scale(tape, a, c: float):
    out = _out(tape, val(a) * c)
    if tape is not None:
        def back():
            if isinstance(a, Var):
                a.grad += out.grad * c
        tape.record(back)
    return out


def relu(tape, a):
    av = val(a)
    out_v = np.maximum(av, 0.0)
    out = _out(tape, out_v)
    if tape is not None:
        def back():
            if isinstance(a, Var):
                a.grad += out.grad * (av > 0.0)
        tape.record(back)
    return out


def row_softmax(tape, a):
    av = val(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _out(tape, p)
    if tape is not None:
        def back():
            if isinstance(a, Var):
                g = out.grad
                a.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))
        tape.record(back)
    return out


def layer_norm(tape, x, gain, bias, eps: float = 1e-6):
    xv, gv, bv = val(x), val(gain), val(bias)
    mu = xv.mean(axis=-1, keepdims=True)
    var = xv.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    out = _out(tape, xhat * gv + bv)
    if tape is not None:
        def back():
            g = out.grad
            if isinstance(gain, Var):
                gain.grad += (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
            if isinstance(bias, Var):
                bias.grad += g.sum(axis=tuple(range(g.ndim - 1)))
            if isinstance(x, Var):
                gx = g * gv
                m1 = gx.mean(axis=-1, keepdims=True)
                m2 = (gx * xhat).mean(axis=-1, keepdims=True)
                x.grad += inv * (gx - m1 - xhat * m2)
        tape.record(back)
    return out


def gather_rows(tape, table, ids):
    ids = np.asarray(ids, dtype=np.intp)
    tv = val(table)
    out = _out(tape, tv[ids])
    if tape is not None:
        def back():
            if isinstance(table, Var):
                np.add.at(table.grad, ids, out.grad)
        tape.record(back)
    return out


def slice_rows(tape, a, lo: int, hi: int):
    out = _out(tape, val(a)[lo:hi].copy())
    if tape is not None:
        def back():
            if isinstance(a, Var):
                a.grad[lo:hi] += out.grad
        tape.record(back)
    return out


def slice_cols(tape, a, lo: int, hi: int):
    out = _out(tape, val(a)[:, lo:hi].copy())
    if tape is not None:
        def back():
            if isinstance(a, Var):
                a.grad[:, lo:hi] += out.grad
        tape.record(back)
    return out


def concat_cols(tape, parts):
    out = _out(tape, np.concatenate([val(p) for p in parts], axis=1))
    if tape is not None:
        def back():
            lo = 0
            for p in parts:
                hi = lo + val(p).shape[1]
                if isinstance(p, Var):
                    p.grad += out.grad[:, lo:hi]
                lo = hi
        tape.record(back)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g
