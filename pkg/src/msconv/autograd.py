"""Reverse-mode differentiation on an explicit tape.

A :class:`Tape` records one forward pass as a list of :class:`GradRecord`
entries, each holding the saved inputs and a rule mapping the upstream
gradient to gradients for every input.  ``Tape.backward`` walks the records
in reverse, summing gradients where a value fans out, in a fixed traversal
order so results are reproducible.

Values on the tape are plain numpy arrays and must not be mutated while the
tape is alive; the optimizer produces fresh arrays instead of updating in
place.  A tape is single-owner and is consumed by ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T


class TapeReuseError(RuntimeError):
    """The tape was used after backward consumed it."""


class GradientCheckError(RuntimeError):
    """Finite-difference check hit a non-finite value."""


class Var:
    """Handle to one value recorded on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.value.shape})"


@dataclass
class GradRecord:
    """One recorded op: tag, input/output slots, and its backward rule.

    ``vjp`` receives the upstream gradient (same shape as the output) and
    returns one gradient per input, each shaped like that input, or None for
    inputs that do not need a gradient.
    """

    op_id: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], tuple]


class Gradients:
    """Result of backward: gradient lookup by Var, zero for untouched values."""

    def __init__(self, tape: "Tape", grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        if var.tape is not self._tape:
            raise ValueError("Var belongs to a different tape")
        g = self._grads.get(var.index)
        if g is None:
            return np.zeros_like(var.value)
        return g


class Tape:
    def __init__(self):
        self._values: list[np.ndarray] = []
        self._records: list[GradRecord] = []
        self._consumed = False

    # -- plumbing ----------------------------------------------------------

    def _push(self, value: np.ndarray) -> Var:
        self._values.append(np.asarray(value))
        return Var(self, len(self._values) - 1)

    def _guard(self):
        if self._consumed:
            raise TapeReuseError("tape already consumed by backward")

    def _check(self, *vars_: Var) -> None:
        self._guard()
        for v in vars_:
            if v.tape is not self:
                raise ValueError("Var belongs to a different tape")

    def leaf(self, value: np.ndarray) -> Var:
        """Enter an input or parameter; leaves have no record."""
        self._guard()
        return self._push(value)

    def emit(self, op_id: str, inputs: Sequence[Var], value: np.ndarray,
             vjp: Callable[[np.ndarray], tuple]) -> Var:
        """Record a custom op.  ``vjp(g)`` must return one gradient per input."""
        self._check(*inputs)
        if T.debug_checks_enabled():
            arr = np.asarray(value)
            if arr.size and not np.isfinite(arr).all():
                raise T.NonFiniteError(f"non-finite output of {op_id}")
        out = self._push(value)
        self._records.append(
            GradRecord(op_id, tuple(v.index for v in inputs), out.index, vjp)
        )
        return out

    # -- ops ---------------------------------------------------------------

    def conv2d(self, x: Var, w: Var, *, dilation: int = 1, stride: int = 1) -> Var:
        out = T.conv2d_raw(x.value, w.value, dilation, stride)
        xv, wv = x.value, w.value

        def vjp(g):
            return _conv2d_vjp(g, xv, wv, dilation, stride)

        return self.emit("conv2d", (x, w), out, vjp)

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.emit("ew_mul", (a, b), T.ew_mul(av, bv),
                         lambda g: (g * bv, g * av))

    def add(self, a: Var, b: Var) -> Var:
        return self.emit("ew_add", (a, b), T.ew_add(a.value, b.value),
                         lambda g: (g, g))

    def sub(self, a: Var, b: Var) -> Var:
        return self.emit("ew_sub", (a, b), T.ew_sub(a.value, b.value),
                         lambda g: (g, -g))

    def gap(self, x: Var) -> Var:
        _, h, w, _ = x.value.shape
        shape = x.value.shape

        def vjp(g):
            return (np.broadcast_to(g[:, None, None, :] / (h * w), shape).copy(),)

        return self.emit("global_avg_pool", (x,), T.global_avg_pool(x.value), vjp)

    def fc(self, x: Var, w: Var, b: Var) -> Var:
        xv, wv = x.value, w.value

        def vjp(g):
            return (g @ wv.T, xv.T @ g, g.sum(axis=0))

        return self.emit("fc", (x, w, b), T.fc(xv, wv, b.value), vjp)

    def relu(self, x: Var) -> Var:
        xv = x.value
        return self.emit("relu", (x,), T.relu(xv),
                         lambda g: (g * (xv > 0),))

    def sigmoid(self, x: Var) -> Var:
        out = T.sigmoid(x.value)
        return self.emit("sigmoid", (x,), out,
                         lambda g: (g * out * (1.0 - out),))

    def one_minus(self, x: Var) -> Var:
        return self.emit("one_minus", (x,), 1.0 - x.value, lambda g: (-g,))

    def half(self, x: Var, which: int) -> Var:
        """First (0) or second (1) half of the channel axis of an (n, 2c) value."""
        n, c2 = x.value.shape
        if c2 % 2:
            raise T.ShapeError(f"cannot halve odd channel count {c2}")
        c = c2 // 2
        lo, hi = (0, c) if which == 0 else (c, c2)

        def vjp(g):
            full = np.zeros((n, c2), dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        return self.emit(f"half{which}", (x,), x.value[:, lo:hi].copy(), vjp)

    def scale_channels(self, x: Var, c: Var) -> Var:
        """Per-channel reweighting: out[n,h,w,k] = x[n,h,w,k] * c[n,k]."""
        xv, cv = x.value, c.value
        if xv.ndim != 4 or cv.ndim != 2 or xv.shape[0] != cv.shape[0] \
                or xv.shape[3] != cv.shape[1]:
            raise T.ShapeError(
                f"scale_channels needs (n,h,w,c) and (n,c), got {xv.shape}, {cv.shape}"
            )

        def vjp(g):
            return (g * cv[:, None, None, :], np.sum(g * xv, axis=(1, 2)))

        return self.emit("scale_channels", (x, c), xv * cv[:, None, None, :], vjp)

    def l2_normalize_rows(self, x: Var, eps: float = 0.0) -> Var:
        """Rows scaled to unit L2 norm; all-zero rows map to zero rows."""
        xv = x.value
        norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True))
        safe = np.where(norms > 0, norms, 1.0)
        out = xv / safe

        def vjp(g):
            dot = np.sum(g * out, axis=1, keepdims=True)
            gx = (g - out * dot) / safe
            return (np.where(norms > 0, gx, 0.0),)

        return self.emit("l2_normalize_rows", (x,), out, vjp)

    def sum(self, x: Var) -> Var:
        shape, dtype = x.value.shape, x.value.dtype

        def vjp(g):
            return (np.full(shape, g, dtype=dtype),)

        return self.emit("sum", (x,), np.asarray(x.value.sum()), vjp)

    def mean(self, x: Var) -> Var:
        shape, dtype = x.value.shape, x.value.dtype
        count = x.value.size

        def vjp(g):
            return (np.full(shape, g / count, dtype=dtype),)

        return self.emit("mean", (x,), np.asarray(x.value.mean()), vjp)

    # -- reverse pass --------------------------------------------------------

    def backward(self, loss: Var | None = None, seed: float = 1.0) -> Gradients:
        """Propagate a scalar seed from the loss back to every recorded value.

        Consumes the tape: a second backward, or any further op, raises
        :class:`TapeReuseError`.
        """
        self._guard()
        if not self._records and loss is None:
            raise ValueError("empty tape has no loss to differentiate")
        if loss is None:
            loss = Var(self, self._records[-1].output)
        if loss.tape is not self:
            raise ValueError("loss Var belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            loss.index: np.full(loss.value.shape, seed, dtype=loss.value.dtype)
        }
        for rec in reversed(self._records):
            g = grads.get(rec.output)
            if g is None:
                continue
            partials = rec.vjp(g)
            if len(partials) != len(rec.inputs):
                raise RuntimeError(f"{rec.op_id} returned {len(partials)} gradients "
                                   f"for {len(rec.inputs)} inputs")
            for idx, gi in zip(rec.inputs, partials):
                if gi is None:
                    continue
                if gi.shape != self._values[idx].shape:
                    raise RuntimeError(
                        f"{rec.op_id} gradient shape {gi.shape} != value shape "
                        f"{self._values[idx].shape}"
                    )
                if idx in grads:
                    grads[idx] = grads[idx] + gi
                else:
                    grads[idx] = gi
        return Gradients(self, grads)


def _conv2d_vjp(g: np.ndarray, x: np.ndarray, w: np.ndarray,
                dilation: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_raw w.r.t. input and weights.

    Mirrors the forward tap loop: each tap scatters g @ w[ky,kx]^T back into
    its strided input slice and contracts the same slice with g for the
    weight gradient.
    """
    n, h, wd, c_in = x.shape
    kh, kw, _, c_out = w.shape
    ph = T.same_pad(kh, dilation)
    pw = T.same_pad(kw, dilation)
    oh, ow = g.shape[1], g.shape[2]

    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ky in range(kh):
        y0 = ky * dilation
        ys = slice(y0, y0 + (oh - 1) * stride + 1, stride)
        for kx in range(kw):
            x0 = kx * dilation
            xs = slice(x0, x0 + (ow - 1) * stride + 1, stride)
            patch = xp[:, ys, xs, :]
            dw[ky, kx] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
            dxp[:, ys, xs, :] += g @ w[ky, kx].T
    return dxp[:, ph:ph + h, pw:pw + wd, :], dw


def finite_diff_check(build, params: dict[str, np.ndarray], eps: float = 1e-5) -> float:
    """Central-difference validation of the tape's analytic gradients.

    ``build(tape, vars)`` must construct a forward pass from the named leaf
    Vars and return the scalar loss Var.  Every element of every parameter is
    perturbed by +/- eps; the numeric slope is compared to the analytic
    gradient with the error scaled by max(1, |analytic|, |numeric|), which
    stays meaningful near zero gradients.  Returns the max relative error
    over all elements.

    Run this in float64; eps = 1e-5 balances truncation against roundoff.
    """
    work = {name: np.array(v, dtype=np.float64) for name, v in params.items()}

    def evaluate(with_grads: bool):
        tape = Tape()
        leaves = {name: tape.leaf(v) for name, v in work.items()}
        loss = build(tape, leaves)
        val = float(loss.value)
        if not np.isfinite(val):
            raise GradientCheckError(f"forward produced non-finite loss {val}")
        if not with_grads:
            return val, None
        grads = tape.backward(loss)
        return val, {name: grads[leaf] for name, leaf in leaves.items()}

    _, analytic = evaluate(with_grads=True)
    max_err = 0.0
    for name, arr in work.items():
        ana = analytic[name].ravel()
        if not np.isfinite(ana).all():
            raise GradientCheckError(f"analytic gradient of {name} is non-finite")
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus, _ = evaluate(with_grads=False)
            flat[i] = orig - eps
            f_minus, _ = evaluate(with_grads=False)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            if not np.isfinite(numeric):
                raise GradientCheckError(
                    f"non-finite central difference at {name}[{i}]"
                )
            err = abs(ana[i] - numeric) / max(1.0, abs(ana[i]), abs(numeric))
            if err > max_err:
                max_err = err
    return max_err
