# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""
Reverse-mode differentiation over double precision 2D arrays.

Every value is a :class:`Tensor` holding a ``rows x cols`` float64 array; vectors are ``1 x n``
rows and scalars are ``1 x 1``.  Primitives compute their result with numpy and, when a
:class:`Tape` is active and an input requires gradients, record a backward function on the tape:

.. code-block:: python

    weight = tensor(rng.normal(size=(4, 3)), requires_grad=True, name="weight")
    with Tape() as tape:
        loss = mean_all(relu(matmul(x, weight)))
    (grad_weight,) = tape.gradient(loss, [weight])

Without an active tape the primitives only compute values, which is what inference uses.  Each
thread (and each :func:`asyncio.to_thread` call) sees its own active tape, so tapes for different
videos can be built concurrently while sharing read-only parameters.

New differentiable operations are built with :func:`op_result`, which takes the forward value,
the inputs, and a function mapping the output gradient to one gradient per input.
"""

from __future__ import annotations

import contextvars
import dataclasses
import typing as t
from collections.abc import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import ConfigError
from .logging import log

mlog = log.fields(mod=__name__)

#: Rows whose Euclidean norm is below this are treated as degenerate by l2_normalize_rows.
NORM_EPSILON = 1e-12

#: Lower clamp applied by :func:`log` before taking the logarithm.
LOG_FLOOR = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence[t.Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class Tensor:
    """
    A ``rows x cols`` float64 array that may take part in gradient computation.

    :ivar data: The values.  Parameters are updated in place by the optimizers; everything else
        treats ``data`` as read-only.
    :ivar requires_grad: Whether gradients with respect to this tensor are tracked.
    :ivar name: Optional label used in error messages and gradient reports.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(
        self, data: np.ndarray, requires_grad: bool = False, name: str | None = None
    ) -> None:
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor {self.rows}x{self.cols}{label} requires_grad={self.requires_grad}>"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def tensor(
    values: t.Any, requires_grad: bool = False, name: str | None = None
) -> Tensor:
    """
    Create a tensor from anything numpy accepts.  Scalars become ``1 x 1``, 1-D input becomes a
    single row.

    :raises ShapeError: for more than two dimensions or an empty array.
    """
    data = np.array(values, dtype=np.float64)
    if data.ndim < 2:
        data = np.atleast_2d(data)
    if data.ndim != 2:
        raise ShapeError(f"tensors are two-dimensional, got {data.ndim} dimensions")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise ShapeError(f"tensors need at least one row and column, got {data.shape}")
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(values: t.Any) -> Tensor:
    return tensor(values)


@dataclasses.dataclass
class _Node:
    output: Tensor
    parents: tuple[Tensor, ...]
    backward: BackwardFn


_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tape:
    """
    Ordered record of primitive applications.

    Use as a context manager; while it is active, every primitive applied to a tensor which
    requires gradients appends a node.  :meth:`gradient` replays the nodes backwards.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, output: Tensor, parents: Sequence[Tensor], backward: BackwardFn) -> None:
        self._nodes.append(_Node(output, tuple(parents), backward))

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """
        Gradients of the scalar ``output`` with respect to each tensor in ``wrt``.

        A tensor which ``output`` does not depend on gets a zero gradient of its own shape.

        :raises ShapeError: if ``output`` is not ``1 x 1``.
        """
        if output.shape != (1, 1):
            raise ShapeError(f"gradient needs a 1x1 output, got {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones((1, 1))}
        for node in reversed(self._nodes):
            grad_out = grads.get(id(node.output))
            if grad_out is None:
                continue
            parent_grads = node.backward(grad_out)
            for parent, grad in zip(node.parents, parent_grads):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        return [
            grads[id(target)] if id(target) in grads else np.zeros_like(target.data)
            for target in wrt
        ]


def current_tape() -> Tape | None:
    return _active_tape.get()


def op_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """
    Wrap a forward value computed from ``parents``.

    :arg data: The forward value as a 2D float64 array.
    :arg parents: The inputs the value was computed from.
    :arg backward: Maps the gradient with respect to the output to a sequence with one entry per
        parent: its gradient (same shape as the parent), or None when it gets none.
    """
    requires_grad = any(parent.requires_grad for parent in parents)
    out = Tensor(data, requires_grad=requires_grad)
    tape = _active_tape.get()
    if tape is not None and requires_grad:
        tape.record(out, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_elementwise(a: Tensor, b: Tensor, opname: str) -> None:
    for size_a, size_b in zip(a.shape, b.shape):
        if size_a != size_b and size_a != 1 and size_b != 1:
            raise ShapeError(f"{opname}: cannot combine {a.shape} with {b.shape}")


#
# Elementwise arithmetic.  A row vector or a column vector may stand in for a full operand.
#


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    return op_result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    return op_result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    return op_result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    return op_result(x.data * factor, (x,), lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return op_result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    return op_result(x.data.T.copy(), (x,), lambda g: (g.T,))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start`` to ``stop - 1``."""
    if not 0 <= start < stop <= x.rows:
        raise ShapeError(f"rows: [{start}, {stop}) is not a row range of {x.shape}")

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return op_result(x.data[start:stop].copy(), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    return op_result(
        np.array([[x.data.sum()]]), (x,), lambda g: (np.full_like(x.data, g[0, 0]),)
    )


def mean_all(x: Tensor) -> Tensor:
    size = x.data.size
    return op_result(
        np.array([[x.data.mean()]]),
        (x,),
        lambda g: (np.full_like(x.data, g[0, 0] / size),),
    )


def mean_rows(x: Tensor) -> Tensor:
    """Column means as a ``1 x cols`` row."""
    count = x.rows
    return op_result(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g / count, count, axis=0),),
    )


#
# Layers
#


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``y[t] = x[t] @ weight + bias`` with ``weight`` of shape ``D_in x D_out``."""
    if x.cols != weight.rows:
        raise ShapeError(f"affine: input has {x.cols} columns, weight expects {weight.rows}")
    if bias.shape != (1, weight.cols):
        raise ShapeError(f"affine: bias must be 1x{weight.cols}, got {bias.shape}")
    return op_result(
        x.data @ weight.data + bias.data,
        (x, weight, bias),
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0, keepdims=True)),
    )


def check_kernel_width(width: int) -> None:
    """:raises ConfigError: for even kernel widths, which have no centered window."""
    if width < 1 or width % 2 == 0:
        raise ConfigError(f"temporal kernel width must be odd and positive, got {width}")


def _window_columns(x: np.ndarray, width: int) -> np.ndarray:
    # Row t holds x[t - pad], ..., x[t + pad] side by side, zeros outside the sequence.
    pad = (width - 1) // 2
    padded = np.pad(x, ((pad, pad), (0, 0)))
    windows = sliding_window_view(padded, width, axis=0)  # T x D_in x width
    return windows.transpose(0, 2, 1).reshape(x.shape[0], width * x.shape[1])


def temporal_conv(x: Tensor, kernel: Tensor, bias: Tensor, width: int) -> Tensor:
    """
    Same-length 1D convolution along the time axis.

    :arg x: ``T x D_in`` input.
    :arg kernel: ``(width * D_in) x D_out``; row ``j * D_in + i`` weighs input channel ``i`` at
        offset ``j - (width - 1) / 2``.
    :arg bias: ``1 x D_out``.
    :arg width: Odd kernel width.  ``(width - 1) / 2`` zero rows pad each end.
    :raises ConfigError: for an even width.
    :raises ShapeError: if ``kernel`` does not match ``x`` and ``width``.
    """
    check_kernel_width(width)
    d_in = x.cols
    if kernel.rows != width * d_in:
        raise ShapeError(
            f"temporal_conv: kernel has {kernel.rows} rows, expected {width} x {d_in}"
        )
    if bias.shape != (1, kernel.cols):
        raise ShapeError(f"temporal_conv: bias must be 1x{kernel.cols}, got {bias.shape}")
    cols = _window_columns(x.data, width)
    pad = (width - 1) // 2
    length = x.rows

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_cols = (g @ kernel.data.T).reshape(length, width, d_in)
        grad_padded = np.zeros((length + 2 * pad, d_in))
        for offset in range(width):
            grad_padded[offset : offset + length] += grad_cols[:, offset, :]
        return (
            grad_padded[pad : pad + length],
            cols.T @ g,
            g.sum(axis=0, keepdims=True),
        )

    return op_result(cols @ kernel.data + bias.data, (x, kernel, bias), backward)


#
# Nonlinearities
#


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return op_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form does not overflow for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return op_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; clamped entries get no gradient."""
    clamped = np.maximum(x.data, floor)
    live = x.data > floor
    return op_result(
        np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),)
    )


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=1, keepdims=True)
    return op_result(
        y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    )


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    probs = np.exp(y)
    return op_result(
        y, (x,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),)
    )


def l2_normalize_rows(x: Tensor, eps: float = NORM_EPSILON) -> Tensor:
    """
    Scale every row to unit Euclidean norm.

    A row with norm below ``eps`` is divided by ``norm + eps`` instead and a warning is logged.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    degenerate = norms < eps
    if degenerate.any():
        mlog.fields(func="l2_normalize_rows", rows=int(degenerate.sum())).warning(
            "degenerate rows normalized with epsilon"
        )
    denom = np.where(degenerate, norms + eps, norms)
    y = x.data / denom
    safe_norms = np.where(norms > 0, norms, 1.0)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        radial = (g * x.data).sum(axis=1, keepdims=True) / (safe_norms * denom * denom)
        return (g / denom - x.data * radial,)

    return op_result(y, (x,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over rows of the squared Euclidean distance between matching rows."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = a.rows
    value = np.array([[(diff * diff).sum() / count]])
    return op_result(
        value,
        (a, b),
        lambda g: (g[0, 0] * 2.0 * diff / count, -g[0, 0] * 2.0 * diff / count),
    )


#
# Finite-difference verification
#


@dataclasses.dataclass(frozen=True)
class CoordinateFailure:
    index: tuple[int, int]
    analytic: float
    numeric: float

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)


@dataclasses.dataclass(frozen=True)
class ParamCheck:
    """
    Finite-difference result for one parameter tensor.

    :ivar max_rel_error: Largest relative error over coordinates which are not within ``atol``.
        Coordinates within ``atol`` count as exact.
    """

    name: str
    shape: tuple[int, int]
    max_rel_error: float
    max_abs_error: float
    failures: tuple[CoordinateFailure, ...]

    @property
    def passed(self) -> bool:
        return not self.failures


@dataclasses.dataclass(frozen=True)
class GradCheckReport:
    params: tuple[ParamCheck, ...]
    eps: float
    tol: float
    atol: float

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((check.max_rel_error for check in self.params), default=0.0)

    def format(self) -> str:
        lines = [
            f"eps={self.eps:g} tol={self.tol:g} atol={self.atol:g}"
            f" max_rel_error={self.max_rel_error:.3e}"
            f" {'PASS' if self.passed else 'FAIL'}"
        ]
        for check in self.params:
            lines.append(
                f"{check.name} {check.shape[0]}x{check.shape[1]}"
                f" max_rel_error={check.max_rel_error:.3e}"
                f" max_abs_error={check.max_abs_error:.3e}"
            )
            for failure in check.failures:
                lines.append(
                    f"  FAIL {check.name}[{failure.index[0]},{failure.index[1]}]"
                    f" analytic={failure.analytic:.12e} numeric={failure.numeric:.12e}"
                )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-9,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences, coordinate by coordinate.

    A coordinate passes if its relative error ``|a - cd| / max(|a|, |cd|, 1e-8)`` is at most
    ``tol`` or its absolute error is at most ``atol``.  A non-finite loss at a perturbed point
    fails that coordinate.

    :arg loss_fn: Computes the scalar loss from the current values of ``params``.
    :arg params: The tensors to check.  Their data is perturbed in place and restored.
    :kwarg analytic: Gradients to check.  When not given they are computed with a :class:`Tape`.
    """
    flog = mlog.fields(func="finite_difference_check")
    flog.fields(params=len(params), eps=eps, tol=tol).debug("Enter")

    if analytic is None:
        with Tape() as tape:
            loss = loss_fn()
        computed = tape.gradient(loss, list(params.values()))
        analytic = dict(zip(params, computed))

    checks = []
    for name, param in params.items():
        grad = analytic[name]
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {grad.shape}, not {param.shape}")
        max_rel = 0.0
        max_abs = 0.0
        failures = []
        for index in np.ndindex(*param.shape):
            original = param.data[index]
            try:
                param.data[index] = original + eps
                plus = loss_fn().item()
                param.data[index] = original - eps
                minus = loss_fn().item()
            finally:
                param.data[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            value = float(grad[index])
            if not np.isfinite(numeric) or not np.isfinite(value):
                failures.append(CoordinateFailure(index, value, numeric))  # type: ignore[arg-type]
                max_rel = float("inf")
                continue
            abs_err = abs(value - numeric)
            rel_err = relative_error(value, numeric)
            max_abs = max(max_abs, abs_err)
            if abs_err <= atol:
                continue
            max_rel = max(max_rel, rel_err)
            if rel_err > tol:
                failures.append(CoordinateFailure(index, value, numeric))  # type: ignore[arg-type]
        checks.append(
            ParamCheck(name, param.shape, max_rel, max_abs, tuple(failures))
        )
        flog.fields(param=name, max_rel_error=max_rel).debug("checked")

    report = GradCheckReport(tuple(checks), eps, tol, atol)
    flog.fields(passed=report.passed).debug("Leave")
    return report


__all__ = (
    "ShapeError",
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "current_tape",
    "op_result",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "rows",
    "sum_all",
    "mean_all",
    "mean_rows",
    "affine",
    "temporal_conv",
    "check_kernel_width",
    "relu",
    "sigmoid",
    "log",
    "softmax_rows",
    "log_softmax_rows",
    "l2_normalize_rows",
    "mse",
    "finite_difference_check",
    "GradCheckReport",
    "ParamCheck",
    "CoordinateFailure",
    "relative_error",
)
