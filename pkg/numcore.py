#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""
The numcore module provides dense 2-D float64 matrices, a reverse-mode gradient tape over them
and a finite-difference gradient checker. Everything else in the workbench builds on it.
"""

from typing import Any
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union
import hashlib
import math

import numpy as np

import errors

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Matrix:
    """Immutable dense row-major matrix of 64-bit floats, optionally recorded on a Tape."""
    def __init__(self, data: Any) -> None:
        array = np.array(data, dtype=np.float64, ndmin=2)
        self.__data = _seal(array)
        self.tape: Optional["Tape"] = None
        self.node = -1

    @staticmethod
    def wrap(array: np.ndarray) -> "Matrix":
        """Wraps a freshly computed array without copying it."""
        matrix = Matrix.__new__(Matrix)
        # pylint: disable=protected-access
        matrix.__data = _seal(array)
        matrix.tape = None
        matrix.node = -1
        return matrix

    @staticmethod
    def zeros(rows: int, cols: int) -> "Matrix":
        """Creates an all-zero matrix."""
        return Matrix.wrap(np.zeros((rows, cols)))

    @staticmethod
    def identity(size: int) -> "Matrix":
        """Creates an identity matrix."""
        return Matrix.wrap(np.eye(size))

    @property
    def data(self) -> np.ndarray:
        """Gets the read-only backing array."""
        return self.__data

    @property
    def rows(self) -> int:
        """Gets the row count."""
        return int(self.__data.shape[0])

    @property
    def cols(self) -> int:
        """Gets the column count."""
        return int(self.__data.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        """Gets (rows, cols)."""
        return (self.rows, self.cols)

    def item(self) -> float:
        """Gets the value of a 1x1 matrix."""
        if self.shape != (1, 1):
            raise errors.ShapeError("item() needs a 1x1 matrix, got %dx%d" % self.shape)
        return float(self.__data[0, 0])

    def tolist(self) -> List[List[float]]:
        """Gets the entries as nested lists."""
        return [[float(value) for value in row] for row in self.__data]

    def __repr__(self) -> str:
        return "Matrix(%dx%d)" % self.shape


def _seal(array: np.ndarray) -> np.ndarray:
    if array.ndim != 2:
        raise errors.ShapeError("matrix data must be 2-D, got %d-D" % array.ndim)
    if array.dtype != np.float64:
        array = array.astype(np.float64)
    if not np.all(np.isfinite(array)):
        raise errors.NumericError("non-finite entry in %dx%d matrix" % array.shape)
    array.setflags(write=False)
    return array


class Parameter:
    """A named, replaceable matrix value that a Tape can compute gradients for."""
    def __init__(self, name: str, data: Any, trainable: bool = True) -> None:
        self.name = name
        self.value = Matrix(data)
        self.trainable = trainable

    def bind(self, tape: Optional["Tape"]) -> Matrix:
        """Gets the value, tracked on tape when the parameter is trainable."""
        if tape is None or not self.trainable:
            return self.value
        return tape.watch(self)

    def assign(self, data: Any) -> None:
        """Replaces the value."""
        value = Matrix(data)
        if value.shape != self.value.shape:
            raise errors.ShapeError("%s: cannot assign %dx%d to %dx%d"
                                    % (self.name, value.rows, value.cols, self.value.rows, self.value.cols))
        self.value = value

    @property
    def numel(self) -> int:
        """Gets the number of scalar entries."""
        return self.value.rows * self.value.cols

    def __repr__(self) -> str:
        return "Parameter(%s, %dx%d, trainable=%s)" % (self.name, self.value.rows, self.value.cols, self.trainable)


class _Op:
    """One recorded primitive."""
    # pylint: disable=too-few-public-methods
    def __init__(self, name: str, inputs: Sequence[Matrix], output: int, backward: BackwardFn) -> None:
        self.name = name
        self.inputs = list(inputs)
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive ops with per-parameter gradient accumulators."""
    def __init__(self) -> None:
        self.__ops: List[_Op] = []
        self.__node_count = 0
        self.__grads: List[Optional[np.ndarray]] = []
        self.__watched: Dict[int, Tuple[Parameter, Matrix]] = {}

    def __new_node(self, matrix: Matrix) -> Matrix:
        matrix.tape = self
        matrix.node = self.__node_count
        self.__node_count += 1
        self.__grads.append(None)
        return matrix

    def watch(self, param: Parameter) -> Matrix:
        """Gets the tracked node of a parameter, creating it on first use."""
        key = id(param)
        if key in self.__watched:
            return self.__watched[key][1]
        node = self.__new_node(Matrix.wrap(param.value.data))
        self.__watched[key] = (param, node)
        return node

    def record(self, name: str, data: np.ndarray, inputs: Sequence[Matrix], backward: BackwardFn) -> Matrix:
        """Records a primitive whose output is data."""
        output = self.__new_node(Matrix.wrap(data))
        self.__ops.append(_Op(name, inputs, output.node, backward))
        return output

    @property
    def op_names(self) -> List[str]:
        """Gets the names of the recorded ops in forward order."""
        return [op.name for op in self.__ops]

    def backward(self, loss: Matrix) -> List[str]:
        """Propagates d(loss)/d(node) to every node; returns the op names in visiting order."""
        if loss.tape is not self:
            raise errors.StateError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise errors.ShapeError("loss must be 1x1, got %dx%d" % loss.shape)
        self.__grads = [None] * self.__node_count
        self.__grads[loss.node] = np.ones((1, 1))
        visited: List[str] = []
        for op in reversed(self.__ops):
            visited.append(op.name)
            grad = self.__grads[op.output]
            if grad is None:
                continue
            local_grads = op.backward(grad)
            for matrix, local_grad in zip(op.inputs, local_grads):
                if matrix.tape is not self or local_grad is None:
                    continue
                current = self.__grads[matrix.node]
                if current is None:
                    self.__grads[matrix.node] = local_grad
                else:
                    self.__grads[matrix.node] = current + local_grad
        return visited

    def gradient(self, param: Parameter) -> np.ndarray:
        """Gets d(loss)/d(param); all-zero when the parameter did not take part."""
        watched = self.__watched.get(id(param))
        if watched is None or watched[0] is not param:
            return np.zeros(param.value.shape)
        grad = self.__grads[watched[1].node]
        if grad is None:
            return np.zeros(param.value.shape)
        return np.array(grad, dtype=np.float64)


def _record(name: str, data: np.ndarray, inputs: Sequence[Matrix], backward: BackwardFn) -> Matrix:
    tape: Optional[Tape] = None
    for matrix in inputs:
        if matrix.tape is None:
            continue
        if tape is not None and matrix.tape is not tape:
            raise errors.StateError("%s: inputs belong to different tapes" % name)
        tape = matrix.tape
    if tape is None:
        return Matrix.wrap(data)
    return tape.record(name, data, inputs, backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    for axis in (0, 1):
        if shape[axis] == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(name: str, a: Matrix, b: Matrix) -> Tuple[int, int]:
    shape = []
    for axis in (0, 1):
        left, right = a.shape[axis], b.shape[axis]
        if left != right and left != 1 and right != 1:
            raise errors.ShapeError("%s: shapes %dx%d and %dx%d do not broadcast" % ((name,) + a.shape + b.shape))
        shape.append(max(left, right))
    return (shape[0], shape[1])


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Standard matrix product a.b."""
    if a.cols != b.rows:
        raise errors.ShapeError("matmul: %dx%d times %dx%d" % (a.shape + b.shape))
    data = a.data @ b.data
    return _record("matmul", data, (a, b), lambda grad: (grad @ b.data.T, a.data.T @ grad))


def add(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise sum; a row or column vector broadcasts."""
    _broadcast_shape("add", a, b)
    data = a.data + b.data
    return _record("add", data, (a, b), lambda grad: (_unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)))


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product; a row or column vector broadcasts."""
    _broadcast_shape("mul", a, b)
    data = a.data * b.data
    return _record("mul", data, (a, b),
                   lambda grad: (_unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)))


def scale(a: Matrix, factor: float) -> Matrix:
    """Multiplies every entry by a constant."""
    data = a.data * factor
    return _record("scale", data, (a,), lambda grad: (grad * factor,))


def transpose(a: Matrix) -> Matrix:
    """Swaps rows and columns."""
    data = np.ascontiguousarray(a.data.T)
    return _record("transpose", data, (a,), lambda grad: (np.ascontiguousarray(grad.T),))


def sum_all(a: Matrix) -> Matrix:
    """Sums every entry into a 1x1 matrix."""
    data = np.array([[a.data.sum()]])
    return _record("sum_all", data, (a,), lambda grad: (np.full(a.shape, grad[0, 0]),))


GELU_COEFF = math.sqrt(2.0 / math.pi)


def gelu(a: Matrix) -> Matrix:
    """Tanh approximation of the Gaussian error linear unit."""
    x = a.data
    inner = GELU_COEFF * (x + 0.044715 * x ** 3)
    tanh = np.tanh(inner)
    data = 0.5 * x * (1.0 + tanh)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        local = 0.5 * (1.0 + tanh) + 0.5 * x * (1.0 - tanh ** 2) * GELU_COEFF * (1.0 + 3 * 0.044715 * x ** 2)
        return (grad * local,)
    return _record("gelu", data, (a,), backward)


def _softmax(data: np.ndarray) -> np.ndarray:
    shifted = data - data.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def softmax_rows(m: Matrix) -> Matrix:
    """Row-wise softmax with max subtraction."""
    if m.data.size == 0:
        return m
    probs = _softmax(m.data)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (probs * (grad - (grad * probs).sum(axis=1, keepdims=True)),)
    return _record("softmax_rows", probs, (m,), backward)


def _log_softmax(data: np.ndarray) -> np.ndarray:
    maxes = data.max(axis=1, keepdims=True)
    shifted = data - maxes
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax_rows(m: Matrix) -> Matrix:
    """Row-wise log-softmax."""
    if m.data.size == 0:
        return m
    data = _log_softmax(m.data)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad - np.exp(data) * grad.sum(axis=1, keepdims=True),)
    return _record("log_softmax_rows", data, (m,), backward)


def cross_entropy(logits: Matrix, targets: Sequence[int]) -> Matrix:
    """Mean negative log-probability of one target class per row, as a 1x1 matrix."""
    if len(targets) != logits.rows:
        raise errors.ShapeError("cross_entropy: %d targets for %d rows" % (len(targets), logits.rows))
    if logits.rows == 0:
        raise errors.ShapeError("cross_entropy: no rows")
    for target in targets:
        if target < 0 or target >= logits.cols:
            raise errors.TargetIndexError("cross_entropy: target %d outside [0, %d)" % (target, logits.cols))
    rows = np.arange(logits.rows)
    index = np.asarray(targets, dtype=np.int64)
    log_probs = _log_softmax(logits.data)
    loss = -log_probs[rows, index].sum() / logits.rows

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        local = np.exp(log_probs)
        local[rows, index] -= 1.0
        return (local * (grad[0, 0] / logits.rows),)
    return _record("cross_entropy", np.array([[loss]]), (logits,), backward)


def layer_norm_cols(x: Matrix, gain: Matrix, bias: Matrix, eps: float = 1e-5) -> Matrix:
    """Normalizes every column to zero mean and unit variance, then applies gain and bias (rows x 1)."""
    if gain.shape != (x.rows, 1) or bias.shape != (x.rows, 1):
        raise errors.ShapeError("layer_norm_cols: gain/bias must be %dx1" % x.rows)
    size = x.rows
    mean = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=0, keepdims=True) + eps)
    normed = centered * inv_std
    data = gain.data * normed + bias.data

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_normed = grad * gain.data
        grad_x = (inv_std / size) * (size * grad_normed - grad_normed.sum(axis=0, keepdims=True)
                                     - normed * (grad_normed * normed).sum(axis=0, keepdims=True))
        grad_gain = (grad * normed).sum(axis=1, keepdims=True)
        grad_bias = grad.sum(axis=1, keepdims=True)
        return (grad_x, grad_gain, grad_bias)
    return _record("layer_norm_cols", data, (x, gain, bias), backward)


def slice_rows(m: Matrix, start: int, stop: int) -> Matrix:
    """Rows [start, stop)."""
    if not 0 <= start <= stop <= m.rows:
        raise errors.ShapeError("slice_rows: [%d, %d) outside %d rows" % (start, stop, m.rows))
    data = np.array(m.data[start:stop])

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros(m.shape)
        full[start:stop] = grad
        return (full,)
    return _record("slice_rows", data, (m,), backward)


def concat_rows(parts: Sequence[Matrix]) -> Matrix:
    """Stacks matrices with equal column counts on top of each other."""
    if not parts:
        raise errors.ShapeError("concat_rows: nothing to concatenate")
    if len({part.cols for part in parts}) != 1:
        raise errors.ShapeError("concat_rows: column counts differ")
    data = np.concatenate([part.data for part in parts], axis=0)
    bounds = np.cumsum([0] + [part.rows for part in parts])

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return [grad[bounds[i]:bounds[i + 1]] for i in range(len(parts))]
    return _record("concat_rows", data, parts, backward)


def take_cols(m: Matrix, cols: Sequence[int]) -> Matrix:
    """Selects columns in the given order."""
    index = np.asarray(cols, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= m.cols):
        raise errors.ShapeError("take_cols: column index outside %d columns" % m.cols)
    data = np.array(m.data[:, index])

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros(m.shape)
        np.add.at(full, (slice(None), index), grad)
        return (full,)
    return _record("take_cols", data, (m,), backward)


def embed_cols(table: Matrix, ids: Sequence[int]) -> Matrix:
    """Looks up rows of table and returns them as columns (d x len(ids))."""
    index = np.asarray(ids, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.rows):
        raise errors.TargetIndexError("embed_cols: id outside %d table rows" % table.rows)
    data = np.ascontiguousarray(table.data[index].T)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros(table.shape)
        np.add.at(full, index, grad.T)
        return (full,)
    return _record("embed_cols", data, (table,), backward)


class GradCheckReport:
    """Outcome of a finite-difference gradient check."""
    # pylint: disable=too-few-public-methods
    def __init__(self, max_relative_error: float, worst: str, checked: int, tol: float) -> None:
        self.max_relative_error = max_relative_error
        self.worst = worst
        self.checked = checked
        self.passed = max_relative_error <= tol

    def __str__(self) -> str:
        return "GradCheckReport(max_relative_error=%g, worst=%s, checked=%d, passed=%s)" % (
            self.max_relative_error, self.worst, self.checked, self.passed)


LossFn = Callable[[Optional[Tape]], Matrix]


def grad_check(f: LossFn, params: Sequence[Parameter], eps: float = 1e-4, tol: float = 1e-4,
               floor: float = 1e-3) -> GradCheckReport:
    """
    Compares tape gradients of f against central finite differences for every entry of params.

    f gets a Tape (or None for a plain evaluation) and returns a 1x1 loss. The relative error of one
    entry is |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    if eps <= 0:
        raise errors.RangeError("grad_check: eps must be positive, got %g" % eps)
    first = f(None).item()
    second = f(None).item()
    if first != second:
        raise errors.DeterminismError("grad_check: f returned %r and then %r" % (first, second))

    tape = Tape()
    tape.backward(f(tape))
    worst = ""
    max_error = 0.0
    checked = 0
    for param in params:
        analytic = tape.gradient(param)
        original = param.value.data
        for index in np.ndindex(*original.shape):
            shifted = np.array(original)
            shifted[index] = original[index] + eps
            param.assign(shifted)
            loss_plus = f(None).item()
            shifted[index] = original[index] - eps
            param.assign(shifted)
            loss_minus = f(None).item()
            param.assign(original)
            numeric = (loss_plus - loss_minus) / (2 * eps)
            error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), floor)
            checked += 1
            if error > max_error or not worst:
                max_error = max(error, max_error)
                worst = "%s%s" % (param.name, list(index))
    return GradCheckReport(max_error, worst, checked, tol)


def rng_stream(seed: int, *labels: Union[str, int]) -> np.random.Generator:
    """Derives an independent generator from a root seed and a label path, stable across platforms."""
    digest = hashlib.sha256(repr((int(seed),) + tuple(labels)).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "little") for i in range(0, len(digest), 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

# vim:set shiftwidth=4 softtabstop=4 expandtab:
