# -*- coding: utf-8 -*-
''' Dense tensors with reverse-mode automatic differentiation.

Operations performed inside a :class:`Tape` context are recorded in order; calling
:meth:`Tape.backward` on a scalar result walks the record backwards once and accumulates
gradients into every leaf tensor that requires them.

Example:

    .. code-block:: python

        import pylesion.tensor as pt

        x = pt.Tensor([1.0, 2.0], requires_grad=True, precision='double')

        with pt.Tape() as tape:
            loss = pt.sum(pt.mul(x, x))

        tape.backward(loss)
        print(x.grad)  # [2. 4.]

    Outside of a tape, operations simply compute their result; nothing is recorded. This is how
    inference runs.

Note:

    Only the broadcasting needed by the network is supported: a rank-1 per-channel vector may be
    added to a rank-4 (batch, channel, height, width) tensor. Everything else must match
    exactly, or a :class:`pylesion.errors.ShapeError` naming both shapes is raised.
'''
from dataclasses import dataclass, field
import enum
import os
import threading

import numpy as np

from pylesion.errors import ContractError, ShapeError, TrainingError

_DEBUG = bool(os.environ.get('PYLESION_DEBUG'))
_ACTIVE = threading.local()


def set_debug(enabled: bool):
    ''' Turn the non-finite check after every forward op on or off '''
    global _DEBUG
    _DEBUG = bool(enabled)


class Precision(enum.Enum):
    ''' Floating point precision of a graph. Tests run double, training runs single. '''
    SINGLE = 'single'
    DOUBLE = 'double'

    @property
    def dtype(self):
        return np.float32 if self is Precision.SINGLE else np.float64

    @classmethod
    def of(cls, value):
        ''' Accepts a Precision, its name, or a numpy dtype '''
        if isinstance(value, Precision):
            return value
        if isinstance(value, str):
            try:
                return cls(value.lower())
            except ValueError as error:
                raise ContractError("Unknown precision '{}'".format(value)) from error

        return cls.DOUBLE if np.dtype(value) == np.float64 else cls.SINGLE


class Mode(enum.Enum):
    ''' Forward mode of layers that behave differently while training '''
    TRAIN = 'train'
    EVAL = 'eval'

    @classmethod
    def of(cls, value):
        return value if isinstance(value, Mode) else cls(value)


class Tensor:
    ''' A contiguous real array, optionally carrying a gradient buffer of the same shape.

    Arguments:
        data (array_like): Values of the tensor.
        requires_grad (bool, optional): Accumulate a gradient for this tensor on backward.
        precision (str/Precision, optional): Cast the data to this precision. By default
            floating data keeps its dtype and anything else becomes single precision.
        name (str, optional): Human readable name, used by parameters and archives.

    Attributes:
        data: The numpy array holding the values.
        grad: None until a backward pass reaches this tensor, then an array like ``data``.
        node_id: Index of the tape node that produced this tensor, None for leaves.
    '''

    def __init__(self, data, requires_grad=False, precision=None, name=None):
        if precision is not None:
            dtype = Precision.of(precision).dtype
        else:
            dtype = np.asarray(data).dtype
            if dtype not in (np.float32, np.float64):
                dtype = np.float32

        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def precision(self):
        return Precision.of(self.data.dtype)

    def zero_grad(self):
        ''' Drop the accumulated gradient '''
        self.grad = None

    def item(self):
        ''' The value of a one-element tensor as a python float '''
        if self.data.size != 1:
            raise ContractError('item() needs a one-element tensor, got shape {}'.format(
                self.shape))
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __repr__(self):
        label = " '{}'".format(self.name) if self.name else ''
        return '<Tensor{} shape={} {}>'.format(label, self.shape, self.precision.value)


@dataclass
class Node:
    ''' One recorded operation: its kind, its inputs, and how to push gradients back through it '''
    op: str
    inputs: tuple
    node_id: int
    backward: object = field(repr=False)


class Tape:
    ''' Ordered record of the operations performed while the tape is active.

    A tape is used as a context manager; it belongs to the thread that entered it. Nodes are
    appended as operations run, so every node's inputs were produced before it.

    Attributes:
        nodes: The recorded :class:`Node` list, in execution order.
    '''

    def __init__(self):
        self.nodes = []
        self._counter = 0

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, etype, evalue, etraceback):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op, inputs, output, backward):
        ''' Append a node producing ``output`` and tag the output with its node id '''
        node = Node(op, tuple(inputs), self._counter, backward)
        self._counter += 1
        self.nodes.append(node)

        output.node_id = node.node_id
        output._tape = self

        return node

    def backward(self, loss):
        ''' Accumulate d(loss)/d(leaf) into the ``grad`` of every leaf requiring a gradient.

        Gradients add onto whatever is already stored; zero them between optimizer steps.

        Arguments:
            loss (Tensor): A one-element tensor produced on this tape.
        '''
        if loss.data.size != 1:
            raise ContractError('backward needs a scalar loss, got shape {}'.format(loss.shape))
        if loss.node_id is not None and loss._tape is not self:
            raise ContractError('loss was not recorded on this tape')

        seed = np.ones_like(loss.data)
        leaves = {}

        if loss.node_id is None:
            if loss.requires_grad:
                leaves[id(loss)] = (loss, seed)
        else:
            pending = {loss.node_id: seed}
            for node in reversed(self.nodes[:loss.node_id + 1]):
                grad = pending.pop(node.node_id, None)
                if grad is None:
                    continue

                for tensor, input_grad in zip(node.inputs, node.backward(grad)):
                    if input_grad is None or not tensor.requires_grad:
                        continue
                    if tensor.node_id is not None and tensor._tape is self:
                        previous = pending.get(tensor.node_id)
                        pending[tensor.node_id] = input_grad if previous is None \
                            else previous + input_grad
                    else:
                        previous = leaves.get(id(tensor))
                        total = input_grad if previous is None else previous[1] + input_grad
                        leaves[id(tensor)] = (tensor, total)

        for tensor, total in leaves.values():
            total = np.asarray(total, dtype=tensor.data.dtype).reshape(tensor.shape)
            tensor.grad = total.copy() if tensor.grad is None else tensor.grad + total


def _stack():
    if not hasattr(_ACTIVE, 'stack'):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def current_tape():
    ''' The innermost active tape of this thread, or None '''
    stack = _stack()
    return stack[-1] if stack else None


def backward(tape, loss):
    ''' Functional form of :meth:`Tape.backward` '''
    return tape.backward(loss)


# Tools --------------------------------------------------------------------------------------------


def _same_precision(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError('{}: inputs mix precisions {}'.format(
            op, sorted(str(dtype) for dtype in dtypes)))


def _emit(op, inputs, out_data, backward):
    ''' Wrap a forward result, recording it when a tape is active and any input needs a gradient '''
    out = Tensor(out_data, precision=Precision.of(inputs[0].data.dtype))
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise TrainingError('{} produced non-finite values'.format(op))

    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)

    return out


def _record_branch(decision):
    ''' Note the branch a non-smooth op took, while :func:`grad_check` is listening '''
    branches = getattr(_ACTIVE, 'branches', None)
    if branches is not None:
        branches.append(decision.tobytes())


# --------------------------------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    ''' Elementwise sum; ``b`` may also be a per-channel vector added over a rank-4 ``a`` '''
    _same_precision('add', a, b)
    if a.shape == b.shape:
        def grads(grad):
            return grad, grad

        return _emit('add', (a, b), a.data + b.data, grads)

    if a.ndim == 4 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        def grads(grad):
            return grad, grad.sum(axis=(0, 2, 3))

        return _emit('add', (a, b), a.data + b.data[None, :, None, None], grads)

    raise ShapeError('add: cannot combine shapes {} and {}'.format(a.shape, b.shape))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ''' Elementwise product of two tensors of equal shape '''
    _same_precision('mul', a, b)
    if a.shape != b.shape:
        raise ShapeError('mul: cannot combine shapes {} and {}'.format(a.shape, b.shape))

    def grads(grad):
        return grad * b.data, grad * a.data

    return _emit('mul', (a, b), a.data * b.data, grads)


def sum(a: Tensor) -> Tensor:  # pylint: disable=redefined-builtin
    ''' Sum of every element, as a scalar tensor '''
    def grads(grad):
        return (np.broadcast_to(grad, a.shape),)

    return _emit('sum', (a,), np.asarray(a.data.sum()), grads)


def mean(a: Tensor) -> Tensor:
    ''' Mean of every element, as a scalar tensor '''
    count = a.data.size

    def grads(grad):
        return (np.broadcast_to(grad / count, a.shape),)

    return _emit('mean', (a,), np.asarray(a.data.mean()), grads)


def relu(a: Tensor) -> Tensor:
    ''' max(0, x); the subgradient at exactly zero is zero '''
    active = a.data > 0
    _record_branch(active)

    def grads(grad):
        return (grad * active,)

    return _emit('relu', (a,), np.where(active, a.data, 0).astype(a.data.dtype), grads)


def stable_sigmoid(values):
    ''' 1 / (1 + exp(-x)) on a numpy array without overflow for large |x| '''
    values = np.asarray(values)
    out = np.empty_like(values)
    positive = values >= 0
    out[positive] = 1 / (1 + np.exp(-values[positive]))
    exp = np.exp(values[~positive])
    out[~positive] = exp / (1 + exp)
    return out


def sigmoid(a: Tensor) -> Tensor:
    ''' Logistic function, evaluated in the numerically stable branch for each sign '''
    out_data = stable_sigmoid(a.data)

    def grads(grad):
        return (grad * out_data * (1 - out_data),)

    return _emit('sigmoid', (a,), out_data, grads)


def conv2d(inputs: Tensor, weight: Tensor, bias: Tensor = None, stride=1, padding=0) -> Tensor:
    ''' Cross-correlation of an NCHW batch with an O x C x k x k weight.

    Output extent is ``(H + 2 * padding - k) // stride + 1`` along each spatial axis; zero padding.

    Arguments:
        inputs: Batch of shape (N, C, H, W).
        weight: Kernels of shape (O, C, k, k).
        bias (optional): Vector of O values added per output channel.
        stride (int, optional): Step between windows.
        padding (int, optional): Zeros added on every side.
    '''
    operands = (inputs, weight) if bias is None else (inputs, weight, bias)
    _same_precision('conv2d', *operands)

    if inputs.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError('conv2d: need NCHW input and OxCxkxk weight, got {} and {}'.format(
            inputs.shape, weight.shape))
    if inputs.shape[1] != weight.shape[1]:
        raise ShapeError('conv2d: input {} has {} channels, weight {} expects {}'.format(
            inputs.shape, inputs.shape[1], weight.shape, weight.shape[1]))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError('conv2d: bias {} does not match weight {}'.format(
            bias.shape, weight.shape))
    if stride < 1 or padding < 0:
        raise ContractError('conv2d: stride must be >= 1 and padding >= 0')

    height, width = inputs.shape[2:]
    kernel = weight.shape[2]
    if height + 2 * padding < kernel or width + 2 * padding < kernel:
        raise ShapeError('conv2d: padded input {} is smaller than kernel {}'.format(
            inputs.shape, weight.shape))

    padded = np.pad(inputs.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.lib.stride_tricks.sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    cols = cols[:, :, ::stride, ::stride]  # N, C, OH, OW, k, k
    out_h, out_w = cols.shape[2], cols.shape[3]

    out_data = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def grads(grad):
        grad_weight = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 2, 3]))

        grad_cols = np.tensordot(grad, weight.data, axes=([1], [0]))  # N, OH, OW, C, k, k
        grad_padded = np.zeros(padded.shape, dtype=padded.dtype)
        for row in range(kernel):
            for col in range(kernel):
                row_span = slice(row, row + stride * out_h, stride)
                col_span = slice(col, col + stride * out_w, stride)
                grad_padded[:, :, row_span, col_span] += \
                    grad_cols[:, :, :, :, row, col].transpose(0, 3, 1, 2)
        grad_inputs = grad_padded[:, :, padding:padding + height, padding:padding + width]

        if bias is None:
            return grad_inputs, grad_weight
        return grad_inputs, grad_weight, grad.sum(axis=(0, 2, 3))

    return _emit('conv2d', operands, out_data, grads)


def max_pool2d(inputs: Tensor, k=2) -> Tensor:
    ''' Non-overlapping k x k max pooling. Ties route the gradient to the first element of the
    window in row-major order. '''
    if inputs.ndim != 4:
        raise ShapeError('max_pool2d: need NCHW input, got {}'.format(inputs.shape))

    batch, channels, height, width = inputs.shape
    if height % k or width % k:
        raise ShapeError('max_pool2d: extent {}x{} is not divisible by {}'.format(height, width, k))

    windows = inputs.data.reshape(batch, channels, height // k, k, width // k, k)
    windows = windows.transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(batch, channels, height // k, width // k, k * k)
    winner = windows.argmax(axis=-1)[..., None]
    _record_branch(winner)
    out_data = np.take_along_axis(windows, winner, axis=-1)[..., 0]

    def grads(grad):
        routed = np.zeros(windows.shape, dtype=grad.dtype)
        np.put_along_axis(routed, winner, grad[..., None], axis=-1)
        routed = routed.reshape(batch, channels, height // k, width // k, k, k)
        return (routed.transpose(0, 1, 2, 4, 3, 5).reshape(inputs.shape),)

    return _emit('max_pool2d', (inputs,), out_data, grads)


def upsample_nearest2x(inputs: Tensor) -> Tensor:
    ''' Replicate each pixel into a 2 x 2 block '''
    if inputs.ndim != 4:
        raise ShapeError('upsample_nearest2x: need NCHW input, got {}'.format(inputs.shape))

    batch, channels, height, width = inputs.shape
    out_data = inputs.data.repeat(2, axis=2).repeat(2, axis=3)

    def grads(grad):
        return (grad.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),)

    return _emit('upsample_nearest2x', (inputs,), out_data, grads)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    ''' Stack ``b``'s channels after ``a``'s; batch and spatial extents must agree '''
    _same_precision('concat_channels', a, b)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError('concat_channels: cannot join shapes {} and {}'.format(a.shape, b.shape))

    split = a.shape[1]

    def grads(grad):
        return grad[:, :split], grad[:, split:]

    return _emit('concat_channels', (a, b), np.concatenate([a.data, b.data], axis=1), grads)


class RunningStats:
    ''' Running mean and variance of a batch-norm layer

    Arguments:
        channels (int): Number of channels tracked.
        precision (optional): Precision of the buffers.
    '''

    def __init__(self, channels, precision=Precision.SINGLE):
        dtype = Precision.of(precision).dtype
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm2d(inputs: Tensor, gamma: Tensor, beta: Tensor, state: RunningStats, mode='train',
                 momentum=0.1, eps=1e-5) -> Tensor:
    ''' Per-channel normalization of an NCHW batch.

    In train mode the batch statistics normalize the input and the running statistics in
    ``state`` move towards them by ``momentum`` (unbiased variance). In eval mode the running
    statistics are used and left alone.

    Arguments:
        inputs: Batch of shape (N, C, H, W).
        gamma: Per-channel scale, shape (C,).
        beta: Per-channel shift, shape (C,).
        state: The layer's :class:`RunningStats`.
        mode (str/Mode, optional): 'train' or 'eval'.
        momentum (float, optional): Weight of the newest batch in the running statistics.
        eps (float, optional): Added to the variance before the square root.
    '''
    _same_precision('batch_norm2d', inputs, gamma, beta)
    if inputs.ndim != 4 or gamma.shape != (inputs.shape[1],) or beta.shape != gamma.shape:
        raise ShapeError('batch_norm2d: input {} does not match gamma {} / beta {}'.format(
            inputs.shape, gamma.shape, beta.shape))

    axes = (0, 2, 3)
    scale = gamma.data[None, :, None, None]

    if Mode.of(mode) is Mode.TRAIN:
        count = inputs.data.size // inputs.shape[1]
        if count < 2:
            raise ContractError('batch_norm2d: train mode needs at least 2 values per channel, '
                                'got input {}'.format(inputs.shape))

        batch_mean = inputs.data.mean(axis=axes)
        batch_var = inputs.data.var(axis=axes)
        inv_std = 1 / np.sqrt(batch_var + eps)
        normed = (inputs.data - batch_mean[None, :, None, None]) * inv_std[None, :, None, None]

        dtype = state.mean.dtype
        state.mean[...] = ((1 - momentum) * state.mean + momentum * batch_mean).astype(dtype)
        state.var[...] = ((1 - momentum) * state.var
                          + momentum * batch_var * count / (count - 1)).astype(dtype)

        def grads(grad):
            grad_normed = grad * scale
            grad_inputs = (inv_std[None, :, None, None] / count) * (
                count * grad_normed
                - grad_normed.sum(axis=axes)[None, :, None, None]
                - normed * (grad_normed * normed).sum(axis=axes)[None, :, None, None])
            return grad_inputs, (grad * normed).sum(axis=axes), grad.sum(axis=axes)
    else:
        inv_std = 1 / np.sqrt(state.var.astype(inputs.data.dtype) + eps)
        normed = (inputs.data - state.mean[None, :, None, None]) * inv_std[None, :, None, None]

        def grads(grad):
            grad_inputs = grad * scale * inv_std[None, :, None, None]
            return grad_inputs, (grad * normed).sum(axis=axes), grad.sum(axis=axes)

    out_data = normed * scale + beta.data[None, :, None, None]
    return _emit('batch_norm2d', (inputs, gamma, beta), out_data, grads)


@dataclass
class GradCheckReport:
    ''' Outcome of :func:`grad_check`

    Attributes:
        max_error: Largest error over all checked coordinates.
        tolerance: The tolerance the error was compared against.
        passed: ``max_error < tolerance``.
        worst: (input index, flat index) of the largest error.
        checked: Number of coordinates compared.
        skipped: Coordinates left out because a step crossed a relu or max-pool kink.
    '''
    max_error: float
    tolerance: float
    passed: bool
    worst: tuple
    checked: int
    skipped: int = 0


def _evaluate(func, inputs, listen):
    ''' (value, branches taken by relu and max-pool, or None when not listening) '''
    if not listen:
        return func(*inputs), None
    _ACTIVE.branches = []
    try:
        out = func(*inputs)
    finally:
        branches, _ACTIVE.branches = _ACTIVE.branches, None
    return out, branches


def grad_check(func, inputs, h=1e-6, tol=1e-4, skip_kinks=False) -> GradCheckReport:
    ''' Compare analytic gradients against central finite differences.

    For every coordinate of every input, ``(f(x + s) - f(x - s)) / 2s`` with ``s = h * max(1, |x|)``
    is compared to the gradient from :meth:`Tape.backward`. The error is relative, except where
    the analytic value is below 1e-6 in magnitude, where it is absolute.

    Arguments:
        func: Callable taking the input tensors and returning a scalar tensor.
        inputs: List of double precision tensors; each is perturbed in place and restored.
        h (float, optional): Base step.
        tol (float, optional): Pass threshold.
        skip_kinks (bool, optional): Leave out coordinates whose +s or -s step changes the sign
            of a relu input or the winner of a max-pool window; the difference quotient there
            measures two pieces of a piecewise function, not the derivative.
    '''
    for tensor in inputs:
        if tensor.precision is not Precision.DOUBLE:
            raise ContractError('grad_check needs double precision inputs')
        tensor.zero_grad()
        tensor.requires_grad = True

    with Tape() as tape:
        out, baseline = _evaluate(func, inputs, skip_kinks)
    tape.backward(out)

    worst = (0, 0)
    max_error = 0.0
    checked = skipped = 0
    for index, tensor in enumerate(inputs):
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        analytic = analytic.reshape(-1)
        flat = tensor.data.reshape(-1)

        for position in range(flat.size):
            original = flat[position]
            step = h * max(1.0, abs(float(original)))

            flat[position] = original + step
            upper, upper_branches = _evaluate(func, inputs, skip_kinks)
            flat[position] = original - step
            lower, lower_branches = _evaluate(func, inputs, skip_kinks)
            flat[position] = original

            if skip_kinks and (upper_branches != baseline or lower_branches != baseline):
                skipped += 1
                continue
            upper, lower = float(upper.data.sum()), float(lower.data.sum())

            numeric = (upper - lower) / (2 * step)
            exact = float(analytic[position])
            if abs(exact) < 1e-6:
                error = abs(exact - numeric)
            else:
                error = abs(exact - numeric) / max(abs(exact), abs(numeric))

            checked += 1
            if error > max_error:
                max_error = error
                worst = (index, position)

    return GradCheckReport(max_error, tol, max_error < tol, worst, checked, skipped)
