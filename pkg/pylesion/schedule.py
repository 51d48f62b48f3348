# -*- coding: utf-8 -*-
''' Adam, the learning rate range test and the slanted triangular schedule.

Example:

    .. code-block:: python

        import pylesion.schedule as ps

        spec = ps.ScheduleSpec(total_iterations=100, lr_max=0.01)
        [ps.stlr(t, spec) for t in (0, 10, 100)]  # [3.125e-4, 0.01, 3.125e-4]

        curve = ps.lr_range_test(model, batches, ps.AdamState(model.parameters()),
                                 1e-5, 1.0, num_iters=100)
        lr_max = ps.pick_lr(curve)

Note:

    The range test runs on the model it is given, then puts every parameter, running statistic
    and gradient back the way it found them. The optimizer state passed in is never touched.
'''
import csv
from dataclasses import dataclass, field
import logging
import math

import numpy as np

import pylesion.metrics as pm
import pylesion.tensor as pt
from pylesion.errors import ConfigError, ContractError, SelectionError, StorageError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    ''' Moments and step count of an Adam optimizer

    Arguments:
        params (list): Parameters to track; moments are zero arrays of the same shapes.

    Attributes:
        m: First moments, keyed by parameter name.
        v: Second moments, keyed by parameter name.
        t: Number of steps taken.
    '''
    params: list = field(default_factory=list, repr=False)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for param in self.params:
            self.m.setdefault(param.name, np.zeros_like(param.data))
            self.v.setdefault(param.name, np.zeros_like(param.data))

    def copy(self):
        ''' Independent copy; the parameters themselves are shared '''
        return AdamState(list(self.params), self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {name: value.copy() for name, value in self.m.items()},
                         {name: value.copy() for name, value in self.v.items()})


def adam_step(params, grads, state: AdamState, lr_t):
    ''' One bias-corrected Adam update, in place.

    Frozen parameters (``trainable`` False) are skipped; the step count advances regardless.

    Arguments:
        params (list): Parameters to update.
        grads (list): One array per parameter, or None to use each parameter's ``grad``. A missing
            gradient counts as zero.
        state (AdamState): Optimizer state, updated in place.
        lr_t (float): Learning rate of this step.
    '''
    if lr_t < 0:
        raise ContractError('adam_step: learning rate must not be negative, got {}'.format(lr_t))
    grads = [param.grad for param in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise ContractError('adam_step: {} parameters but {} gradients'.format(
            len(params), len(grads)))

    for param, grad in zip(params, grads):
        if grad is not None and not np.all(np.isfinite(grad)):
            raise TrainingError("Non-finite gradient for parameter '{}'".format(param.name))

    state.t += 1
    correction1 = 1 - state.beta1 ** state.t
    correction2 = 1 - state.beta2 ** state.t

    for param, grad in zip(params, grads):
        if not getattr(param, 'trainable', True):
            continue
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad)
        if grad.shape != param.shape:
            raise ContractError("adam_step: gradient {} does not match parameter '{}' {}".format(
                grad.shape, param.name, param.shape))

        m = state.m.setdefault(param.name, np.zeros_like(param.data))
        v = state.v.setdefault(param.name, np.zeros_like(param.data))
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad

        update = lr_t * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data -= update.astype(param.data.dtype)


def train_step(model, images, masks, state: AdamState, lr_t, loss=pm.bce_with_logits, check=True):
    ''' Forward, backward and one Adam step on a mini-batch.

    Arguments:
        model: A :class:`pylesion.unet.UNetModel`.
        images: Batch of shape (N, C, H, W).
        masks: Targets of shape (N, 1, H, W).
        state (AdamState): Optimizer state.
        lr_t (float): Learning rate of this step.
        loss (optional): Loss function of (logits, targets).
        check (bool, optional): Raise :class:`TrainingError` on a non-finite loss. When False a
            non-finite loss is returned and no update is made.

    Returns:
        The loss value as a float.
    '''
    model.zero_grad()
    with pt.Tape() as tape:
        logits = model.forward(images, pt.Mode.TRAIN)
        value = loss(logits, masks)

    result = value.item()
    if not math.isfinite(result):
        if check:
            raise TrainingError('Loss is not finite ({})'.format(result))
        return result

    tape.backward(value)
    adam_step(model.trainable_parameters(), None, state, lr_t)
    return result


# Slanted triangular schedule ----------------------------------------------------------------------


@dataclass
class ScheduleSpec:
    ''' Learning rate schedule over one training phase

    Attributes:
        kind: 'stlr' or 'constant'.
        total_iterations: Number of optimizer steps in the phase.
        cut_frac: Fraction of the phase spent warming up.
        ratio: How much smaller the lowest learning rate is than ``lr_max``.
        lr_max: Peak learning rate.
    '''
    kind: str = 'stlr'
    total_iterations: int = 1
    cut_frac: float = 0.1
    ratio: float = 32.0
    lr_max: float = 0.01

    def validate(self):
        if self.kind not in ('stlr', 'constant'):
            raise ConfigError("schedule: unknown kind '{}'".format(self.kind))
        if int(self.total_iterations) < 1:
            raise ConfigError('total_iterations: must be at least 1, got {}'.format(
                self.total_iterations))
        if not 0 < self.cut_frac < 1:
            raise ConfigError('cut_frac: must lie in (0, 1), got {}'.format(self.cut_frac))
        if not self.ratio > 1:
            raise ConfigError('ratio: must be greater than 1, got {}'.format(self.ratio))
        if not self.lr_max > 0:
            raise ConfigError('lr_max: must be positive, got {}'.format(self.lr_max))
        return self

    @property
    def cut(self):
        ''' Iteration of the peak '''
        total = int(self.total_iterations)
        if total == 1:
            return 1
        return min(max(1, int(math.floor(total * self.cut_frac))), total - 1)

    def lr(self, t):
        return stlr(t, self) if self.kind == 'stlr' else self.lr_max


def stlr(t, spec: ScheduleSpec):
    ''' Learning rate at iteration ``t`` (0 <= t <= T) of a slanted triangular schedule.

    Rises linearly from ``lr_max / ratio`` at 0 to ``lr_max`` at ``cut`` and falls linearly back
    to ``lr_max / ratio`` at T.
    '''
    spec.validate()
    total = int(spec.total_iterations)
    if not 0 <= t <= total:
        raise ContractError('stlr: iteration {} outside [0, {}]'.format(t, total))

    cut = spec.cut
    if t < cut:
        p = t / cut
    elif total == cut:
        p = 1.0
    else:
        p = 1 - (t - cut) / (total - cut)

    return spec.lr_max * (1 + p * (spec.ratio - 1)) / spec.ratio


def write_schedule_csv(spec: ScheduleSpec, path):
    ''' CSV of ``iteration,lr`` for every iteration 0..T '''
    try:
        with open(path, 'w', newline='') as out:
            writer = csv.writer(out)
            writer.writerow(['iteration', 'lr'])
            for t in range(int(spec.total_iterations) + 1):
                writer.writerow([t, repr(spec.lr(t))])
    except OSError as error:
        raise StorageError('Could not write {}: {}'.format(path, error)) from error
    return path


# Range test ---------------------------------------------------------------------------------------


@dataclass
class LrCurve:
    ''' Loss against learning rate, recorded by :func:`lr_range_test`

    Attributes:
        records: List of (lr, raw loss, smoothed loss), lr strictly increasing.
        beta: Smoothing factor of the exponential moving average.
    '''
    records: list = field(default_factory=list)
    beta: float = 0.98

    def append(self, lr, raw, smoothed):
        if self.records and not lr > self.records[-1][0]:
            raise ContractError('LrCurve: learning rates must increase, {} follows {}'.format(
                lr, self.records[-1][0]))
        self.records.append((float(lr), float(raw), float(smoothed)))

    def __len__(self):
        return len(self.records)

    @property
    def lrs(self):
        return [record[0] for record in self.records]

    @property
    def smoothed(self):
        return [record[2] for record in self.records]

    def write_csv(self, path):
        ''' CSV of ``lr,raw_loss,smoothed_loss`` '''
        try:
            with open(path, 'w', newline='') as out:
                writer = csv.writer(out)
                writer.writerow(['lr', 'raw_loss', 'smoothed_loss'])
                for record in self.records:
                    writer.writerow([repr(value) for value in record])
        except OSError as error:
            raise StorageError('Could not write {}: {}'.format(path, error)) from error
        return path

    @classmethod
    def read_csv(cls, path):
        curve = cls()
        try:
            with open(path, newline='') as source:
                for row in csv.DictReader(source):
                    curve.append(float(row['lr']), float(row['raw_loss']),
                                 float(row['smoothed_loss']))
        except OSError as error:
            raise StorageError('Could not read {}: {}'.format(path, error)) from error
        except (KeyError, ValueError) as error:
            raise StorageError('{} is not a learning rate curve: {}'.format(path, error)) from error
        return curve


def lr_sequence(lr_start, lr_end, n, spacing='log'):
    ''' ``n`` learning rates from ``lr_start`` to ``lr_end``, both included '''
    if not 0 < lr_start < lr_end:
        raise ContractError('lr range: need 0 < lr_start < lr_end, got {} and {}'.format(
            lr_start, lr_end))
    if n < 2:
        raise ContractError('lr range: need at least 2 points, got {}'.format(n))

    if spacing == 'linear':
        return [float(lr) for lr in np.linspace(lr_start, lr_end, n)]
    if spacing == 'log':
        return [float(lr) for lr in np.geomspace(lr_start, lr_end, n)]
    raise ConfigError("lr_spacing: unknown spacing '{}', use 'linear' or 'log'".format(spacing))


def lr_range_test(model, batches, state: AdamState, lr_start, lr_end, num_iters, spacing='log',
                  loss=pm.bce_with_logits, beta=0.98, divergence=4.0) -> LrCurve:
    ''' Train one mini-batch per iteration while the learning rate grows, recording the loss.

    The loss is smoothed with a bias-corrected exponential moving average. The test stops early
    once the smoothed loss exceeds ``divergence`` times the best one seen, or is not finite.

    Arguments:
        model: The model; restored to its prior state before returning.
        batches (list): (images, masks) mini-batches, used in turn and cycled.
        state (AdamState): Optimizer state to start from; a copy is used.
        lr_start (float): First learning rate.
        lr_end (float): Last learning rate.
        num_iters (int): Number of iterations, at least 10.
        spacing (str, optional): 'log' or 'linear'.
        loss (optional): Loss function of (logits, targets).
        beta (float, optional): Smoothing factor.
        divergence (float, optional): Early stop factor.
    '''
    batches = list(batches)
    if not batches:
        raise ContractError('lr_range_test: the dataset is empty')
    if num_iters < 10:
        raise ContractError('lr_range_test: need at least 10 iterations, got {}'.format(num_iters))
    lrs = lr_sequence(lr_start, lr_end, num_iters, spacing)

    params = model.parameters()
    saved = model.state_arrays()
    saved_grads = [None if param.grad is None else param.grad.copy() for param in params]
    trial = state.copy()

    curve = LrCurve(beta=beta)
    average = 0.0
    best = math.inf
    try:
        for index, lr in enumerate(lrs):
            images, masks = batches[index % len(batches)]
            raw = train_step(model, images, masks, trial, lr, loss, check=False)
            if not math.isfinite(raw):
                logger.info('Range test stopped at lr %.3g: loss is not finite', lr)
                break

            average = beta * average + (1 - beta) * raw
            smoothed = average / (1 - beta ** (index + 1))
            curve.append(lr, raw, smoothed)

            best = min(best, smoothed)
            if not math.isfinite(smoothed) or smoothed > divergence * best:
                logger.info('Range test stopped at lr %.3g: smoothed loss %.4g > %g x best %.4g',
                            lr, smoothed, divergence, best)
                break
    finally:
        model.load_state_arrays(saved)
        for param, grad in zip(params, saved_grads):
            param.grad = grad

    return curve


def pick_lr(curve) -> float:
    ''' Learning rate after the steepest descent of the smoothed loss against log(lr).

    Arguments:
        curve (LrCurve/list): A curve, or a list of (lr, loss) pairs.

    Returns:
        The lr of record ``i + 1`` where the slope between records ``i`` and ``i + 1`` is most
        negative; among equal slopes, the smaller lr.
    '''
    if isinstance(curve, LrCurve):
        points = list(zip(curve.lrs, curve.smoothed))
    else:
        points = [(float(lr), float(value)) for lr, value in curve]

    if len(points) < 3:
        raise ContractError('pick_lr needs at least 3 records, got {}'.format(len(points)))
    if any(lr <= 0 for lr, _ in points):
        raise ContractError('pick_lr needs positive learning rates')

    best_index = None
    best_slope = 0.0
    for index in range(len(points) - 1):
        (lr_a, loss_a), (lr_b, loss_b) = points[index], points[index + 1]
        slope = (loss_b - loss_a) / (math.log(lr_b) - math.log(lr_a))
        if slope >= 0 or not math.isfinite(slope):
            continue
        if best_index is None or slope < best_slope - 1e-12 * abs(best_slope):
            best_index = index
            best_slope = slope

    if best_index is None:
        raise SelectionError('The loss never decreases over lr {:.3g} .. {:.3g}; widen the range '
                             'towards smaller learning rates'.format(points[0][0], points[-1][0]))

    return points[best_index + 1][0]
