# -*- coding: utf-8 -*-
''' Training losses and evaluation metrics.

The losses take logits and record a single fused node on the active tape. The metrics take
binary masks and count pixels with integers, so their values do not depend on summation order.

Example:

    .. code-block:: python

        import numpy as np
        import pylesion.metrics as pm

        pred = np.array([[1, 1, 0]])
        truth = np.array([[0, 1, 1]])

        pm.jaccard(pred, truth)  # 1/3
        pm.dice(pred, truth)  # 0.5

Note:

    When prediction and truth are both empty the masks agree perfectly: Jaccard and Dice are 1.
'''
import csv
from dataclasses import dataclass, field

import numpy as np

import pylesion.tensor as pt
from pylesion.errors import ConfigError, ContractError, ShapeError, StorageError

DEFAULT_CUT = 0.65


def _targets_like(logits, targets):
    values = targets.data if isinstance(targets, pt.Tensor) else np.asarray(targets)
    if values.shape != logits.shape:
        raise ShapeError('loss: logits {} and targets {} differ in shape'.format(
            logits.shape, values.shape))
    if not np.all((values == 0) | (values == 1)):
        raise ContractError('loss: targets must only hold 0 and 1')
    return values.astype(logits.data.dtype)


def bce_with_logits(logits: pt.Tensor, targets) -> pt.Tensor:
    ''' Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 targets.

    Evaluated as ``max(z, 0) - t*z + log(1 + exp(-|z|))``, which never overflows.

    Arguments:
        logits (Tensor): Raw scores.
        targets (Tensor/array): Same shape, values in {0, 1}.
    '''
    t = _targets_like(logits, targets)
    z = logits.data
    count = z.size

    losses = np.maximum(z, 0) - t * z + np.log1p(np.exp(-np.abs(z)))

    def grads(grad):
        return ((pt.stable_sigmoid(z) - t) * (grad / count),)

    return pt._emit('bce_with_logits', (logits,), np.asarray(losses.mean()), grads)


def soft_jaccard_loss(logits: pt.Tensor, targets, smooth=1.0) -> pt.Tensor:
    ''' ``1 - (I + smooth) / (U + smooth)`` over sigmoid probabilities.

    ``I`` is the sum of ``p * t`` and ``U`` the sum of ``p + t`` minus ``I``. With ``smooth`` 0 and
    an empty union the loss is 0.

    Arguments:
        logits (Tensor): Raw scores.
        targets (Tensor/array): Same shape, values in {0, 1}.
        smooth (float, optional): Added to numerator and denominator.
    '''
    t = _targets_like(logits, targets)
    p = pt.stable_sigmoid(logits.data)

    intersection = (p * t).sum()
    union = p.sum() + t.sum() - intersection
    denominator = union + smooth

    if denominator == 0:
        value = 0.0

        def grads(grad):
            return (np.zeros_like(p),)
    else:
        value = 1 - (intersection + smooth) / denominator

        def grads(grad):
            grad_p = -(t * denominator - (intersection + smooth) * (1 - t)) / denominator ** 2
            return (grad * grad_p * p * (1 - p),)

    return pt._emit('soft_jaccard_loss', (logits,), np.asarray(value, dtype=p.dtype), grads)


LOSSES = {'bce': bce_with_logits, 'soft_jaccard': soft_jaccard_loss}


def loss_function(name):
    ''' The loss registered under ``name``: 'bce' or 'soft_jaccard' '''
    try:
        return LOSSES[name]
    except KeyError as error:
        raise ConfigError("loss: unknown loss '{}', choose from {}".format(
            name, sorted(LOSSES))) from error


# Metrics ------------------------------------------------------------------------------------------


def _as_masks(pred, truth):
    pred = pred.data if isinstance(pred, pt.Tensor) else np.asarray(pred)
    truth = truth.data if isinstance(truth, pt.Tensor) else np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError('metric: prediction {} and truth {} differ in shape'.format(
            pred.shape, truth.shape))
    return pred != 0, truth != 0


def counts(pred, truth):
    ''' (intersection, union, |pred|, |truth|) pixel counts as python ints '''
    pred, truth = _as_masks(pred, truth)
    both = int(np.count_nonzero(pred & truth))
    either = int(np.count_nonzero(pred | truth))
    return both, either, int(np.count_nonzero(pred)), int(np.count_nonzero(truth))


def jaccard(pred, truth):
    ''' |pred and truth| / |pred or truth| of two binary masks; 1.0 when both are empty '''
    both, either, _, _ = counts(pred, truth)
    return 1.0 if either == 0 else both / either


def dice(pred, truth):
    ''' 2|pred and truth| / (|pred| + |truth|); 1.0 when both are empty '''
    both, _, size_pred, size_truth = counts(pred, truth)
    total = size_pred + size_truth
    return 1.0 if total == 0 else 2 * both / total


def threshold_jaccard(per_image, cut=DEFAULT_CUT):
    ''' Mean over images of J where J >= cut, 0 otherwise '''
    values = [float(value) for value in per_image]
    if not values:
        raise ContractError('threshold_jaccard needs at least one value')
    if any(value < 0 or value > 1 for value in values):
        raise ContractError('threshold_jaccard values must lie in [0, 1]')

    return sum(value if value >= cut else 0.0 for value in values) / len(values)


def binarize(probs, threshold=0.5):
    ''' 0/1 uint8 mask with 1 wherever ``probs >= threshold`` '''
    probs = probs.data if isinstance(probs, pt.Tensor) else np.asarray(probs)
    return (probs >= threshold).astype(np.uint8)


@dataclass
class MetricReport:
    ''' Per-image and dataset scores of a set of predicted masks

    Attributes:
        per_image: List of (image id, jaccard, dice).
        cut: Threshold Jaccard cut.
    '''
    per_image: list = field(default_factory=list)
    cut: float = DEFAULT_CUT

    @classmethod
    def from_masks(cls, pairs, cut=DEFAULT_CUT):
        ''' Build a report from an iterable of (image id, predicted mask, true mask) '''
        report = cls(cut=cut)
        for image_id, pred, truth in pairs:
            report.per_image.append((image_id, jaccard(pred, truth), dice(pred, truth)))
        return report

    @property
    def jaccards(self):
        return [row[1] for row in self.per_image]

    @property
    def dataset_jaccard(self):
        if not self.per_image:
            raise ContractError('MetricReport holds no images')
        return sum(self.jaccards) / len(self.per_image)

    @property
    def dataset_dice(self):
        if not self.per_image:
            raise ContractError('MetricReport holds no images')
        return sum(row[2] for row in self.per_image) / len(self.per_image)

    @property
    def dataset_threshold_jaccard(self):
        return threshold_jaccard(self.jaccards, self.cut)

    def summary(self):
        return {'dataset_jaccard': self.dataset_jaccard,
                'dataset_threshold_jaccard': self.dataset_threshold_jaccard,
                'cut': self.cut}

    def write_csv(self, path):
        ''' Per-image CSV: ``image_id,jaccard,dice`` '''
        try:
            with open(path, 'w', newline='') as out:
                writer = csv.writer(out)
                writer.writerow(['image_id', 'jaccard', 'dice'])
                for image_id, jac, dic in self.per_image:
                    writer.writerow([image_id, repr(jac), repr(dic)])
        except OSError as error:
            raise StorageError('Could not write {}: {}'.format(path, error)) from error
        return path

    def write_summary(self, path):
        ''' Summary CSV: ``dataset_jaccard,dataset_threshold_jaccard,cut`` '''
        summary = self.summary()
        try:
            with open(path, 'w', newline='') as out:
                writer = csv.writer(out)
                writer.writerow(list(summary))
                writer.writerow([repr(float(value)) for value in summary.values()])
        except OSError as error:
            raise StorageError('Could not write {}: {}'.format(path, error)) from error
        return path
