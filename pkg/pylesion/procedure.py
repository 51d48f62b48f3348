# -*- coding: utf-8 -*-
''' The two-phase fine-tuning procedure.

Phase 1 freezes the first layer group, finds a learning rate with the range test and trains with
a slanted triangular schedule. Phase 2 unfreezes everything but batch normalization and repeats
the range test and the schedule. Every epoch ends with a validation pass; the weights with the
best validation Dice are kept.

Example:

    .. code-block:: python

        import pylesion.procedure as pp

        result = pp.run_training_procedure(model, train, val, pp.TrainConfig(epochs=30))
        result.history.write_csv('history.csv')
        model.load_state_arrays(result.best_state)
'''
import csv
from dataclasses import asdict, dataclass, field, fields
import logging

import numpy as np

import pylesion.data as pd
import pylesion.layers as pl
import pylesion.metrics as pm
import pylesion.schedule as ps
import pylesion.tensor as pt
from pylesion.errors import ConfigError, ContractError, DataError, StorageError, TrainingError

logger = logging.getLogger(__name__)

PHASE_POLICIES = (pl.TrainPolicy.FREEZE_FIRST_GROUP, pl.TrainPolicy.UNFREEZE_ALL_EXCEPT_BATCHNORM)


@dataclass
class TrainConfig:
    ''' Hyper-parameters of one run of the procedure

    Attributes:
        epochs: Epochs per phase.
        batch_size: Samples per mini-batch.
        lr_start, lr_end, lr_iters, lr_spacing: Range test sweep.
        lr_max: When set, skip the range test and use this peak learning rate.
        cut_frac, ratio: Slanted triangular schedule shape.
        schedule: 'stlr' or 'constant'.
        loss: 'bce' or 'soft_jaccard'.
        threshold: Binarization threshold of validation predictions.
        seed: Seed of batch order and augmentation.
        augment: Augmentation of training batches, None for none.
    '''
    epochs: int = 30
    batch_size: int = 8
    lr_start: float = 1e-5
    lr_end: float = 1.0
    lr_iters: int = 100
    lr_spacing: str = 'log'
    lr_max: float = None
    cut_frac: float = 0.1
    ratio: float = 32.0
    schedule: str = 'stlr'
    loss: str = 'bce'
    threshold: float = 0.5
    seed: int = 0
    augment: pd.AugmentParams = field(default_factory=pd.AugmentParams)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError('epochs: must be positive, got {}'.format(self.epochs))
        if self.batch_size < 1:
            raise ConfigError('batch_size: must be positive, got {}'.format(self.batch_size))
        if self.lr_iters < 10:
            raise ConfigError('lr_iters: need at least 10, got {}'.format(self.lr_iters))
        if self.lr_max is not None and not self.lr_max > 0:
            raise ConfigError('lr_max: must be positive, got {}'.format(self.lr_max))
        pm.loss_function(self.loss)
        if self.augment is not None:
            self.augment.validate()
        ps.ScheduleSpec(self.schedule, 1, self.cut_frac, self.ratio).validate()
        return self


@dataclass
class HistoryRecord:
    ''' Scores at the end of one epoch '''
    epoch: int
    phase: int
    lr_max: float
    train_loss: float
    val_loss: float
    val_dice: float
    val_jaccard: float


class History:
    ''' Ordered list of :class:`HistoryRecord` '''
    columns = [item.name for item in fields(HistoryRecord)]

    def __init__(self, records=None):
        self.records = list(records or [])

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def append(self, record):
        self.records.append(record)

    def extend(self, other):
        self.records.extend(other)

    @property
    def phases(self):
        return sorted({record.phase for record in self.records})

    def best(self):
        ''' First record with the highest validation Dice '''
        if not self.records:
            raise ContractError('History is empty')
        return max(self.records, key=lambda record: record.val_dice)

    def write_csv(self, path):
        try:
            with open(path, 'w', newline='') as out:
                writer = csv.writer(out)
                writer.writerow(self.columns)
                for record in self.records:
                    writer.writerow([value if isinstance(value, int) else repr(float(value))
                                     for value in (getattr(record, name) for name in self.columns)])
        except OSError as error:
            raise StorageError('Could not write {}: {}'.format(path, error)) from error
        return path

    @classmethod
    def read_csv(cls, path):
        try:
            with open(path, newline='') as source:
                rows = list(csv.DictReader(source))
        except OSError as error:
            raise StorageError('Could not read {}: {}'.format(path, error)) from error

        try:
            return cls.from_dicts(rows)
        except (KeyError, ValueError) as error:
            raise DataError('{} is not a history file: {}'.format(path, error)) from error

    def to_dicts(self):
        ''' One plain dict per record, for checkpoint manifests '''
        return [asdict(record) for record in self.records]

    @classmethod
    def from_dicts(cls, rows):
        return cls([HistoryRecord(int(row['epoch']), int(row['phase']), float(row['lr_max']),
                                  float(row['train_loss']), float(row['val_loss']),
                                  float(row['val_dice']), float(row['val_jaccard']))
                    for row in rows])


@dataclass
class ProcedureResult:
    ''' Outcome of :func:`run_training_procedure`

    Attributes:
        history: Per-epoch scores.
        best_state: Model arrays at the epoch with the best validation Dice.
        best: The history record of that epoch.
        curves: The range test curve of each phase (None where ``lr_max`` was given).
    '''
    history: History
    best_state: dict
    best: HistoryRecord
    curves: list


def validate(model, samples, batch_size=8, loss=pm.bce_with_logits, threshold=0.5):
    ''' (mean loss, mean per-image Dice, mean per-image Jaccard) in eval mode '''
    if not samples:
        raise ContractError('validation set is empty')

    total_loss = 0.0
    dices, jaccards = [], []
    for images, masks in pd.iterate_batches(samples, batch_size, shuffle=False):
        logits = model.forward(images, pt.Mode.EVAL)
        total_loss += loss(logits, masks).item() * len(images)
        preds = pm.binarize(pt.stable_sigmoid(logits.data), threshold)
        for pred, truth in zip(preds, masks):
            both, either, size_pred, size_truth = pm.counts(pred, truth)
            jaccards.append(1.0 if either == 0 else both / either)
            total = size_pred + size_truth
            dices.append(1.0 if total == 0 else 2 * both / total)

    return total_loss / len(samples), float(np.mean(dices)), float(np.mean(jaccards))


def find_lr(model, samples, config: TrainConfig, phase=1):
    ''' Range test on augmented training batches; returns (curve, picked lr) '''
    batches = list(pd.iterate_batches(samples, config.batch_size, config.seed, phase * 1000,
                                      config.augment))
    state = ps.AdamState(model.parameters())
    curve = ps.lr_range_test(model, batches, state, config.lr_start, config.lr_end,
                             config.lr_iters, config.lr_spacing, pm.loss_function(config.loss))
    return curve, ps.pick_lr(curve)


def run_training_procedure(model, train_samples, val_samples, config: TrainConfig, phase_offset=0):
    ''' Run both phases on ``model`` and return a :class:`ProcedureResult`.

    The model is left with the weights of its last epoch; ``best_state`` holds the best ones.

    Arguments:
        model: A :class:`pylesion.unet.UNetModel`.
        train_samples (list): Training samples, all of one size.
        val_samples (list): Validation samples.
        config (TrainConfig): Hyper-parameters.
        phase_offset (int, optional): Added to the phase numbers in the history.
    '''
    config.validate()
    if not train_samples:
        raise ContractError('training set is empty')
    loss = pm.loss_function(config.loss)

    history = History()
    curves = []
    best_state, best = None, None

    for index, policy in enumerate(PHASE_POLICIES):
        phase = phase_offset + index + 1
        model.set_trainable(policy)

        if config.lr_max is None:
            curve, lr_max = find_lr(model, train_samples, config, phase)
            logger.info('Phase %d: range test picked lr_max %.4g', phase, lr_max)
        else:
            curve, lr_max = None, config.lr_max
        curves.append(curve)

        per_epoch = -(-len(train_samples) // config.batch_size)
        spec = ps.ScheduleSpec(config.schedule, config.epochs * per_epoch, config.cut_frac,
                               config.ratio, lr_max).validate()
        state = ps.AdamState(model.parameters())
        step = 0

        for epoch in range(1, config.epochs + 1):
            losses = []
            try:
                batches = pd.iterate_batches(train_samples, config.batch_size, config.seed,
                                             phase * 1000 + epoch, config.augment)
                for images, masks in batches:
                    losses.append(ps.train_step(model, images, masks, state, spec.lr(step), loss))
                    step += 1
                val_loss, val_dice, val_jaccard = validate(model, val_samples, config.batch_size,
                                                           loss, config.threshold)
            except TrainingError as error:
                raise TrainingError('Phase {} epoch {}: {}'.format(phase, epoch, error),
                                    epoch=epoch, phase=phase) from error

            if not np.isfinite(val_loss):
                raise TrainingError('Phase {} epoch {}: validation loss is not finite'.format(
                    phase, epoch), epoch=epoch, phase=phase)

            record = HistoryRecord(epoch, phase, lr_max, float(np.mean(losses)), val_loss,
                                   val_dice, val_jaccard)
            history.append(record)
            logger.info('Phase %d epoch %d: train %.4f val %.4f dice %.4f jaccard %.4f', phase,
                        epoch, record.train_loss, val_loss, val_dice, val_jaccard)

            if best is None or val_dice > best.val_dice:
                best, best_state = record, model.state_arrays()
                logger.info('New best validation dice %.4f', val_dice)

    return ProcedureResult(history, best_state, best, curves)
