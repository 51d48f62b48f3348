# -*- coding: utf-8 -*-
''' Per-fold training, progressive resizing, prediction, ensembling and evaluation.

Example:

    .. code-block:: python

        import pylesion.data as pd
        import pylesion.trainer as ptr
        import pylesion.unet as pu
        from pylesion.procedure import TrainConfig

        samples = pd.load_dataset('data/')
        split = pd.kfold_split([s.id for s in samples], k=3, seed=0)

        ckpt = ptr.progressive_train(0, split, samples, pu.ModelConfig.desk(), TrainConfig(),
                                     sizes=[32, 64], seed=0)
        ptr.save_checkpoint(ckpt.model, ckpt.manifest, 'fold0.ckpt', ckpt.history)

        ensemble = ptr.Ensemble.load(ptr.EnsembleSpec(['fold0.ckpt', 'fold1.ckpt', 'fold2.ckpt']))
        probs, mask = ensemble.predict(samples[0].image)
'''
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
import logging
import os

import numpy as np

import pylesion.archive as pa
import pylesion.data as pd
import pylesion.metrics as pm
import pylesion.procedure as pp
import pylesion.tensor as pt
import pylesion.unet as pu
from pylesion.errors import (ConfigError, ContractError, DataError, EnsembleError, LoadError,
                             ShapeError, StorageError)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    ''' A trained model with the facts of its training

    Attributes:
        model: The :class:`pylesion.unet.UNetModel`, holding the selected weights.
        manifest: Plain values: fold, seed, size, phase, epoch, val_dice, val_jaccard, the
            training hyper-parameters and, under ``data``, how the samples were prepared.
        history: The run's :class:`pylesion.procedure.History`, when known.
        path: Where it was loaded from or saved to.
    '''
    model: pu.UNetModel
    manifest: dict = field(default_factory=dict)
    history: pp.History = None
    path: str = None

    @property
    def size(self):
        return self.manifest.get('size')


def save_checkpoint(model, manifest, path, history=None):
    ''' Write the model's arrays, ``manifest`` and the optional history as a weight archive '''
    metadata = {'kind': 'checkpoint', 'checkpoint_version': CHECKPOINT_VERSION,
                'model_config': model.config.to_dict()}
    if history is not None:
        metadata['history'] = history.to_dicts()
    metadata.update({key: value for key, value in manifest.items() if key not in metadata})
    pa.write_archive(path, model.state_arrays(), metadata)
    logger.info('Saved checkpoint %s', path)
    return path


def load_checkpoint(path) -> Checkpoint:
    ''' Rebuild a model from a checkpoint archive '''
    metadata, arrays = pa.read_archive(path)

    if metadata.get('kind') != 'checkpoint':
        raise LoadError("{}: archive kind is '{}', not 'checkpoint'".format(
            path, metadata.get('kind')))
    version = metadata.get('checkpoint_version')
    if version != CHECKPOINT_VERSION:
        raise LoadError('{}: checkpoint version {} cannot be read by version {}'.format(
            path, version, CHECKPOINT_VERSION))

    try:
        model = pu.build(pu.ModelConfig.from_dict(metadata['model_config']))
        model.load_state_arrays(arrays, strict=True)
    except (KeyError, ConfigError, ContractError) as error:
        raise LoadError('{}: arrays do not fit the model in its manifest ({}): {}'.format(
            path, metadata.get('model_config'), error)) from error

    history = None
    if 'history' in metadata:
        try:
            history = pp.History.from_dicts(metadata['history'])
        except (KeyError, TypeError, ValueError) as error:
            raise LoadError('{}: unreadable history: {}'.format(path, error)) from error

    manifest = {key: value for key, value in metadata.items()
                if key not in ('kind', 'checkpoint_version', 'model_config', 'history')}
    return Checkpoint(model, manifest, history, path=str(path))


def recorded_color_balance(checkpoints):
    ''' The ``color_balance`` the checkpoints were trained with, None when none records it.

    Raises :class:`EnsembleError` when they disagree.
    '''
    values = {checkpoint.manifest.get('data', {}).get('color_balance')
              for checkpoint in checkpoints}
    values.discard(None)
    if len(values) > 1:
        raise EnsembleError('Ensemble members were trained with and without color balance')
    return values.pop() if values else None


# Training -----------------------------------------------------------------------------------------


def check_sizes(sizes, config: pu.ModelConfig):
    ''' Raise :class:`ShapeError` unless sizes increase and divide by the downsampling factor '''
    sizes = [int(size) for size in sizes]
    if not sizes:
        raise ContractError('at least one training size is needed')
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ContractError('sizes must increase strictly, got {}'.format(sizes))

    factor = config.downsample_factor
    bad = [size for size in sizes if size % factor or size < pd.MIN_SIZE]
    if bad:
        raise ShapeError('Size(s) {} are not multiples of {} (at least {})'.format(
            bad, factor, max(factor, pd.MIN_SIZE)))
    return sizes


def train_fold(fold, split, samples, model_config: pu.ModelConfig, config: pp.TrainConfig, seed=0,
               size=None, init_state=None, phase_offset=0, data=None) -> Checkpoint:
    ''' Train on every fold but ``fold`` and validate on ``fold``.

    Arguments:
        fold (int): Validation fold.
        split (FoldSplit): Fold assignment of the sample ids.
        samples (list): The samples of the split.
        model_config (ModelConfig): Architecture.
        config (TrainConfig): Hyper-parameters.
        seed (int, optional): Weight initialization seed.
        size (int, optional): Resize the samples first.
        init_state (dict, optional): Start from these model arrays instead of fresh weights.
        phase_offset (int, optional): Added to the history phase numbers.
        data (dict, optional): How ``samples`` were prepared, e.g. ``{'color_balance': True}``;
            stored in the manifest with the split and augmentation settings.

    Returns:
        A :class:`Checkpoint` with the weights of the epoch with the best validation Dice.
    '''
    split._check(fold)
    if size is not None:
        check_sizes([size], model_config)
        samples = [pd.resize(sample, size) for sample in samples]

    train, val = split.partition(samples, fold)
    model = pu.build(model_config, seed)
    if init_state is not None:
        model.load_state_arrays(init_state)

    logger.info('Fold %d: %d training and %d validation samples', fold, len(train), len(val))
    result = pp.run_training_procedure(model, train, val, config, phase_offset)
    model.load_state_arrays(result.best_state)

    manifest = {'fold': fold, 'seed': seed, 'train_seed': config.seed,
                'size': int(samples[0].size[0]), 'phase': result.best.phase,
                'epoch': result.best.epoch, 'val_dice': result.best.val_dice,
                'val_jaccard': result.best.val_jaccard,
                'train_config': {key: value for key, value in asdict(config).items()
                                 if key != 'augment'},
                'data': dict(data or {}, k=split.k, split_seed=split.seed,
                             augment=asdict(config.augment) if config.augment else None)}
    return Checkpoint(model, manifest, result.history)


def progressive_train(fold, split, samples, model_config: pu.ModelConfig, config: pp.TrainConfig,
                      sizes, seed=0, data=None) -> Checkpoint:
    ''' Train at each size in turn, starting every size from the best weights of the last.

    Returns:
        The best checkpoint at the largest size; its history covers every size. The manifest's
        ``size``, ``epoch``, ``val_dice`` and ``val_jaccard`` describe that largest size only;
        ``size_scores`` keeps the best epoch of every size.
    '''
    sizes = check_sizes(sizes, model_config)

    history = pp.History()
    scores = []
    checkpoint = None
    for index, size in enumerate(sizes):
        init = checkpoint.model.state_arrays() if checkpoint is not None else None
        checkpoint = train_fold(fold, split, samples, model_config, config, seed, size, init,
                                phase_offset=2 * index, data=data)
        history.extend(checkpoint.history)
        scores.append({key: checkpoint.manifest[key]
                       for key in ('size', 'phase', 'epoch', 'val_dice', 'val_jaccard')})

    checkpoint.history = history
    checkpoint.manifest['sizes'] = sizes
    checkpoint.manifest['size_scores'] = scores
    return checkpoint


def _fold_job(job):
    fold, split, samples, model_config, config, sizes, seed, out_dir, data = job
    checkpoint = progressive_train(fold, split, samples, model_config, config, sizes, seed, data)
    return write_fold(checkpoint, out_dir)


def fold_paths(out_dir, fold):
    ''' (checkpoint path, history CSV path) of a fold '''
    return (os.path.join(str(out_dir), 'fold{}.ckpt'.format(fold)),
            os.path.join(str(out_dir), 'fold{}_history.csv'.format(fold)))


def write_fold(checkpoint: Checkpoint, out_dir):
    ckpt_path, history_path = fold_paths(out_dir, checkpoint.manifest['fold'])
    save_checkpoint(checkpoint.model, checkpoint.manifest, ckpt_path, checkpoint.history)
    checkpoint.history.write_csv(history_path)
    checkpoint.path = ckpt_path
    return checkpoint


def train_folds(folds, split, samples, model_config, config, sizes, seed, out_dir, workers=1,
                data=None):
    ''' Train several folds, in worker processes when ``workers`` > 1; returns the checkpoints '''
    check_sizes(sizes, model_config)
    try:
        os.makedirs(str(out_dir), exist_ok=True)
    except OSError as error:
        raise StorageError('Could not create {}: {}'.format(out_dir, error)) from error

    jobs = [(fold, split, samples, model_config, config, sizes, seed, out_dir, data)
            for fold in folds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_fold_job, jobs))
    return [_fold_job(job) for job in jobs]


# Prediction ---------------------------------------------------------------------------------------


def _model_of(source):
    return source.model if isinstance(source, Checkpoint) else source


def predict(source, image):
    ''' Probability map (1, H, W) of one (3, H, W) image.

    Extents that do not divide by the model's downsampling factor are padded by reflection and
    the result is cropped back.

    Arguments:
        source: A :class:`Checkpoint` or a model.
        image: float array (3, H, W) in [0, 1].
    '''
    model = _model_of(source)
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError('predict expects an image of shape (3, H, W), got {}'.format(image.shape))

    height, width = image.shape[1:]
    factor = model.config.downsample_factor
    pad_h, pad_w = -height % factor, -width % factor
    if pad_h or pad_w:
        mode = 'reflect' if pad_h < height and pad_w < width else 'symmetric'
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)

    logits = model.forward(image[None], pt.Mode.EVAL)
    return pt.stable_sigmoid(logits.data[0, :, :height, :width])


@dataclass
class EnsembleSpec:
    ''' Checkpoints whose probability maps are averaged

    Attributes:
        paths: Checkpoint files, one per fold.
        threshold: Binarization threshold; ties count as lesion.
    '''
    paths: list
    threshold: float = 0.5

    def __post_init__(self):
        if not self.paths:
            raise ContractError('an ensemble needs at least one member')
        self.paths = sorted(str(path) for path in self.paths)


class Ensemble:
    ''' Loaded ensemble members, in sorted path order '''

    def __init__(self, members, threshold=0.5):
        if not members:
            raise ContractError('an ensemble needs at least one member')
        self.members = list(members)
        self.threshold = threshold

        channels = {_model_of(member).config.output_channels for member in self.members}
        if len(channels) > 1:
            raise EnsembleError('Ensemble members disagree on output channels: {}'.format(
                sorted(channels)))

    @classmethod
    def load(cls, spec: EnsembleSpec):
        return cls([load_checkpoint(path) for path in spec.paths], spec.threshold)

    def probabilities(self, image):
        ''' Mean of the member probability maps '''
        total = None
        for member in self.members:
            probs = predict(member, image).astype(np.float64)
            if total is None:
                total = probs.copy()
            elif probs.shape != total.shape:
                raise EnsembleError('Ensemble member outputs disagree in shape: {} and {}'.format(
                    total.shape, probs.shape))
            else:
                total += probs
        return total / len(self.members)

    def predict(self, image):
        ''' (probability map, binary mask) '''
        probs = self.probabilities(image)
        return probs, pm.binarize(probs, self.threshold)


def ensemble_predict(spec, image):
    ''' (mean probability map, binary mask) of an :class:`EnsembleSpec` or :class:`Ensemble` '''
    ensemble = spec if isinstance(spec, Ensemble) else Ensemble.load(spec)
    return ensemble.predict(image)


# Evaluation ---------------------------------------------------------------------------------------


def _mask_dir(directory):
    nested = os.path.join(str(directory), 'masks')
    return nested if os.path.isdir(nested) else str(directory)


def evaluate(pred_dir, truth_dir, cut=pm.DEFAULT_CUT) -> pm.MetricReport:
    ''' Score the masks in ``pred_dir`` against those in ``truth_dir`` (or its ``masks/``).

    Both sides must hold the same ids.
    '''
    pred_dir, truth_dir = _mask_dir(pred_dir), _mask_dir(truth_dir)
    pred_ids = pd.list_ids(pred_dir, None)
    truth_ids = pd.list_ids(truth_dir, None)

    missing_pred = sorted(set(truth_ids) - set(pred_ids))
    missing_truth = sorted(set(pred_ids) - set(truth_ids))
    if missing_pred or missing_truth:
        raise DataError('Prediction and truth ids differ: no prediction for {}, '
                        'no truth for {}'.format(missing_pred, missing_truth))

    pairs = []
    for sample_id in truth_ids:
        pred = pd.load_mask(os.path.join(pred_dir, sample_id + '.png'))
        truth = pd.load_mask(os.path.join(truth_dir, sample_id + '.png'))
        if pred.shape != truth.shape:
            raise DataError("'{}': prediction is {} but truth is {}".format(
                sample_id, pred.shape[1:], truth.shape[1:]))
        pairs.append((sample_id, pred, truth))

    return pm.MetricReport.from_masks(pairs, cut)


def evaluate_samples(predictor, samples, cut=pm.DEFAULT_CUT, threshold=0.5) -> pm.MetricReport:
    ''' Score a checkpoint, model or :class:`Ensemble` on samples held in memory '''
    pairs = []
    for sample in samples:
        if isinstance(predictor, Ensemble):
            _, mask = predictor.predict(sample.image)
        else:
            mask = pm.binarize(predict(predictor, sample.image), threshold)
        pairs.append((sample.id, mask, sample.mask))
    return pm.MetricReport.from_masks(pairs, cut)
