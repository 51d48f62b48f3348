# -*- coding: utf-8 -*-
''' Loading, preprocessing and augmenting lesion images and their masks.

A dataset is a directory holding ``images/<id>.png`` (8-bit RGB) and ``masks/<id>.png`` (8-bit
gray, 0 for background and 255 for lesion). Loaded samples hold the image as a float32 array of
shape (3, H, W) in [0, 1] and the mask as a uint8 array of shape (1, H, W) in {0, 1}.

Example:

    .. code-block:: python

        import pylesion.data as pd

        samples = pd.load_dataset('data/', size=32, balance=True)
        split = pd.kfold_split([s.id for s in samples], k=3, seed=0)

        train, val = split.partition(samples, fold=0)
        for images, masks in pd.iterate_batches(train, 8, seed=0, epoch=0,
                                                params=pd.AugmentParams()):
            ...

Note:

    Augmentation is a pure function of its seed. :func:`sample_seed` derives that seed from the
    run seed, the sample id and the epoch, so the order samples are visited in never matters.
'''
import csv
from dataclasses import dataclass, field
import hashlib
import logging
import math
import os

import numpy as np
import png
from scipy import ndimage

from pylesion.errors import ConfigError, ContractError, DataError, LoadError, StorageError

logger = logging.getLogger(__name__)

MIN_SIZE = 16


@dataclass
class Sample:
    ''' One image and its mask

    Attributes:
        id: Identifier, the file stem in the dataset directory.
        image: float32 array (3, H, W) in [0, 1].
        mask: uint8 array (1, H, W) in {0, 1}.
    '''
    id: str
    image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        if (self.image.ndim != 3 or self.mask.ndim != 3
                or self.image.shape[1:] != self.mask.shape[1:]):
            raise DataError("Sample '{}': image {} and mask {} disagree in size".format(
                self.id, self.image.shape, self.mask.shape))

    @property
    def size(self):
        return self.image.shape[1:]


# PNG ----------------------------------------------------------------------------------------------


def _read_png(path):
    ''' (H, W, planes) array and bit depth of a PNG '''
    try:
        width, height, rows, info = png.Reader(filename=str(path)).asDirect()
        pixels = np.array([np.asarray(row, dtype=np.uint16) for row in rows])
    except (OSError, png.Error) as error:
        raise StorageError('Could not read {}: {}'.format(path, error)) from error

    return pixels.reshape(height, width, info['planes']), info['bitdepth']


def _write_png(path, pixels, bitdepth=8):
    ''' Write an (H, W) gray or (H, W, 3) RGB array '''
    pixels = np.asarray(pixels)
    greyscale = pixels.ndim == 2
    height, width = pixels.shape[:2]
    writer = png.Writer(width=width, height=height, greyscale=greyscale, bitdepth=bitdepth)
    try:
        with open(path, 'wb') as out:
            writer.write(out, [row.tolist() for row in pixels.reshape(height, -1)])
    except OSError as error:
        raise StorageError('Could not write {}: {}'.format(path, error)) from error
    return path


def load_image(path):
    ''' float32 array (3, H, W) in [0, 1]; gray images are repeated, alpha is dropped '''
    pixels, bitdepth = _read_png(path)
    if pixels.shape[2] in (1, 2):
        pixels = np.repeat(pixels[:, :, :1], 3, axis=2)
    pixels = pixels[:, :, :3]
    return (pixels.transpose(2, 0, 1) / float(2 ** bitdepth - 1)).astype(np.float32)


def save_image(path, image):
    ''' Write a (3, H, W) array in [0, 1] as 8-bit RGB '''
    pixels = np.round(np.clip(np.asarray(image), 0, 1) * 255).astype(np.uint8)
    return _write_png(path, pixels.transpose(1, 2, 0))


def load_mask(path):
    ''' uint8 array (1, H, W) in {0, 1}.

    255 maps to 1 and 0 to 0. Any other value maps to 1 when it is at least 128, with a warning.
    '''
    pixels, bitdepth = _read_png(path)
    values = pixels[:, :, 0]
    if bitdepth != 8:
        values = np.round(values * (255 / (2 ** bitdepth - 1))).astype(np.uint16)

    stray = np.count_nonzero((values != 0) & (values != 255))
    if stray:
        logger.warning('%s: %d mask pixels are neither 0 nor 255; thresholded at 128', path, stray)

    return (values >= 128).astype(np.uint8)[None]


def save_mask(path, mask):
    ''' Write a binary mask of shape (H, W) or (1, H, W) as 8-bit gray {0, 255} '''
    mask = np.asarray(mask)
    mask = mask[0] if mask.ndim == 3 else mask
    return _write_png(path, np.where(mask != 0, 255, 0).astype(np.uint8))


def save_probability_map(path, probs):
    ''' Write probabilities in [0, 1] as 16-bit gray, value ``round(p * 65535)`` '''
    probs = np.asarray(probs, dtype=np.float64)
    probs = probs[0] if probs.ndim == 3 else probs
    return _write_png(path, np.round(np.clip(probs, 0, 1) * 65535).astype(np.uint16), bitdepth=16)


def load_probability_map(path):
    ''' float64 array (1, H, W) read back from :func:`save_probability_map` '''
    pixels, bitdepth = _read_png(path)
    return (pixels[:, :, 0] / float(2 ** bitdepth - 1))[None]


def load_sample(image_path, mask_path, sample_id=None):
    ''' Read an image and its mask into a :class:`Sample` '''
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if image.shape[1:] != mask.shape[1:]:
        raise DataError('{} is {}x{} but {} is {}x{}'.format(
            image_path, image.shape[1], image.shape[2], mask_path, mask.shape[1], mask.shape[2]))

    sample_id = sample_id or os.path.splitext(os.path.basename(str(image_path)))[0]
    return Sample(sample_id, image, mask)


def save_sample(sample: Sample, image_path, mask_path):
    save_image(image_path, sample.image)
    save_mask(mask_path, sample.mask)


def dataset_paths(directory, sample_id):
    return (os.path.join(str(directory), 'images', sample_id + '.png'),
            os.path.join(str(directory), 'masks', sample_id + '.png'))


def list_ids(directory, subdir='images'):
    ''' Sorted ids of the PNG files in ``directory/subdir`` '''
    path = os.path.join(str(directory), subdir) if subdir else str(directory)
    try:
        names = os.listdir(path)
    except OSError as error:
        raise StorageError('Could not list {}: {}'.format(path, error)) from error
    return sorted(os.path.splitext(name)[0] for name in names if name.lower().endswith('.png'))


def load_dataset(directory, size=None, balance=False, ids=None):
    ''' Load every sample of a dataset directory, sorted by id.

    Arguments:
        directory: Holds ``images/`` and ``masks/``.
        size (int, optional): Resize every sample to ``size`` x ``size``.
        balance (bool, optional): Apply :func:`color_balance` to each image.
        ids (list, optional): Only load these ids.
    '''
    image_ids = list_ids(directory, 'images')
    mask_ids = set(list_ids(directory, 'masks'))

    missing = [sample_id for sample_id in image_ids if sample_id not in mask_ids]
    if missing:
        raise DataError('{}: no mask for image id(s) {}'.format(directory, missing))

    if ids is not None:
        unknown = sorted(set(ids) - set(image_ids))
        if unknown:
            raise DataError('{}: unknown id(s) {}'.format(directory, unknown))
        image_ids = sorted(ids)

    samples = []
    for sample_id in image_ids:
        sample = load_sample(*dataset_paths(directory, sample_id), sample_id=sample_id)
        if size is not None:
            sample = resize(sample, size)
        if balance:
            sample = Sample(sample.id, color_balance(sample.image), sample.mask)
        samples.append(sample)

    logger.info('Loaded %d samples from %s', len(samples), directory)
    return samples


# Preprocessing ------------------------------------------------------------------------------------


def _extents(size):
    return (size, size) if isinstance(size, int) else tuple(size)


def resize_image(image, size):
    ''' Bilinear resampling of a (C, H, W) array, pixel centers aligned '''
    out_h, out_w = _extents(size)
    in_h, in_w = image.shape[1:]
    rows = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    grid = np.meshgrid(rows, cols, indexing='ij')

    out = np.empty((image.shape[0], out_h, out_w), dtype=image.dtype)
    for channel in range(image.shape[0]):
        out[channel] = ndimage.map_coordinates(image[channel], grid, order=1, mode='nearest')
    return out


def resize_mask(mask, size):
    ''' Nearest neighbour resampling.

    Output pixel ``d`` takes source pixel ``floor((d + 0.5) * in / out)``.
    '''
    out_h, out_w = _extents(size)
    in_h, in_w = mask.shape[1:]
    rows = ((2 * np.arange(out_h) + 1) * in_h) // (2 * out_h)
    cols = ((2 * np.arange(out_w) + 1) * in_w) // (2 * out_w)
    return mask[:, rows[:, None], cols[None, :]]


def resize(sample: Sample, size) -> Sample:
    ''' Resample a sample to ``size`` x ``size`` (or an (H, W) pair) '''
    extents = _extents(size)
    if min(extents) < MIN_SIZE:
        raise ContractError('resize: size must be at least {}, got {}'.format(MIN_SIZE, size))
    if tuple(sample.size) == extents:
        return Sample(sample.id, sample.image.copy(), sample.mask.copy())

    return Sample(sample.id, resize_image(sample.image, extents), resize_mask(sample.mask, extents))


def color_balance(image):
    ''' Gray-world balance: scale each channel so its mean is the mean of the channel means '''
    image = np.asarray(image)
    means = image.reshape(image.shape[0], -1).mean(axis=1).astype(np.float64)
    target = means.mean()

    scales = np.ones_like(means)
    for channel, value in enumerate(means):
        if value == 0:
            logger.warning('Color balance: channel %d has mean 0 and is left unscaled', channel)
        else:
            scales[channel] = target / value

    return np.clip(image * scales[:, None, None], 0, 1).astype(image.dtype)


# Augmentation -------------------------------------------------------------------------------------


@dataclass
class AugmentParams:
    ''' Random transformations applied to training samples

    Attributes:
        max_rotation_deg: Rotation angle drawn uniformly in [-max, max].
        max_zoom: Zoom drawn uniformly in [1, max].
        lighting_brightness: Brightness offset drawn uniformly in [-value, value].
        lighting_contrast: Contrast change drawn uniformly in [-value, value].
        dihedral, rotate, zoom, lighting: Enable each transformation.
    '''
    max_rotation_deg: float = 44.0
    max_zoom: float = 1.05
    lighting_brightness: float = 0.05
    lighting_contrast: float = 0.05
    dihedral: bool = True
    rotate: bool = True
    zoom: bool = True
    lighting: bool = True

    @classmethod
    def disabled(cls):
        return cls(dihedral=False, rotate=False, zoom=False, lighting=False)

    def validate(self):
        if not 0 <= self.max_rotation_deg < 180:
            raise ConfigError('max_rotation_deg: must lie in [0, 180), got {}'.format(
                self.max_rotation_deg))
        if self.max_zoom < 1:
            raise ConfigError('max_zoom: must be at least 1, got {}'.format(self.max_zoom))
        if self.lighting_brightness < 0 or self.lighting_contrast < 0:
            raise ConfigError('lighting_brightness and lighting_contrast must not be negative')
        return self


def dihedral(array, element):
    ''' Apply one of the 8 symmetries of the square to the last two axes.

    Elements 0-3 rotate by ``element`` quarter turns; 4-7 rotate the same way, then flip
    left-right.
    '''
    if not 0 <= element < 8:
        raise ContractError('dihedral element must be in 0..7, got {}'.format(element))
    out = np.rot90(array, element % 4, axes=(-2, -1))
    if element >= 4:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def inverse_dihedral(array, element):
    ''' Undo :func:`dihedral` '''
    if not 0 <= element < 8:
        raise ContractError('dihedral element must be in 0..7, got {}'.format(element))
    out = np.flip(array, axis=-1) if element >= 4 else array
    return np.ascontiguousarray(np.rot90(out, -(element % 4), axes=(-2, -1)))


def _affine(array, angle_deg, zoom, order):
    height, width = array.shape[1:]
    theta = math.radians(angle_deg)
    matrix = np.array([[math.cos(theta), -math.sin(theta)],
                       [math.sin(theta), math.cos(theta)]]) / zoom
    center = np.array([(height - 1) / 2, (width - 1) / 2])
    offset = center - matrix @ center

    out = np.empty_like(array)
    for channel in range(array.shape[0]):
        out[channel] = ndimage.affine_transform(array[channel], matrix, offset, order=order,
                                                mode='mirror')
    return out


def rotate_zoom(sample: Sample, angle_deg=0.0, zoom=1.0) -> Sample:
    ''' Rotate about the center and zoom in, in one resampling pass with mirrored borders.

    The image is interpolated bilinearly, the mask by nearest neighbour.
    '''
    if angle_deg == 0 and zoom == 1:
        return Sample(sample.id, sample.image.copy(), sample.mask.copy())
    return Sample(sample.id, _affine(sample.image, angle_deg, zoom, 1),
                  _affine(sample.mask, angle_deg, zoom, 0))


def augment(sample: Sample, params: AugmentParams, rng_seed) -> Sample:
    ''' Random dihedral element, rotation, zoom and lighting change, all drawn from ``rng_seed`` '''
    rng = np.random.default_rng(rng_seed)
    element = int(rng.integers(8))
    angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    zoom = rng.uniform(1, params.max_zoom)
    brightness = rng.uniform(-params.lighting_brightness, params.lighting_brightness)
    contrast = rng.uniform(-params.lighting_contrast, params.lighting_contrast)

    image, mask = sample.image, sample.mask
    if params.dihedral:
        image, mask = dihedral(image, element), dihedral(mask, element)

    out = rotate_zoom(Sample(sample.id, image, mask), angle if params.rotate else 0.0,
                      zoom if params.zoom else 1.0)

    if params.lighting:
        mean = out.image.mean()
        lit = (out.image - mean) * (1 + contrast) + mean + brightness
        out = Sample(out.id, np.clip(lit, 0, 1).astype(out.image.dtype), out.mask)

    return out


def sample_seed(global_seed, sample_id, epoch):
    ''' Augmentation seed of one sample in one epoch '''
    key = '{}:{}:{}'.format(global_seed, sample_id, epoch).encode('utf-8')
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), 'little') >> 1


def stack(samples):
    ''' (images (N, 3, H, W), masks (N, 1, H, W)) of a list of samples '''
    if not samples:
        raise ContractError('Cannot stack an empty list of samples')
    return (np.stack([sample.image for sample in samples]),
            np.stack([sample.mask for sample in samples]).astype(np.float32))


def iterate_batches(samples, batch_size, seed=0, epoch=0, params=None, shuffle=True):
    ''' Yield (images, masks) mini-batches for one epoch.

    Arguments:
        samples (list): Samples of equal size.
        batch_size (int): Samples per batch; the last batch may be smaller.
        seed (int, optional): Run seed; with ``epoch`` it fixes the order and the augmentations.
        epoch (int, optional): Epoch counter.
        params (AugmentParams, optional): Augment each sample when given.
        shuffle (bool, optional): Visit the samples in a seeded random order.
    '''
    if not samples:
        raise ContractError('iterate_batches: no samples')
    if batch_size < 1:
        raise ContractError('iterate_batches: batch size must be positive, got {}'.format(
            batch_size))

    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(samples))

    for start in range(0, len(order), batch_size):
        batch = [samples[index] for index in order[start:start + batch_size]]
        if params is not None:
            batch = [augment(sample, params, sample_seed(seed, sample.id, epoch))
                     for sample in batch]
        yield stack(batch)


# Folds --------------------------------------------------------------------------------------------


@dataclass
class FoldSplit:
    ''' Assignment of sample ids to k folds

    Attributes:
        k: Number of folds.
        assignment: Sample id to fold index.
        seed: Seed of the shuffle, None when read from a file.
    '''
    k: int
    assignment: dict
    seed: int = None

    def validation_ids(self, fold):
        self._check(fold)
        return sorted(sample_id for sample_id, index in self.assignment.items() if index == fold)

    def training_ids(self, fold):
        self._check(fold)
        return sorted(sample_id for sample_id, index in self.assignment.items() if index != fold)

    def sizes(self):
        return [list(self.assignment.values()).count(fold) for fold in range(self.k)]

    def partition(self, samples, fold):
        ''' (training samples, validation samples) of ``fold`` '''
        self._check(fold)
        unknown = [sample.id for sample in samples if sample.id not in self.assignment]
        if unknown:
            raise DataError('Sample id(s) {} are not in the split'.format(unknown))
        return ([sample for sample in samples if self.assignment[sample.id] != fold],
                [sample for sample in samples if self.assignment[sample.id] == fold])

    def _check(self, fold):
        if not 0 <= fold < self.k:
            raise ContractError('Fold {} does not exist; k = {}'.format(fold, self.k))


def kfold_split(ids, k=3, seed=0) -> FoldSplit:
    ''' Shuffle ``ids`` with ``seed`` and deal them round-robin into ``k`` folds '''
    if k < 2:
        raise ContractError('kfold_split: k must be at least 2, got {}'.format(k))
    ids = sorted(ids)
    if len(set(ids)) != len(ids):
        raise ContractError('kfold_split: ids must be unique')
    if len(ids) < k:
        raise ContractError('kfold_split: {} ids cannot fill {} folds'.format(len(ids), k))

    order = np.random.default_rng(seed).permutation(len(ids))
    assignment = {ids[index]: position % k for position, index in enumerate(order)}
    return FoldSplit(k, assignment, seed)


def save_split(split: FoldSplit, path):
    ''' CSV ``id,fold,k`` sorted by id '''
    try:
        with open(path, 'w', newline='') as out:
            writer = csv.writer(out)
            writer.writerow(['id', 'fold', 'k'])
            for sample_id in sorted(split.assignment):
                writer.writerow([sample_id, split.assignment[sample_id], split.k])
    except OSError as error:
        raise StorageError('Could not write {}: {}'.format(path, error)) from error
    return path


def load_split(path) -> FoldSplit:
    ''' Read a split written by :func:`save_split`.

    Files without a ``k`` column take k from the folds present. Either way every fold in
    ``0..k-1`` must hold at least one id, or :class:`LoadError` is raised.
    '''
    try:
        with open(path, newline='') as source:
            rows = list(csv.DictReader(source))
        assignment = {row['id']: int(row['fold']) for row in rows}
        ks = {int(row['k']) for row in rows if row.get('k') is not None}
    except OSError as error:
        raise StorageError('Could not read {}: {}'.format(path, error)) from error
    except (KeyError, ValueError) as error:
        raise DataError('{} is not a split file: {}'.format(path, error)) from error

    if not assignment:
        raise DataError('{} lists no ids'.format(path))
    if len(ks) > 1:
        raise LoadError('{}: rows disagree on k: {}'.format(path, sorted(ks)))
    k = ks.pop() if ks else max(assignment.values()) + 1

    folds = set(assignment.values())
    if k < 2 or folds != set(range(k)):
        raise LoadError('{}: folds {} do not cover 0..{} exactly'.format(
            path, sorted(folds), k - 1))
    return FoldSplit(k, assignment)
