# -*- coding: utf-8 -*-
''' Synthetic dermoscopy-like images with exactly known lesion masks.

Each image shows a textured skin-toned background with one darker lesion. The lesion outline is
an ellipse with a wavy, irregular radius; its area is drawn uniformly between 4% and 40% of the
image. Some images get a few dark hair-like strokes drawn over the image only, so the mask stays
the exact lesion support.

Example:

    .. code-block:: python

        import pylesion.synth as ps

        ps.synth_generate(250, 32, seed=7, out_dir='data/')
'''
import logging
import math
import os

import numpy as np
from scipy import ndimage

import pylesion.data as pd
from pylesion.errors import ContractError, StorageError

logger = logging.getLogger(__name__)

AREA_RANGE = (0.04, 0.40)
HAIR_PROBABILITY = 0.3


def _outline(rng, harmonics=4):
    ''' Radius multiplier as a function of the polar angle '''
    amplitudes = rng.uniform(0, 0.08, harmonics)
    phases = rng.uniform(0, 2 * math.pi, harmonics)

    def radius(angle):
        wave = sum(amp * np.cos((k + 2) * angle + phase)
                   for k, (amp, phase) in enumerate(zip(amplitudes, phases)))
        return 1 + wave

    return radius


def lesion_mask(size, rng, area_fraction):
    ''' Boolean (size, size) lesion support covering about ``area_fraction`` of the pixels '''
    radius = _outline(rng)
    stretch = rng.uniform(0.7, 1.0)
    axes = (math.sqrt(stretch), 1 / math.sqrt(stretch))
    tilt = rng.uniform(0, math.pi)

    angles = np.linspace(0, 2 * math.pi, 720, endpoint=False)
    unit_area = math.pi * float(np.mean(radius(angles) ** 2))
    target = area_fraction * size * size
    scale = math.sqrt(target / unit_area)

    reach = scale * float(radius(angles).max()) * max(axes)
    margin = min(reach, size / 2)
    center = rng.uniform(margin - 0.5, size - margin - 0.5, 2) if margin < size / 2 \
        else np.array([(size - 1) / 2, (size - 1) / 2])

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rows - center[0], cols - center[1]
    u = (dx * math.cos(tilt) + dy * math.sin(tilt)) / axes[0]
    v = (-dx * math.sin(tilt) + dy * math.cos(tilt)) / axes[1]
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    shape = radius(phi)

    # Refine the scale against the pixel grid, borders included.
    mask = rho <= scale * shape
    for _ in range(4):
        area = np.count_nonzero(mask)
        if area == 0 or abs(area - target) <= 0.5:
            break
        scale *= math.sqrt(target / area)
        mask = rho <= scale * shape

    return mask


def _texture(rng, size, sigma):
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    spread = noise.std()
    return noise / spread if spread > 0 else noise


def _hair(rng, image):
    size = image.shape[1]
    for _ in range(int(rng.integers(1, 4))):
        start, bend, end = rng.uniform(0, size - 1, (3, 2))
        steps = np.linspace(0, 1, 4 * size)[:, None]
        path = (1 - steps) ** 2 * start + 2 * (1 - steps) * steps * bend + steps ** 2 * end
        rows, cols = np.round(path).astype(int).T
        shade = rng.uniform(0.05, 0.2)
        image[:, rows, cols] = shade


def generate_sample(size, rng, sample_id='synth'):
    ''' One synthetic :class:`pylesion.data.Sample`; all randomness comes from ``rng`` '''
    if size < pd.MIN_SIZE:
        raise ContractError('synthetic images need size >= {}, got {}'.format(pd.MIN_SIZE, size))

    skin = np.array([0.86, 0.66, 0.55]) + rng.uniform(-0.06, 0.06, 3)
    image = skin[:, None, None] * (1 + 0.04 * _texture(rng, size, size / 10))[None]
    image += 0.015 * rng.standard_normal((3, size, size))

    mask = lesion_mask(size, rng, rng.uniform(*AREA_RANGE))

    darkness = rng.uniform(0.3, 0.55)
    lesion = skin * darkness * np.array([1.0, rng.uniform(0.7, 0.9), rng.uniform(0.6, 0.9)])
    mottling = 1 + 0.12 * _texture(rng, size, 1.5)
    image = np.where(mask[None], lesion[:, None, None] * mottling[None], image)
    image = ndimage.gaussian_filter(image, (0, 0.6, 0.6))

    if rng.uniform() < HAIR_PROBABILITY:
        _hair(rng, image)

    image = np.clip(image, 0, 1).astype(np.float32)
    return pd.Sample(sample_id, image, mask.astype(np.uint8)[None])


def synth_generate(n, size, seed, out_dir, overwrite=False):
    ''' Write ``n`` synthetic image/mask pairs to ``out_dir/images`` and ``out_dir/masks``.

    Image ``i`` depends only on ``seed`` and ``i``.

    Arguments:
        n (int): Number of pairs.
        size (int): Image extent, at least 16.
        seed (int): Generator seed.
        out_dir: Dataset directory.
        overwrite (bool, optional): Allow writing into a non-empty directory.

    Returns:
        A dict summary: ``n``, ``size``, ``mean_area`` (fraction of lesion pixels), ``ids``.
    '''
    if n < 1:
        raise ContractError('synth_generate: n must be positive, got {}'.format(n))
    if size < pd.MIN_SIZE:
        raise ContractError('synth_generate: size must be at least {}, got {}'.format(
            pd.MIN_SIZE, size))

    out_dir = str(out_dir)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not overwrite:
        raise StorageError('{} is not empty; refusing to overwrite'.format(out_dir))
    try:
        for subdir in ('images', 'masks'):
            os.makedirs(os.path.join(out_dir, subdir), exist_ok=True)
    except OSError as error:
        raise StorageError('Could not create {}: {}'.format(out_dir, error)) from error

    width = max(4, len(str(n - 1)))
    ids, areas = [], []
    for index in range(n):
        sample_id = 'synth_{:0{}d}'.format(index, width)
        sample = generate_sample(size, np.random.default_rng([seed, index]), sample_id)
        pd.save_sample(sample, *pd.dataset_paths(out_dir, sample_id))
        ids.append(sample_id)
        areas.append(float(sample.mask.mean()))

    summary = {'n': n, 'size': size, 'mean_area': sum(areas) / n, 'ids': ids}
    logger.info('Wrote %d synthetic samples of %dx%d to %s', n, size, size, out_dir)
    return summary
