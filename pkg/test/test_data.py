''' Test PNG I/O, resizing, color balance, augmentation, batching and fold splits '''
import logging
import os

import numpy as np
import pytest

import pylesion.data as pd
from pylesion.errors import ConfigError, ContractError, DataError, LoadError, StorageError


def disc_sample(size=32, radius=None, sample_id='disc'):
    ''' A centered disc on a gradient background '''
    radius = radius or size // 4
    rows, cols = np.mgrid[:size, :size]
    mask = ((rows - (size - 1) / 2) ** 2 + (cols - (size - 1) / 2) ** 2 <= radius ** 2)
    image = np.stack([rows / size, cols / size, mask * 0.5 + 0.25]).astype(np.float32)
    return pd.Sample(sample_id, image, mask[None].astype(np.uint8))


def write_dataset(directory, samples):
    os.makedirs(os.path.join(str(directory), 'images'), exist_ok=True)
    os.makedirs(os.path.join(str(directory), 'masks'), exist_ok=True)
    for sample in samples:
        pd.save_sample(sample, *pd.dataset_paths(directory, sample.id))


def test_sample_round_trip(tmp_path):
    ''' Images on the 8-bit grid and binary masks come back bit-identical '''
    rng = np.random.default_rng(0)
    image = (rng.integers(0, 256, (3, 5, 7)) / 255.0).astype(np.float32)
    mask = rng.integers(0, 2, (1, 5, 7)).astype(np.uint8)
    sample = pd.Sample('a', image, mask)
    write_dataset(tmp_path, [sample])

    loaded = pd.load_sample(*pd.dataset_paths(tmp_path, 'a'))

    assert loaded.id == 'a'
    assert np.array_equal(loaded.image, image)
    assert np.array_equal(loaded.mask, mask)
    assert loaded.image.dtype == np.float32 and loaded.mask.dtype == np.uint8


def test_mask_values(tmp_path, caplog):
    ''' 255 is lesion; other values threshold at 128 with one warning '''
    path = str(tmp_path / 'mask.png')
    pd._write_png(path, np.full((2, 2), 255, dtype=np.uint8))
    assert pd.load_mask(path).tolist() == [[[1, 1], [1, 1]]]
    assert not caplog.records

    pd._write_png(path, np.array([[0, 200], [100, 255]], dtype=np.uint8))
    with caplog.at_level(logging.WARNING, logger='pylesion.data'):
        assert pd.load_mask(path).tolist() == [[[0, 1], [0, 1]]]
    assert len(caplog.records) == 1


def test_probability_map_round_trip(tmp_path):
    probs = np.random.default_rng(0).uniform(size=(1, 6, 6))
    path = pd.save_probability_map(str(tmp_path / 'probs.png'), probs)

    assert np.abs(pd.load_probability_map(path) - probs).max() <= 0.5 / 65535 + 1e-12


def test_load_dataset(tmp_path):
    ''' Sorted by id, resized and balanced on request '''
    write_dataset(tmp_path, [disc_sample(32, sample_id='b'), disc_sample(32, sample_id='a')])

    samples = pd.load_dataset(tmp_path, size=16, balance=True)

    assert [sample.id for sample in samples] == ['a', 'b']
    assert samples[0].size == (16, 16)
    assert pd.list_ids(tmp_path) == ['a', 'b']
    assert [sample.id for sample in pd.load_dataset(tmp_path, ids=['b'])] == ['b']


def test_load_dataset_errors(tmp_path):
    ''' Missing masks and mismatched extents name the culprits '''
    write_dataset(tmp_path, [disc_sample(16, sample_id='a')])
    with pytest.raises(DataError, match='zzz'):
        pd.load_dataset(tmp_path, ids=['zzz'])

    pd.save_image(os.path.join(str(tmp_path), 'images', 'b.png'), np.zeros((3, 16, 16)))
    with pytest.raises(DataError, match="'b'"):
        pd.load_dataset(tmp_path)

    pd.save_mask(os.path.join(str(tmp_path), 'masks', 'b.png'), np.zeros((1, 8, 8)))
    with pytest.raises(DataError, match='b.png'):
        pd.load_sample(*pd.dataset_paths(tmp_path, 'b'))


def test_resize_identity():
    sample = disc_sample(32)
    same = pd.resize(sample, 32)

    assert np.array_equal(same.image, sample.image)
    assert np.array_equal(same.mask, sample.mask)
    assert same.image is not sample.image


@pytest.mark.parametrize('size', [16, 20, 48, 64])
def test_resize_keeps_mask_binary(size):
    resized = pd.resize(disc_sample(32), size)

    assert resized.size == (size, size)
    assert set(np.unique(resized.mask)) <= {0, 1}
    assert resized.image.dtype == np.float32


def test_resize_mask_mapping():
    ''' Output pixel d takes source pixel floor((d + 0.5) * 4 / 2) = 2d + 1 '''
    rows, cols = np.mgrid[:4, :4]
    checkerboard = ((rows + cols) % 2).astype(np.uint8)[None]
    checkerboard[0, 1, 3] = 1 - checkerboard[0, 1, 3]

    out = pd.resize_mask(checkerboard, 2)
    assert np.array_equal(out, checkerboard[:, 1::2, 1::2])
    assert out[0, 0, 1] == checkerboard[0, 1, 3]


def test_resize_too_small():
    with pytest.raises(ContractError):
        pd.resize(disc_sample(32), 8)


def test_color_balance():
    ''' Channel means move to the mean of the means '''
    image = np.stack([np.full((4, 4), 0.2), np.full((4, 4), 0.4), np.full((4, 4), 0.6)])
    balanced = pd.color_balance(image)
    assert np.allclose(balanced.reshape(3, -1).mean(axis=1), 0.4)

    gray = np.repeat(np.random.default_rng(0).uniform(size=(1, 4, 4)), 3, axis=0)
    assert np.allclose(pd.color_balance(gray), gray, atol=1e-6)


def test_color_balance_dark_channel(caplog):
    image = np.stack([np.zeros((2, 2)), np.full((2, 2), 0.2), np.full((2, 2), 0.4)])
    with caplog.at_level(logging.WARNING, logger='pylesion.data'):
        balanced = pd.color_balance(image)

    assert np.array_equal(balanced[0], image[0])
    assert 'channel 0' in caplog.text


def test_augment_disabled_is_identity():
    sample = disc_sample(32)
    out = pd.augment(sample, pd.AugmentParams.disabled(), 123)

    assert np.array_equal(out.image, sample.image)
    assert np.array_equal(out.mask, sample.mask)


@pytest.mark.parametrize('element', range(8))
def test_dihedral_inverse(element):
    mask = (np.random.default_rng(element).uniform(size=(1, 5, 5)) > 0.5).astype(np.uint8)
    assert np.array_equal(pd.inverse_dihedral(pd.dihedral(mask, element), element), mask)


def test_dihedral_elements_differ():
    ''' The 8 elements give 8 different images of an asymmetric pattern '''
    pattern = np.arange(9).reshape(1, 3, 3)
    images = {pd.dihedral(pattern, element).tobytes() for element in range(8)}
    assert len(images) == 8


@pytest.mark.parametrize('angle', [10.0, 30.0, 44.0])
def test_rotation_keeps_area(angle):
    ''' Rotating there and back keeps the mask area within 2% '''
    sample = disc_sample(64, radius=16)
    back = pd.rotate_zoom(pd.rotate_zoom(sample, angle), -angle)

    area, after = sample.mask.sum(), back.mask.sum()
    assert abs(int(after) - int(area)) <= 0.02 * area
    assert set(np.unique(back.mask)) <= {0, 1}


def test_augment_is_deterministic():
    ''' A fixed seed gives the same result; masks stay binary and aligned '''
    sample = disc_sample(32)
    params = pd.AugmentParams()

    first, second = pd.augment(sample, params, 7), pd.augment(sample, params, 7)
    other = pd.augment(sample, params, 8)

    assert np.array_equal(first.image, second.image)
    assert np.array_equal(first.mask, second.mask)
    assert not np.array_equal(first.image, other.image)
    assert first.image.shape[1:] == first.mask.shape[1:] == (32, 32)
    assert set(np.unique(first.mask)) <= {0, 1}
    assert first.image.min() >= 0 and first.image.max() <= 1


def test_augment_params_validate():
    with pytest.raises(ConfigError, match='max_zoom'):
        pd.AugmentParams(max_zoom=0.5).validate()


def test_sample_seed():
    assert pd.sample_seed(0, 'a', 1) == pd.sample_seed(0, 'a', 1)
    assert pd.sample_seed(0, 'a', 1) != pd.sample_seed(0, 'a', 2)
    assert pd.sample_seed(0, 'a', 1) != pd.sample_seed(0, 'b', 1)
    assert 0 <= pd.sample_seed(5, 'x', 3) < 2 ** 63


def test_iterate_batches():
    ''' Batch sizes, seeded order, and independence of augmentation from visiting order '''
    samples = [disc_sample(16, sample_id='s{}'.format(index)) for index in range(10)]

    batches = list(pd.iterate_batches(samples, 4, seed=1, epoch=2))
    assert [len(images) for images, _ in batches] == [4, 4, 2]
    assert batches[0][0].shape == (4, 3, 16, 16)
    assert batches[0][1].dtype == np.float32

    again = list(pd.iterate_batches(samples, 4, seed=1, epoch=2))
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(batches, again))

    params = pd.AugmentParams()
    one = np.concatenate([images for images, _ in pd.iterate_batches(samples, 10, 1, 2, params)])
    many = np.concatenate([images for images, _ in pd.iterate_batches(samples, 3, 1, 2, params)])
    assert np.array_equal(one, many)

    with pytest.raises(ContractError):
        list(pd.iterate_batches([], 4))


def test_kfold_sizes():
    ids = ['id{}'.format(index) for index in range(10)]

    assert pd.kfold_split(ids[:9], 3).sizes() == [3, 3, 3]
    assert sorted(pd.kfold_split(ids, 3).sizes()) == [3, 3, 4]


def test_kfold_properties():
    ''' Deterministic, disjoint validation sets covering every id '''
    ids = ['id{}'.format(index) for index in range(20)]
    split = pd.kfold_split(ids, 3, seed=4)

    assert pd.kfold_split(list(reversed(ids)), 3, seed=4).assignment == split.assignment
    validation = [set(split.validation_ids(fold)) for fold in range(3)]
    assert set.union(*validation) == set(ids)
    assert sum(len(fold) for fold in validation) == len(ids)
    for fold in range(3):
        assert set(split.training_ids(fold)) == set(ids) - validation[fold]


def test_kfold_errors():
    with pytest.raises(ContractError):
        pd.kfold_split(['a', 'b', 'c'], 1)
    with pytest.raises(ContractError):
        pd.kfold_split(['a', 'b'], 3)
    with pytest.raises(ContractError):
        pd.kfold_split(['a', 'b', 'c'], 3).validation_ids(3)


def test_split_file(tmp_path):
    split = pd.kfold_split(['a', 'b', 'c', 'd'], 2, seed=1)
    loaded = pd.load_split(pd.save_split(split, str(tmp_path / 'split.csv')))

    assert loaded.assignment == split.assignment
    assert loaded.k == 2


def test_split_file_records_k(tmp_path):
    ''' k is written to the file, so an empty last fold is not mistaken for fewer folds '''
    path = pd.save_split(pd.kfold_split('abcdef', 3, seed=2), str(tmp_path / 'split.csv'))

    with open(path) as source:
        lines = source.read().splitlines()
    assert lines[0] == 'id,fold,k'
    assert all(line.endswith(',3') for line in lines[1:])


@pytest.mark.parametrize('text', [
    'id,fold,k\na,0,3\nb,1,3\n',
    'id,fold,k\na,0,2\nb,1,3\nc,2,3\n',
    'id,fold\na,0\nb,2\n',
    'id,fold\na,0\nb,0\n',
    'id,fold,k\na,0,2\nb,-1,2\n',
])
def test_split_file_folds_must_cover_k(tmp_path, text):
    path = tmp_path / 'split.csv'
    path.write_text(text)

    with pytest.raises(LoadError):
        pd.load_split(str(path))


def test_split_file_without_k(tmp_path):
    ''' Files with only id and fold still load when their folds run from 0 '''
    path = tmp_path / 'split.csv'
    path.write_text('id,fold\na,1\nb,0\nc,1\n')

    split = pd.load_split(str(path))
    assert split.k == 2
    assert split.validation_ids(1) == ['a', 'c']


def test_split_file_unreadable(tmp_path):
    path = tmp_path / 'split.csv'
    path.write_text('name,group\na,0\n')

    with pytest.raises(DataError):
        pd.load_split(str(path))
    with pytest.raises(StorageError):
        pd.load_split(str(tmp_path / 'absent.csv'))


def test_partition():
    samples = [disc_sample(16, sample_id=name) for name in 'abcdef']
    split = pd.kfold_split('abcdef', 3)

    train, val = split.partition(samples, 1)
    assert sorted(sample.id for sample in val) == split.validation_ids(1)
    assert len(train) + len(val) == 6

    with pytest.raises(DataError):
        split.partition(samples + [disc_sample(16, sample_id='z')], 0)
