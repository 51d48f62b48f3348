''' Test Adam, the slanted triangular schedule, the range test and the learning rate pick '''
import csv
import math

import numpy as np
import pytest

import pylesion.layers as pl
import pylesion.metrics as pm
import pylesion.schedule as ps
import pylesion.tensor as pt
import pylesion.unet as pu
from pylesion.errors import ConfigError, ContractError, SelectionError, TrainingError


def scalar(value=1.0):
    return pl.Parameter(np.array([value]), 'p', precision='double')


def tiny_batches(count=2, seed=0):
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(count):
        images = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
        masks = (rng.uniform(size=(2, 1, 16, 16)) > 0.5).astype(np.float32)
        batches.append((images, masks))
    return batches


def test_adam_first_step_is_sign_step():
    ''' Bias correction makes the first update about lr in size '''
    param = scalar()
    state = ps.AdamState([param])

    ps.adam_step([param], [np.array([3.0])], state, 0.01)

    assert state.t == 1
    assert param.data[0] == pytest.approx(1 - 0.01, abs=1e-9)


def test_adam_zero_grad():
    ''' No movement, but the step count still advances '''
    param = scalar()
    state = ps.AdamState([param])

    ps.adam_step([param], [np.zeros(1)], state, 0.1)
    ps.adam_step([param], [None], state, 0.1)

    assert param.data[0] == 1.0
    assert state.t == 2


def test_adam_minimizes_square():
    ''' 100 steps on p^2 from 1 with lr 0.1 '''
    param = scalar()
    state = ps.AdamState([param])
    for _ in range(100):
        ps.adam_step([param], [2 * param.data], state, 0.1)

    assert abs(param.data[0]) < 0.1


def test_adam_skips_frozen():
    frozen, free = scalar(), pl.Parameter(np.array([1.0]), 'q', precision='double')
    frozen.trainable = False
    state = ps.AdamState([frozen, free])

    ps.adam_step([frozen, free], [np.ones(1), np.ones(1)], state, 0.1)

    assert frozen.data[0] == 1.0
    assert free.data[0] < 1.0


def test_adam_contracts():
    param = scalar()
    state = ps.AdamState([param])

    with pytest.raises(ContractError):
        ps.adam_step([param], [np.ones(1)], state, -0.1)
    with pytest.raises(TrainingError, match="'p'"):
        ps.adam_step([param], [np.array([np.nan])], state, 0.1)
    assert param.data[0] == 1.0


def test_adam_state_copy_is_independent():
    param = scalar()
    state = ps.AdamState([param])
    trial = state.copy()

    ps.adam_step([param], [np.ones(1)], trial, 0.1)

    assert state.t == 0
    assert state.m['p'][0] == 0.0
    assert trial.m['p'][0] != 0.0


def test_stlr_examples():
    spec = ps.ScheduleSpec(total_iterations=100, cut_frac=0.1, ratio=32, lr_max=0.01)

    assert spec.cut == 10
    assert ps.stlr(0, spec) == pytest.approx(0.01 / 32)
    assert ps.stlr(10, spec) == pytest.approx(0.01)
    assert ps.stlr(100, spec) == pytest.approx(3.125e-4)
    assert ps.stlr(5, spec) == pytest.approx(0.01 * (1 + 0.5 * 31) / 32)


@pytest.mark.parametrize('total', [2, 3, 7, 10, 100, 1234])
@pytest.mark.parametrize('cut_frac', [0.01, 0.1, 0.5, 0.9])
def test_stlr_shape(total, cut_frac):
    ''' Ends at lr_max / ratio, peaks at cut, rises then falls '''
    spec = ps.ScheduleSpec(total_iterations=total, cut_frac=cut_frac, ratio=32, lr_max=0.01)
    lrs = [ps.stlr(t, spec) for t in range(total + 1)]

    assert 1 <= spec.cut <= total - 1
    assert lrs[0] == pytest.approx(0.01 / 32)
    assert lrs[-1] == pytest.approx(0.01 / 32)
    assert max(lrs) == pytest.approx(0.01)
    assert lrs.index(max(lrs)) == spec.cut
    assert all(a < b for a, b in zip(lrs[:spec.cut], lrs[1:spec.cut + 1]))
    assert all(a > b for a, b in zip(lrs[spec.cut:-1], lrs[spec.cut + 1:]))


def closed_form_stlr(t, total, cut_frac, ratio, lr_max):
    cut = min(max(1, math.floor(total * cut_frac)), total - 1)
    p = t / cut if t < cut else 1 - (t - cut) / (total - cut)
    return lr_max * (1 + p * (ratio - 1)) / ratio


def test_stlr_random_configurations():
    ''' 100 drawn schedules agree with the closed form at every iteration '''
    rng = np.random.default_rng(0)
    for _ in range(100):
        total = int(rng.integers(2, 2001))
        cut_frac = float(rng.uniform(0.01, 0.99))
        ratio = float(rng.uniform(1.5, 100))
        lr_max = float(10 ** rng.uniform(-5, 0))
        spec = ps.ScheduleSpec(total_iterations=total, cut_frac=cut_frac, ratio=ratio,
                               lr_max=lr_max)

        for t in range(total + 1):
            expected = closed_form_stlr(t, total, cut_frac, ratio, lr_max)
            assert ps.stlr(t, spec) == pytest.approx(expected, abs=1e-12), (total, cut_frac, t)


def test_stlr_single_iteration():
    spec = ps.ScheduleSpec(total_iterations=1, lr_max=0.02)
    assert ps.stlr(1, spec) == pytest.approx(0.02)


def test_stlr_contracts():
    spec = ps.ScheduleSpec(total_iterations=10)
    with pytest.raises(ContractError):
        ps.stlr(11, spec)
    with pytest.raises(ConfigError, match='ratio'):
        ps.stlr(0, ps.ScheduleSpec(total_iterations=10, ratio=1))
    with pytest.raises(ConfigError, match='cut_frac'):
        ps.ScheduleSpec(cut_frac=1.5).validate()


def test_constant_schedule(tmp_path):
    spec = ps.ScheduleSpec(kind='constant', total_iterations=4, lr_max=0.5)
    path = ps.write_schedule_csv(spec, str(tmp_path / 'schedule.csv'))

    with open(path) as source:
        rows = list(csv.DictReader(source))
    assert [int(row['iteration']) for row in rows] == [0, 1, 2, 3, 4]
    assert {float(row['lr']) for row in rows} == {0.5}


def test_lr_sequence():
    assert ps.lr_sequence(0.1, 0.3, 3, 'linear') == pytest.approx([0.1, 0.2, 0.3])
    assert ps.lr_sequence(1e-3, 1e-1, 3) == pytest.approx([1e-3, 1e-2, 1e-1])

    with pytest.raises(ConfigError):
        ps.lr_sequence(0.1, 0.3, 3, 'cubic')
    with pytest.raises(ContractError):
        ps.lr_sequence(0.3, 0.1, 3)


def test_pick_lr_example():
    ''' The steepest descent against log(lr) is between 0.01 and 0.1 '''
    curve = [(0.001, 1.0), (0.01, 0.8), (0.1, 0.2), (1.0, 0.9)]
    assert ps.pick_lr(curve) == 0.1


def test_pick_lr_tie_goes_to_smaller_lr():
    ''' A symmetric V curve: both descending slopes are equal '''
    curve = [(1e-4, 3.0), (1e-3, 2.0), (1e-2, 1.0), (1e-1, 2.0), (1.0, 3.0)]
    assert ps.pick_lr(curve) == 1e-3


def test_pick_lr_needs_a_descent():
    with pytest.raises(SelectionError, match='widen'):
        ps.pick_lr([(0.001, 1.0), (0.01, 1.5), (0.1, 2.0)])


def test_lr_curve_csv(tmp_path):
    curve = ps.LrCurve()
    curve.append(0.001, 1.0, 1.0)
    curve.append(0.01, 0.5, 0.7)
    curve.append(0.1, 0.4, 0.5)
    with pytest.raises(ContractError):
        curve.append(0.05, 0.4, 0.5)

    loaded = ps.LrCurve.read_csv(curve.write_csv(str(tmp_path / 'curve.csv')))
    assert loaded.records == curve.records
    assert ps.pick_lr(loaded) == ps.pick_lr(curve)


def test_range_test_restores_model():
    ''' Parameters, statistics, gradients and the given optimizer state are left as they were '''
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    before = model.state_arrays()
    state = ps.AdamState(model.parameters())

    curve = ps.lr_range_test(model, tiny_batches(), state, 1e-5, 1e-1, num_iters=10)

    assert len(curve) >= 1
    assert curve.lrs[0] == pytest.approx(1e-5)
    assert all(a < b for a, b in zip(curve.lrs, curve.lrs[1:]))
    assert state.t == 0
    for name, value in model.state_arrays().items():
        assert np.array_equal(value, before[name]), name
    assert all(param.grad is None for param in model.parameters())


def test_range_test_smoothing():
    ''' The first smoothed value equals the raw one after bias correction '''
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    curve = ps.lr_range_test(model, tiny_batches(), ps.AdamState(model.parameters()), 1e-6, 1e-5,
                             num_iters=10, spacing='linear')

    lr, raw, smoothed = curve.records[0]
    assert smoothed == pytest.approx(raw, rel=1e-9)
    assert len(curve) == 10


def test_range_test_stops_on_explosion():
    ''' A loss that blows up at iteration k leaves at most k + 1 records '''
    calls = []

    def exploding(logits, targets):
        calls.append(1)
        if len(calls) > 4:
            return pt.Tensor(np.asarray(np.inf, dtype=logits.data.dtype))
        return pm.bce_with_logits(logits, targets)

    model = pu.build(pu.ModelConfig.desk(), seed=0)
    curve = ps.lr_range_test(model, tiny_batches(), ps.AdamState(model.parameters()), 1e-5, 1.0,
                             num_iters=20, loss=exploding)

    assert len(curve) <= 5
    assert all(math.isfinite(value) for record in curve.records for value in record)


def test_range_test_contracts():
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    state = ps.AdamState(model.parameters())

    with pytest.raises(ContractError, match='empty'):
        ps.lr_range_test(model, [], state, 1e-5, 1.0, num_iters=10)
    with pytest.raises(ContractError, match='10'):
        ps.lr_range_test(model, tiny_batches(), state, 1e-5, 1.0, num_iters=3)


def test_train_step_lowers_loss():
    ''' A few steps on one batch fit it better '''
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    state = ps.AdamState(model.parameters())
    images, masks = tiny_batches(1)[0]

    losses = [ps.train_step(model, images, masks, state, 1e-2) for _ in range(5)]

    assert state.t == 5
    assert losses[-1] < losses[0]


def test_unfreeze_all_except_batchnorm_step_keeps_norms():
    ''' One step leaves batch norm scale, shift and statistics bit-unchanged '''
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    model.set_trainable('unfreeze_all_except_batchnorm')
    norm_names = [name for name in model.state_arrays() if '.bn' in name or 'projection_bn' in name]
    before = model.state_arrays()
    images, masks = tiny_batches(1)[0]

    ps.train_step(model, images, masks, ps.AdamState(model.parameters()), 1e-2)

    after = model.state_arrays()
    assert norm_names
    for name in norm_names:
        assert np.array_equal(after[name], before[name]), name
    assert not np.array_equal(after['head.weight'], before['head.weight'])


def test_freeze_first_group_step():
    ''' The stem is left alone; the decoder moves '''
    model = pu.build(pu.ModelConfig.desk(), seed=0)
    model.set_trainable('freeze_first_group')
    before = model.state_arrays()
    images, masks = tiny_batches(1)[0]

    ps.train_step(model, images, masks, ps.AdamState(model.parameters()), 1e-2)

    after = model.state_arrays()
    assert np.array_equal(after['stem.conv.weight'], before['stem.conv.weight'])
    assert np.array_equal(after['stem.bn.running_mean'], before['stem.bn.running_mean'])
    assert not np.array_equal(after['decoder.0.0.conv.weight'], before['decoder.0.0.conv.weight'])
