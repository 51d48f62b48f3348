''' Test pylesion.tensor: the ops, the tape and the gradient checker '''
import numpy as np
import pytest

import pylesion.tensor as pt
from pylesion.errors import ContractError, ShapeError, TrainingError

SEEDS = range(20)


def rand(rng, *shape):
    ''' Double precision leaf tensor of standard normal values '''
    return pt.Tensor(rng.standard_normal(shape), requires_grad=True, precision='double')


@pytest.mark.parametrize('seed', SEEDS)
def test_elementwise_grads(seed):
    ''' add, mul, relu, sigmoid and mean pass the finite difference check '''
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 3, 4, 4), rand(rng, 2, 3, 4, 4)

    def func(x, y):
        return pt.mean(pt.sigmoid(pt.mul(pt.relu(pt.add(x, y)), y)))

    report = pt.grad_check(func, [a, b])
    assert report.passed, report


@pytest.mark.parametrize('seed', SEEDS)
def test_channel_add_grads(seed):
    ''' A per-channel vector broadcasts over a rank-4 tensor '''
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 2, 3, 4, 4), rand(rng, 3)

    report = pt.grad_check(lambda x, y: pt.sum(pt.mul(pt.add(x, y), pt.add(x, y))), [a, b])
    assert report.passed, report


@pytest.mark.parametrize('seed', SEEDS)
@pytest.mark.parametrize('stride,padding', [(1, 0), (1, 1), (2, 1)])
def test_conv2d_grads(seed, stride, padding):
    ''' conv2d gradients wrt input, weight and bias '''
    rng = np.random.default_rng(seed)
    x, w, b = rand(rng, 2, 2, 5, 5), rand(rng, 3, 2, 3, 3), rand(rng, 3)

    report = pt.grad_check(lambda x, w, b: pt.sum(pt.sigmoid(pt.conv2d(x, w, b, stride, padding))),
                           [x, w, b])
    assert report.passed, report


def test_conv2d_matches_direct_sum():
    ''' Output equals the cross-correlation written out by hand '''
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((1, 2, 3, 3))

    out = pt.conv2d(pt.Tensor(x), pt.Tensor(w)).data
    assert out.shape == (1, 1, 2, 2)
    for row in range(2):
        for col in range(2):
            expected = (x[0, :, row:row + 3, col:col + 3] * w[0]).sum()
            assert out[0, 0, row, col] == pytest.approx(expected, abs=1e-12)


def test_conv2d_shape_errors():
    ''' Channel mismatch names both shapes '''
    x = pt.Tensor(np.zeros((1, 2, 4, 4)))
    w = pt.Tensor(np.zeros((1, 3, 3, 3)))

    with pytest.raises(ShapeError, match=r'\(1, 2, 4, 4\)'):
        pt.conv2d(x, w)


@pytest.mark.parametrize('seed', SEEDS)
def test_pool_upsample_concat_grads(seed):
    ''' max_pool2d, upsample_nearest2x and concat_channels '''
    rng = np.random.default_rng(seed)
    a, b = rand(rng, 1, 2, 4, 4), rand(rng, 1, 1, 4, 4)

    def func(x, y):
        pooled = pt.upsample_nearest2x(pt.max_pool2d(x))
        joined = pt.concat_channels(pooled, y)
        return pt.sum(pt.mul(joined, joined))

    report = pt.grad_check(func, [a, b])
    assert report.passed, report


def test_max_pool_routes_to_first_tie():
    ''' Equal values send the gradient to the first one in row-major order '''
    x = pt.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, precision='double')
    with pt.Tape() as tape:
        out = pt.sum(pt.max_pool2d(x))
    tape.backward(out)

    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_concat_zero_channels():
    ''' A zero-channel operand leaves the other unchanged '''
    a = pt.Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    b = pt.Tensor(np.zeros((1, 0, 2, 2)))

    assert np.array_equal(pt.concat_channels(a, b).data, a.data)
    with pytest.raises(ShapeError):
        pt.concat_channels(a, pt.Tensor(np.zeros((1, 1, 4, 4))))


@pytest.mark.parametrize('seed', SEEDS)
def test_batch_norm_train_grads(seed):
    ''' Train mode batch norm, looser tolerance '''
    rng = np.random.default_rng(seed)
    x, gamma, beta = rand(rng, 3, 2, 3, 3), rand(rng, 2), rand(rng, 2)
    stats = pt.RunningStats(2, 'double')
    weights = pt.Tensor(rng.standard_normal((3, 2, 3, 3)), precision='double')

    def func(x, gamma, beta):
        return pt.sum(pt.mul(pt.batch_norm2d(x, gamma, beta, stats, 'train'), weights))

    report = pt.grad_check(func, [x, gamma, beta], tol=1e-3)
    assert report.passed, report


@pytest.mark.parametrize('seed', SEEDS)
def test_batch_norm_eval_grads(seed):
    ''' Eval mode uses the running statistics and is affine in the input '''
    rng = np.random.default_rng(seed)
    x, gamma, beta = rand(rng, 2, 2, 3, 3), rand(rng, 2), rand(rng, 2)
    stats = pt.RunningStats(2, 'double')
    stats.mean[...] = rng.standard_normal(2)
    stats.var[...] = rng.uniform(0.5, 1.5, 2)

    def func(x, gamma, beta):
        return pt.sum(pt.sigmoid(pt.batch_norm2d(x, gamma, beta, stats, 'eval')))

    report = pt.grad_check(func, [x, gamma, beta])
    assert report.passed, report


def test_running_stats_update():
    ''' running = 0.9 * running + 0.1 * batch, with the unbiased variance '''
    rng = np.random.default_rng(0)
    data = rng.standard_normal((4, 1, 2, 2))
    x = pt.Tensor(data, precision='double')
    gamma = pt.Tensor(np.ones(1), precision='double')
    beta = pt.Tensor(np.zeros(1), precision='double')
    stats = pt.RunningStats(1, 'double')

    pt.batch_norm2d(x, gamma, beta, stats, 'train')

    assert stats.mean[0] == pytest.approx(0.1 * data.mean())
    assert stats.var[0] == pytest.approx(0.9 + 0.1 * data.var(ddof=1))

    before = (stats.mean.copy(), stats.var.copy())
    pt.batch_norm2d(x, gamma, beta, stats, 'eval')
    assert np.array_equal(stats.mean, before[0]) and np.array_equal(stats.var, before[1])


def test_batch_norm_needs_two_values():
    ''' A single value per channel cannot be normalized in train mode '''
    x = pt.Tensor(np.ones((1, 2, 1, 1)))
    gamma, beta = pt.Tensor(np.ones(2)), pt.Tensor(np.zeros(2))

    with pytest.raises(ContractError):
        pt.batch_norm2d(x, gamma, beta, pt.RunningStats(2), 'train')


def test_identity_sum_is_exact():
    ''' Small integer inputs and a power of two step make the check exact '''
    x = pt.Tensor(np.array([-1.0, 0.0, 1.0, 1.0]), precision='double')

    report = pt.grad_check(pt.sum, [x], h=2 ** -20)
    assert report.max_error == 0
    assert report.checked == 4


def test_second_backward_accumulates():
    ''' Gradients add up across backward calls '''
    x = pt.Tensor([1.0, 2.0], requires_grad=True, precision='double')

    with pt.Tape() as tape:
        loss = pt.sum(pt.mul(x, x))
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)

    assert np.array_equal(x.grad, 2 * first)
    assert first.tolist() == [2.0, 4.0]


def test_functional_backward():
    ''' backward(tape, loss) fills the same gradients as the method '''
    x = pt.Tensor([1.0, -2.0, 3.0], requires_grad=True, precision='double')

    with pt.Tape() as tape:
        loss = pt.sum(pt.mul(x, x))
    pt.backward(tape, loss)

    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_grad_check_skips_kinks():
    ''' A step across zero is left out instead of failing the check '''
    x = pt.Tensor(np.array([1e-7, -1e-7, 0.5, -0.5]), precision='double')

    def func(a):
        return pt.sum(pt.relu(a))

    assert not pt.grad_check(func, [x], h=1e-6).passed

    report = pt.grad_check(func, [x], h=1e-6, skip_kinks=True)
    assert report.passed
    assert report.checked == 2 and report.skipped == 2
    assert x.data.tolist() == [1e-7, -1e-7, 0.5, -0.5]


def test_grad_check_skips_pool_ties():
    ''' A step that changes a max-pool winner is left out '''
    data = np.zeros((1, 1, 2, 2))
    data[0, 0, 0, 0], data[0, 0, 1, 1] = 1.0, 1.0 - 1e-9
    x = pt.Tensor(data, precision='double')

    report = pt.grad_check(lambda a: pt.sum(pt.max_pool2d(a)), [x], h=1e-6, skip_kinks=True)

    assert report.passed
    assert report.skipped == 2 and report.checked == 2


def test_backward_needs_scalar():
    x = pt.Tensor(np.ones(3), requires_grad=True)
    with pt.Tape() as tape:
        out = pt.relu(x)

    with pytest.raises(ContractError):
        tape.backward(out)


def test_no_tape_records_nothing():
    ''' Outside a tape results are plain values '''
    x = pt.Tensor(np.ones(3), requires_grad=True)
    out = pt.relu(x)

    assert out.node_id is None
    assert not out.requires_grad


def test_shape_and_precision_errors():
    ''' Mismatched shapes and mixed precisions are refused '''
    with pytest.raises(ShapeError, match=r'\(2,\).*\(3,\)'):
        pt.add(pt.Tensor(np.ones(2)), pt.Tensor(np.ones(3)))

    with pytest.raises(ContractError):
        pt.mul(pt.Tensor(np.ones(2), precision='single'), pt.Tensor(np.ones(2), precision='double'))


def test_grad_check_needs_double():
    with pytest.raises(ContractError):
        pt.grad_check(pt.sum, [pt.Tensor(np.ones(2), precision='single')])


def test_stable_sigmoid_extremes():
    ''' No overflow at large magnitudes '''
    values = pt.stable_sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert values.tolist() == [0.0, 0.5, 1.0]


def test_debug_mode_catches_non_finite():
    ''' With debug on, any op producing NaN raises '''
    pt.set_debug(True)
    try:
        with pytest.raises(TrainingError):
            pt.mul(pt.Tensor([np.inf]), pt.Tensor([0.0]))
    finally:
        pt.set_debug(False)


def test_small_examples():
    ''' Hand-checkable values of the forward ops '''
    assert pt.add(pt.Tensor([1.0, 2.0]), pt.Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert pt.relu(pt.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert pt.sigmoid(pt.Tensor([0.0])).data.tolist() == [0.5]

    tiny = pt.sigmoid(pt.Tensor([-500.0], precision='double')).data[0]
    assert 0 < tiny <= 1e-200

    ones = pt.conv2d(pt.Tensor(np.ones((1, 1, 3, 3))), pt.Tensor(np.ones((1, 1, 2, 2))))
    assert ones.data.tolist() == [[[[4.0, 4.0], [4.0, 4.0]]]]

    pooled = pt.max_pool2d(pt.Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert pooled.data.tolist() == [[[[4.0]]]]

    grown = pt.upsample_nearest2x(pt.Tensor([[[[1.0]]]]))
    assert grown.data.tolist() == [[[[1.0, 1.0], [1.0, 1.0]]]]

    joined = pt.concat_channels(pt.Tensor(np.zeros((1, 2, 4, 4))),
                                pt.Tensor(np.zeros((1, 3, 4, 4))))
    assert joined.shape == (1, 5, 4, 4)


def test_one_by_one_identity_conv():
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    weight = np.eye(3).reshape(3, 3, 1, 1)

    out = pt.conv2d(pt.Tensor(x), pt.Tensor(weight), pt.Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_batch_norm_identity_and_normalization():
    ''' Eval with fresh statistics is the identity; train output is standardized per channel '''
    rng = np.random.default_rng(0)
    x = pt.Tensor(rng.standard_normal((4, 2, 3, 3)) * 3 + 1, precision='double')
    gamma = pt.Tensor(np.ones(2), precision='double')
    beta = pt.Tensor(np.zeros(2), precision='double')

    out = pt.batch_norm2d(x, gamma, beta, pt.RunningStats(2, 'double'), 'eval', eps=0)
    assert np.array_equal(out.data, x.data)

    out = pt.batch_norm2d(x, gamma, beta, pt.RunningStats(2, 'double'), 'train').data
    variance = x.data.var(axis=(0, 2, 3))
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.allclose(out.var(axis=(0, 2, 3)), variance / (variance + 1e-5), atol=1e-12)


def test_sigmoid_sum_gradient_at_zero():
    ''' d/dx sigmoid(x) at 0 is exactly a quarter '''
    x = pt.Tensor(np.zeros(3), precision='double')

    report = pt.grad_check(lambda x: pt.sum(pt.sigmoid(x)), [x])
    assert report.max_error < 1e-8
    assert x.grad.tolist() == [0.25, 0.25, 0.25]


def test_sum_gradient_is_ones():
    x = pt.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, precision='double')
    with pt.Tape() as tape:
        loss = pt.sum(x)
    tape.backward(loss)

    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    x = pt.Tensor(rng.standard_normal((2, 3, 6, 6)))
    w = pt.Tensor(rng.standard_normal((4, 3, 3, 3)))

    assert np.array_equal(pt.conv2d(x, w, padding=1).data, pt.conv2d(x, w, padding=1).data)
