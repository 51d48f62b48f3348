''' Layers assembled from the tensor primitives, and the layer-group bookkeeping used for freezing.

Example:

    .. code-block:: python

        import numpy as np
        import pylesion.layers as pl
        import pylesion.tensor as pt

        rng = np.random.default_rng(0)
        block = pl.ResidualBlock(8, 16, stride=2, rng=rng, name='stage2.0')

        x = pt.Tensor(rng.standard_normal((2, 8, 16, 16)))
        y = block.forward(x, 'train')  # shape (2, 16, 8, 8)

Note:

    A model's parameters are split in named :class:`LayerGroup` objects. :func:`set_trainable`
    applies one of the fine-tuning policies to those groups: which parameters the optimizer may
    touch, and which batch-norm layers keep their running statistics pinned.
'''
from dataclasses import dataclass, field
import enum
import math

import numpy as np

import pylesion.tensor as pt
from pylesion.errors import ConfigError, ShapeError

GROUP_NAMES = ('encoder_head', 'encoder_body', 'decoder')


class Parameter(pt.Tensor):
    ''' A named leaf tensor the optimizer may update

    Attributes:
        trainable: False while the parameter is frozen.
        is_norm: True for batch-norm scale and shift.
    '''

    def __init__(self, data, name, precision=pt.Precision.SINGLE, is_norm=False):
        super().__init__(data, requires_grad=True, precision=precision, name=name)
        self.trainable = True
        self.is_norm = is_norm


class Layer:
    ''' Base of every layer: a name and an ordered list of sublayers '''

    def __init__(self, name):
        self.name = name

    def children(self):
        return []

    def own_parameters(self):
        return []

    def parameters(self):
        ''' Every parameter of this layer and its sublayers, in a fixed order '''
        found = list(self.own_parameters())
        for child in self.children():
            found.extend(child.parameters())
        return found

    def norms(self):
        ''' Every batch-norm layer within this layer '''
        found = [self] if isinstance(self, BatchNorm2d) else []
        for child in self.children():
            found.extend(child.norms())
        return found


class Conv2d(Layer):
    ''' Square-kernel convolution with He (fan-in) initialized weights

    Arguments:
        in_channels (int): Channels of the input.
        out_channels (int): Channels of the output.
        kernel (int): Kernel extent.
        stride (int, optional): Step between windows.
        padding (int, optional): Zero padding; defaults to ``kernel // 2``.
        bias (bool, optional): Add a learned per-channel bias.
        rng (numpy.random.Generator): Source of the initial weights.
        precision (optional): Parameter precision.
        name (str): Prefix of the parameter names.
    '''

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=None, bias=False,
                 rng=None, precision=pt.Precision.SINGLE, name='conv'):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

        fan_in = in_channels * kernel * kernel
        weight = rng.standard_normal((out_channels, in_channels, kernel, kernel))
        weight *= math.sqrt(2 / fan_in)
        self.weight = Parameter(weight, name + '.weight', precision)
        self.bias = Parameter(np.zeros(out_channels), name + '.bias', precision) if bias else None

    def own_parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x, mode=pt.Mode.TRAIN):
        return pt.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Layer):
    ''' Batch normalization with gamma = 1, beta = 0 at start

    Attributes:
        stats: The :class:`pylesion.tensor.RunningStats` of this layer.
        frozen: When True the layer always normalizes with its running statistics and never
            updates them, whatever the forward mode.
    '''

    def __init__(self, channels, precision=pt.Precision.SINGLE, momentum=0.1, eps=1e-5, name='bn'):
        super().__init__(name)
        self.gamma = Parameter(np.ones(channels), name + '.gamma', precision, is_norm=True)
        self.beta = Parameter(np.zeros(channels), name + '.beta', precision, is_norm=True)
        self.stats = pt.RunningStats(channels, precision)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    def own_parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x, mode=pt.Mode.TRAIN):
        mode = pt.Mode.EVAL if self.frozen else pt.Mode.of(mode)
        return pt.batch_norm2d(x, self.gamma, self.beta, self.stats, mode, self.momentum, self.eps)


class ConvBnRelu(Layer):
    ''' conv -> batch norm -> relu '''

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, rng=None,
                 precision=pt.Precision.SINGLE, name='block'):
        super().__init__(name)
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, rng=rng, precision=precision,
                           name=name + '.conv')
        self.bn = BatchNorm2d(out_channels, precision, name=name + '.bn')

    def children(self):
        return [self.conv, self.bn]

    def forward(self, x, mode=pt.Mode.TRAIN):
        return pt.relu(self.bn.forward(self.conv.forward(x), mode))


class ResidualBlock(Layer):
    ''' Basic two-layer residual block: ``relu(F(x) + shortcut(x))``

    ``F`` is conv3x3 -> bn -> relu -> conv3x3 -> bn. The shortcut is the identity, or a 1x1
    convolution with batch norm when the stride or channel count changes.

    Arguments:
        in_channels (int): Channels of the input.
        out_channels (int): Channels of the output.
        stride (int, optional): Stride of the first convolution; 2 halves the spatial extent.
        rng (numpy.random.Generator): Source of the initial weights.
        precision (optional): Parameter precision.
        name (str): Prefix of the parameter names.
    '''

    def __init__(self, in_channels, out_channels, stride=1, rng=None, precision=pt.Precision.SINGLE,
                 name='block'):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride

        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, rng=rng, precision=precision,
                            name=name + '.conv1')
        self.bn1 = BatchNorm2d(out_channels, precision, name=name + '.bn1')
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, rng=rng, precision=precision,
                            name=name + '.conv2')
        self.bn2 = BatchNorm2d(out_channels, precision, name=name + '.bn2')

        self.projection = None
        self.projection_bn = None
        if stride != 1 or in_channels != out_channels:
            self.projection = Conv2d(in_channels, out_channels, 1, stride, padding=0, rng=rng,
                                     precision=precision, name=name + '.projection')
            self.projection_bn = BatchNorm2d(out_channels, precision, name=name + '.projection_bn')

    def children(self):
        layers = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.projection is not None:
            layers += [self.projection, self.projection_bn]
        return layers

    def forward(self, x, mode=pt.Mode.TRAIN):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError('{}: expected {} input channels, got shape {}'.format(
                self.name, self.in_channels, x.shape))

        residual = self.bn1.forward(self.conv1.forward(x), mode)
        residual = self.bn2.forward(self.conv2.forward(pt.relu(residual)), mode)

        shortcut = x
        if self.projection is not None:
            shortcut = self.projection_bn.forward(self.projection.forward(x), mode)

        return pt.relu(pt.add(residual, shortcut))


def residual_forward(block: ResidualBlock, x, mode=pt.Mode.TRAIN):
    ''' Functional form of :meth:`ResidualBlock.forward` '''
    return block.forward(x, mode)


@dataclass
class LayerGroup:
    ''' A named slice of a model that is frozen or unfrozen as a whole

    Attributes:
        name: One of ``GROUP_NAMES``.
        params: The parameters of the group.
        norms: The batch-norm layers of the group.
        trainable: False while the optimizer must leave the group alone.
    '''
    name: str
    params: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    trainable: bool = True


class TrainPolicy(enum.Enum):
    ''' Fine-tuning policies over layer groups '''
    FREEZE_FIRST_GROUP = 'freeze_first_group'
    UNFREEZE_ALL_EXCEPT_BATCHNORM = 'unfreeze_all_except_batchnorm'
    UNFREEZE_ALL = 'unfreeze_all'

    @classmethod
    def of(cls, value):
        if isinstance(value, TrainPolicy):
            return value
        try:
            return cls(value)
        except ValueError as error:
            raise ConfigError("Unknown training policy '{}'; choose from {}".format(
                value, [policy.value for policy in cls])) from error


def set_trainable(groups, policy):
    ''' Apply a freezing policy to a model's layer groups

    - ``freeze_first_group``: the first group is frozen, parameters and batch-norm statistics
      alike; the others train.
    - ``unfreeze_all_except_batchnorm``: every convolution trains; every batch-norm layer keeps
      its scale, shift and running statistics pinned.
    - ``unfreeze_all``: everything trains.

    Arguments:
        groups (list): The model's :class:`LayerGroup` list, first group first.
        policy (str/TrainPolicy): The policy to apply.
    '''
    policy = TrainPolicy.of(policy)

    unknown = [group.name for group in groups if group.name not in GROUP_NAMES]
    if unknown:
        raise ConfigError('Unknown layer group(s) {}; expected names from {}'.format(
            unknown, list(GROUP_NAMES)))

    for index, group in enumerate(groups):
        if policy is TrainPolicy.FREEZE_FIRST_GROUP:
            group.trainable = index != 0
            for param in group.params:
                param.trainable = group.trainable
            for norm in group.norms:
                norm.frozen = not group.trainable
        elif policy is TrainPolicy.UNFREEZE_ALL_EXCEPT_BATCHNORM:
            group.trainable = True
            for param in group.params:
                param.trainable = not param.is_norm
            for norm in group.norms:
                norm.frozen = True
        else:
            group.trainable = True
            for param in group.params:
                param.trainable = True
            for norm in group.norms:
                norm.frozen = False

    return policy
