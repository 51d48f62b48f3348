# -*- coding: utf-8 -*-
''' The U-Net with residual encoder.

The encoder is a ResNet-style stack: a stem convolution followed by 2x2 max pooling and four
stages of residual blocks, stages 2 to 4 each halving the resolution. The activations at the
end of the stem and at the end of stages 1 to 3 are kept as taps. The decoder climbs back up:
each step upsamples by two, concatenates the tap of the same resolution, and applies two
conv-bn-relu blocks. A 1x1 convolution produces one channel of logits at input resolution.

Example:

    .. code-block:: python

        import numpy as np
        import pylesion.unet as pu

        model = pu.build(pu.ModelConfig.desk(), seed=0)
        batch = np.zeros((1, 3, 32, 32), dtype=np.float32)

        logits = model.forward(batch, 'eval')  # Tensor of shape (1, 1, 32, 32)

Note:

    The model never applies a sigmoid; logits go to the loss or to prediction.
'''
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
import logging

import numpy as np

import pylesion.archive as pa
import pylesion.layers as pl
import pylesion.tensor as pt
from pylesion.errors import ConfigError, ShapeError, WeightImportError

logger = logging.getLogger(__name__)

ENCODER_PREFIXES = ('stem.', 'stages.')


@dataclass
class ModelConfig:
    ''' Shape of a U-Net: the desk preset by default, see :meth:`full` for the ResNet34 layout

    Attributes:
        stem_channels: Channels out of the stem convolution.
        stage_blocks: Residual blocks per encoder stage (4 stages).
        stage_channels: Channels of each encoder stage.
        decoder_channels: Channels of each decoder step, deepest first.
        input_channels: Channels of the input image.
        output_channels: Channels of the output logits.
        stem_kernel: Kernel extent of the stem convolution.
        stem_stride: Stride of the stem convolution (1 or 2).
        precision: 'single' or 'double'.
    '''
    stem_channels: int = 8
    stage_blocks: list = field(default_factory=lambda: [1, 1, 1, 1])
    stage_channels: list = field(default_factory=lambda: [8, 16, 32, 64])
    decoder_channels: list = field(default_factory=lambda: [32, 16, 8, 8])
    input_channels: int = 3
    output_channels: int = 1
    stem_kernel: int = 3
    stem_stride: int = 1
    precision: str = 'single'

    @classmethod
    def desk(cls, **overrides):
        ''' Small preset, trainable on a CPU in minutes '''
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides):
        ''' ResNet34 encoder layout: 16 residual blocks of 2 layers '''
        values = dict(stem_channels=64, stage_blocks=[3, 4, 6, 3],
                      stage_channels=[64, 128, 256, 512], decoder_channels=[256, 128, 64, 64],
                      stem_kernel=7, stem_stride=2)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def preset(cls, name, **overrides):
        presets = {'desk': cls.desk, 'full': cls.full}
        try:
            return presets[name](**overrides)
        except KeyError as error:
            raise ConfigError("model_preset: unknown preset '{}', choose from {}".format(
                name, sorted(presets))) from error

    @property
    def downsample_factor(self):
        ''' Input extents must be multiples of this '''
        return self.stem_stride * 2 * 2 ** (len(self.stage_channels) - 1)

    def validate(self):
        ''' Raise :class:`ConfigError` naming the first invalid field '''
        for name in ('stage_blocks', 'stage_channels', 'decoder_channels'):
            values = getattr(self, name)
            if len(values) != 4:
                raise ConfigError('{}: need 4 entries, got {}'.format(name, values))
            if any(int(value) < 1 for value in values):
                raise ConfigError('{}: entries must be positive, got {}'.format(name, values))

        for name in ('stem_channels', 'input_channels', 'output_channels', 'stem_kernel'):
            if int(getattr(self, name)) < 1:
                raise ConfigError('{}: must be positive, got {}'.format(name, getattr(self, name)))

        if self.stem_stride not in (1, 2):
            raise ConfigError('stem_stride: must be 1 or 2, got {}'.format(self.stem_stride))
        pt.Precision.of(self.precision)

        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        try:
            return cls(**values)
        except TypeError as error:
            raise ConfigError('model_config: {}'.format(error)) from error


class DecoderStep(pl.Layer):
    ''' upsample x2 -> concat with tap -> two conv-bn-relu blocks '''

    def __init__(self, in_channels, tap_channels, out_channels, rng, precision, name):
        super().__init__(name)
        self.first = pl.ConvBnRelu(in_channels + tap_channels, out_channels, rng=rng,
                                   precision=precision, name=name + '.0')
        self.second = pl.ConvBnRelu(out_channels, out_channels, rng=rng, precision=precision,
                                    name=name + '.1')

    def children(self):
        return [self.first, self.second]

    def forward(self, x, tap, mode=pt.Mode.TRAIN):
        joined = pt.concat_channels(pt.upsample_nearest2x(x), tap)
        return self.second.forward(self.first.forward(joined, mode), mode)


class UNetModel:
    ''' Residual-encoder U-Net built from a :class:`ModelConfig`

    Arguments:
        config (ModelConfig): Architecture.
        rng (numpy.random.Generator): Source of the initial weights.

    Attributes:
        stem: The stem conv-bn-relu block.
        stages: List of encoder stages, each a list of residual blocks.
        decoder: Decoder steps, deepest first.
        head: The 1x1 output convolution.
        groups: The three layer groups: encoder_head, encoder_body, decoder.
        taps: Names of the activations feeding the skip connections, shallowest first.
    '''

    def __init__(self, config: ModelConfig, rng):
        self.config = config.validate()
        precision = pt.Precision.of(config.precision)
        self.precision = precision

        self.stem = pl.ConvBnRelu(config.input_channels, config.stem_channels, config.stem_kernel,
                                  config.stem_stride, rng=rng, precision=precision, name='stem')

        self.stages = []
        channels = config.stem_channels
        for stage, (blocks, width) in enumerate(zip(config.stage_blocks, config.stage_channels)):
            layers = []
            for index in range(blocks):
                stride = 2 if (stage > 0 and index == 0) else 1
                layers.append(pl.ResidualBlock(channels, width, stride, rng=rng,
                                               precision=precision,
                                               name='stages.{}.{}'.format(stage, index)))
                channels = width
            self.stages.append(layers)

        self.taps = ['stem', 'stages.0', 'stages.1', 'stages.2']
        tap_channels = [config.stem_channels] + list(config.stage_channels[:3])

        self.decoder = []
        for step, (width, skip) in enumerate(zip(config.decoder_channels, reversed(tap_channels))):
            self.decoder.append(DecoderStep(channels, skip, width, rng, precision,
                                            'decoder.{}'.format(step)))
            channels = width

        self.head = pl.Conv2d(channels, config.output_channels, 1, padding=0, bias=True, rng=rng,
                              precision=precision, name='head')

        head_group = [self.stem] + self.stages[0]
        body_group = [block for stage in self.stages[1:] for block in stage]
        decoder_group = self.decoder + [self.head]
        self.groups = [self._group('encoder_head', head_group),
                       self._group('encoder_body', body_group),
                       self._group('decoder', decoder_group)]

    @staticmethod
    def _group(name, layers):
        params, norms = [], []
        for layer in layers:
            params.extend(layer.parameters())
            norms.extend(layer.norms())
        return pl.LayerGroup(name, params, norms)

    def layers(self):
        return [self.stem] + [block for stage in self.stages for block in stage] + self.decoder + \
            [self.head]

    def parameters(self):
        ''' All parameters in a fixed order '''
        return [param for layer in self.layers() for param in layer.parameters()]

    def norms(self):
        return [norm for layer in self.layers() for norm in layer.norms()]

    def trainable_parameters(self):
        return [param for param in self.parameters() if param.trainable]

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def set_trainable(self, policy):
        ''' Apply a :class:`pylesion.layers.TrainPolicy` to this model's groups '''
        return pl.set_trainable(self.groups, policy)

    def check_input(self, shape):
        ''' Raise :class:`ShapeError` unless ``shape`` is a valid input batch shape '''
        factor = self.config.downsample_factor
        if len(shape) != 4 or shape[1] != self.config.input_channels:
            raise ShapeError('Expected input of shape (N, {}, H, W), got {}'.format(
                self.config.input_channels, tuple(shape)))
        if shape[2] % factor or shape[3] % factor:
            raise ShapeError('Input extent {}x{} must be a multiple of {}'.format(
                shape[2], shape[3], factor))

    def forward(self, batch, mode=pt.Mode.TRAIN):
        ''' Logits of shape (N, output_channels, H, W) for a batch of shape (N, C, H, W)

        Arguments:
            batch (Tensor/array): Input images, extents divisible by the downsample factor.
            mode (str/Mode, optional): 'train' normalizes with batch statistics and updates the
                running statistics of unfrozen batch-norm layers; 'eval' does neither.
        '''
        if not isinstance(batch, pt.Tensor):
            batch = pt.Tensor(batch, precision=self.precision)
        self.check_input(batch.shape)

        taps = []
        x = self.stem.forward(batch, mode)
        taps.append(x)
        x = pt.max_pool2d(x, 2)

        for index, stage in enumerate(self.stages):
            for block in stage:
                x = block.forward(x, mode)
            if index < len(self.stages) - 1:
                taps.append(x)

        for step, tap in zip(self.decoder, reversed(taps)):
            x = step.forward(x, tap, mode)

        for _ in range(self.config.stem_stride.bit_length() - 1):
            x = pt.upsample_nearest2x(x)

        return self.head.forward(x)

    def state_arrays(self, prefixes=None):
        ''' Copies of every parameter and running statistic, keyed by name

        Arguments:
            prefixes (tuple, optional): Only keep names starting with one of these.
        '''
        arrays = OrderedDict()
        for param in self.parameters():
            arrays[param.name] = param.data.copy()
        for norm in self.norms():
            arrays[norm.name + '.running_mean'] = norm.stats.mean.copy()
            arrays[norm.name + '.running_var'] = norm.stats.var.copy()

        if prefixes:
            arrays = OrderedDict((name, value) for name, value in arrays.items()
                                 if name.startswith(tuple(prefixes)))
        return arrays

    def _targets(self):
        targets = OrderedDict((param.name, param.data) for param in self.parameters())
        for norm in self.norms():
            targets[norm.name + '.running_mean'] = norm.stats.mean
            targets[norm.name + '.running_var'] = norm.stats.var
        return targets

    def load_state_arrays(self, arrays, strict=True):
        ''' Copy arrays into the model in place

        Arguments:
            arrays (dict): Name to array, as produced by :meth:`state_arrays`.
            strict (bool, optional): Require every model array to be present.

        Returns:
            The list of names that were copied.
        '''
        targets = self._targets()
        for name, value in arrays.items():
            if name in targets and targets[name].shape != np.shape(value):
                raise ShapeError("Array '{}' has shape {}, model expects {}".format(
                    name, np.shape(value), targets[name].shape))
        if strict:
            missing = [name for name in targets if name not in arrays]
            if missing:
                raise ShapeError('Missing arrays: {}'.format(missing))

        copied = []
        for name, value in arrays.items():
            if name in targets:
                targets[name][...] = value
                copied.append(name)
        return copied


def build(config: ModelConfig, seed=0) -> UNetModel:
    ''' Build a model with weights drawn deterministically from ``seed`` '''
    return UNetModel(config, np.random.default_rng(seed))


def forward(model: UNetModel, batch, mode=pt.Mode.TRAIN):
    ''' Functional form of :meth:`UNetModel.forward` '''
    return model.forward(batch, mode)


@dataclass
class ImportReport:
    ''' Result of :func:`import_encoder_weights`

    Attributes:
        matched: Archive arrays copied into the encoder.
        unmatched: Archive arrays with no encoder counterpart.
        missing: Encoder arrays the archive did not provide.
    '''
    matched: list
    unmatched: list
    missing: list

    def __str__(self):
        return 'matched {}, unmatched {}, encoder arrays not provided {}'.format(
            len(self.matched), len(self.unmatched), len(self.missing))


def export_encoder_weights(model: UNetModel, path):
    ''' Write the encoder's parameters and running statistics as a weight archive '''
    arrays = model.state_arrays(ENCODER_PREFIXES)
    metadata = {'kind': 'encoder', 'model_config': model.config.to_dict()}
    return pa.write_archive(path, arrays, metadata)


def import_encoder_weights(model: UNetModel, path) -> ImportReport:
    ''' Copy encoder arrays from a weight archive into ``model``.

    Arrays whose name matches an encoder parameter or running statistic are copied; the
    decoder is never touched. Nothing is copied unless every matched name also matches in shape.

    Arguments:
        model (UNetModel): Model to update in place.
        path: Weight archive.

    Returns:
        An :class:`ImportReport`.
    '''
    _, arrays = pa.read_archive(path)
    encoder = model.state_arrays(ENCODER_PREFIXES)

    matched, unmatched = [], []
    for name, value in arrays.items():
        if name not in encoder:
            unmatched.append(name)
        elif encoder[name].shape != value.shape:
            raise WeightImportError("Array '{}' in {} has shape {}, encoder expects {}".format(
                name, path, value.shape, encoder[name].shape))
        else:
            matched.append(name)

    model.load_state_arrays({name: arrays[name] for name in matched}, strict=False)
    missing = [name for name in encoder if name not in arrays]

    report = ImportReport(matched, unmatched, missing)
    logger.info('Encoder import from %s: %s', path, report)
    return report


def parameter_summary(model: UNetModel):
    ''' One row per parameter: (group, name, shape, count, trainable) '''
    rows = []
    for group in model.groups:
        for param in group.params:
            rows.append((group.name, param.name, param.shape, param.size, param.trainable))
    return rows
