# -*- coding: utf-8 -*-
''' Run configuration: one flat set of keys read from a file, the environment and the command line.

The file holds ``key = value`` lines; ``#`` starts a comment. Later sources win:

    defaults < config file < ``PYLESION_<KEY>`` environment variables < command line flags

Example:

    .. code-block:: python

        import pylesion.config as pc

        run = pc.RunConfig.from_sources('run.cfg', overrides={'epochs': '5'})
        run.dump('resolved.cfg')  # reproduces the run when passed back as the config file

        model = run.model_config()
'''
import configparser
from dataclasses import dataclass, field, fields
import os

import pylesion.data as pd
import pylesion.procedure as pp
import pylesion.unet as pu
from pylesion.errors import ConfigError, StorageError

ENV_PREFIX = 'PYLESION_'
_SECTION = 'run'


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ('1', 'true', 'yes', 'on'):
        return True
    if value in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError("'{}' is not a boolean".format(text))


def _parse_sizes(text):
    if isinstance(text, (list, tuple)):
        return [int(value) for value in text]
    return [int(value) for value in str(text).replace(' ', '').split(',') if value]


def _parse_optional_float(text):
    if text is None or str(text).strip().lower() in ('', 'none', 'auto'):
        return None
    return float(text)


_PARSERS = {int: int, float: float, bool: _parse_bool, str: str, 'sizes': _parse_sizes,
            'optional_float': _parse_optional_float}

HELP = {
    'data_dir': 'dataset directory holding images/ and masks/',
    'out_dir': 'where checkpoints, histories and plots are written',
    'model_preset': 'desk or full',
    'precision': 'single or double',
    'size': 'training image size',
    'sizes': 'comma separated increasing sizes for progressive resizing',
    'color_balance': 'gray-world balance images on load',
    'k': 'number of folds',
    'split_seed': 'seed of the fold assignment',
    'seed': 'seed of the initial weights',
    'train_seed': 'seed of batch order and augmentation',
    'epochs': 'epochs per phase',
    'batch_size': 'samples per mini-batch',
    'lr_start': 'first learning rate of the range test',
    'lr_end': 'last learning rate of the range test',
    'lr_iters': 'range test iterations (at least 10)',
    'lr_spacing': 'log or linear range test spacing',
    'lr_max': 'fixed peak learning rate; empty to run the range test',
    'cut_frac': 'fraction of a phase spent warming up',
    'ratio': 'peak to lowest learning rate ratio',
    'schedule': 'stlr or constant',
    'loss': 'bce or soft_jaccard',
    'threshold': 'probability threshold of predicted masks',
    'cut': 'threshold Jaccard cut',
    'max_rotation_deg': 'largest augmentation rotation in degrees',
    'max_zoom': 'largest augmentation zoom',
    'lighting_brightness': 'largest brightness offset',
    'lighting_contrast': 'largest contrast change',
    'aug_dihedral': 'random flips and quarter turns',
    'aug_rotate': 'random rotation',
    'aug_zoom': 'random zoom',
    'aug_lighting': 'random lighting',
    'workers': 'parallel fold workers',
}


@dataclass
class RunConfig:
    ''' Every setting of a run, flat

    ``HELP`` gives the meaning of each key.
    '''
    data_dir: str = 'data'
    out_dir: str = 'runs'
    model_preset: str = 'desk'
    precision: str = 'single'
    size: int = 32
    sizes: 'sizes' = field(default_factory=list)
    color_balance: bool = True
    k: int = 3
    split_seed: int = 0
    seed: int = 0
    train_seed: int = 0
    epochs: int = 30
    batch_size: int = 8
    lr_start: float = 1e-5
    lr_end: float = 1.0
    lr_iters: int = 100
    lr_spacing: str = 'log'
    lr_max: 'optional_float' = None
    cut_frac: float = 0.1
    ratio: float = 32.0
    schedule: str = 'stlr'
    loss: str = 'bce'
    threshold: float = 0.5
    cut: float = 0.65
    max_rotation_deg: float = 44.0
    max_zoom: float = 1.05
    lighting_brightness: float = 0.05
    lighting_contrast: float = 0.05
    aug_dihedral: bool = True
    aug_rotate: bool = True
    aug_zoom: bool = True
    aug_lighting: bool = True
    workers: int = 1

    @classmethod
    def keys(cls):
        return [item.name for item in fields(cls)]

    @classmethod
    def parse_value(cls, key, text):
        ''' Convert the text of ``key`` to its type, raising :class:`ConfigError` naming the key '''
        types = {item.name: item.type for item in fields(cls)}
        if key not in types:
            raise ConfigError("Unknown config key '{}'".format(key))
        try:
            return _PARSERS[types[key]](text)
        except (TypeError, ValueError) as error:
            raise ConfigError("{}: cannot read '{}': {}".format(key, text, error)) from error

    def update(self, values):
        ''' Set keys from a dict of text (or typed) values '''
        for key, text in values.items():
            setattr(self, key, self.parse_value(key, text))
        return self

    @staticmethod
    def read_file(path):
        ''' Raw key to text mapping of a config file '''
        parser = configparser.ConfigParser(inline_comment_prefixes=('#',), interpolation=None)
        try:
            with open(path) as source:
                parser.read_string('[{}]\n{}'.format(_SECTION, source.read()), source=str(path))
        except OSError as error:
            raise StorageError('Could not read config {}: {}'.format(path, error)) from error
        except configparser.Error as error:
            raise ConfigError('{}: {}'.format(path, error)) from error
        return dict(parser.items(_SECTION))

    @staticmethod
    def read_env(env=None):
        env = os.environ if env is None else env
        known = set(RunConfig.keys())
        values = {}
        for name, text in env.items():
            if name.startswith(ENV_PREFIX):
                key = name[len(ENV_PREFIX):].lower()
                if key in known:
                    values[key] = text
        return values

    @classmethod
    def from_sources(cls, path=None, env=None, overrides=None):
        ''' Build a config from defaults, an optional file, the environment and overrides '''
        config = cls()
        given = {}
        if path:
            given.update(cls.read_file(path))
        given.update(cls.read_env(env))
        given.update({key: value for key, value in (overrides or {}).items() if value is not None})
        config.update(given)
        config.explicit = frozenset(given)
        return config.validate()

    def is_explicit(self, key):
        ''' Whether ``key`` came from a file, the environment or an override, not the default '''
        return key in getattr(self, 'explicit', ())

    def validate(self):
        self.model_config()
        self.train_config()
        if self.k < 2:
            raise ConfigError('k: need at least 2 folds, got {}'.format(self.k))
        if self.workers < 1:
            raise ConfigError('workers: must be positive, got {}'.format(self.workers))
        if not 0 <= self.threshold <= 1:
            raise ConfigError('threshold: must lie in [0, 1], got {}'.format(self.threshold))
        if not 0 <= self.cut <= 1:
            raise ConfigError('cut: must lie in [0, 1], got {}'.format(self.cut))
        if min(self.size_list()) < pd.MIN_SIZE:
            raise ConfigError('size: must be at least {}, got {}'.format(pd.MIN_SIZE,
                                                                         self.size_list()))
        if any(value < 0 for value in (self.seed, self.split_seed, self.train_seed)):
            raise ConfigError('seeds must not be negative')
        return self

    def size_list(self):
        ''' Training sizes: ``sizes`` when given, otherwise just ``size`` '''
        return list(self.sizes) if self.sizes else [self.size]

    def model_config(self) -> pu.ModelConfig:
        return pu.ModelConfig.preset(self.model_preset, precision=self.precision).validate()

    def augment(self) -> pd.AugmentParams:
        return pd.AugmentParams(self.max_rotation_deg, self.max_zoom, self.lighting_brightness,
                                self.lighting_contrast, self.aug_dihedral, self.aug_rotate,
                                self.aug_zoom, self.aug_lighting).validate()

    def train_config(self) -> pp.TrainConfig:
        return pp.TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                              lr_start=self.lr_start, lr_end=self.lr_end, lr_iters=self.lr_iters,
                              lr_spacing=self.lr_spacing, lr_max=self.lr_max,
                              cut_frac=self.cut_frac, ratio=self.ratio,
                              schedule=self.schedule, loss=self.loss, threshold=self.threshold,
                              seed=self.train_seed, augment=self.augment()).validate()

    def lines(self):
        ''' Normalized ``key = value`` lines, sorted by key '''
        out = []
        for key in sorted(self.keys()):
            value = getattr(self, key)
            if isinstance(value, bool):
                text = 'true' if value else 'false'
            elif key == 'sizes':
                text = ','.join(str(size) for size in value)
            elif value is None:
                text = ''
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            out.append('{} = {}'.format(key, text).rstrip())
        return out

    def dump(self, path):
        ''' Write the resolved config; loading it back reproduces this config '''
        try:
            with open(path, 'w') as out:
                out.write('# pylesion run configuration\n')
                out.write('\n'.join(self.lines()) + '\n')
        except OSError as error:
            raise StorageError('Could not write config {}: {}'.format(path, error)) from error
        return path
