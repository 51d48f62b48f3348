# -*- coding: utf-8 -*-
''' The ``pylesion`` command line tool.

Every subcommand reads the run configuration (see :mod:`pylesion.config`); each config key is
also a flag, ``--key-with-dashes``. Exit codes:

    ==== =====================================
    0    success
    2    invalid config or arguments
    3    inconsistent data
    4    training diverged or no learning rate could be picked
    5    a file could not be read or written
    ==== =====================================

Example:

    .. code-block:: bash

        pylesion synth --n 250 --size 32 --seed 7 --out data/
        pylesion lr-find --data-dir data/ --out curve.csv --svg curve.svg
        pylesion train --data-dir data/ --all-folds --out-dir runs/
        pylesion predict --ensemble runs/fold0.ckpt,runs/fold1.ckpt,runs/fold2.ckpt \\
            --images data/ --out pred/
        pylesion evaluate --pred pred/ --truth data/ --out report.csv
'''
import argparse
import logging
import os
import sys

import pylesion.config as pc
import pylesion.data as pd
import pylesion.layers as pl
import pylesion.metrics as pm
import pylesion.plotting as pplot
import pylesion.schedule as ps
import pylesion.synth as psy
import pylesion.trainer as ptr
import pylesion.unet as pu
from pylesion.errors import ConfigError, PylesionError, StorageError

logger = logging.getLogger(__name__)


def print_table(headers, rows):
    ''' Print rows as a pipe-bordered table '''
    cells = [[str(value) for value in row] for row in rows]
    widths = [max([len(header)] + [len(row[index]) for row in cells])
              for index, header in enumerate(headers)]
    rule = ' ' + '-' * (sum(widths) + 3 * len(widths) - 1)

    print(rule)
    print('| ' + ' | '.join(header.ljust(width) for header, width in zip(headers, widths)) + ' |')
    print(rule)
    for row in cells:
        print('| ' + ' | '.join(value.ljust(width) for value, width in zip(row, widths)) + ' |')
    print(rule)


def _makedirs(path):
    try:
        os.makedirs(str(path), exist_ok=True)
    except OSError as error:
        raise StorageError('Could not create {}: {}'.format(path, error)) from error


def _run_config(args):
    overrides = {key: getattr(args, key, None) for key in pc.RunConfig.keys()}
    run = pc.RunConfig.from_sources(args.config, overrides=overrides)
    if args.dump_config:
        run.dump(args.dump_config)
    return run


def _samples(run, size=None):
    return pd.load_dataset(run.data_dir, size=size, balance=run.color_balance)


def _split(run, samples):
    return pd.kfold_split([sample.id for sample in samples], run.k, run.split_seed)


# Commands -----------------------------------------------------------------------------------------


def cmd_synth(args, run):
    out = args.out or run.data_dir
    summary = psy.synth_generate(args.n, run.size, run.seed, out, overwrite=args.force)
    print_table(['images', 'size', 'seed', 'mean lesion area', 'directory'],
                [[summary['n'], summary['size'], run.seed,
                  '{:.1%}'.format(summary['mean_area']), out]])
    return 0


def cmd_lr_find(args, run):
    size = run.size_list()[0]
    samples = _samples(run, size)
    train, _ = _split(run, samples).partition(samples, args.fold)

    config = run.train_config()
    model = pu.build(run.model_config(), run.seed)
    model.set_trainable(pl.TrainPolicy.FREEZE_FIRST_GROUP)

    batches = list(pd.iterate_batches(train, config.batch_size, config.seed, 1000, config.augment))
    curve = ps.lr_range_test(model, batches, ps.AdamState(model.parameters()), config.lr_start,
                             config.lr_end, config.lr_iters, config.lr_spacing,
                             pm.loss_function(config.loss))
    curve.write_csv(args.out)

    picked = None
    try:
        picked = ps.pick_lr(curve)
    finally:
        if args.svg:
            pplot.plot_lr_curve(curve, args.svg, picked)

    print('Picked learning rate: {!r}'.format(picked))
    return 0


def cmd_train(args, run):
    samples = _samples(run)
    split = _split(run, samples)
    _makedirs(run.out_dir)
    pd.save_split(split, os.path.join(run.out_dir, 'split.csv'))

    sizes = run.size_list() if args.progressive else [run.size]
    folds = list(range(run.k)) if args.all_folds else [args.fold]

    checkpoints = ptr.train_folds(folds, split, samples, run.model_config(), run.train_config(),
                                  sizes, run.seed, run.out_dir, run.workers,
                                  data={'color_balance': run.color_balance})

    rows = []
    for checkpoint in checkpoints:
        fold = checkpoint.manifest['fold']
        _, history_path = ptr.fold_paths(run.out_dir, fold)
        pplot.plot_history(checkpoint.history, os.path.splitext(history_path)[0] + '.svg')
        rows.append([fold, checkpoint.manifest['size'], checkpoint.manifest['phase'],
                     checkpoint.manifest['epoch'], '{:.4f}'.format(checkpoint.manifest['val_dice']),
                     '{:.4f}'.format(checkpoint.manifest['val_jaccard']), checkpoint.path])
    print_table(['fold', 'size', 'phase', 'epoch', 'val dice', 'val jaccard', 'checkpoint'], rows)
    return 0


def cmd_predict(args, run):
    if bool(args.checkpoint) == bool(args.ensemble):
        raise ConfigError('predict: give exactly one of --checkpoint and --ensemble')

    if args.checkpoint:
        predictor = ptr.load_checkpoint(args.checkpoint)
        members = [predictor]
    else:
        spec = ptr.EnsembleSpec([path for path in args.ensemble.split(',') if path], run.threshold)
        predictor = ptr.Ensemble.load(spec)
        members = predictor.members
    balance = _color_balance(run, members)

    images_dir = args.images
    nested = os.path.join(images_dir, 'images')
    if os.path.isdir(nested):
        images_dir = nested

    _makedirs(args.out)
    if args.probabilities:
        _makedirs(os.path.join(args.out, 'probabilities'))
    ids = pd.list_ids(images_dir, None)
    for sample_id in ids:
        image = pd.load_image(os.path.join(images_dir, sample_id + '.png'))
        if balance:
            image = pd.color_balance(image)

        if isinstance(predictor, ptr.Ensemble):
            probs, mask = predictor.predict(image)
        else:
            probs = ptr.predict(predictor, image)
            mask = pm.binarize(probs, run.threshold)

        pd.save_mask(os.path.join(args.out, sample_id + '.png'), mask)
        if args.probabilities:
            pd.save_probability_map(os.path.join(args.out, 'probabilities', sample_id + '.png'),
                                    probs)

    print('Wrote {} masks to {}'.format(len(ids), args.out))
    return 0


def _color_balance(run, checkpoints):
    ''' The checkpoints' own color balance setting; an explicit run setting must agree with it '''
    recorded = ptr.recorded_color_balance(checkpoints)
    if recorded is None:
        return run.color_balance
    if run.is_explicit('color_balance') and run.color_balance != recorded:
        raise ConfigError('color_balance: the checkpoint was trained with color_balance = {} '
                          'but the run sets {}'.format(str(recorded).lower(),
                                                       str(run.color_balance).lower()))
    return recorded


def cmd_evaluate(args, run):
    report = ptr.evaluate(args.pred, args.truth, run.cut)
    report.write_csv(args.out)
    summary_path = os.path.splitext(args.out)[0] + '_summary.csv'
    report.write_summary(summary_path)

    print_table(['images', 'jaccard', 'threshold jaccard', 'cut', 'dice'],
                [[len(report.per_image), '{:.4f}'.format(report.dataset_jaccard),
                  '{:.4f}'.format(report.dataset_threshold_jaccard), report.cut,
                  '{:.4f}'.format(report.dataset_dice)]])
    return 0


def cmd_schedule(args, run):
    lr_max = run.lr_max if run.lr_max is not None else 0.01
    spec = ps.ScheduleSpec(run.schedule, args.iterations, run.cut_frac, run.ratio, lr_max)
    spec.validate()
    ps.write_schedule_csv(spec, args.out)
    if args.svg:
        pplot.plot_schedule(spec, args.svg)
    print('Schedule of {} iterations, peak {!r} at iteration {}'.format(args.iterations, lr_max,
                                                                       spec.cut))
    return 0


def cmd_info(args, run):
    model = ptr.load_checkpoint(args.checkpoint).model if args.checkpoint \
        else pu.build(run.model_config(), run.seed)
    rows = pu.parameter_summary(model)

    if args.verbose >= 1:
        print_table(['group', 'parameter', 'shape', 'count', 'trainable'],
                    [[g, n, 'x'.join(str(e) for e in s), c, t] for g, n, s, c, t in rows])

    totals = [[group.name, len(group.params), sum(param.size for param in group.params)]
              for group in model.groups]
    totals.append(['total', len(rows), sum(row[3] for row in rows)])
    print_table(['group', 'tensors', 'parameters'], totals)
    print('Input extents must be multiples of {}'.format(model.config.downsample_factor))
    return 0


def cmd_export_encoder(args, run):
    checkpoint = ptr.load_checkpoint(args.checkpoint)
    pu.export_encoder_weights(checkpoint.model, args.out)
    print('Wrote encoder weights of {} to {}'.format(args.checkpoint, args.out))
    return 0


# Parser -------------------------------------------------------------------------------------------


def _common_parser():
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument('-v', '--verbose', action='count', default=0,
                        help='-v for progress, -vv for debug output')
    common.add_argument('--config', help='key = value run configuration file')
    common.add_argument('--dump-config', metavar='PATH',
                        help='write the resolved configuration to PATH')

    keys = common.add_argument_group('configuration keys')
    for key in pc.RunConfig.keys():
        keys.add_argument('--' + key.replace('_', '-'), dest=key, default=None, metavar='VALUE',
                          help=pc.HELP.get(key))
    return common


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='pylesion', allow_abbrev=False,
                                     description='Train and apply U-Nets for skin lesion '
                                                 'segmentation.')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    def add(name, func, help_text):
        sub = commands.add_parser(name, parents=[common], allow_abbrev=False, help=help_text)
        sub.set_defaults(func=func)
        return sub

    sub = add('synth', cmd_synth, 'generate a synthetic dataset')
    sub.add_argument('--n', type=int, default=250, help='number of image/mask pairs')
    sub.add_argument('--out', help='dataset directory (default: data_dir)')
    sub.add_argument('--force', action='store_true', help='write into a non-empty directory')

    sub = add('lr-find', cmd_lr_find, 'run the learning rate range test')
    sub.add_argument('--out', default='lr_curve.csv', help='curve CSV')
    sub.add_argument('--svg', help='curve chart')
    sub.add_argument('--fold', type=int, default=0, help='fold held out for validation')

    sub = add('train', cmd_train, 'train one or all folds')
    which = sub.add_mutually_exclusive_group()
    which.add_argument('--fold', type=int, default=0, help='fold held out for validation')
    which.add_argument('--all-folds', action='store_true', help='train every fold')
    sub.add_argument('--progressive', action='store_true',
                     help='train at each of the configured sizes in turn')

    sub = add('predict', cmd_predict, 'predict lesion masks')
    sub.add_argument('--checkpoint', help='single model checkpoint')
    sub.add_argument('--ensemble', help='comma separated checkpoints to average')
    sub.add_argument('--images', required=True, help='directory of images (or dataset directory)')
    sub.add_argument('--out', required=True, help='output directory for masks')
    sub.add_argument('--probabilities', action='store_true',
                     help='also write 16-bit probability maps to OUT/probabilities')

    sub = add('evaluate', cmd_evaluate, 'score predicted masks')
    sub.add_argument('--pred', required=True, help='directory of predicted masks')
    sub.add_argument('--truth', required=True,
                     help='directory (or dataset directory) of true masks')
    sub.add_argument('--out', default='report.csv', help='per-image report CSV')

    sub = add('schedule', cmd_schedule, 'write the learning rate schedule')
    sub.add_argument('--iterations', type=int, default=100, help='iterations in the phase')
    sub.add_argument('--out', default='schedule.csv', help='schedule CSV')
    sub.add_argument('--svg', help='schedule chart')

    sub = add('info', cmd_info, 'describe the model and its layer groups')
    sub.add_argument('--checkpoint', help='describe this checkpoint instead of a fresh model')

    sub = add('export-encoder', cmd_export_encoder, 'export encoder weights of a checkpoint')
    sub.add_argument('--checkpoint', required=True, help='checkpoint to read')
    sub.add_argument('--out', required=True, help='weight archive to write')

    return parser


def main(argv=None):
    ''' Run the tool and return its exit code '''
    args = build_parser().parse_args(argv)

    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 \
        else logging.DEBUG
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')

    try:
        run = _run_config(args)
        return args.func(args, run)
    except PylesionError as error:
        print('error: {}'.format(error), file=sys.stderr)
        return error.exit_code
    except OSError as error:
        print('error: {}'.format(error), file=sys.stderr)
        return StorageError.exit_code


if __name__ == '__main__':
    sys.exit(main())
