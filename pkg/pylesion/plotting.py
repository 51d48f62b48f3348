# -*- coding: utf-8 -*-
''' SVG line charts of range test curves, schedules and training histories.

Every series is drawn as one line whose SVG group id is ``series-<name>``, so the files can be
checked or restyled without parsing the drawing.
'''
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402

from pylesion.errors import StorageError  # noqa: E402

logger = logging.getLogger(__name__)

SVG_METADATA = {'Date': None, 'Creator': 'pylesion'}


def _save(fig, path):
    try:
        with matplotlib.rc_context({'svg.hashsalt': 'pylesion'}):
            fig.savefig(path, format='svg', metadata=SVG_METADATA)
    except OSError as error:
        raise StorageError('Could not write {}: {}'.format(path, error)) from error
    finally:
        plt.close(fig)
    logger.info('Wrote %s', path)
    return path


def line_chart(path, series, title='', xlabel='', ylabel='', logx=False, marker_x=None):
    ''' Draw named series on one set of axes and save as SVG.

    Arguments:
        path: Output file.
        series (dict): Name to (x values, y values).
        title, xlabel, ylabel (str, optional): Labels.
        logx (bool, optional): Logarithmic x axis.
        marker_x (float, optional): Draw a vertical marker at this x.
    '''
    fig, axes = plt.subplots(figsize=(6, 4))
    for name, (xs, ys) in series.items():
        line, = axes.plot(list(xs), list(ys), label=name)
        line.set_gid('series-{}'.format(name))

    if logx:
        axes.set_xscale('log')
    if marker_x is not None:
        axes.axvline(marker_x, color='gray', linestyle='--', linewidth=1).set_gid('marker')

    axes.set_title(title)
    axes.set_xlabel(xlabel)
    axes.set_ylabel(ylabel)
    if len(series) > 1:
        axes.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_lr_curve(curve, path, picked=None):
    ''' Raw and smoothed loss against the learning rate, log x axis '''
    series = {'raw_loss': (curve.lrs, [record[1] for record in curve.records]),
              'smoothed_loss': (curve.lrs, curve.smoothed)}
    return line_chart(path, series, 'Learning rate range test', 'learning rate', 'loss',
                      logx=True, marker_x=picked)


def plot_schedule(spec, path):
    ''' Learning rate against iteration '''
    iterations = range(int(spec.total_iterations) + 1)
    return line_chart(path, {'lr': (iterations, [spec.lr(t) for t in iterations])},
                      'Learning rate schedule', 'iteration', 'learning rate')


def plot_history(history, path):
    ''' Training and validation loss, validation Dice and Jaccard against the global epoch '''
    steps = range(1, len(history) + 1)
    series = {name: (steps, [getattr(record, name) for record in history])
              for name in ('train_loss', 'val_loss', 'val_dice', 'val_jaccard')}
    return line_chart(path, series, 'Training history', 'epoch', 'value')
