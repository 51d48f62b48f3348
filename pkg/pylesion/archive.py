''' Reading and writing weight archives.

An archive is one file: a UTF-8 text manifest followed by the raw little-endian arrays in
manifest order. The same format stores checkpoints and encoder weights::

    pylesion-archive 1
    @model_config {"stem_channels": 8, ...}
    =stem.conv.weight f4 8,3,3,3
    =stem.bn.gamma f4 8
    end
    <raw bytes of stem.conv.weight><raw bytes of stem.bn.gamma>

- ``@key value`` lines carry metadata; the value is JSON.
- ``=name dtype shape`` lines list the arrays. ``dtype`` is ``f4``, ``f8`` or ``i8``; ``shape``
  is a comma separated list of extents, or ``-`` for a 0-d array.
- The payload length must equal the sum of the listed array sizes exactly.

Example:

    .. code-block:: python

        import numpy as np
        import pylesion.archive as pa

        pa.write_archive('weights.pla', {'w': np.ones((2, 2), np.float32)}, {'seed': 0})
        meta, arrays = pa.read_archive('weights.pla')
'''
from collections import OrderedDict
import json
import os

import numpy as np

from pylesion.errors import LoadError, StorageError

ARCHIVE_MAGIC = 'pylesion-archive'
ARCHIVE_VERSION = 1

_DTYPES = {'f4': '<f4', 'f8': '<f8', 'i8': '<i8'}


def _dtype_code(array):
    if array.dtype == np.float32:
        return 'f4'
    if array.dtype == np.float64:
        return 'f8'
    if np.issubdtype(array.dtype, np.integer):
        return 'i8'
    raise StorageError('Cannot archive arrays of dtype {}'.format(array.dtype))


def write_archive(path, arrays, metadata=None):
    ''' Write arrays and metadata to ``path``.

    The file is written next to its destination and moved into place once complete, so an
    interrupted write never leaves a partial archive behind.

    Arguments:
        path: Destination file.
        arrays (dict): Ordered mapping of name to numpy array.
        metadata (dict, optional): JSON-serializable values.
    '''
    lines = ['{} {}'.format(ARCHIVE_MAGIC, ARCHIVE_VERSION)]
    for key, value in (metadata or {}).items():
        lines.append('@{} {}'.format(key, json.dumps(value, sort_keys=True)))

    payload = []
    for name, array in arrays.items():
        if not name or any(char.isspace() for char in name):
            raise StorageError("Array name '{}' may not be empty or contain spaces".format(name))
        array = np.asarray(array)
        code = _dtype_code(array)
        shape = ','.join(str(extent) for extent in array.shape) if array.ndim else '-'
        lines.append('={} {} {}'.format(name, code, shape))
        payload.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    lines.append('end')

    temp_path = '{}.partial'.format(path)
    try:
        with open(temp_path, 'wb') as archive:
            archive.write(('\n'.join(lines) + '\n').encode('utf-8'))
            for chunk in payload:
                archive.write(chunk)
        os.replace(temp_path, path)
    except OSError as error:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise StorageError('Could not write archive {}: {}'.format(path, error)) from error

    return path


def read_archive(path):
    ''' Read an archive written by :func:`write_archive`.

    Arguments:
        path: Archive file.

    Returns:
        (metadata dict, OrderedDict of name -> numpy array)
    '''
    try:
        with open(path, 'rb') as archive:
            raw = archive.read()
    except OSError as error:
        raise StorageError('Could not read archive {}: {}'.format(path, error)) from error

    marker = raw.find(b'\nend\n')
    if marker < 0:
        raise LoadError('{}: no manifest terminator, file is truncated or not an archive'.format(
            path))

    try:
        lines = raw[:marker].decode('utf-8').split('\n')
    except UnicodeDecodeError as error:
        raise LoadError('{}: manifest is not valid UTF-8'.format(path)) from error
    payload = memoryview(raw)[marker + len(b'\nend\n'):]

    header = lines[0].split(' ')
    if len(header) != 2 or header[0] != ARCHIVE_MAGIC:
        raise LoadError("{}: not a pylesion archive (header '{}')".format(path, lines[0]))
    if header[1] != str(ARCHIVE_VERSION):
        raise LoadError('{}: archive format version {} cannot be read by version {}'.format(
            path, header[1], ARCHIVE_VERSION))

    metadata = {}
    entries = []
    for line in lines[1:]:
        try:
            if line.startswith('@'):
                key, value = line[1:].split(' ', 1)
                metadata[key] = json.loads(value)
            elif line.startswith('='):
                name, code, shape = line[1:].split(' ')
                shape = () if shape == '-' else tuple(int(extent) for extent in shape.split(','))
                entries.append((name, np.dtype(_DTYPES[code]), shape))
            else:
                raise ValueError(line)
        except (ValueError, KeyError) as error:
            raise LoadError("{}: malformed manifest line '{}'".format(path, line)) from error

    expected = sum(dtype.itemsize * int(np.prod(shape)) for _, dtype, shape in entries)
    if expected != len(payload):
        raise LoadError('{}: manifest lists {} payload bytes but the file holds {}'.format(
            path, expected, len(payload)))

    arrays = OrderedDict()
    offset = 0
    for name, dtype, shape in entries:
        count = int(np.prod(shape))
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(shape)
        arrays[name] = array.astype(dtype.newbyteorder('='))
        offset += dtype.itemsize * count

    return metadata, arrays
