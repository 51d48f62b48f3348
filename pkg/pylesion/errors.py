''' Exceptions raised throughout pylesion.

Every error carries the exit code the command line tool returns when the error reaches it, so
scripts driving ``pylesion`` can tell a bad config apart from bad data or a diverged run.

Example:

    .. code-block:: python

        from pylesion.errors import PylesionError

        try:
            run()
        except PylesionError as error:
            print(error)
            raise SystemExit(error.exit_code)
'''


class PylesionError(Exception):
    ''' Base class of every error raised on purpose by pylesion '''
    exit_code = 1


class ConfigError(PylesionError, ValueError):
    ''' A config field, config key, group name or policy name is invalid '''
    exit_code = 2


class ContractError(PylesionError, ValueError):
    ''' A precondition of an operation does not hold '''
    exit_code = 2


class ShapeError(ContractError):
    ''' Shapes do not satisfy the shape algebra of an operation '''


class DataError(PylesionError):
    ''' Dataset content is inconsistent: mismatched dimensions, missing ids, ... '''
    exit_code = 3


class EnsembleError(DataError):
    ''' Ensemble members disagree on their output '''


class TrainingError(PylesionError, ArithmeticError):
    ''' Training produced non-finite numbers

    Attributes:
        epoch: The epoch (1-based, within its phase) where the problem showed up, if known.
        phase: The phase number, if known.
    '''
    exit_code = 4

    def __init__(self, message, epoch=None, phase=None):
        super().__init__(message)
        self.epoch = epoch
        self.phase = phase


class SelectionError(TrainingError):
    ''' The learning rate range test curve has no downward slope to pick from '''


class StorageError(PylesionError, OSError):
    ''' A file or directory could not be read or written '''
    exit_code = 5


class LoadError(StorageError):
    ''' An archive is corrupt, truncated, or of another format version '''


class WeightImportError(LoadError):
    ''' An imported array matches a parameter by name but not by shape '''
