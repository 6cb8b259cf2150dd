"""Exception hierarchy for the DFBF toolkit.

Every error carries the exit code the command line reports for it.
"""


class DFBFError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ConfigError(DFBFError):
    """Invalid or unknown configuration values"""
    exit_code = 2


class DataFormatError(DFBFError):
    """Malformed dataset, checkpoint or container file"""
    exit_code = 3


class NumericalError(DFBFError):
    """NaN or Inf encountered in a loss or gradient"""
    exit_code = 4


class ShapeError(DFBFError):
    """Operand shapes are incompatible"""


class StructuralError(DFBFError):
    """Graph, prune plan or tap layout is inconsistent"""


class OptimizerError(DFBFError):
    """Optimizer state does not match the parameters it updates"""


class DatasetIntegrityWarning(UserWarning):
    """Dataset was synthesized from a different model than the one supplied"""
