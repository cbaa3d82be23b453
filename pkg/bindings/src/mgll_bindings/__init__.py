"""Flat-buffer bindings for plugging the mgll objectives into host frameworks."""

import mgll as _mgll

# The wrapper tracks the primary package version exactly.
__version__ = _mgll.__version__

from .buffers import BatchShape, LossScalars, ValidationError, forward_backward
from .shim import training_shim
