"""Function-start detection toolkit for PE binaries."""
__version__ = "0.1.0"

from .errors import FuncboundError
from .pe import Machine, PeImage, parse_pe, read_pdata

__all__ = ["FuncboundError", "Machine", "PeImage", "parse_pe", "read_pdata", "__version__"]
