from .decoder import DecodeMode, InsnClass, Instruction, REL_CLASSES, decode_one
from .sweep import DescentResult, linear_sweep, recursive_descent, sweep_bytes

__all__ = [
    "DecodeMode",
    "DescentResult",
    "InsnClass",
    "Instruction",
    "REL_CLASSES",
    "decode_one",
    "linear_sweep",
    "recursive_descent",
    "sweep_bytes",
]
