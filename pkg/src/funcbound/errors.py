"""Exception hierarchy shared by all modules.

Every domain failure derives from :class:`FuncboundError` so the CLI can map it to
exit code 1 while letting programming errors surface as tracebacks.
"""


class FuncboundError(Exception):
    pass


# pe_image
class MalformedPe(FuncboundError):
    pass


class UnsupportedMachine(FuncboundError):
    pass


class UnmappedRva(FuncboundError):
    pass


class UnbackedRva(FuncboundError):
    pass


class NotX64(FuncboundError):
    pass


class MalformedPdata(FuncboundError):
    pass


# disasm
class UnmappedRange(FuncboundError):
    pass


# ground_truth
class SchemaError(FuncboundError):
    pass


class DuplicateStart(FuncboundError):
    pass


class StartOutsideImage(FuncboundError):
    pass


class EncodingMismatch(FuncboundError):
    pass


# corpus_stats / padding
class UnmappedFunction(FuncboundError):
    pass


class UnmappedStart(FuncboundError):
    pass


# detectors
class EmptyCorpus(FuncboundError):
    pass


class EmptyValidation(FuncboundError):
    pass


class DegenerateCounts(FuncboundError):
    pass


class ModelFormatError(FuncboundError):
    pass


# synth_corpus
class SpecInfeasible(FuncboundError):
    pass
