"""Exception types shared across the pipeline.

Everything raised on bad data or bad shapes derives from KdcnError so the
CLI can map library failures to a data-error exit code in one place.
"""


class KdcnError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(KdcnError):
    """Operand shapes or lengths are incompatible."""


class SchemaError(KdcnError):
    """A record or triple violates the graph schema."""


class IngestionError(KdcnError):
    """An event record is malformed (carries the record number)."""


class ParseError(KdcnError):
    """A serialized file line cannot be parsed (carries the line number)."""


class CapacityError(KdcnError):
    """A size guard was exceeded (dense adjacency, candidate cap)."""


class TrainingError(KdcnError):
    """Training produced a non-finite loss or gradient."""


class SamplingError(KdcnError):
    """Negative sampling could not find a corrupted triple."""


class FormatError(KdcnError):
    """A binary file has a bad magic, version, or is truncated."""


class MetricError(KdcnError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
