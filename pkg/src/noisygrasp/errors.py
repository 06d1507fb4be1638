"""Exception types shared across the package."""


class NoisyGraspError(Exception):
    """Base class for all package errors."""


class InvalidInputError(NoisyGraspError, ValueError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """An array argument has the wrong shape."""


class DatasetError(NoisyGraspError):
    """Base class for dataset persistence errors."""


class CorruptDatasetError(DatasetError):
    """Manifest and on-disk records disagree (count or hash mismatch)."""


class CorruptRecordError(DatasetError):
    """A single record failed to parse; carries the record index."""

    def __init__(self, index, message):
        super().__init__(f"record {index}: {message}")
        self.index = index


class UnsupportedVersionError(DatasetError):
    """The on-disk format version is newer than this code understands."""


class ConcurrentWriteError(DatasetError):
    """Another writer holds the dataset directory lock."""


class IncompleteGridError(NoisyGraspError):
    """A report was requested over a run grid with missing entries."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__(
            "missing runs for: " + ", ".join(f"({m[0]}, {m[1]})" for m in self.missing)
        )
