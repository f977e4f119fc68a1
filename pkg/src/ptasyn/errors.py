"""Exception hierarchy shared across the package.

Configuration and validation problems map to CLI exit code 2; everything
else that escapes is a runtime failure (exit code 1).
"""


class PtasynError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PtasynError):
    """Invalid configuration value; message names the offending field."""


class DatasetError(PtasynError):
    """Base class for on-disk dataset problems."""


class DatasetVersionError(DatasetError):
    """Manifest format_version is not one this build can read."""


class DatasetChecksumError(DatasetError):
    """Stored slice bytes do not match the manifest checksum."""


class DatasetEntryError(DatasetError):
    """A manifest entry is missing, truncated, or has the wrong shape."""


class CheckpointError(PtasynError):
    """Checkpoint archive is malformed or does not match the consumer."""
