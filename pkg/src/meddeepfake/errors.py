"""Exception types shared across the package.

The CLI maps these onto exit codes: anything that is the caller's fault
(bad manifest, bad config, unreadable checkpoint) exits with code 2,
unexpected internal failures exit with code 1.
"""


class MedDeepfakeError(Exception):
    """Base class for all package errors."""


class ManifestError(MedDeepfakeError):
    """Malformed or inconsistent dataset manifest."""


class ImageError(MedDeepfakeError):
    """Image that cannot be decoded or preprocessed."""


class CheckpointError(MedDeepfakeError):
    """Tensor container that is missing, truncated, or shape-incompatible."""


class BankError(MedDeepfakeError):
    """Feature-bank file or query that violates the bank contract."""


class ConfigError(MedDeepfakeError):
    """Invalid run configuration."""
