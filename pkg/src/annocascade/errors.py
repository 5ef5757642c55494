"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericError -> 4, anything else -> 1.
"""


class AnnocascadeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AnnocascadeError):
    """Operation inputs do not conform to the operation's shape rule."""


class NumericError(AnnocascadeError):
    """A completed operation produced NaN or Inf, or training diverged."""


class UsageError(AnnocascadeError):
    """API misuse: missing gradients, version mismatch, bad call order."""


class DataError(AnnocascadeError):
    """Corpus-level problem: unminable labels, unsatisfiable split, ..."""


class ConfigError(AnnocascadeError):
    """Invalid or inconsistent run configuration."""


class MissingArtifactError(AnnocascadeError):
    """A pipeline stage needs an upstream artifact that does not exist."""
