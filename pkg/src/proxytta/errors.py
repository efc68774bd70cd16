"""Exception hierarchy. The CLI maps these onto exit codes (see cli.py)."""


class ProxyTTAError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProxyTTAError):
    """Invalid configuration value, unknown key, or selector/model mismatch."""


class ContractError(ProxyTTAError):
    """API misuse: shape mismatch, double insertion, bad argument combination."""


class DataFormatError(ProxyTTAError):
    """On-disk dataset is missing files or malformed; message names the file."""


class EmptySupportError(ProxyTTAError):
    """A masked loss or metric was asked to average over zero valid pixels."""


class DegenerateEmbeddingError(ProxyTTAError):
    """An embedding collapsed to (near-)zero norm; surfaced, never clamped."""


class LifecycleError(ProxyTTAError):
    """A stage was invoked before its prerequisite stage completed."""


class StreamProtocolError(ProxyTTAError):
    """Single-pass stream contract violated (re-consumption or re-request)."""


class TrainingError(ProxyTTAError):
    """Optimization diverged (non-finite loss); message carries the step index."""


class ReportError(ProxyTTAError):
    """Report emission failed; message lists missing runs."""
