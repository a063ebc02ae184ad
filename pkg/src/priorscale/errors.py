class ConfigurationError(ValueError):
    """Invalid configuration value or combination of values."""


class BackendError(RuntimeError):
    """A neural backend (denoiser, codec, service) failed or is unreachable."""


class CaptionerError(BackendError):
    """The captioning model failed to produce a description."""
