"""Self-supervised pose and motion representations for workout-form error detection."""

__version__ = "0.1.0"
