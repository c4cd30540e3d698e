"""revid: production function, TFP and markup recovery from revenue panels."""

__version__ = "0.1.0"
