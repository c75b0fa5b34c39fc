"""Self-supervised depth and ego-motion learning on desk-scale scenes."""

__version__ = "0.1.0"
