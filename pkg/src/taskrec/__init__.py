"""Task-aware command recommendation and proactive help detection."""

__version__ = "0.1.0"
