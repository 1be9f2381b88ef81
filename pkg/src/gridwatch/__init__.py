"""Smart-grid cyber range and process-aware intrusion detection."""

__version__ = "0.1.0"
