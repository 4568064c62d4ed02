"""All-in-one hybrid-weather video restoration at desk scale."""

__version__ = "0.1.0"
