"""Single-pixel training-data backdoors: poisoning, measurement, defenses."""

__version__ = "0.1.0"
