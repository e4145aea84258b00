"""Frequency-domain multi-target backdoor attacks on multichannel time series."""

__version__ = "0.1.0"
