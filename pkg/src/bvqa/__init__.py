"""Blind video quality assessment toolkit.

Pipeline: frames -> overlapping patches -> frozen feature extractor ->
recurrent spatial pooling over patches -> recurrent temporal pooling over
frames -> linear regression head -> quality score. Training, evaluation and
calibration utilities are included; everything is deterministic under a
single run seed.
"""

__version__ = "0.1.0"
