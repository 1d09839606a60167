"""Sequence-aware crack detection for conveyor-belt imagery.

The detector consumes sliding windows of consecutive frames, extracts
per-frame features with a shared backbone, and fuses three feature
branches (spatial context, temporal aggregation, wavelet frequency)
before an anchor-free detection head predicts crack boxes on the
keyframe (the last frame of each window).
"""

__version__ = "0.1.0"
