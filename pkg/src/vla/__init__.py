"""Visual-linguistic agent pipeline.

Detections from a vision agent are reviewed for contextual plausibility
by a linguistic agent, flagged errors are re-classified by a vision
classifier, and the outcome is scored with COCO detection metrics,
correction rates, and entropy-based analysis.
"""

__version__ = "0.1.0"
