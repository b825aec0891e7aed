"""Desk-scale lab for online test-time domain generalization.

Episodic meta-training of a classifier across shifted source domains,
online generalization to unseen target streams with uncertainty-aware
neighbor labels, and a ladder of pseudo-labeling baselines with accuracy
and calibration reporting.
"""

__version__ = "0.1.0"
