"""Augmented discriminative clustering for unsupervised domain-adaptive re-ID.

A desk-scale, numpy-only implementation: synthetic multi-camera identity data,
an MLP feature encoder with hand-written gradients, k-reciprocal re-ranking,
DBSCAN pseudo-labelling, an affine camera-style generator and the alternating
max/min training loop.
"""

__version__ = "0.1.0"
