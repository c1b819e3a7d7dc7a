"""Backdoor poisoning attacks on unsupervised model adaptation, plus a
noise-sensitivity sample-reweighting defense, on a synthetic desk-scale
benchmark. Everything is seeded and bit-reproducible.
"""

__version__ = "0.1.0"
