"""Transducer (RNN-T) training, internal-LM estimation and LM-fused decoding on synthetic tasks."""

__version__ = "0.1.0"
