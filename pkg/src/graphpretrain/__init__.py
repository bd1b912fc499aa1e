"""Multimodal item-graph pre-training: sampling, fusion, encoding and transfer evaluation."""

__version__ = "0.1.0"
