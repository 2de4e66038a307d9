"""Reinforced causal keyframe search for video question answering."""

__version__ = "0.1.0"
