"""Unified image- and text-query person retrieval.

One dual-encoder serves both retrieval tasks through task-routed class tokens;
hierarchical prompts (a learnable identity bank plus per-sample inverted
pseudo-tokens) supervise the joint space across a two-stage schedule.
"""

from .config import RunConfig, load_run_config

__all__ = ["RunConfig", "load_run_config"]
__version__ = "0.1.0"
