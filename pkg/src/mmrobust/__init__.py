"""Multimodal transformer robustness to missing modalities.

Multi-task training over modality-1-only, modality-2-only and joint tasks,
plus a differentiable search for the layer where cross-modal attention opens.
"""
from __future__ import annotations

from .kernels import BACKEND

__version__ = "0.1.0"
RESULTS_SCHEMA = "1"

__all__ = ["BACKEND", "RESULTS_SCHEMA", "__version__"]
