"""
Data models passed between encoders, token selector, generator and fusioner
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from hybridtower.autograd.tensor import Tensor
from hybridtower.errors import ShapeError


@dataclass
class RawVideo:
    """m frames of n synthetic feature patches of width d_in"""
    frames: np.ndarray  # (m, n, d_in)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise ShapeError(f"RawVideo frames must be (m, n, d_in) with m, n >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_patches(self) -> int:
        return self.frames.shape[1]


@dataclass
class RawText:
    """Sequence of synthetic token embeddings of width d_in"""
    tokens: np.ndarray  # (L, d_in)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError(f"RawText tokens must be a non-empty (L, d_in) array, got {self.tokens.shape}")


@dataclass
class MultiGrainVideoFeatures:
    """Video encoder output for a batch of B videos

    x_v, x_f and x_p are projected into the cross-modal space. ``last_attention``
    holds, per head, the final layer's attention from the first video-level token
    to the patch tokens, renormalized over patches. ``its_query``/``its_keys`` are
    that layer's attention inputs (after its layer norm), kept for token selection.
    """
    x_v: Tensor                 # (B, 4, d)
    x_f: Tensor                 # (B, m, d)
    x_p: Tensor                 # (B, m, n, d)
    last_attention: np.ndarray  # (B, h, m * n)
    its_query: np.ndarray       # (B, 1, d)
    its_keys: np.ndarray        # (B, m * n, d)

    @property
    def batch_size(self) -> int:
        return self.x_v.shape[0]

    @property
    def num_frames(self) -> int:
        return self.x_f.shape[1]

    @property
    def num_patches(self) -> int:
        return self.x_p.shape[2]

    @property
    def num_rows(self) -> int:
        """Rows of [x_v, x_f, x_p] per video: 4 + m + m * n"""
        return 4 + self.num_frames + self.num_frames * self.num_patches


@dataclass
class InformativenessMatrix:
    """Patch importance scores S (m, n) and the per-head scores they max-pool"""
    scores: np.ndarray    # (m, n)
    per_head: np.ndarray  # (h, m, n)


@dataclass
class SelectedPatches:
    """Top-k patch tokens in descending-score order"""
    x_ip: Tensor                        # (k, d)
    indices: List[Tuple[int, int]]      # (frame, patch) pairs

