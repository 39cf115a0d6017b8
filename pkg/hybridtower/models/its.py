"""
Informativeness token selection: rank patch tokens by the video token's attention
"""
import math
from typing import Tuple

import numpy as np

from hybridtower.autograd.nn import MultiHeadAttention
from hybridtower.autograd.tensor import Tensor
from hybridtower.errors import ConfigError, UsageError
from hybridtower.models.features import InformativenessMatrix, SelectedPatches

SCALE_MODES = ("per_head", "paper_literal")


def attention_scale(width: int, heads: int, patches: int, mode: str = "per_head") -> float:
    """1/sqrt(d/h) for ``per_head``; 1/sqrt(d/n) with n patches per frame for ``paper_literal``"""
    if mode == "per_head":
        return 1.0 / math.sqrt(width / heads)
    if mode == "paper_literal":
        return 1.0 / math.sqrt(width / patches)
    raise ConfigError(f"Unknown ITS scale mode {mode!r}; expected one of {SCALE_MODES}")


def head_scores(cls_hidden: np.ndarray, patch_hidden: np.ndarray, attention: MultiHeadAttention,
                scale: float) -> np.ndarray:
    """
    Per-head softmax of the cls query against patch keys

    Args:
        cls_hidden: (B, 1, d) attention-layer input at the first video token
        patch_hidden: (B, P, d) attention-layer inputs at the patch tokens
        attention: Layer whose query/key projections are reused
        scale: Logit scale

    Returns:
        np.ndarray (B, h, P)
    """
    d = attention.dim
    if cls_hidden.shape[-1] != d or patch_hidden.shape[-1] != d:
        raise ConfigError(f"ITS inputs width {cls_hidden.shape[-1]}/{patch_hidden.shape[-1]} != attention width {d}")
    batch, count, _ = patch_hidden.shape
    h, dh = attention.heads, attention.head_dim

    q = cls_hidden @ attention.q_proj.weight.data + attention.q_proj.bias.data
    k = patch_hidden @ attention.k_proj.weight.data + attention.k_proj.bias.data
    q = q.reshape(batch, h, dh)
    k = k.reshape(batch, count, h, dh)

    logits = np.einsum("bhd,bphd->bhp", q, k) * scale
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def informativeness(cls_hidden: np.ndarray, patch_hidden: np.ndarray, attention: MultiHeadAttention,
                    frames: int, patches: int, scale_mode: str = "per_head") -> InformativenessMatrix:
    """
    Informativeness matrix of one video

    Args:
        cls_hidden: (1, d) last attention layer input at the first video token
        patch_hidden: (m * n, d) last attention layer inputs at the patch tokens
        attention: The encoder's last attention layer (projections reused, not retrained)
        frames: m
        patches: n
        scale_mode: ``per_head`` or ``paper_literal``

    Returns:
        InformativenessMatrix with S = max over heads of the per-head scores
    """
    cls_hidden = np.asarray(cls_hidden, dtype=np.float64).reshape(1, 1, -1)
    patch_hidden = np.asarray(patch_hidden, dtype=np.float64)
    if patch_hidden.shape[0] != frames * patches:
        raise ConfigError(f"Expected {frames * patches} patch rows, got {patch_hidden.shape[0]}")
    scale = attention_scale(attention.dim, attention.heads, patches, scale_mode)
    per_head = head_scores(cls_hidden, patch_hidden[None], attention, scale)[0]
    per_head = per_head.reshape(attention.heads, frames, patches)
    return InformativenessMatrix(scores=per_head.max(axis=0), per_head=per_head)


def top_k_order(scores: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest scores, descending, ties by smaller index

    Args:
        scores: (..., P) scores
        k: Number to select, 1 <= k <= P

    Returns:
        np.ndarray (..., k) of int indices
    """
    count = scores.shape[-1]
    if not 1 <= k <= count:
        raise UsageError(f"top-k needs 1 <= k <= {count}, got k={k}")
    flat = scores.reshape(-1, count)
    order = np.empty((flat.shape[0], k), dtype=np.int64)
    positions = np.arange(count)
    for row in range(flat.shape[0]):
        order[row] = np.lexsort((positions, -flat[row]))[:k]
    return order.reshape(*scores.shape[:-1], k)


def select_top_k(matrix: InformativenessMatrix, x_p: Tensor, k: int) -> SelectedPatches:
    """
    Gather the k most informative patch tokens of one video

    Args:
        matrix: InformativenessMatrix (m, n)
        x_p: (m, n, d) patch tokens
        k: Number of tokens

    Returns:
        SelectedPatches; gradients flow into x_p through the gathered rows only
    """
    m, n = matrix.scores.shape
    if x_p.shape[:2] != (m, n):
        raise UsageError(f"x_p shape {x_p.shape} does not match scores {(m, n)}")
    order = top_k_order(matrix.scores.reshape(-1), k)
    x_ip = x_p.reshape(m * n, x_p.shape[-1])[order]
    indices = [(int(i // n), int(i % n)) for i in order]
    return SelectedPatches(x_ip=x_ip, indices=indices)


def select_top_k_batch(scores: np.ndarray, x_p: Tensor, k: int) -> Tuple[Tensor, np.ndarray]:
    """
    Batched gather of top-k patch tokens

    Args:
        scores: (B, m * n) informativeness scores
        x_p: (B, m, n, d) patch tokens
        k: Number of tokens

    Returns:
        (x_ip (B, k, d), flat indices (B, k))
    """
    batch, m, n, d = x_p.shape
    order = top_k_order(scores, k)
    x_ip = x_p.reshape(batch, m * n, d)[np.arange(batch)[:, None], order]
    return x_ip, order
