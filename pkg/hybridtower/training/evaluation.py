"""
Batched embedding and held-out evaluation helpers
"""
from typing import Sequence, Tuple

import numpy as np

from hybridtower.autograd.tensor import no_grad
from hybridtower.data.synthetic import PairedDataset
from hybridtower.errors import ConfigError
from hybridtower.models.hybrid_tower import HybridTowerModel
from hybridtower.training.objectives import RetrievalMetrics, compute_metrics

EVAL_MODES = ("hybrid", "two_tower")


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def text_embeddings(model: HybridTowerModel, texts: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """(N, d) L2-normalized text embeddings"""
    chunks = []
    with no_grad():
        for start in range(0, len(texts), batch_size):
            chunks.append(model.encode_texts(list(texts[start:start + batch_size])).data)
    if not chunks:
        return np.zeros((0, model.dims.width))
    return _normalize_rows(np.concatenate(chunks, axis=0))


def video_embeddings(model: HybridTowerModel, frames: np.ndarray, batch_size: int = 64,
                     mode: str = "hybrid") -> np.ndarray:
    """(N, d) L2-normalized video embeddings, fused (``hybrid``) or backbone-only (``two_tower``)"""
    if mode not in EVAL_MODES:
        raise ConfigError(f"Unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")
    chunks = []
    with no_grad():
        for start in range(0, len(frames), batch_size):
            batch = frames[start:start + batch_size]
            if mode == "hybrid":
                chunks.append(model.video_embeddings(batch).data)
            else:
                chunks.append(model.two_tower_embeddings(batch).data)
    if not chunks:
        return np.zeros((0, model.dims.width))
    return _normalize_rows(np.concatenate(chunks, axis=0))


def evaluate_split(model: HybridTowerModel, dataset: PairedDataset, split: str = "val",
                   mode: str = "hybrid", batch_size: int = 64) -> Tuple[RetrievalMetrics, RetrievalMetrics]:
    """
    Text-to-video and video-to-text metrics over one split

    Each text's ground truth is the video at the same row of the split.

    Returns:
        (t2v metrics, v2t metrics)
    """
    rows = dataset.split_indices(split)
    t = text_embeddings(model, dataset.text_batch(rows), batch_size)
    v = video_embeddings(model, dataset.videos[rows], batch_size, mode)
    sim = t @ v.T
    ids = dataset.ids[rows]
    gt = np.arange(len(rows))
    return compute_metrics(sim, gt, ids), compute_metrics(sim.T, gt, ids)


def mean_recon_cosine(model: HybridTowerModel, dataset: PairedDataset, split: str = "val",
                      batch_size: int = 64) -> float:
    """Mean cos(t_p, t) over a split"""
    rows = dataset.split_indices(split)
    t = text_embeddings(model, dataset.text_batch(rows), batch_size)
    chunks = []
    with no_grad():
        for start in range(0, len(rows), batch_size):
            chunks.append(model.forward_video(dataset.videos[rows[start:start + batch_size]]).t_p.data)
    t_p = _normalize_rows(np.concatenate(chunks, axis=0))
    return float(np.mean(np.sum(t_p * t, axis=1)))
