"""
Contrastive and reconstruction losses, retrieval metrics
"""
from dataclasses import dataclass, asdict
from typing import Optional, Sequence, Union

import numpy as np

from hybridtower.autograd.tensor import Tensor, l2_normalize, log_softmax
from hybridtower.errors import DataFormatError, NumericError, UsageError
from hybridtower.utils.logger import get_logger

logger = get_logger("objectives")

ZERO_NORM = 1e-12


def cosine_sim(t: np.ndarray, v: np.ndarray) -> float:
    """
    Cosine similarity of two vectors

    Raises:
        NumericError: when either norm is below 1e-12
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    nt, nv = np.linalg.norm(t), np.linalg.norm(v)
    if nt < ZERO_NORM or nv < ZERO_NORM:
        logger.warning("Cosine similarity requested for a zero-norm vector")
        raise NumericError("Cosine similarity is undefined for a zero-norm vector")
    return float(np.dot(t, v) / (nt * nv))


def similarity_matrix(texts: Tensor, videos: Tensor) -> Tensor:
    """(N_t, N_v) cosine similarities of row vectors"""
    return l2_normalize(texts) @ l2_normalize(videos).T


def info_nce(sim: Tensor, tau: Union[Tensor, float]) -> Tensor:
    """
    Symmetric InfoNCE over a square similarity matrix with positives on the diagonal

    Logits are similarity multiplied by tau; the loss averages the text-to-video
    and video-to-text directions.
    """
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise UsageError(f"info_nce needs a square matrix, got {sim.shape}")
    batch = sim.shape[0]
    if batch == 0:
        raise UsageError("info_nce needs a non-empty batch")
    logits = sim * tau
    diag = (np.arange(batch), np.arange(batch))
    l_t2v = -log_softmax(logits, axis=1)[diag].mean()
    l_v2t = -log_softmax(logits, axis=0)[diag].mean()
    return (l_t2v + l_v2t) * 0.5


def recon_loss(t_p: Tensor, t: Tensor) -> Tensor:
    """Mean cosine distance 1 - cos(t_p, t) over rows (or of two vectors)"""
    if t_p.shape != t.shape:
        raise UsageError(f"recon_loss shapes differ: {t_p.shape} vs {t.shape}")
    cos = (l2_normalize(t_p) * l2_normalize(t)).sum(axis=-1)
    return (1.0 - cos).mean()


def total_loss(l_cons, l_recon, alpha: float):
    """L = L_cons + alpha * L_recon"""
    if alpha < 0:
        raise UsageError(f"alpha must be non-negative, got {alpha}")
    return l_cons + l_recon * alpha


@dataclass
class RetrievalMetrics:
    """Recall percentages, their sum, and mean/median rank of the ground truth"""
    r1: float
    r5: float
    r10: float
    sum_r: float
    mnr: float
    mdr: float
    count: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_line(self, **extra) -> str:
        """Single machine-readable ``key=value`` record"""
        fields = {
            "r1": f"{self.r1:.2f}", "r5": f"{self.r5:.2f}", "r10": f"{self.r10:.2f}",
            "sum_r": f"{self.sum_r:.2f}", "mnr": f"{self.mnr:.2f}", "mdr": f"{self.mdr:.1f}",
            "count": str(self.count),
        }
        fields.update({k: str(v) for k, v in extra.items()})
        return " ".join(f"{k}={v}" for k, v in fields.items())


def ground_truth_ranks(sim: np.ndarray, ground_truth: Sequence[int],
                       video_ids: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    1-based rank of each text's ground-truth column under descending similarity

    Ties are broken by ascending video id (column index when ids are not given).

    Args:
        sim: (N_t, N_v) similarity matrix
        ground_truth: Column index of the matching video per text
        video_ids: Optional id per column

    Returns:
        np.ndarray (N_t,) of ranks
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise UsageError(f"Similarity must be 2-D, got {sim.shape}")
    n_t, n_v = sim.shape
    gt = np.asarray(ground_truth)
    if gt.shape != (n_t,):
        raise DataFormatError(f"Expected {n_t} ground-truth entries, got {gt.shape}")
    if gt.dtype.kind not in "iu" or np.any(gt < 0) or np.any(gt >= n_v):
        raise DataFormatError("Every text needs a ground-truth video in the gallery")
    ids = np.arange(n_v) if video_ids is None else np.asarray(video_ids)

    rows = np.arange(n_t)
    gt_scores = sim[rows, gt][:, None]
    gt_ids = ids[gt][:, None]
    better = sim > gt_scores
    tied_before = (sim == gt_scores) & (ids[None, :] < gt_ids)
    return 1 + better.sum(axis=1) + tied_before.sum(axis=1)


def compute_metrics(sim: np.ndarray, ground_truth: Sequence[int],
                    video_ids: Optional[Sequence[int]] = None) -> RetrievalMetrics:
    """R@1/5/10 (percent), SumR, MnR and MdR for text-to-video ranking"""
    ranks = ground_truth_ranks(sim, ground_truth, video_ids)
    if ranks.size == 0:
        raise DataFormatError("No queries to evaluate")
    r1, r5, r10 = (float(np.mean(ranks <= k) * 100.0) for k in (1, 5, 10))
    return RetrievalMetrics(
        r1=r1, r5=r5, r10=r10, sum_r=r1 + r5 + r10,
        mnr=float(np.mean(ranks)), mdr=float(np.median(ranks)), count=int(ranks.size),
    )
