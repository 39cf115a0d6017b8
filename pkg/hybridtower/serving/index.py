"""
Offline video index and online exact-scan query

Index file layout (little-endian): magic "PIGX", u32 version, u32 d, u64 N, then N
records of [u64 id][d x f32]. Build metadata lives in a ``<index>.meta.json`` sidecar.
"""
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from hybridtower.autograd.tensor import no_grad
from hybridtower.errors import BuildError, DataFormatError, QueryError
from hybridtower.models.hybrid_tower import HybridTowerModel
from hybridtower.utils.logger import get_logger

logger = get_logger("index")

INDEX_MAGIC = b"PIGX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")


def record_dtype(dim: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("v", "<f4", (dim,))])


def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


@dataclass
class RetrievalIndex:
    """Immutable gallery of unit vectors keyed by unique video ids"""
    dim: int
    ids: np.ndarray        # (N,) uint64
    vectors: np.ndarray    # (N, d) float32
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.array(self.ids, dtype=np.uint64).reshape(-1)
        self.vectors = np.array(self.vectors, dtype=np.float32).reshape(-1, self.dim)
        if self.vectors.shape[0] != self.ids.shape[0]:
            raise BuildError(f"{self.ids.shape[0]} ids for {self.vectors.shape[0]} vectors")
        if np.unique(self.ids).size != self.ids.size:
            raise BuildError("Duplicate video ids in index")
        self.ids.setflags(write=False)
        self.vectors.setflags(write=False)

    def __len__(self):
        return int(self.ids.shape[0])

    # ---------------------------------------------------------------- format

    def to_bytes(self) -> bytes:
        records = np.empty(len(self), dtype=record_dtype(self.dim))
        records["id"] = self.ids
        records["v"] = self.vectors
        return _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.dim, len(self)) + records.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, metadata: Optional[Dict] = None) -> "RetrievalIndex":
        if len(data) < _HEADER.size:
            raise DataFormatError("Index file too short for its header")
        magic, version, dim, count = _HEADER.unpack_from(data, 0)
        if magic != INDEX_MAGIC:
            raise DataFormatError(f"Bad index magic {magic!r}")
        if version != INDEX_VERSION:
            raise DataFormatError(f"Unsupported index version {version}")
        if dim < 1:
            raise DataFormatError("Index dimension must be positive")
        dtype = record_dtype(dim)
        expected = _HEADER.size + count * dtype.itemsize
        if len(data) != expected:
            raise DataFormatError(f"Index payload is {len(data)} bytes, expected {expected}")
        if count == 0:
            records = np.empty(0, dtype=dtype)
        else:
            records = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
        return cls(dim=dim, ids=records["id"].copy(), vectors=records["v"].copy(), metadata=metadata or {})

    def save(self, path: Path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
            sidecar_path(path).write_text(json.dumps(self.metadata, sort_keys=True, indent=2), encoding="utf-8")
        except OSError as e:
            logger.error(f"Failed to write index {path}: {e}")
            raise
        logger.info(f"Index saved to {path} ({len(self)} videos, d={self.dim})")

    @classmethod
    def load(cls, path: Path) -> "RetrievalIndex":
        path = Path(path)
        if not path.exists():
            raise DataFormatError(f"Index not found: {path}")
        metadata = {}
        meta_file = sidecar_path(path)
        if meta_file.exists():
            try:
                metadata = json.loads(meta_file.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"Corrupt index metadata {meta_file}: {e}")
        else:
            logger.warning(f"Index metadata missing: {meta_file}")
        return cls.from_bytes(path.read_bytes(), metadata)

    # ---------------------------------------------------------------- search

    def subset(self, ids: Sequence[int]) -> "RetrievalIndex":
        """New index restricted to ``ids``, in this index's order"""
        keep = np.isin(self.ids, np.asarray(ids, dtype=np.uint64))
        return RetrievalIndex(self.dim, self.ids[keep], self.vectors[keep], dict(self.metadata))

    def scores(self, t: np.ndarray) -> np.ndarray:
        """float64 dot products of every stored vector with ``t``"""
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != self.dim:
            raise QueryError(f"Query dimension {t.shape[0]} != index dimension {self.dim}")
        return self.vectors.astype(np.float64) @ t


def rank_order(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending id"""
    return np.lexsort((np.asarray(ids), -np.asarray(scores)))


def unit_query(t: np.ndarray) -> np.ndarray:
    """Flattened float64 copy of ``t`` scaled to unit length"""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    norm = np.linalg.norm(t)
    if norm < 1e-12:
        raise QueryError("Query embedding has zero norm")
    return t / norm


def query(index: RetrievalIndex, t: np.ndarray, top: int) -> List[Tuple[int, float]]:
    """
    Exact scan of the index

    Args:
        index: Non-empty index
        t: (d,) text embedding; normalized here
        top: Number of results wanted

    Returns:
        min(top, N) (video_id, score) pairs, best first
    """
    if len(index) == 0:
        raise QueryError("Cannot query an empty index")
    if top < 1:
        raise QueryError(f"top must be positive, got {top}")
    scores = index.scores(unit_query(t))
    order = rank_order(scores, index.ids)[:min(top, len(index))]
    return [(int(index.ids[i]), float(scores[i])) for i in order]


def build_index(model: HybridTowerModel, frames: np.ndarray, ids: Sequence[int], batch_size: int = 64,
                metadata: Optional[Dict] = None, progress: bool = False) -> RetrievalIndex:
    """
    Encode, select, generate, fuse and normalize every video

    Args:
        model: Trained model
        frames: (N, m, n, d_in) raw videos
        ids: N unique video ids
        batch_size: Videos per forward pass
        metadata: Extra build metadata for the sidecar
        progress: Show a progress bar

    Returns:
        RetrievalIndex
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] != ids.shape[0]:
        raise BuildError(f"{ids.shape[0]} ids for {frames.shape[0]} videos")
    if np.any(ids < 0):
        raise BuildError("Video ids must be non-negative")
    if np.unique(ids).size != ids.size:
        values, counts = np.unique(ids, return_counts=True)
        raise BuildError(f"Duplicate video ids: {values[counts > 1][:5].tolist()}")

    d = model.dims.width
    vectors = np.zeros((ids.shape[0], d))
    with no_grad():
        starts = range(0, ids.shape[0], batch_size)
        for start in tqdm(starts, desc="build index", disable=not progress, leave=False):
            vectors[start:start + batch_size] = model.video_embeddings(frames[start:start + batch_size]).data

    meta = {
        "model_hash": model.fingerprint(),
        "built_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "count": int(ids.shape[0]),
        "dim": d,
    }
    meta.update(metadata or {})
    logger.info(f"Built index over {ids.shape[0]} videos")
    return RetrievalIndex(dim=d, ids=ids.astype(np.uint64), vectors=vectors, metadata=meta)


def online_ranking(model: HybridTowerModel, t: np.ndarray, frames: np.ndarray, ids: Sequence[int],
                   top: Optional[int] = None) -> List[Tuple[int, float]]:
    """
    Rank videos by recomputing every video representation at query time in float64

    Nothing is precomputed; this is the reference for the offline index.
    """
    t = unit_query(t)
    ids = np.asarray(ids, dtype=np.int64)
    scores = np.zeros(ids.shape[0])
    with no_grad():
        for i in range(ids.shape[0]):
            v = model.video_embeddings(frames[i:i + 1]).data[0]
            scores[i] = float(v @ t)
    order = rank_order(scores, ids)
    if top is not None:
        order = order[:top]
    return [(int(ids[i]), float(scores[i])) for i in order]
