"""
Synthetic paired video/text data with planted cross-modal structure
"""
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Set, Tuple

import numpy as np

from hybridtower.config import RunConfig
from hybridtower.errors import ConfigError, DataFormatError
from hybridtower.models.features import RawText, RawVideo
from hybridtower.utils import blobfile
from hybridtower.utils.logger import get_logger

logger = get_logger("synthetic")

DATASET_MAGIC = b"PIGD"
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs; every array in a dataset is a function of these alone"""
    n_pairs: int = 2000
    z_dim: int = 16
    d_in: int = 32
    frames: int = 8
    patches: int = 16
    p_info: int = 2
    text_len: int = 8
    sigma_video: float = 1.0
    sigma_text: float = 0.1
    sigma_patch: float = 0.1
    drift: float = 0.1
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    shared_projection: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.p_info > self.patches:
            raise ConfigError(f"p_info ({self.p_info}) must not exceed patches ({self.patches})")
        if min(self.sigma_video, self.sigma_text, self.sigma_patch) < 0:
            raise ConfigError("Noise levels must be non-negative")
        if min(self.n_pairs, self.z_dim, self.d_in, self.frames, self.patches, self.text_len) < 1:
            raise ConfigError("Counts and dimensions must be positive")
        if self.val_fraction < 0 or self.test_fraction < 0 or self.val_fraction + self.test_fraction >= 1:
            raise ConfigError("Split fractions must be non-negative and sum below 1")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SyntheticSpec":
        return cls(**cfg.section("data"))

    def to_dict(self) -> dict:
        return asdict(self)

    def split_sizes(self) -> Tuple[int, int, int]:
        n_val = int(round(self.n_pairs * self.val_fraction))
        n_test = int(round(self.n_pairs * self.test_fraction))
        return self.n_pairs - n_val - n_test, n_val, n_test


@dataclass
class PairedDataset:
    """One text per video; split codes index ``SPLITS``

    Split lookups are recorded in ``accessed`` so callers can audit which parts
    of the data a procedure touched.
    """
    spec: SyntheticSpec
    ids: np.ndarray           # (N,) int64
    videos: np.ndarray        # (N, m, n, d_in)
    texts: np.ndarray         # (N, L, d_in)
    splits: np.ndarray        # (N,) int codes
    latents: np.ndarray       # (N, z_dim)
    signal_mask: np.ndarray   # (N, m, n) bool
    accessed: Set[str] = field(default_factory=set)

    def __len__(self):
        return int(self.ids.shape[0])

    def split_indices(self, split: str) -> np.ndarray:
        """Row indices of one split, or every row for ``all``"""
        if split == "all":
            self.accessed.update(SPLITS)
            return np.arange(len(self))
        if split not in SPLITS:
            raise ConfigError(f"Unknown split {split!r}; expected one of {SPLITS + ('all',)}")
        self.accessed.add(split)
        return np.flatnonzero(self.splits == SPLITS.index(split))

    def row_of(self, video_id: int) -> int:
        rows = np.flatnonzero(self.ids == int(video_id))
        if rows.size == 0:
            raise DataFormatError(f"Unknown video id {video_id}")
        return int(rows[0])

    def video(self, row: int) -> RawVideo:
        return RawVideo(self.videos[row])

    def text(self, row: int) -> RawText:
        return RawText(self.texts[row])

    def text_batch(self, rows: Iterable[int]) -> List[np.ndarray]:
        return [self.texts[r] for r in rows]

    # ------------------------------------------------------------ persistence

    def save(self, path: Path, config_hash: str = ""):
        blobs = OrderedDict([
            ("ids", self.ids.astype(np.float64)),
            ("videos", self.videos),
            ("texts", self.texts),
            ("splits", self.splits.astype(np.float64)),
            ("latents", self.latents),
            ("signal_mask", self.signal_mask.astype(np.float64)),
        ])
        meta = {"spec": self.spec.to_dict()}
        blobfile.write(Path(path), blobfile.BlobFile(DATASET_MAGIC, DATASET_VERSION, config_hash, meta, blobs))

    @classmethod
    def load(cls, path: Path) -> "PairedDataset":
        container = blobfile.read(Path(path), DATASET_MAGIC, DATASET_VERSION)
        try:
            spec = SyntheticSpec(**container.meta["spec"])
            blobs = container.blobs
            dataset = cls(
                spec=spec,
                ids=blobs["ids"].astype(np.int64),
                videos=blobs["videos"],
                texts=blobs["texts"],
                splits=blobs["splits"].astype(np.int64),
                latents=blobs["latents"],
                signal_mask=blobs["signal_mask"] > 0.5,
            )
        except (KeyError, TypeError, ConfigError) as e:
            raise DataFormatError(f"Dataset {path} is incomplete: {e}")
        n = len(dataset)
        if dataset.videos.shape != (n, spec.frames, spec.patches, spec.d_in) or dataset.texts.shape[0] != n:
            raise DataFormatError(f"Dataset {path} arrays disagree with its spec")
        logger.info(f"Loaded dataset {path}: {n} pairs")
        return dataset


def _projections(spec: SyntheticSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Text projection A_t, video projection A_v and the unit temporal drift direction"""
    rng = np.random.default_rng([spec.seed, 2 ** 32 - 1])
    scale = 1.0 / np.sqrt(spec.z_dim)
    a_t = rng.normal(0.0, scale, size=(spec.d_in, spec.z_dim))
    a_v = a_t.copy() if spec.shared_projection else rng.normal(0.0, scale, size=(spec.d_in, spec.z_dim))
    direction = rng.normal(size=spec.z_dim)
    direction /= np.linalg.norm(direction)
    return a_t, a_v, direction


def _pair(spec: SyntheticSpec, index: int, a_t: np.ndarray, a_v: np.ndarray, direction: np.ndarray):
    rng = np.random.default_rng([spec.seed, index])
    z = rng.normal(size=spec.z_dim)

    text = (a_t @ z)[None, :] + spec.sigma_text * rng.normal(size=(spec.text_len, spec.d_in))

    video = spec.sigma_video * rng.normal(size=(spec.frames, spec.patches, spec.d_in))
    mask = np.zeros((spec.frames, spec.patches), dtype=bool)
    for f in range(spec.frames):
        z_f = z + spec.drift * f * direction
        positions = rng.choice(spec.patches, size=spec.p_info, replace=False)
        noise = spec.sigma_patch * rng.normal(size=(spec.p_info, spec.d_in))
        video[f, positions] = (a_v @ z_f)[None, :] + noise
        mask[f, positions] = True
    return z, text, video, mask


def generate(spec: SyntheticSpec) -> PairedDataset:
    """
    Sample N paired instances

    Each pair draws its own RNG stream from (seed, pair index), so any pair can be
    regenerated without the others.

    Args:
        spec: Generator knobs

    Returns:
        PairedDataset with splits assigned train, then val, then test by index
    """
    a_t, a_v, direction = _projections(spec)
    n = spec.n_pairs
    latents = np.zeros((n, spec.z_dim))
    texts = np.zeros((n, spec.text_len, spec.d_in))
    videos = np.zeros((n, spec.frames, spec.patches, spec.d_in))
    masks = np.zeros((n, spec.frames, spec.patches), dtype=bool)
    for i in range(n):
        latents[i], texts[i], videos[i], masks[i] = _pair(spec, i, a_t, a_v, direction)

    n_train, n_val, _ = spec.split_sizes()
    splits = np.full(n, SPLITS.index("test"), dtype=np.int64)
    splits[:n_train] = SPLITS.index("train")
    splits[n_train:n_train + n_val] = SPLITS.index("val")

    logger.info(f"Generated {n} synthetic pairs (seed={spec.seed}, split sizes={spec.split_sizes()})")
    return PairedDataset(spec=spec, ids=np.arange(n, dtype=np.int64), videos=videos, texts=texts,
                         splits=splits, latents=latents, signal_mask=masks)


def recover_latents(dataset: PairedDataset, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Least-squares latents from raw inputs, bypassing any model

    Text latents come from the first token, video latents from the first frame's
    first signal patch.

    Returns:
        (text latents, video latents), each (len(rows), z_dim)
    """
    a_t, a_v, _ = _projections(dataset.spec)
    pinv_t, pinv_v = np.linalg.pinv(a_t), np.linalg.pinv(a_v)
    rows = np.asarray(rows)
    text_z = dataset.texts[rows, 0, :] @ pinv_t.T
    first_signal = dataset.signal_mask[rows, 0, :].argmax(axis=1)
    video_z = dataset.videos[rows, 0, first_signal, :] @ pinv_v.T
    return text_z, video_z
