"""
Checkpoint persistence: parameters, optimizer state, step and RNG state
"""
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from hybridtower.autograd.tensor import check_finite
from hybridtower.errors import DataFormatError
from hybridtower.utils import blobfile
from hybridtower.utils.logger import get_logger

logger = get_logger("checkpoint")

CHECKPOINT_MAGIC = b"PIGC"
CHECKPOINT_VERSION = 1
OPTIMIZER_PREFIX = "adam."


@dataclass
class Checkpoint:
    """Everything needed to resume or serve a trained model"""
    params: "OrderedDict[str, np.ndarray]"
    step: int
    config_hash: str
    config_text: str
    rng_state: dict
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    completed_stages: List[int] = field(default_factory=list)
    model_hash: str = ""
    # set when taken inside a stage; optimizer moments are only kept then
    stage_in_progress: Optional[int] = None
    stage_step: int = 0
    optimizer_step: int = 0

    def to_blobfile(self) -> blobfile.BlobFile:
        for name, value in self.params.items():
            check_finite(value, f"parameter {name}")
        blobs = OrderedDict(self.params)
        blobs.update(self.optimizer)
        meta = {
            "step": int(self.step),
            "completed_stages": [int(s) for s in self.completed_stages],
            "config_text": self.config_text,
            "rng_state": self.rng_state,
            "model_hash": self.model_hash,
            "stage_in_progress": self.stage_in_progress,
            "stage_step": int(self.stage_step),
            "optimizer_step": int(self.optimizer_step),
        }
        return blobfile.BlobFile(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self.config_hash, meta, blobs)

    def to_bytes(self) -> bytes:
        return blobfile.encode(self.to_blobfile())

    @classmethod
    def from_blobfile(cls, container: blobfile.BlobFile) -> "Checkpoint":
        try:
            meta = container.meta
            params = OrderedDict((k, v) for k, v in container.blobs.items() if not k.startswith(OPTIMIZER_PREFIX))
            optimizer = OrderedDict((k, v) for k, v in container.blobs.items() if k.startswith(OPTIMIZER_PREFIX))
            return cls(
                params=params,
                step=int(meta["step"]),
                config_hash=container.config_hash,
                config_text=meta["config_text"],
                rng_state=meta["rng_state"],
                optimizer=optimizer,
                completed_stages=list(meta["completed_stages"]),
                model_hash=meta.get("model_hash", ""),
                stage_in_progress=meta.get("stage_in_progress"),
                stage_step=int(meta.get("stage_step", 0)),
                optimizer_step=int(meta.get("optimizer_step", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"Checkpoint metadata incomplete: {e}")

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        return cls.from_blobfile(blobfile.decode(data, CHECKPOINT_MAGIC, CHECKPOINT_VERSION))

    def save(self, path: Path):
        blobfile.write(Path(path), self.to_blobfile())
        logger.info(f"Checkpoint saved to {path} (step {self.step}, stages {self.completed_stages})")

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        checkpoint = cls.from_blobfile(blobfile.read(Path(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        logger.info(f"Loaded checkpoint {path} (step {checkpoint.step})")
        return checkpoint


def parameter_digest(named: Dict[str, np.ndarray]) -> Dict[str, bytes]:
    """Raw bytes per name, used to prove parameters did not move"""
    return {name: np.ascontiguousarray(value, dtype="<f8").tobytes() for name, value in named.items()}
