"""
Composite model: encoders, token selector, pseudo-query generator and fusioner
"""
import hashlib
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np

from hybridtower.autograd.nn import Module
from hybridtower.autograd.tensor import Parameter, Tensor, l2_normalize
from hybridtower.config import ModelDims
from hybridtower.errors import ConfigError
from hybridtower.models import its
from hybridtower.models.encoders import TextEncoder, VideoEncoder
from hybridtower.models.features import MultiGrainVideoFeatures, RawText
from hybridtower.models.fusioner import PseudoInteractionFusioner
from hybridtower.models.generator import PseudoQueryGenerator

GENERATOR_INPUTS = {
    "full": ("x_v", "x_f", "x_ip"),
    "video": ("x_v",),
    "video_frame": ("x_v", "x_f"),
    "video_patch": ("x_v", "x_ip"),
    "frame_patch": ("x_f", "x_ip"),
}


@dataclass
class VideoForward:
    """Everything the video side computes for a batch"""
    features: MultiGrainVideoFeatures
    informativeness: np.ndarray  # (B, m * n)
    selected: np.ndarray         # (B, k) flat patch indices
    x_ip: Tensor                 # (B, k, d)
    t_p: Tensor                  # (B, d)
    v: Tensor                    # (B, d), not normalized
    fusion_weights: Tensor       # (B, heads, 1, 4 + m)


class HybridTowerModel(Module):
    """Text tower plus a video tower that pre-fuses a generated pseudo query"""

    def __init__(self, dims: ModelDims):
        if dims.generator_inputs not in GENERATOR_INPUTS:
            raise ConfigError(f"Unknown generator inputs {dims.generator_inputs!r}")
        self.dims = dims
        rng = np.random.default_rng(dims.seed)
        self.text_encoder = TextEncoder(dims, rng)
        self.video_encoder = VideoEncoder(dims, rng)
        self.generator = PseudoQueryGenerator(dims, rng)
        self.fusioner = PseudoInteractionFusioner(dims, rng)
        self.log_tau = Parameter(np.array([math.log(dims.tau_init)]))

    # ------------------------------------------------------------ temperature

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()

    def clamp_temperature(self):
        """Keep tau <= tau_max after an optimizer step"""
        np.minimum(self.log_tau.data, math.log(self.dims.tau_max), out=self.log_tau.data)

    # ----------------------------------------------------------------- towers

    def encode_texts(self, texts: Sequence[Union[RawText, np.ndarray]]) -> Tensor:
        return self.text_encoder(texts)

    def encode_videos(self, frames: np.ndarray) -> MultiGrainVideoFeatures:
        return self.video_encoder(frames)

    def informativeness(self, features: MultiGrainVideoFeatures) -> np.ndarray:
        """(B, m * n) max-over-heads scores from the encoder's last attention layer"""
        attention = self.video_encoder.last_attention_layer
        scale = its.attention_scale(attention.dim, attention.heads, self.dims.patches, self.dims.its_scale)
        per_head = its.head_scores(features.its_query, features.its_keys, attention, scale)
        return per_head.max(axis=1)

    def generate(self, features: MultiGrainVideoFeatures, x_ip: Tensor) -> Tensor:
        """t_p from the configured mix of granularities"""
        used = GENERATOR_INPUTS[self.dims.generator_inputs]
        return self.generator(
            features.x_v if "x_v" in used else None,
            features.x_f if "x_f" in used else None,
            x_ip if "x_ip" in used else None,
        )

    def pseudo_queries(self, frames: np.ndarray) -> Tensor:
        """t_p (B, d) without running the fusioner"""
        features = self.encode_videos(frames)
        x_ip, _ = its.select_top_k_batch(self.informativeness(features), features.x_p, self.dims.k)
        return self.generate(features, x_ip)

    def fuse(self, t_p: Tensor, features: MultiGrainVideoFeatures) -> Tuple[Tensor, Tensor]:
        """v and the pooling weights over [x_v; x_f]"""
        return self.fusioner(t_p, features.x_v, features.x_f)

    def forward_video(self, frames: np.ndarray) -> VideoForward:
        """encode -> select tokens -> generate pseudo query -> fuse"""
        features = self.encode_videos(frames)
        scores = self.informativeness(features)
        x_ip, selected = its.select_top_k_batch(scores, features.x_p, self.dims.k)
        t_p = self.generate(features, x_ip)
        v, weights = self.fuse(t_p, features)
        return VideoForward(features, scores, selected, x_ip, t_p, v, weights)

    def video_embeddings(self, frames: np.ndarray) -> Tensor:
        """L2-normalized served vectors (B, d)"""
        return l2_normalize(self.forward_video(frames).v)

    def two_tower_embeddings(self, frames: np.ndarray) -> Tensor:
        """Backbone-only video embedding: the first projected video-level token"""
        features = self.encode_videos(frames)
        return features.x_v[:, 0, :]

    # ----------------------------------------------------------- bookkeeping

    def generator_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(f"generator.{name}", p) for name, p in self.generator.named_parameters()]

    def fingerprint(self) -> str:
        """SHA-256 over parameter names and float64 bytes"""
        digest = hashlib.sha256()
        for name, p in self.named_parameters():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return digest.hexdigest()
