"""
Pseudo-interaction fusioner: query-guided attention pooling over video and frame tokens
"""
from typing import Tuple

import numpy as np

from hybridtower.autograd.nn import LayerNorm, Linear, Module, MultiHeadAttention
from hybridtower.autograd.tensor import Tensor, concat, quick_gelu
from hybridtower.config import FUSION_KINDS, ModelDims
from hybridtower.errors import ConfigError, ShapeError


class PseudoInteractionFusioner(Module):
    """v' = LN(Attn(Q=t_p, K=V=[x_v; x_f])), v = LN(FC(v') + v')

    ``xpool`` has no residual connection from the query. ``cross_attn`` adds one,
    ``v = LN(FC(v') + v') + t_p``, with the same parameters.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        if dims.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"Unknown fusion kind {dims.fusion_kind!r}")
        d = dims.width
        self.dims = dims
        self.attn = MultiHeadAttention(d, dims.fusion_heads, rng)
        self.ln_attn = LayerNorm(d)
        self.fc = [Linear(d, d, rng) for _ in range(max(1, dims.fc_depth))]
        self.ln_out = LayerNorm(d)

    def __call__(self, t_p: Tensor, x_v: Tensor, x_f: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Args:
            t_p: (B, d) pseudo queries
            x_v: (B, 4, d) video-level tokens
            x_f: (B, m, d) frame-level tokens

        Returns:
            (v (B, d), attention weights (B, heads, 1, 4 + m))
        """
        d = self.dims.width
        if t_p.ndim != 2 or t_p.shape[1] != d:
            raise ShapeError(f"t_p must be (B, {d}), got {t_p.shape}")
        batch = t_p.shape[0]
        if x_v.shape[0] != batch or x_f.shape[0] != batch or x_v.shape[2] != d or x_f.shape[2] != d:
            raise ShapeError(f"Fusion inputs disagree: t_p {t_p.shape}, x_v {x_v.shape}, x_f {x_f.shape}")

        keys = concat([x_v, x_f], axis=1)
        attended, weights = self.attn(t_p.reshape(batch, 1, d), keys, keys)
        pooled = self.ln_attn(attended)

        hidden = pooled
        for i, layer in enumerate(self.fc):
            hidden = layer(hidden)
            if i < len(self.fc) - 1:
                hidden = quick_gelu(hidden)
        v = self.ln_out(hidden + pooled).reshape(batch, d)
        if self.dims.fusion_kind == "cross_attn":
            v = v + t_p
        return v, weights
