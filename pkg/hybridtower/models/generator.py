"""
Pseudo-query generator: causal transformer from visual tokens to a text-space embedding
"""
from typing import Optional

import numpy as np

from hybridtower.autograd.nn import LayerNorm, Linear, Module, Transformer
from hybridtower.autograd.tensor import Parameter, Tensor, concat
from hybridtower.config import ModelDims
from hybridtower.errors import ConfigError, ShapeError
from hybridtower.models.encoders import NUM_VIDEO_TOKENS, TextEncoder
from hybridtower.utils.logger import get_logger

logger = get_logger("generator")

GENERATOR_KINDS = ("causal", "mlp", "qformer")


class PseudoQueryGenerator(Module):
    """[bos; x_v; x_f; x_ip; eos] -> causal transformer -> eos output -> t_p

    Shares its architecture with the text encoder so it can start from the text
    encoder's weights.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        if dims.generator_kind not in GENERATOR_KINDS:
            raise ConfigError(f"Unknown generator kind {dims.generator_kind!r}")
        if dims.generator_kind != "causal":
            raise ConfigError(f"Generator kind {dims.generator_kind!r} is not implemented; use 'causal'")
        d = dims.width
        self.dims = dims
        self.input_proj = Linear(d, d, rng)
        # identity plus noise keeps early outputs close to the visual features
        self.input_proj.weight.data[...] = np.eye(d) + rng.normal(0.0, 1e-3, size=(d, d))
        self.bos = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.eos = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.pos = Parameter(rng.normal(0.0, 0.01, size=(dims.generator_length, d)))
        self.transformer = Transformer(d, dims.heads, dims.generator_depth, dims.mlp_ratio, rng)
        self.ln_final = LayerNorm(d)
        self.proj = Linear(d, d, rng, bias=False)

    def init_from_text_encoder(self, text_encoder: TextEncoder):
        """Copy the text encoder's shared weights (blocks, final norm, projection, bos/eos)"""
        shared = min(len(self.transformer.blocks), len(text_encoder.transformer.blocks))
        for i in range(shared):
            self.transformer.blocks[i].load_state_dict(text_encoder.transformer.blocks[i].state_dict())
        self.ln_final.load_state_dict(text_encoder.ln_final.state_dict())
        self.proj.load_state_dict(text_encoder.proj.state_dict())
        self.bos.data[...] = text_encoder.bos.data
        self.eos.data[...] = text_encoder.eos.data
        rows = min(self.pos.shape[0], text_encoder.pos.shape[0])
        self.pos.data[:rows] = text_encoder.pos.data[:rows]
        logger.info(f"Generator initialized from text encoder ({shared} shared blocks)")

    def sequence_outputs(self, x_v: Optional[Tensor] = None, x_f: Optional[Tensor] = None,
                         x_ip: Optional[Tensor] = None) -> Tensor:
        """
        Final-layer outputs at every position of [bos; inputs; eos]

        Args:
            x_v: Optional (B, 4, d) video-level tokens
            x_f: Optional (B, m, d) frame-level tokens
            x_ip: Optional (B, k, d) selected patch tokens

        Returns:
            Tensor (B, L, d) after the final layer norm
        """
        d = self.dims.width
        given = [(name, part) for name, part in (("x_v", x_v), ("x_f", x_f), ("x_ip", x_ip)) if part is not None]
        if not given:
            raise ShapeError("Generator needs at least one of x_v, x_f, x_ip")
        if x_v is not None and (x_v.ndim != 3 or x_v.shape[1] != NUM_VIDEO_TOKENS):
            raise ShapeError(f"x_v must be (B, {NUM_VIDEO_TOKENS}, {d}), got {x_v.shape}")
        batch = given[0][1].shape[0]
        parts = []
        for name, part in given:
            if part.ndim != 3 or part.shape[0] != batch or part.shape[2] != d:
                raise ShapeError(f"{name} must be (B={batch}, rows, {d}), got {part.shape}")
            parts.append(part)

        content = self.input_proj(concat(parts, axis=1))
        length = content.shape[1] + 2
        if length > self.pos.shape[0]:
            raise ShapeError(f"Generator input of {length} positions exceeds {self.pos.shape[0]}")
        bos = self.bos.reshape(1, 1, d).expand(batch, 1, d)
        eos = self.eos.reshape(1, 1, d).expand(batch, 1, d)
        x = concat([bos, content, eos], axis=1) + self.pos[:length]

        x, _, _ = self.transformer(x, causal=True)
        return self.ln_final(x)

    def __call__(self, x_v: Optional[Tensor] = None, x_f: Optional[Tensor] = None,
                 x_ip: Optional[Tensor] = None) -> Tensor:
        """t_p (B, d) read at the eos position"""
        hidden = self.sequence_outputs(x_v, x_f, x_ip)
        return self.proj(hidden[:, -1, :])
