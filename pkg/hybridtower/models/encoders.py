"""
Toy video and text encoders exposing multi-grained visual tokens and a text embedding
"""
from typing import List, Optional, Sequence, Union

import numpy as np

from hybridtower.autograd.nn import LayerNorm, Linear, Module, Transformer
from hybridtower.autograd.tensor import Parameter, Tensor, concat
from hybridtower.config import ModelDims
from hybridtower.errors import ShapeError
from hybridtower.models.features import MultiGrainVideoFeatures, RawText, RawVideo
from hybridtower.utils.logger import get_logger

logger = get_logger("encoders")

NUM_VIDEO_TOKENS = 4


class VideoEncoder(Module):
    """ViT-style encoder over [4 video tokens; m frame tokens; m * n patch tokens]

    All three granularities go through one shared visual projection.
    """

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        d = dims.width
        self.dims = dims
        self.patch_embed = Linear(dims.d_in, d, rng)
        self.video_tokens = Parameter(rng.normal(0.0, 0.02, size=(NUM_VIDEO_TOKENS, d)))
        self.frame_token = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.spatial_pos = Parameter(rng.normal(0.0, 0.02, size=(dims.patches, d)))
        self.temporal_pos = Parameter(rng.normal(0.0, 0.02, size=(dims.frames, d)))
        self.ln_pre = LayerNorm(d)
        self.transformer = Transformer(d, dims.heads, dims.video_depth, dims.mlp_ratio, rng)
        self.ln_post = LayerNorm(d)
        self.proj = Linear(d, d, rng, bias=False)

    @property
    def last_attention_layer(self):
        return self.transformer.blocks[-1].attn

    def __call__(self, frames: np.ndarray) -> MultiGrainVideoFeatures:
        """
        Encode a batch of videos

        Args:
            frames: (B, m, n, d_in) synthetic patch features

        Returns:
            MultiGrainVideoFeatures for the batch
        """
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 4:
            raise ShapeError(f"Video batch must be (B, m, n, d_in), got {frames.shape}")
        batch, m, n, d_in = frames.shape
        if (m, n, d_in) != (self.dims.frames, self.dims.patches, self.dims.d_in):
            raise ShapeError(
                f"Video shape (m={m}, n={n}, d_in={d_in}) does not match encoder "
                f"(m={self.dims.frames}, n={self.dims.patches}, d_in={self.dims.d_in})"
            )
        d = self.dims.width

        patches = self.patch_embed(Tensor(frames))
        patches = patches + self.spatial_pos + self.temporal_pos.reshape(m, 1, d)
        patches = patches.reshape(batch, m * n, d)
        frame_cls = self.frame_token.reshape(1, 1, d).expand(batch, m, d) + self.temporal_pos
        video = self.video_tokens.reshape(1, NUM_VIDEO_TOKENS, d).expand(batch, NUM_VIDEO_TOKENS, d)

        x = self.ln_pre(concat([video, frame_cls, patches], axis=1))
        x, scores, normed = self.transformer(x)
        x = self.proj(self.ln_post(x))

        first_patch = NUM_VIDEO_TOKENS + m
        x_v = x[:, :NUM_VIDEO_TOKENS, :]
        x_f = x[:, NUM_VIDEO_TOKENS:first_patch, :]
        x_p = x[:, first_patch:, :].reshape(batch, m, n, d)

        # cls -> patch rows of the last layer, renormalized over patches
        to_patches = scores.data[:, :, 0, first_patch:]
        last_attention = to_patches / to_patches.sum(axis=-1, keepdims=True)

        return MultiGrainVideoFeatures(
            x_v=x_v,
            x_f=x_f,
            x_p=x_p,
            last_attention=last_attention,
            its_query=normed.data[:, 0:1, :].copy(),
            its_keys=normed.data[:, first_patch:, :].copy(),
        )


class TextEncoder(Module):
    """Causal transformer over [bos, tokens, eos]; the eos output is the text feature"""

    def __init__(self, dims: ModelDims, rng: np.random.Generator):
        d = dims.width
        self.dims = dims
        self.token_embed = Linear(dims.d_in, d, rng)
        self.bos = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.eos = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.pos = Parameter(rng.normal(0.0, 0.01, size=(dims.max_text_len + 2, d)))
        self.transformer = Transformer(d, dims.heads, dims.text_depth, dims.mlp_ratio, rng)
        self.ln_final = LayerNorm(d)
        self.proj = Linear(d, d, rng, bias=False)

    def _truncate(self, tokens: np.ndarray) -> np.ndarray:
        limit = self.dims.max_text_len
        if tokens.shape[0] > limit:
            logger.warning(f"Text of {tokens.shape[0]} tokens truncated to {limit}")
            return tokens[:limit]
        return tokens

    def __call__(self, texts: Sequence[Union[RawText, np.ndarray]],
                 pad_tokens: Optional[np.ndarray] = None) -> Tensor:
        """
        Encode a batch of texts

        Args:
            texts: RawText items or (L, d_in) arrays, lengths may differ
            pad_tokens: Optional (B, L_max, d_in) fill for positions after each text

        Returns:
            Tensor (B, d)
        """
        arrays: List[np.ndarray] = []
        for text in texts:
            tokens = text.tokens if isinstance(text, RawText) else RawText(text).tokens
            if tokens.shape[1] != self.dims.d_in:
                raise ShapeError(f"Text token width {tokens.shape[1]} != d_in {self.dims.d_in}")
            arrays.append(self._truncate(tokens))
        if not arrays:
            raise ShapeError("encode_texts needs at least one text")

        batch = len(arrays)
        lengths = np.array([a.shape[0] for a in arrays])
        longest = int(lengths.max())
        d = self.dims.width

        raw = np.zeros((batch, longest + 1, self.dims.d_in))
        if pad_tokens is not None:
            raw[:, :longest] = np.asarray(pad_tokens, dtype=np.float64)[:, :longest]
        for b, a in enumerate(arrays):
            raw[b, :a.shape[0]] = a

        eos_pos = lengths + 1
        eos_mask = np.zeros((batch, longest + 2, 1))
        eos_mask[np.arange(batch), eos_pos] = 1.0

        bos = self.bos.reshape(1, 1, d).expand(batch, 1, d)
        x = concat([bos, self.token_embed(Tensor(raw))], axis=1)
        x = x * (1.0 - eos_mask) + self.eos.reshape(1, 1, d) * eos_mask
        x = x + self.pos[:longest + 2]

        x, _, _ = self.transformer(x, causal=True)
        x = self.ln_final(x)
        return self.proj(x[np.arange(batch), eos_pos])


def encode_video(encoder: VideoEncoder, video: RawVideo) -> MultiGrainVideoFeatures:
    """Encode one video (batch of one)"""
    return encoder(video.frames[None])


def encode_text(encoder: TextEncoder, text: RawText) -> Tensor:
    """Encode one text to a (d,) feature"""
    return encoder([text])[0]
