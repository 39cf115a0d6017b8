"""
Layers built on the tensor engine: Module container, Linear, LayerNorm, attention
"""
import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from hybridtower.autograd.tensor import (
    Parameter, Tensor, layer_norm, quick_gelu, softmax,
)
from hybridtower.errors import ConfigError, DataFormatError


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def causal_mask(length: int) -> np.ndarray:
    """Boolean mask, True strictly above the diagonal"""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class Module:
    """Parameter container; parameters are discovered from attributes in definition order"""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, trainable: bool):
        for p in self.parameters():
            p.requires_grad = trainable

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True):
        """Copy arrays into parameters in place

        Args:
            state: name -> array mapping
            strict: Reject missing or unexpected names
        """
        own = OrderedDict(self.named_parameters())
        if strict:
            missing = [n for n in own if n not in state]
            unexpected = [n for n in state if n not in own]
            if missing or unexpected:
                raise DataFormatError(f"State mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != param.shape:
                raise DataFormatError(f"Shape mismatch for {name}: {value.shape} vs {param.shape}")
            param.data[...] = value


class Linear(Module):
    """y = x W + b with W of shape (in, out), Xavier-uniform initialized"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, in_features, out_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` heads of width d/heads

    Returns the per-head softmax scores alongside the output so that token
    selectors can read the raw attention distributions.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"Attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def _split_heads(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        return x.reshape(*lead, length, self.heads, self.head_dim).swapaxes(-3, -2)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 causal: bool = False) -> Tuple[Tensor, Tensor]:
        """
        Args:
            query: (..., L_q, d)
            key: (..., L_k, d)
            value: (..., L_k, d)
            causal: Mask key positions after each query position

        Returns:
            (output (..., L_q, d), scores (..., heads, L_q, L_k))
        """
        for name, t in (("query", query), ("key", key), ("value", value)):
            if t.shape[-1] != self.dim:
                raise ConfigError(f"Attention {name} width {t.shape[-1]} != {self.dim}")
        *lead, length_q, _ = query.shape
        q = self._split_heads(self.q_proj(query))
        k = self._split_heads(self.k_proj(key))
        v = self._split_heads(self.v_proj(value))

        logits = (q @ k.swapaxes(-1, -2)) * self.scale
        mask = causal_mask(length_q) if causal else None
        scores = softmax(logits, axis=-1, mask=mask)

        context = (scores @ v).swapaxes(-3, -2).reshape(*lead, length_q, self.dim)
        return self.out_proj(context), scores


class TransformerBlock(Module):
    """Pre-LN block: x + attn(LN(x)), then x + mlp(LN(x))"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.ln_1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln_2 = LayerNorm(dim)
        self.mlp_fc = Linear(dim, dim * mlp_ratio, rng)
        self.mlp_proj = Linear(dim * mlp_ratio, dim, rng)

    def __call__(self, x: Tensor, causal: bool = False) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Returns:
            (output, attention scores, attention input after ln_1)
        """
        normed = self.ln_1(x)
        attended, scores = self.attn(normed, normed, normed, causal=causal)
        x = x + attended
        x = x + self.mlp_proj(quick_gelu(self.mlp_fc(self.ln_2(x))))
        return x, scores, normed


class Transformer(Module):

    def __init__(self, dim: int, heads: int, depth: int, mlp_ratio: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(dim, heads, mlp_ratio, rng) for _ in range(depth)]

    def __call__(self, x: Tensor, causal: bool = False) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
        """
        Returns:
            (output, last block's scores, last block's attention input)
        """
        scores = normed = None
        for block in self.blocks:
            x, scores, normed = block(x, causal=causal)
        return x, scores, normed
