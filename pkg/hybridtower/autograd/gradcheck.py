"""
Central finite-difference gradient checking
"""
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from hybridtower.autograd.tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor)"""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """
    Central differences of the scalar ``fn()`` with respect to ``tensor``

    Args:
        fn: Builds and returns a scalar Tensor from the current parameter values
        tensor: Tensor whose data is perturbed in place
        eps: Step size
        indices: Optional multi-indices to check (all entries by default)

    Returns:
        np.ndarray shaped like tensor; unchecked entries are zero
    """
    grad = np.zeros_like(tensor.data)
    if indices is None:
        indices = list(np.ndindex(*tensor.shape))
    with no_grad():
        for idx in indices:
            original = tensor.data[idx]
            tensor.data[idx] = original + eps
            plus = fn().item()
            tensor.data[idx] = original - eps
            minus = fn().item()
            tensor.data[idx] = original
            grad[idx] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_check(fn: Callable[[], Tensor], named_tensors: Iterable[Tuple[str, Tensor]],
                   eps: float = 1e-5, max_entries: Optional[int] = None,
                   rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """
    Compare autodiff gradients against central differences

    Args:
        fn: Builds and returns a scalar loss
        named_tensors: (name, tensor) pairs with requires_grad set
        eps: Finite-difference step
        max_entries: Check at most this many random entries per tensor
        rng: Random generator used to pick checked entries

    Returns:
        dict name -> relative error over the checked entries
    """
    named_tensors = list(named_tensors)
    rng = rng if rng is not None else np.random.default_rng(0)
    for _, t in named_tensors:
        t.grad = None
    fn().backward()

    errors = {}
    for name, t in named_tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        indices = list(np.ndindex(*t.shape))
        if max_entries is not None and len(indices) > max_entries:
            chosen = rng.choice(len(indices), size=max_entries, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        numeric = numerical_gradient(fn, t, eps=eps, indices=indices)
        picked = tuple(np.array(indices).T) if t.ndim else ()
        errors[name] = relative_error(analytic[picked], numeric[picked])
    return errors
