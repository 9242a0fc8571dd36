"""Shared test oracles, independent of the code paths they check."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from wearformer.autodiff import Tensor


def finite_difference_grad(f: Callable[[], float], array: np.ndarray,
                           h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. one array.

    ``f`` must re-evaluate the full forward pass reading the current array
    contents; entries are perturbed in place.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| scaled by max(|n|_inf, 1e-8)."""
    diff = np.max(np.abs(analytic - numeric))
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return float(diff / scale)


def check_gradients(build_loss: Callable[[], "tuple"], tensors: Sequence[Tensor],
                    h: float = 1e-5, tol: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients against central differences for each tensor.

    ``build_loss`` records a fresh tape and returns (tape, loss). Returns the
    per-tensor relative errors after asserting they all meet ``tol``.
    """
    from wearformer.autodiff import backward

    tape, loss = build_loss()
    backward(tape, loss, params=tensors)
    analytic = [t.grad.copy() for t in tensors]

    def eval_loss() -> float:
        _tape, fresh = build_loss()
        return float(fresh.data)

    errors = {}
    for t, a in zip(tensors, analytic):
        numeric = finite_difference_grad(eval_loss, t.data, h=h)
        err = relative_error(a, numeric)
        errors[t.name or f"tensor@{id(t)}"] = err
        assert err <= tol, f"gradient mismatch for {t.name}: rel err {err:.3e} > {tol}"
    return errors


def pairwise_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """O(n^2) concordance oracle: wins + half-credit ties over all pairs."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))
