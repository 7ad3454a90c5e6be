"""Shared oracle helpers for the test suite."""

from __future__ import annotations

import numpy as np

from osdalab.networks import ModelBundle

FD_STEP = 1e-5


def identity_bundle(n_classes: int = 2, m: int = 2) -> ModelBundle:
    """A bundle rigged so features equal the (non-negative) input.

    The extractor's two layers are identity maps and every head starts
    with zero weights and biases (uniform outputs). Tests overwrite head
    parameters to force exact probability vectors.
    """
    bundle = ModelBundle.create(input_dim=2, n_classes=n_classes, m=m, widths=(2, 2), seed=0)
    for layer in bundle.extractor.layers:
        layer.weight.data = np.eye(2)
        layer.bias.data = np.zeros(2)
    for head in (bundle.open_head, bundle.aux_head, *bundle.mix_heads):
        head.linear.weight.data = np.zeros_like(head.linear.weight.data)
        head.linear.bias.data = np.zeros_like(head.linear.bias.data)
    return bundle


def finite_difference_grad(loss_fn, param, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar loss wrt one parameter tensor.

    Independent of the gradient graph: it only re-runs the forward pass
    with perturbed parameter data.
    """
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    grad_flat = grad.reshape(-1)
    for idx in range(flat.size):
        original = flat[idx]
        flat[idx] = original + step
        up = float(loss_fn())
        flat[idx] = original - step
        down = float(loss_fn())
        flat[idx] = original
        grad_flat[idx] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case elementwise relative error with an absolute floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def assert_grads_match(loss_fn, params, tol: float = 1e-4, step: float = FD_STEP) -> None:
    """Check every parameter's recorded gradient against central differences.

    The caller must have run backward already so that ``param.grad`` holds
    the analytic gradient.
    """
    for param in params:
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = finite_difference_grad(loss_fn, param, step=step)
        err = max_relative_error(analytic, numeric)
        assert err <= tol, f"gradient mismatch {err:.3e} on parameter with shape {param.shape}"
