"""Content/style losses on layer activation matrices and their analytic gradients.

Every function accepts numpy arrays or torch tensors of shape ``(..., N, M)``;
leading dimensions are treated as a batch and the scalar results keep them.
"""

from __future__ import annotations

from typing import Mapping

from stypath.errors import ConfigurationError, ShapeError, ValidationError


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _sum2(x):
    return x.sum(axis=(-2, -1))


def _t(x):
    return x.swapaxes(-1, -2)


def content_loss(f_out, f_cont):
    """Half the summed squared difference between two activation matrices."""
    _same_shape(f_out, f_cont, "content_loss")
    return 0.5 * _sum2((f_out - f_cont) ** 2)


def content_gradient(f_out, f_cont):
    """d(content_loss)/d(f_out), zeroed where ``f_out <= 0``."""
    _same_shape(f_out, f_cont, "content_gradient")
    return (f_out - f_cont) * (f_out > 0)


def gram_matrix(f):
    """``F @ F.T``: inner products between the filter rows of ``f``."""
    if f.ndim < 2 or f.shape[-2] < 1 or f.shape[-1] < 1:
        raise ShapeError(f"gram_matrix needs a non-empty N x M matrix, got {tuple(f.shape)}")
    return f @ _t(f)


def _check_nm(n_l: int, m_l: int):
    if n_l < 1 or m_l < 1:
        raise ValidationError(f"N_l and M_l must be positive, got {n_l}, {m_l}")


def style_layer_loss(g_out, g_sty, n_l: int, m_l: int):
    """Squared Gram distance scaled by ``1 / (4 N_l^2 M_l^2)``."""
    _same_shape(g_out, g_sty, "style_layer_loss")
    _check_nm(n_l, m_l)
    return _sum2((g_out - g_sty) ** 2) / (4.0 * n_l**2 * m_l**2)


def style_gradient(f_out, g_out, g_sty, n_l: int, m_l: int):
    """d(style_layer_loss o gram_matrix)/d(f_out), zeroed where ``f_out <= 0``.

    Shape ``(..., N, M)``, matching ``f_out``.
    """
    _same_shape(g_out, g_sty, "style_gradient")
    if tuple(g_out.shape[-2:]) != (f_out.shape[-2],) * 2 or tuple(g_out.shape[:-2]) != tuple(f_out.shape[:-2]):
        raise ShapeError(f"style_gradient: Gram {tuple(g_out.shape)} incompatible with F {tuple(f_out.shape)}")
    _check_nm(n_l, m_l)
    return ((g_out - g_sty) @ f_out) * (f_out > 0) / (n_l**2 * m_l**2)


def default_layer_weights(layers) -> dict[str, float]:
    layers = list(layers)
    return {name: 1.0 / len(layers) for name in layers}


def style_loss_total(per_layer: Mapping[str, object], weights: Mapping[str, float]):
    """Weighted sum of per-layer style losses."""
    missing = [name for name in per_layer if name not in weights]
    if missing:
        raise ConfigurationError(f"no style weight for active layer(s) {missing}")
    total = 0.0
    for name, loss in per_layer.items():
        total = total + weights[name] * loss
    return total


def total_loss(content_term, style_term, alpha: float):
    """``alpha * content + style``."""
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    return alpha * content_term + style_term
