from stypath.style.engine import (
    StyleObjective,
    StyleTransferConfig,
    SynthesisResult,
    content_term,
    style_term,
    synthesize,
    synthesize_batch,
)
from stypath.style.losses import (
    content_gradient,
    content_loss,
    default_layer_weights,
    gram_matrix,
    style_gradient,
    style_layer_loss,
    style_loss_total,
    total_loss,
)

__all__ = [
    "StyleObjective", "StyleTransferConfig", "SynthesisResult", "content_term", "style_term",
    "synthesize", "synthesize_batch", "content_gradient", "content_loss", "default_layer_weights",
    "gram_matrix", "style_gradient", "style_layer_loss", "style_loss_total", "total_loss",
]
