"""Reconstruction and audio-facial contrastive losses.

The contrastive loss treats the in-batch pairing as ground truth: row i of
the audio embeddings belongs with row i of the facial embeddings, every other
row is a negative.  Logits are raw cosines (optionally divided by a
temperature, default 1 so the default matches the plain formulation) and the
two softmax directions are averaged.
"""

import math

from dataclasses import dataclass, field

import torch

from .errors import NumericError

ZERO_NORM_EPS = 1e-12


@dataclass
class LossValue:
    scalar: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.scalar.detach())


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Mean absolute difference, normalized by element count so the weight
    of this term does not scale with utterance length."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: prediction {tuple(pred.shape)} vs "
            f"target {tuple(target.shape)}")
    loss = (pred - target).abs().mean()
    return LossValue(loss, {"l1": loss})


def cosine_matrix(a: torch.Tensor, b: torch.Tensor,
                  what: str = "embedding") -> torch.Tensor:
    """Pairwise cosine similarities with an explicit zero-norm check; a
    zero row means an encoder collapsed and must not be papered over."""
    for name, mat in (("audio", a), ("facial", b)):
        norms = mat.norm(dim=1)
        bad = (norms < ZERO_NORM_EPS).nonzero(as_tuple=True)[0]
        if len(bad):
            raise NumericError(
                f"zero-norm {name} {what} at row(s) {bad.tolist()}; "
                f"cosine similarity undefined")
    an = a / a.norm(dim=1, keepdim=True)
    bn = b / b.norm(dim=1, keepdim=True)
    return an @ bn.t()


def afclip_loss(audio: torch.Tensor, facial: torch.Tensor,
                temperature: float = 1.0) -> LossValue:
    """Bidirectional contrastive loss over paired identity embeddings.

    audio, facial: (N, d), row i of each side comes from the same utterance.
    Returns (audio-to-facial + facial-to-audio) / 2; both directions are in
    `components`.
    """
    if audio.dim() != 2 or facial.dim() != 2 or audio.shape != facial.shape:
        raise ValueError(
            f"expected matching (N, d) embeddings, got {tuple(audio.shape)} "
            f"and {tuple(facial.shape)}")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n = audio.shape[0]
    if n < 1:
        raise ValueError("need at least one embedding pair")
    logits = cosine_matrix(audio, facial) / temperature
    labels = torch.arange(n)
    a2v = torch.nn.functional.cross_entropy(logits, labels)
    v2a = torch.nn.functional.cross_entropy(logits.t(), labels)
    total = 0.5 * (a2v + v2a)
    return LossValue(total, {"a2v": a2v, "v2a": v2a})


def afclip_lower_bound(n: int) -> float:
    """Attainable infimum of the contrastive loss for batch size n at
    temperature 1: all positives at cosine +1, all negatives at -1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.log1p((n - 1) * math.exp(-2.0))
