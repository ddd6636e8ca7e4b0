"""Variational estimator of the content-identity dependence and the two
losses built on it.

The estimator q_theta models the facial identity embedding given the content
sequence as a diagonal Gaussian whose parameters come from the final hidden
state of an LSTM run over the sequence.  Training alternates two players:

* E-step: fit theta by maximizing the likelihood of true (identity, content)
  pairs; the embeddings are detached so nothing leaks back into the encoders.
* M-step: with theta frozen, the sampled likelihood-ratio upper bound on
  mutual information is minimized with respect to the encoders.

The log-likelihood is the per-dimension sum of
    0.5 * (-(e - mu)^2 / exp(logvar) - logvar)
with no additive constant; constants cancel in the bound and do not move
either optimization.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .losses import LossValue

LOGVAR_RANGE = (-8.0, 8.0)


def gaussian_loglik(value: torch.Tensor, mu: torch.Tensor,
                    logvar: torch.Tensor) -> torch.Tensor:
    """Sum over dimensions of the constant-free diagonal Gaussian term."""
    if value.shape != mu.shape or mu.shape != logvar.shape:
        raise ValueError(
            f"shape mismatch: value {tuple(value.shape)}, mu {tuple(mu.shape)}, "
            f"logvar {tuple(logvar.shape)}")
    return 0.5 * (-(value - mu).pow(2) / logvar.exp() - logvar).sum()


class MiEstimator(nn.Module):
    """q_theta(identity | content): LSTM summarizer plus mu / logvar heads."""

    def __init__(self, width: int, hidden: int = 64,
                 logvar_range: tuple = LOGVAR_RANGE):
        super().__init__()
        if width <= 0 or hidden <= 0:
            raise ValueError(f"width and hidden must be positive, got {width}, {hidden}")
        lo, hi = logvar_range
        if not lo < hi:
            raise ValueError(f"bad logvar range {logvar_range}")
        self.width = width
        self.hidden = hidden
        self.logvar_range = (float(lo), float(hi))
        self.lstm = nn.LSTM(width, hidden, batch_first=True)
        self.mu_head = nn.Sequential(
            nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, width))
        self.logvar_head = nn.Sequential(
            nn.Linear(hidden, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, content: torch.Tensor) -> tuple:
        """Content sequence (T, width) -> (mu, logvar), each (width,)."""
        if content.dim() != 2 or content.shape[1] != self.width:
            raise ValueError(
                f"expected content (T, {self.width}), got {tuple(content.shape)}")
        if content.shape[0] < 1:
            raise ValueError("empty content sequence")
        _, (h_n, _) = self.lstm(content.unsqueeze(0))
        summary = h_n[-1, 0]
        mu = self.mu_head(summary)
        logvar = self.logvar_head(summary).clamp(*self.logvar_range)
        return mu, logvar

    def loglik(self, facial: torch.Tensor, content: torch.Tensor) -> torch.Tensor:
        mu, logvar = self(content)
        return gaussian_loglik(facial, mu, logvar)


def e_step_loss(estimator: MiEstimator, facial: torch.Tensor,
                contents: Sequence[torch.Tensor]) -> LossValue:
    """Negative mean log-likelihood of the true pairs; inputs are detached so
    only theta receives gradient."""
    n = facial.shape[0] if facial.dim() == 2 else 0
    if n < 1 or n != len(contents):
        raise ValueError(
            f"need a nonempty batch of paired embeddings, got facial "
            f"{tuple(facial.shape)} with {len(contents)} content sequences")
    total = facial.new_zeros(())
    for i in range(n):
        total = total + estimator.loglik(facial[i].detach(), contents[i].detach())
    loss = -total / n
    return LossValue(loss, {"nll": loss})


def mi_upper_bound(estimator: MiEstimator, facial: torch.Tensor,
                   contents: Sequence[torch.Tensor],
                   generator: Optional[torch.Generator] = None,
                   neg_indices: Optional[torch.Tensor] = None) -> LossValue:
    """Sampled likelihood-ratio bound, differentiable w.r.t. the embeddings
    only.

    For each i the negative index k_i is uniform over the batch (self-pairing
    allowed). theta is frozen by evaluating the estimator functionally with
    detached parameters, so gradient reaches the embeddings but never theta.
    `neg_indices` overrides the sampling for deterministic tests.
    """
    n = facial.shape[0] if facial.dim() == 2 else 0
    if n < 1 or n != len(contents):
        raise ValueError(
            f"need a nonempty batch of paired embeddings, got facial "
            f"{tuple(facial.shape)} with {len(contents)} content sequences")
    if neg_indices is None:
        neg_indices = torch.randint(0, n, (n,), generator=generator)
    else:
        neg_indices = torch.as_tensor(neg_indices, dtype=torch.long)
        if neg_indices.shape != (n,) or (neg_indices < 0).any() or (neg_indices >= n).any():
            raise ValueError(f"neg_indices must be {n} values in [0, {n})")
    frozen = {name: p.detach() for name, p in estimator.named_parameters()}
    frozen.update({name: b for name, b in estimator.named_buffers()})
    positive = facial.new_zeros(())
    negative = facial.new_zeros(())
    for i in range(n):
        mu, logvar = torch.func.functional_call(estimator, frozen, (contents[i],))
        positive = positive + gaussian_loglik(facial[i], mu, logvar)
        negative = negative + gaussian_loglik(facial[neg_indices[i]], mu, logvar)
    bound = (positive - negative) / n
    return LossValue(bound, {"positive": positive / n, "negative": negative / n})


@dataclass
class EstimatorSnapshot:
    """Convenience bundle for evaluating the bound outside training."""
    estimator: MiEstimator

    def bound_all_pairs(self, facial: torch.Tensor,
                        contents: Sequence[torch.Tensor]) -> float:
        """Non-sampled vCLUB value: average over all N^2 pairings; used as
        the oracle the sampled estimator must match in expectation."""
        n = facial.shape[0]
        with torch.no_grad():
            pos = 0.0
            neg = 0.0
            for i in range(n):
                mu, logvar = self.estimator(contents[i])
                pos += float(gaussian_loglik(facial[i], mu, logvar))
                for j in range(n):
                    neg += float(gaussian_loglik(facial[j], mu, logvar))
        return pos / n - neg / (n * n)
