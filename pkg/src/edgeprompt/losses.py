"""Training losses: semantic alignment on annotated source data and
confident pseudo-labeled target data, kernel two-sample distribution
alignment, cross-edge classifier consistency, text semantic diversity,
plus the sigmoid ramp schedule and the combined objective.

All functions are pure and differentiable through torch; gradient tapes
belong to the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, NumericError


@dataclass
class ClassProbabilities:
    """Per-sample class distribution plus the raw logits it came from."""

    probs: torch.Tensor  # (n, K)
    max_prob: torch.Tensor  # (n,)
    argmax: torch.Tensor  # (n,)
    logits: torch.Tensor | None = None  # (n, K); kept for stable log-probs

    def validate(self, atol: float = 1e-6) -> None:
        row_sums = self.probs.sum(dim=1)
        if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=atol):
            raise NumericError("probability rows do not sum to 1")
        if (self.probs < 0).any() or (self.probs > 1).any():
            raise NumericError("probabilities outside [0, 1]")

    def log_probs(self) -> torch.Tensor:
        if self.logits is not None:
            return F.log_softmax(self.logits, dim=1)
        return self.probs.clamp_min(torch.finfo(self.probs.dtype).tiny).log()


@dataclass
class PseudoLabelBatch:
    """Confident zero-shot predictions for a target batch."""

    one_hot: torch.Tensor  # (n_t, K) float
    mask: torch.Tensor  # (n_t,) bool
    qualified: int

    def __post_init__(self) -> None:
        assert self.qualified == int(self.mask.sum())


@dataclass
class KernelSpec:
    """Gaussian kernel; bandwidth None selects the median heuristic."""

    family: str = "gaussian"
    bandwidth: float | None = None

    def __post_init__(self) -> None:
        if self.family != "gaussian":
            raise ConfigurationError(f"unsupported kernel family {self.family!r}")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigurationError("bandwidth must be positive")


def _check_nonzero_rows(x: torch.Tensor, what: str) -> None:
    norms = x.norm(dim=-1)
    bad = (norms == 0).nonzero()
    if bad.numel():
        raise NumericError(f"{what} row {int(bad[0, 0])} has zero norm; cosine undefined")


def cosine_matrix(z: torch.Tensor, W: torch.Tensor) -> torch.Tensor:
    """(n, K) cosine similarities between image rows and class text rows."""
    _check_nonzero_rows(z, "image features")
    _check_nonzero_rows(W, "text features")
    return F.normalize(z, dim=1) @ F.normalize(W, dim=1).t()


def class_probabilities(
    z_batch: torch.Tensor, W: torch.Tensor, temperature: float
) -> ClassProbabilities:
    """Softmax over cosine similarity divided by the temperature."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    logits = cosine_matrix(z_batch, W) / temperature
    probs = logits.softmax(dim=1)
    max_prob, argmax = probs.max(dim=1)
    return ClassProbabilities(probs=probs, max_prob=max_prob, argmax=argmax, logits=logits)


def one_hot(labels: torch.Tensor, K: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return F.one_hot(labels, K).to(dtype)


def csa_annotated(probs: ClassProbabilities, one_hot_labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the true class (Shannon cross-entropy)."""
    if probs.probs.shape != one_hot_labels.shape:
        raise ContractError(
            f"probs {tuple(probs.probs.shape)} vs labels {tuple(one_hot_labels.shape)}"
        )
    lp = probs.log_probs()
    return -(one_hot_labels.to(lp.dtype) * lp).sum(dim=1).mean()


def generate_pseudo_labels(
    zero_shot_probs: ClassProbabilities, threshold: float
) -> PseudoLabelBatch:
    """Keep rows whose zero-shot confidence reaches the threshold.

    The source of `zero_shot_probs` must be the unprompted forward, which
    never changes during training, so the result is cacheable.
    """
    if not (0.0 < threshold < 1.0):
        raise ConfigurationError("threshold must lie in (0, 1)")
    mask = (zero_shot_probs.max_prob >= threshold).detach()
    oh = one_hot(zero_shot_probs.argmax.detach(), zero_shot_probs.probs.shape[1],
                 dtype=zero_shot_probs.probs.dtype)
    return PseudoLabelBatch(one_hot=oh, mask=mask, qualified=int(mask.sum()))


def csa_target(probs: ClassProbabilities, pseudo: PseudoLabelBatch) -> torch.Tensor:
    """Cross-entropy against confident pseudo-labels, averaged over the
    qualified rows only; exactly zero (with zero gradient) when none qualify."""
    if probs.probs.shape != pseudo.one_hot.shape:
        raise ContractError(
            f"probs {tuple(probs.probs.shape)} vs pseudo labels {tuple(pseudo.one_hot.shape)}"
        )
    if pseudo.qualified == 0:
        return torch.zeros((), dtype=probs.probs.dtype)
    lp = probs.log_probs()
    per_row = -(pseudo.one_hot.to(lp.dtype) * lp).sum(dim=1)
    return (per_row * pseudo.mask.to(lp.dtype)).sum() / pseudo.qualified


def csa_loss(
    annotated_probs: ClassProbabilities,
    one_hot_labels: torch.Tensor,
    target_probs: ClassProbabilities,
    pseudo: PseudoLabelBatch,
) -> torch.Tensor:
    """Annotated plus pseudo-labeled target cross-entropy."""
    return csa_annotated(annotated_probs, one_hot_labels) + csa_target(target_probs, pseudo)


def gaussian_kernel(z, z_prime, sigma: float) -> torch.Tensor:
    """exp(-||z - z'||^2 / (2 sigma)); the bandwidth divides unsquared."""
    if sigma <= 0:
        raise ConfigurationError("bandwidth must be positive")
    diff = torch.as_tensor(z) - torch.as_tensor(z_prime)
    return torch.exp(-(diff**2).sum() / (2.0 * sigma))


def _kernel_matrix(a: torch.Tensor, b: torch.Tensor, sigma: float) -> torch.Tensor:
    sq = torch.cdist(a, b, p=2.0) ** 2
    return torch.exp(-sq / (2.0 * sigma))


def median_heuristic_bandwidth(source: torch.Tensor, target: torch.Tensor) -> float:
    """Median of pairwise squared distances over the concatenated batch;
    falls back to 1.0 when the median is zero. Treated as a constant
    (no gradient flows through the bandwidth)."""
    joined = torch.cat([source, target], dim=0).detach()
    sq = torch.pdist(joined) ** 2
    if sq.numel() == 0:
        return 1.0
    med = float(sq.median())
    return med if med > 0 else 1.0


def resolve_bandwidth(kernel: KernelSpec, source: torch.Tensor, target: torch.Tensor) -> float:
    if kernel.bandwidth is not None:
        return kernel.bandwidth
    return median_heuristic_bandwidth(source, target)


def mmd_squared(
    source_feats: torch.Tensor, target_feats: torch.Tensor, kernel: KernelSpec
) -> torch.Tensor:
    """Empirical squared kernel two-sample discrepancy.

    Within-set sums run over off-diagonal pairs but are normalized by
    1/n^2 (so identical batches of size n give exactly -2/n); the cross
    sum is weighted 2/(n_u * n_t). The cross term is evaluated in both
    orientations and averaged so the value is exactly symmetric under
    swapping the two sets.
    """
    n_u, n_t = source_feats.shape[0], target_feats.shape[0]
    if n_u < 2 or n_t < 2:
        raise ContractError(f"need at least 2 samples per set, got {n_u} and {n_t}")
    sigma = resolve_bandwidth(kernel, source_feats, target_feats)
    k_ss = _kernel_matrix(source_feats, source_feats, sigma)
    k_tt = _kernel_matrix(target_feats, target_feats, sigma)
    off_ss = k_ss.sum() - k_ss.diagonal().sum()
    off_tt = k_tt.sum() - k_tt.diagonal().sum()
    cross = 0.5 * (
        _kernel_matrix(source_feats, target_feats, sigma).sum()
        + _kernel_matrix(target_feats, source_feats, sigma).sum()
    )
    return off_ss / (n_u * n_u) + off_tt / (n_t * n_t) - 2.0 * cross / (n_u * n_t)


def dda_loss(
    extractor,
    source_images,
    target_images,
    kernel: KernelSpec,
) -> torch.Tensor:
    """Squared discrepancy between extracted source and target features."""
    return mmd_squared(extractor(source_images), extractor(target_images), kernel)


def tcc_loss(per_domain_probs: list[torch.Tensor]) -> torch.Tensor:
    """Mean absolute disagreement of per-domain class probabilities on a
    shared target batch, over all domain pairs, samples and classes."""
    M = len(per_domain_probs)
    if M < 2:
        raise ContractError(f"consistency needs at least 2 domains, got {M}")
    shape = per_domain_probs[0].shape
    for p in per_domain_probs[1:]:
        if p.shape != shape:
            raise ContractError("per-domain probability matrices differ in shape")
    n_t, K = shape
    pairs = M * (M - 1) // 2
    total = per_domain_probs[0].new_zeros(())
    for i in range(M - 1):
        for r in range(i + 1, M):
            total = total + (per_domain_probs[i] - per_domain_probs[r]).abs().sum()
    return total / (n_t * K * pairs)


def tsd_loss(per_domain_text_reps: list[torch.Tensor]) -> torch.Tensor:
    """Mean absolute cosine between same-class text representations of
    different domains; 0 when orthogonal, 1 when identical."""
    M = len(per_domain_text_reps)
    if M < 2:
        raise ContractError(f"diversity needs at least 2 domains, got {M}")
    K = per_domain_text_reps[0].shape[0]
    normed = []
    for W in per_domain_text_reps:
        _check_nonzero_rows(W, "text representations")
        normed.append(F.normalize(W, dim=1))
    pairs = M * (M - 1) // 2
    total = normed[0].new_zeros(())
    for i in range(M - 1):
        for r in range(i + 1, M):
            total = total + (normed[i] * normed[r]).sum(dim=1).abs().sum()
    return total / (pairs * K)


def lambda_schedule(steps: int, total_steps: int) -> float:
    """Ramp 2*sigmoid(10*steps/total_steps) - 1, from 0 toward tanh(5)."""
    if total_steps < 1:
        raise ConfigurationError("total_steps must be >= 1")
    if steps < 0:
        raise ConfigurationError("steps must be >= 0")
    return 2.0 / (1.0 + math.exp(-10.0 * steps / total_steps)) - 1.0


def total_loss(csa, dda, tcc, tsd, alpha1: float, alpha2: float, lam: float):
    """csa + alpha1*lambda*(dda + tcc) + alpha2*lambda*tsd."""
    return csa + alpha1 * lam * (dda + tcc) + alpha2 * lam * tsd
