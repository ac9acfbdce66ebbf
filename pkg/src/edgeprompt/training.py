"""Decentralized training loop: each iteration picks one edge model,
computes its alignment losses against a shared target batch, adds the
cross-edge consistency and diversity terms, and gradient-descends the
prompt stacks. The backbone never changes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import ClassTokenTable, DualEncoder, EncoderConfig
from .errors import ConfigurationError, SamplingError, TrainingAbort
from .losses import (
    KernelSpec,
    PseudoLabelBatch,
    class_probabilities,
    csa_annotated,
    csa_target,
    generate_pseudo_labels,
    lambda_schedule,
    mmd_squared,
    one_hot,
    tcc_loss,
    total_loss,
    tsd_loss,
)
from .prompts import PromptStack, init_prompt_stack, stack_checksum
from .seeds import derive_seed
from .synth import DomainFewShotSplit, sample_batch

ALL_STACKS = "all-stacks"
CHOSEN_EDGE_ONLY = "chosen-edge-only"


@dataclass
class TrainConfig:
    epochs: int = 5
    iterations: int = 20  # per epoch
    learning_rate: float = 0.003
    n_a: int = 4
    n_u: int = 64
    n_t: int = 64
    alpha1: float = 0.1
    alpha2: float = 0.01
    threshold: float = 0.8
    seed: int = 0
    direction: str = "v2t"
    update_scope: str = ALL_STACKS
    use_dda: bool = True
    use_tcc: bool = True
    use_tsd: bool = True
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.n_t < 1 or self.n_a < 1 or self.n_u < 1:
            raise ConfigurationError("batch sizes must be >= 1")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError("threshold must lie in (0, 1)")
        if self.update_scope not in (ALL_STACKS, CHOSEN_EDGE_ONLY):
            raise ConfigurationError(f"unknown update_scope {self.update_scope!r}")
        if self.epochs < 0 or self.iterations < 0:
            raise ConfigurationError("epochs and iterations must be >= 0")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iterations


@dataclass
class EdgeState:
    """One edge device: its domain and its trainable prompt stack."""

    domain_id: int
    stack: PromptStack
    step_count: int = 0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    final_checksums: dict = field(default_factory=dict)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        lines = [json.dumps(r, sort_keys=True) for r in self.records]
        lines.append(json.dumps({"final_checksums": self.final_checksums}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
        return path


def build_edges(
    enc_config: EncoderConfig,
    splits: list[DomainFewShotSplit],
    direction: str,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> list[EdgeState]:
    """One freshly initialized stack per source domain, seeds derived per domain."""
    edges = []
    for split in splits:
        stack = init_prompt_stack(
            enc_config.J,
            enc_config.b,
            enc_config.d_T,
            enc_config.d_V,
            direction=direction,
            domain_id=split.domain_id,
            seed=derive_seed(seed, f"stack{split.domain_id}"),
            dtype=dtype,
        )
        edges.append(EdgeState(domain_id=split.domain_id, stack=stack))
    return edges


def cache_pseudo_labels(
    encoder: DualEncoder,
    table: ClassTokenTable,
    target_images: np.ndarray,
    threshold: float,
) -> PseudoLabelBatch:
    """Zero-shot pseudo-labels for the whole target set, computed once from
    the unprompted path (which training never alters)."""
    with torch.no_grad():
        z = encoder.encode_image(target_images)
        W = encoder.encode_text_all(None, table)
        probs = class_probabilities(z, W, encoder.temperature)
    return generate_pseudo_labels(probs, threshold)


def sgd_update(stack: PromptStack, gradients: list, lr: float) -> PromptStack:
    """Plain elementwise descent; a None gradient leaves its tensor alone."""
    with torch.no_grad():
        for p, g in zip(stack.parameters(), gradients):
            if g is not None:
                p.sub_(lr * g)
    return stack


def train_step(
    encoder: DualEncoder,
    table: ClassTokenTable,
    edges: list[EdgeState],
    splits: list[DomainFewShotSplit],
    target_images: np.ndarray,
    pseudo_all: PseudoLabelBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    step: int,
    total_steps: int,
) -> dict:
    """One iteration: pick an edge, sample its batches and a shared target
    batch, assemble the objective, and descend per update_scope. Edges are
    updated in place; returns the log record."""
    M = len(edges)
    if M < 1:
        raise ConfigurationError("need at least one edge")
    if config.n_t > target_images.shape[0]:
        raise SamplingError(
            f"target batch {config.n_t} exceeds pool of {target_images.shape[0]}"
        )
    i = int(rng.integers(M))
    edge = edges[i]
    batch = sample_batch(splits[i], config.n_a, config.n_u, rng)
    t_idx = rng.choice(target_images.shape[0], size=config.n_t, replace=False)
    target_batch = target_images[t_idx]
    mask = pseudo_all.mask[t_idx]
    pseudo = PseudoLabelBatch(
        one_hot=pseudo_all.one_hot[t_idx], mask=mask, qualified=int(mask.sum())
    )

    dtype = edge.stack.free_prompts[0].dtype
    temp = encoder.temperature
    W_i = encoder.encode_text_all(edge.stack, table)
    z_a = encoder.encode_image(batch.annotated_images, edge.stack)
    probs_a = class_probabilities(z_a, W_i, temp)
    z_t_i = encoder.encode_image(target_batch, edge.stack)
    probs_t_i = class_probabilities(z_t_i, W_i, temp)

    labels_oh = one_hot(batch.annotated_labels, table.K, dtype=dtype)
    csa_a = csa_annotated(probs_a, labels_oh)
    csa_t = csa_target(probs_t_i, pseudo)
    csa = csa_a + csa_t

    zero = torch.zeros((), dtype=dtype)
    dda = zero
    if config.use_dda:
        z_u = encoder.encode_image(batch.unannotated_images, edge.stack)
        dda = mmd_squared(z_u, z_t_i, config.kernel)

    tcc = zero
    tsd = zero
    collaborative = M >= 2
    if collaborative and (config.use_tcc or config.use_tsd):
        all_W = []
        all_probs = []
        for r, other in enumerate(edges):
            W_r = W_i if r == i else encoder.encode_text_all(other.stack, table)
            all_W.append(W_r)
            if config.use_tcc:
                z_t_r = z_t_i if r == i else encoder.encode_image(target_batch, other.stack)
                all_probs.append(class_probabilities(z_t_r, W_r, temp).probs)
        if config.use_tcc:
            tcc = tcc_loss(all_probs)
        if config.use_tsd:
            tsd = tsd_loss(all_W)

    lam = lambda_schedule(step, total_steps)
    total = total_loss(csa, dda, tcc, tsd, config.alpha1, config.alpha2, lam)

    record = {
        "step": step,
        "edge_index": i,
        "domain_id": edge.domain_id,
        "lambda": lam,
        "losses": {
            "csa": float(csa.detach()),
            "csa_annotated": float(csa_a.detach()),
            "csa_target": float(csa_t.detach()),
            "dda": float(dda.detach()) if config.use_dda else None,
            "tcc": float(tcc.detach()) if (config.use_tcc and collaborative) else None,
            "tsd": float(tsd.detach()) if (config.use_tsd and collaborative) else None,
        },
        "total": float(total.detach()),
        "qualified": pseudo.qualified,
    }
    if not math.isfinite(record["total"]):
        raise TrainingAbort(f"non-finite loss at step {step}", record=record)

    if config.update_scope == ALL_STACKS:
        scoped = edges
    else:
        scoped = [edge]
    params = [p for e in scoped for p in e.stack.parameters()]
    grads = torch.autograd.grad(total, params, allow_unused=True)
    offset = 0
    for e in scoped:
        n = sum(1 for _ in e.stack.parameters())
        sgd_update(e.stack, list(grads[offset : offset + n]), config.learning_rate)
        offset += n
    edge.step_count += 1
    return record


def train(
    encoder: DualEncoder,
    table: ClassTokenTable,
    edges: list[EdgeState],
    splits: list[DomainFewShotSplit],
    target_images: np.ndarray,
    config: TrainConfig,
) -> tuple[list[EdgeState], TrainLog]:
    """Run the full schedule; the ramp advances on the global step counter."""
    config.validate()
    log = TrainLog()
    total_steps = config.total_steps
    if total_steps == 0:
        log.final_checksums = {str(e.domain_id): stack_checksum(e.stack) for e in edges}
        return edges, log
    pseudo_all = cache_pseudo_labels(encoder, table, target_images, config.threshold)
    rng = np.random.default_rng(derive_seed(config.seed, "train-loop"))
    for step in range(total_steps):
        record = train_step(
            encoder, table, edges, splits, target_images, pseudo_all,
            config, rng, step, total_steps,
        )
        log.append(record)
    log.final_checksums = {str(e.domain_id): stack_checksum(e.stack) for e in edges}
    return edges, log
