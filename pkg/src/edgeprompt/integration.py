"""Central integration: load uploaded prompt stacks, rebuild the per-domain
models over one shared frozen encoder, and predict by averaging logits.
No training happens here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import ClassTokenTable, DualEncoder
from .errors import ContractError, DeserializationError, EdgePromptError
from .losses import cosine_matrix
from .prompts import PromptStack, load_stack


@dataclass
class EnsembleModel:
    """Read-only bundle of the shared encoder, M stacks (canonically ordered
    by domain_id) and the class table."""

    encoder: DualEncoder
    stacks: list[PromptStack]
    table: ClassTokenTable
    average_probabilities: bool = False

    def __post_init__(self) -> None:
        if not self.stacks:
            raise ContractError("ensemble needs at least one stack")
        for stack in self.stacks:
            self.encoder._check_stack(stack)
        # canonical reduction order: sort by domain_id, stable for ties
        self.stacks = sorted(self.stacks, key=lambda s: s.domain_id)


def load_uploads(
    paths: list[str | Path],
    encoder: DualEncoder,
    table: ClassTokenTable,
    average_probabilities: bool = False,
) -> EnsembleModel:
    """Deserialize uploads; any failure aborts naming the offending file."""
    stacks = []
    for path in paths:
        try:
            stack = load_stack(path, dtype=encoder.dtype)
            encoder._check_stack(stack)
        except EdgePromptError as err:
            raise DeserializationError(f"{path}: {err}") from err
        stacks.append(stack)
    return EnsembleModel(encoder, stacks, table, average_probabilities)


def _domain_logits(
    encoder: DualEncoder,
    stack: PromptStack | None,
    table: ClassTokenTable,
    images,
) -> torch.Tensor:
    z = encoder.encode_image(images, stack)
    W = encoder.encode_text_all(stack, table)
    return cosine_matrix(z, W) / encoder.temperature


def zero_shot_predict(
    encoder: DualEncoder, table: ClassTokenTable, images
) -> tuple[torch.Tensor, torch.Tensor]:
    """Unprompted logits and argmax labels."""
    with torch.no_grad():
        logits = _domain_logits(encoder, None, table, images)
    return logits, logits.argmax(dim=1)


def ensemble_predict(model: EnsembleModel, images) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean of per-domain logits (canonical stack order) and argmax labels."""
    with torch.no_grad():
        acc = None
        for stack in model.stacks:
            logits = _domain_logits(model.encoder, stack, model.table, images)
            if model.average_probabilities:
                logits = logits.softmax(dim=1)
            acc = logits if acc is None else acc + logits
        mean = acc / len(model.stacks)
    return mean, mean.argmax(dim=1)


def accuracy_of(predicted: torch.Tensor, labels: np.ndarray, K: int) -> dict:
    """Overall and per-class fraction of argmax matches."""
    if len(labels) == 0:
        raise ContractError("cannot evaluate on an empty set")
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    hits = (predicted == labels_t)
    per_class = {}
    for c in range(K):
        sel = labels_t == c
        per_class[str(c)] = float(hits[sel].float().mean()) if int(sel.sum()) else None
    return {"accuracy": float(hits.float().mean()), "per_class": per_class, "count": len(labels)}


def evaluate_accuracy(model: EnsembleModel, images, labels: np.ndarray) -> dict:
    _, predicted = ensemble_predict(model, images)
    return accuracy_of(predicted, labels, model.table.K)


def _scatter(vectors: np.ndarray) -> float:
    """Mean squared distance to the centroid (trace of the biased covariance)."""
    if vectors.shape[0] == 0:
        return 0.0
    center = vectors.mean(axis=0)
    return float(((vectors - center) ** 2).sum(axis=1).mean())


def export_features(
    model: EnsembleModel,
    images,
    labels: np.ndarray | None = None,
    per_domain: bool = True,
) -> tuple[list[dict], dict]:
    """Feature rows for external visualization plus variance statistics.

    Rows carry (domain_id, class, split, feature vector); split is "image"
    or "text". With per_domain=False only the unprompted features are
    exported, under domain_id -1. Statistics per domain: mean within-class
    scatter of image features (needs labels) and scatter of the K class
    text vectors.
    """
    rows: list[dict] = []
    stats: dict = {}
    sources: list[tuple[int, PromptStack | None]]
    if per_domain:
        sources = [(stack.domain_id, stack) for stack in model.stacks]
    else:
        sources = [(-1, None)]
    with torch.no_grad():
        for domain_id, stack in sources:
            z = model.encoder.encode_image(images, stack).cpu().numpy()
            W = model.encoder.encode_text_all(stack, model.table).cpu().numpy()
            for j in range(z.shape[0]):
                label = int(labels[j]) if labels is not None else -1
                rows.append(
                    {"domain_id": domain_id, "class": label, "split": "image", "features": z[j]}
                )
            for k in range(W.shape[0]):
                rows.append(
                    {"domain_id": domain_id, "class": k, "split": "text", "features": W[k]}
                )
            intra = None
            if labels is not None:
                per_class = [
                    _scatter(z[np.asarray(labels) == c]) for c in range(model.table.K)
                ]
                intra = float(np.mean(per_class))
            stats[str(domain_id)] = {
                "intra_class_visual_variance": intra,
                "inter_class_text_variance": _scatter(W),
            }
    return rows, stats


def write_feature_csv(path: str | Path, rows: list[dict], d: int) -> Path:
    """CSV with columns domain_id, class, split, f0..f{d-1}."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain_id", "class", "split"] + [f"f{j}" for j in range(d)])
        for row in rows:
            writer.writerow(
                [row["domain_id"], row["class"], row["split"]]
                + [repr(float(v)) for v in row["features"]]
            )
    return path
