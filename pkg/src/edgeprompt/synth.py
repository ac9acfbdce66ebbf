"""Procedural multi-domain image synthesis and few-shot splits.

Each class is a fixed constellation of colored Gaussian blobs ("glyph");
a domain applies its own shift to every glyph: pixel-grid rotation,
channel mixing, and additive Gaussian noise. All domains of one
experiment share the glyph set, so the label space is common while the
input distributions differ.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, SamplingError, SplitError

# Fixed root for glyph construction: glyphs must be identical across
# domains and independent of any per-domain seed.
_GLYPH_SEED = 0x5EED
_BLOBS_PER_GLYPH = 3

_MANIFEST_NAME = "manifest.json"
_FORMAT_VERSION = 1


@dataclass
class DomainShift:
    """The transform that turns shared glyphs into one domain's images."""

    rotation_angle: float = 0.0
    channel_mix: np.ndarray | None = None  # (C, C); None means identity
    noise_std: float = 0.0

    def mix_matrix(self, channels: int) -> np.ndarray:
        if self.channel_mix is None:
            return np.eye(channels)
        m = np.asarray(self.channel_mix, dtype=np.float64)
        if m.shape != (channels, channels):
            raise ConfigurationError(
                f"channel_mix has shape {m.shape}, expected ({channels}, {channels})"
            )
        if abs(np.linalg.det(m)) <= 1e-6:
            raise ConfigurationError("channel_mix is not invertible")
        return m


@dataclass
class DomainSpec:
    domain_id: int
    shift: DomainShift = field(default_factory=DomainShift)
    n_per_class: int = 16
    image_size: int = 8
    channels: int = 3

    def validate(self) -> None:
        if self.n_per_class < 2:
            raise ConfigurationError("n_per_class must be >= 2")
        if self.image_size < 2:
            raise ConfigurationError("image_size must be >= 2")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        self.shift.mix_matrix(self.channels)


@dataclass
class DomainDataset:
    """Fully labeled images of one domain, stored as flat [0,1] vectors."""

    domain_id: int
    images: np.ndarray  # (N, C*H*W) float32
    labels: np.ndarray  # (N,) int64
    K: int
    channels: int
    image_size: int

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class DomainFewShotSplit:
    """Annotated/unannotated partition of one source domain."""

    domain_id: int
    annotated_images: np.ndarray  # (Na, D) float32
    annotated_labels: np.ndarray  # (Na,) int64
    unannotated_images: np.ndarray  # (Nu, D) float32
    K: int
    annotated_indices: np.ndarray  # indices into the source dataset
    unannotated_indices: np.ndarray

    def __post_init__(self) -> None:
        n_a = len(self.annotated_indices)
        n_u = len(self.unannotated_indices)
        if n_a >= n_u:
            raise SplitError(
                f"annotated pool ({n_a}) must be smaller than unannotated ({n_u})"
            )
        if np.intersect1d(self.annotated_indices, self.unannotated_indices).size:
            raise SplitError("annotated and unannotated index sets overlap")


@dataclass
class SampledBatch:
    annotated_images: np.ndarray
    annotated_labels: np.ndarray
    unannotated_images: np.ndarray
    annotated_indices: np.ndarray
    unannotated_indices: np.ndarray


def _class_color(c: int, K: int, channels: int) -> np.ndarray:
    """A distinct saturated color per class (hue wheel for tri-channel)."""
    if channels == 1:
        return np.array([1.0])
    hue = 2.0 * np.pi * c / K
    offsets = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
    return 0.55 + 0.45 * np.cos(hue + offsets)


def base_glyphs(K: int, image_size: int, channels: int = 3) -> np.ndarray:
    """Shared class patterns, shape (K, C, H, W) in [0,1]: a constellation
    of Gaussian blobs in the class's signature color.

    Deterministic in (K, image_size, channels) only; per-domain seeds
    never influence the glyphs.
    """
    if K < 2:
        raise ConfigurationError("K must be >= 2")
    h = w = image_size
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    max_r = 0.35 * (image_size - 1)
    glyphs = np.zeros((K, channels, h, w), dtype=np.float64)
    for c in range(K):
        rng = np.random.default_rng([_GLYPH_SEED, K, image_size, channels, c])
        color = _class_color(c, K, channels)
        for _ in range(_BLOBS_PER_GLYPH):
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = max_r * np.sqrt(rng.uniform(0.15, 1.0))
            by, bx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
            sigma = image_size * rng.uniform(0.09, 0.16)
            shade = np.clip(color * rng.uniform(0.65, 1.0) + rng.normal(0.0, 0.04, channels), 0.05, 1.0)
            bump = np.exp(-((ys - by) ** 2 + (xs - bx) ** 2) / (2.0 * sigma**2))
            glyphs[c] += shade[:, None, None] * bump[None, :, :]
    return np.clip(glyphs, 0.0, 1.0)


def _rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate (C, H, W) about the image center, bilinear, zero fill.

    angle 0 reproduces the input bit-for-bit.
    """
    c, h, w = img.shape
    theta = np.deg2rad(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    y_rel, x_rel = ys - cy, xs - cx
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_y = cos_t * y_rel + sin_t * x_rel + cy
    src_x = -sin_t * y_rel + cos_t * x_rel + cx
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    fy, fx = src_y - y0, src_x - x0
    out = np.zeros_like(img)
    corners = (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x0 + 1, (1 - fy) * fx),
        (y0 + 1, x0, fy * (1 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    )
    for yy, xx, wgt in corners:
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yv, xv = yy[valid], xx[valid]
        out[:, valid] += img[:, yv, xv] * wgt[valid]
    return out


def generate_domain(spec: DomainSpec, K: int, seed: int) -> DomainDataset:
    """Produce the full labeled dataset of one domain.

    Returns K * n_per_class images, class-major order; deterministic for
    a fixed (spec, K, seed).
    """
    spec.validate()
    if K < 2:
        raise ConfigurationError("K must be >= 2")
    glyphs = base_glyphs(K, spec.image_size, spec.channels)
    mix = spec.shift.mix_matrix(spec.channels)
    shifted = np.empty_like(glyphs)
    for c in range(K):
        rotated = _rotate(glyphs[c], spec.shift.rotation_angle)
        mixed = np.einsum("ij,jhw->ihw", mix, rotated)
        shifted[c] = np.clip(mixed, 0.0, 1.0)

    rng = np.random.default_rng(seed)
    n = spec.n_per_class
    images = np.empty((K * n, spec.channels, spec.image_size, spec.image_size), dtype=np.float64)
    labels = np.empty(K * n, dtype=np.int64)
    for c in range(K):
        for j in range(n):
            sample = shifted[c]
            if spec.shift.noise_std > 0:
                sample = np.clip(sample + rng.normal(0.0, spec.shift.noise_std, sample.shape), 0.0, 1.0)
            images[c * n + j] = sample
            labels[c * n + j] = c
    flat = images.reshape(K * n, -1).astype(np.float32)
    return DomainDataset(
        domain_id=spec.domain_id,
        images=flat,
        labels=labels,
        K=K,
        channels=spec.channels,
        image_size=spec.image_size,
    )


def make_few_shot_split(
    dataset: DomainDataset,
    shots_per_class: int | None = None,
    annotated_fraction: float | None = None,
    seed: int = 0,
) -> DomainFewShotSplit:
    """Partition a domain into a small annotated set and a large unannotated rest.

    shots mode samples per class (every class represented); fraction mode
    samples globally, so class imbalance in the annotated set is allowed.
    """
    if (shots_per_class is None) == (annotated_fraction is None):
        raise SplitError("specify exactly one of shots_per_class / annotated_fraction")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    if shots_per_class is not None:
        if shots_per_class < 1:
            raise SplitError("shots_per_class must be >= 1")
        chosen = []
        for c in range(dataset.K):
            pool = np.flatnonzero(dataset.labels == c)
            if shots_per_class > pool.size:
                raise SplitError(
                    f"class {c} has {pool.size} samples, cannot draw {shots_per_class} shots"
                )
            chosen.append(rng.choice(pool, size=shots_per_class, replace=False))
        annotated_idx = np.sort(np.concatenate(chosen))
    else:
        if not (0.0 < annotated_fraction < 1.0):
            raise SplitError("annotated_fraction must lie in (0, 1)")
        n_a = int(round(annotated_fraction * n))
        if n_a < 1:
            raise SplitError("annotated_fraction selects zero samples")
        annotated_idx = np.sort(rng.choice(n, size=n_a, replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[annotated_idx] = True
    unannotated_idx = np.flatnonzero(~mask)
    return DomainFewShotSplit(
        domain_id=dataset.domain_id,
        annotated_images=dataset.images[annotated_idx],
        annotated_labels=dataset.labels[annotated_idx],
        unannotated_images=dataset.images[unannotated_idx],
        K=dataset.K,
        annotated_indices=annotated_idx,
        unannotated_indices=unannotated_idx,
    )


def sample_batch(
    split: DomainFewShotSplit,
    n_a: int,
    n_u: int,
    rng: np.random.Generator,
) -> SampledBatch:
    """Draw one annotated and one unannotated batch, uniform without replacement."""
    if n_a > len(split.annotated_indices):
        raise SamplingError(
            f"annotated batch {n_a} exceeds pool of {len(split.annotated_indices)}"
        )
    if n_u > len(split.unannotated_indices):
        raise SamplingError(
            f"unannotated batch {n_u} exceeds pool of {len(split.unannotated_indices)}"
        )
    a_idx = rng.choice(len(split.annotated_indices), size=n_a, replace=False)
    u_idx = rng.choice(len(split.unannotated_indices), size=n_u, replace=False)
    return SampledBatch(
        annotated_images=split.annotated_images[a_idx],
        annotated_labels=split.annotated_labels[a_idx],
        unannotated_images=split.unannotated_images[u_idx],
        annotated_indices=a_idx,
        unannotated_indices=u_idx,
    )


def _blob_path(dirpath: Path, name: str) -> Path:
    return dirpath / f"{name}.f32"


def _write_blob(dirpath: Path, name: str, images: np.ndarray, channels: int, size: int) -> dict:
    """Write images as a little-endian float32 blob in (count, C, H, W) order."""
    count = images.shape[0]
    arr = images.reshape(count, channels, size, size).astype("<f4")
    _blob_path(dirpath, name).write_bytes(arr.tobytes())
    return {"blob": f"{name}.f32", "count": count}


def _read_blob(dirpath: Path, entry: dict, channels: int, size: int) -> np.ndarray:
    path = dirpath / entry["blob"]
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    count = entry["count"]
    expected = count * channels * size * size
    if raw.size != expected:
        raise ConfigurationError(
            f"{path.name}: blob holds {raw.size} floats, manifest expects {expected}"
        )
    return raw.reshape(count, -1).astype(np.float32)


def _spec_to_json(spec: DomainSpec) -> dict:
    mix = spec.shift.channel_mix
    return {
        "domain_id": spec.domain_id,
        "rotation_angle": spec.shift.rotation_angle,
        "channel_mix": None if mix is None else np.asarray(mix).tolist(),
        "noise_std": spec.shift.noise_std,
        "n_per_class": spec.n_per_class,
        "image_size": spec.image_size,
        "channels": spec.channels,
    }


def spec_from_json(obj: dict) -> DomainSpec:
    mix = obj.get("channel_mix")
    return DomainSpec(
        domain_id=obj["domain_id"],
        shift=DomainShift(
            rotation_angle=obj.get("rotation_angle", 0.0),
            channel_mix=None if mix is None else np.asarray(mix, dtype=np.float64),
            noise_std=obj.get("noise_std", 0.0),
        ),
        n_per_class=obj["n_per_class"],
        image_size=obj["image_size"],
        channels=obj.get("channels", 3),
    )


def export_dataset_dir(
    dirpath: str | Path,
    splits: list[DomainFewShotSplit],
    target: DomainDataset,
    source_specs: list[DomainSpec],
    target_spec: DomainSpec,
    K: int,
    seed: int,
) -> Path:
    """Write the experiment's data to a directory: manifest.json plus one
    float32 blob per partition (annotated/unannotated per source, target).

    Target labels go into the manifest; they are used only for evaluation.
    """
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    size, channels = target.image_size, target.channels
    sources = []
    for split, spec in zip(splits, source_specs):
        name = f"domain{split.domain_id}"
        ann = _write_blob(dirpath, f"{name}_annotated", split.annotated_images, channels, size)
        una = _write_blob(dirpath, f"{name}_unannotated", split.unannotated_images, channels, size)
        sources.append(
            {
                "domain_id": split.domain_id,
                "spec": _spec_to_json(spec),
                "annotated": {**ann, "labels": split.annotated_labels.tolist()},
                "unannotated": una,
                "annotated_indices": split.annotated_indices.tolist(),
                "unannotated_indices": split.unannotated_indices.tolist(),
            }
        )
    tgt = _write_blob(dirpath, "target", target.images, channels, size)
    manifest = {
        "format_version": _FORMAT_VERSION,
        "K": K,
        "image_size": size,
        "channels": channels,
        "seed": seed,
        "layout": "count,channels,height,width float32 little-endian",
        "sources": sources,
        "target": {
            "domain_id": target.domain_id,
            "spec": _spec_to_json(target_spec),
            **tgt,
            "labels": target.labels.tolist(),
        },
    }
    (dirpath / _MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return dirpath


def load_dataset_dir(dirpath: str | Path) -> tuple[list[DomainFewShotSplit], DomainDataset, dict]:
    """Inverse of export_dataset_dir; returns (splits, target, manifest)."""
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / _MANIFEST_NAME).read_text())
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported dataset format_version {manifest.get('format_version')}"
        )
    K = manifest["K"]
    size, channels = manifest["image_size"], manifest["channels"]
    splits = []
    for src in manifest["sources"]:
        splits.append(
            DomainFewShotSplit(
                domain_id=src["domain_id"],
                annotated_images=_read_blob(dirpath, src["annotated"], channels, size),
                annotated_labels=np.asarray(src["annotated"]["labels"], dtype=np.int64),
                unannotated_images=_read_blob(dirpath, src["unannotated"], channels, size),
                K=K,
                annotated_indices=np.asarray(src["annotated_indices"], dtype=np.int64),
                unannotated_indices=np.asarray(src["unannotated_indices"], dtype=np.int64),
            )
        )
    tgt = manifest["target"]
    target = DomainDataset(
        domain_id=tgt["domain_id"],
        images=_read_blob(dirpath, tgt, channels, size),
        labels=np.asarray(tgt["labels"], dtype=np.int64),
        K=K,
        channels=channels,
        image_size=size,
    )
    return splits, target, manifest
