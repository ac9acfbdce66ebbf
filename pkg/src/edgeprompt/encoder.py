"""Frozen toy dual encoder: a vision and a text transformer with per-layer
prompt insertion up to depth J and projection heads into a shared space.

Sequence layout
  vision: [class token, s patch tokens, b prompt rows]
  text:   [start token, b prompt rows, n template tokens]

For layers 1..J the prompt slot is overwritten with that layer's fresh
prompt (free or projected, depending on the stack's direction); for layers
J+1..L the slot's output propagates like any other token. The image
representation is the projected class token, the text representation the
projected final template token.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError, DeserializationError, ShapeError
from .prompts import PromptStack, TEXT_TO_VISION, VISION_TO_TEXT

_CKPT_VERSION = 1
_MLP_RATIO = 2


@dataclass
class EncoderConfig:
    L: int = 4
    J: int = 2
    b: int = 2
    d_T: int = 16
    d_V: int = 24
    d: int = 8
    heads: int = 2
    s: int = 16  # vision sequence length (patch count), perfect square
    n: int = 6  # template token count
    image_size: int = 8
    channels: int = 3
    temperature: float = 0.01

    def validate(self) -> None:
        for name in ("L", "J", "b", "d_T", "d_V", "d", "heads", "s", "n", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.J > self.L:
            raise ConfigurationError(f"prompt depth J={self.J} exceeds layer count L={self.L}")
        if self.d_T % self.heads or self.d_V % self.heads:
            raise ConfigurationError("d_T and d_V must be divisible by heads")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        grid = math.isqrt(self.s)
        if grid * grid != self.s:
            raise ConfigurationError(f"patch count s={self.s} must be a perfect square")
        if self.image_size % grid:
            raise ConfigurationError(
                f"image_size={self.image_size} not divisible by patch grid {grid}"
            )
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")

    @property
    def patch_dim(self) -> int:
        grid = math.isqrt(self.s)
        return self.channels * (self.image_size // grid) ** 2


class ClassTokenTable:
    """Frozen template embeddings per class: (K, n, d_T).

    The template has one designated category slot (n-2); all other slots
    are shared across classes. Identical across edge models by construction
    (deterministic in config, K, seed).
    """

    def __init__(self, E: torch.Tensor, K: int, class_slot: int):
        if E.shape[0] != K:
            raise ConfigurationError("table row count must equal K")
        self.E = E.detach()
        self.E.requires_grad_(False)
        self.K = K
        self.class_slot = class_slot

    def to(self, dtype: torch.dtype) -> "ClassTokenTable":
        return ClassTokenTable(self.E.to(dtype), self.K, self.class_slot)


def build_class_table(
    config: EncoderConfig, K: int, seed: int, dtype: torch.dtype = torch.float32
) -> ClassTokenTable:
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    template = torch.randn(config.n, config.d_T, generator=gen, dtype=torch.float64)
    class_rows = torch.randn(K, config.d_T, generator=gen, dtype=torch.float64)
    slot = config.n - 2 if config.n >= 2 else 0
    E = template.unsqueeze(0).repeat(K, 1, 1)
    E[:, slot, :] = class_rows
    return ClassTokenTable(E.to(dtype), K, slot)


class TransformerLayer(nn.Module):
    """Pre-LN block: multi-head self-attention + 2-layer GELU MLP."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.width, self.heads = width, heads
        self.head_dim = width // heads
        self.ln1 = nn.LayerNorm(width)
        self.ln2 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.mlp_in = nn.Linear(width, _MLP_RATIO * width)
        self.mlp_out = nn.Linear(_MLP_RATIO * width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.softmax(dim=-1)
        h = (att @ v).transpose(1, 2).reshape(B, T, self.width)
        x = x + self.attn_out(h)
        x = x + self.mlp_out(F.gelu(self.mlp_in(self.ln2(x))))
        return x


@dataclass
class BranchTrace:
    """Per-layer input/output sequences of one forward pass, for contract tests."""

    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    prompt_slot: slice | None = None


class DualEncoder(nn.Module):
    """Frozen vision/text transformer pair with prompt-insertion hooks."""

    def __init__(self, config: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.temperature = config.temperature
        self.vision_layers = nn.ModuleList(
            TransformerLayer(config.d_V, config.heads) for _ in range(config.L)
        )
        self.text_layers = nn.ModuleList(
            TransformerLayer(config.d_T, config.heads) for _ in range(config.L)
        )
        self.patch_embed = nn.Linear(config.patch_dim, config.d_V)
        self.pos_vision = nn.Parameter(torch.zeros(1 + config.s, config.d_V))
        self.pos_text = nn.Parameter(torch.zeros(1 + config.n, config.d_T))
        self.start_vision = nn.Parameter(torch.zeros(config.d_V))
        self.start_text = nn.Parameter(torch.zeros(config.d_T))
        self.ln_vision = nn.LayerNorm(config.d_V)
        self.ln_text = nn.LayerNorm(config.d_T)
        self.proj_vision = nn.Linear(config.d_V, config.d, bias=False)
        self.proj_text = nn.Linear(config.d_T, config.d, bias=False)
        self.to(dtype)
        self.freeze()

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)

    def _check_stack(self, stack: PromptStack | None) -> None:
        if stack is None:
            return
        c = self.config
        if (stack.J, stack.b, stack.d_T, stack.d_V) != (c.J, c.b, c.d_T, c.d_V):
            raise ShapeError(
                f"stack dims (J={stack.J}, b={stack.b}, d_T={stack.d_T}, d_V={stack.d_V}) "
                f"do not match encoder (J={c.J}, b={c.b}, d_T={c.d_T}, d_V={c.d_V})"
            )

    def _branch_prompts(self, stack: PromptStack | None, branch: str) -> list[torch.Tensor] | None:
        """The J prompt rows this branch consumes, already in its width."""
        if stack is None:
            return None
        if branch == "vision":
            own_free = stack.direction == VISION_TO_TEXT
        else:
            own_free = stack.direction == TEXT_TO_VISION
        if own_free:
            return [stack.free_prompts[l] for l in range(stack.J)]
        return [stack.project_layer(l) for l in range(stack.J)]

    def _run_branch(
        self,
        layers: nn.ModuleList,
        seq: torch.Tensor,
        prompts: list[torch.Tensor] | None,
        slot_start: int,
        trace: BranchTrace | None,
    ) -> torch.Tensor:
        """seq arrives without prompt rows; layer 0 splices them in at
        slot_start, layers 1..J-1 overwrite the slot with fresh rows, and
        later layers let the slot's output propagate."""
        J, b = self.config.J, self.config.b
        if prompts is not None and trace is not None:
            trace.prompt_slot = slice(slot_start, slot_start + b)
        for li, layer in enumerate(layers):
            if prompts is not None and li < J:
                rows = prompts[li].to(seq.dtype).unsqueeze(0).expand(seq.shape[0], -1, -1)
                tail = slot_start if li == 0 else slot_start + b
                seq = torch.cat([seq[:, :slot_start], rows, seq[:, tail:]], dim=1)
            if trace is not None:
                trace.inputs.append(seq.detach().clone())
            seq = layer(seq)
            if trace is not None:
                trace.outputs.append(seq.detach().clone())
        return seq

    def _as_images(self, images) -> torch.Tensor:
        c = self.config
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.ascontiguousarray(images))
        images = images.to(self.dtype)
        if images.dim() == 1:
            images = images.unsqueeze(0)
        expected = c.channels * c.image_size**2
        if images.dim() != 2 or images.shape[1] != expected:
            raise ShapeError(
                f"images must be (B, {expected}) flat vectors, got {tuple(images.shape)}"
            )
        return images

    def _patchify(self, images: torch.Tensor) -> torch.Tensor:
        c = self.config
        grid = math.isqrt(c.s)
        p = c.image_size // grid
        B = images.shape[0]
        x = images.view(B, c.channels, grid, p, grid, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(B, c.s, c.patch_dim)
        return x

    def encode_image(
        self,
        images,
        stack: PromptStack | None = None,
        trace: BranchTrace | None = None,
    ) -> torch.Tensor:
        """Image representations z (B, d); differentiable w.r.t. stack only."""
        self._check_stack(stack)
        images = self._as_images(images)
        tok = self.patch_embed(self._patchify(images))
        B = tok.shape[0]
        start = (self.start_vision + self.pos_vision[0]).expand(B, 1, -1)
        seq = torch.cat([start, tok + self.pos_vision[1:]], dim=1)
        prompts = self._branch_prompts(stack, "vision")
        seq = self._run_branch(
            self.vision_layers, seq, prompts, slot_start=1 + self.config.s, trace=trace
        )
        return self.proj_vision(self.ln_vision(seq[:, 0]))

    def encode_text(
        self,
        class_indices,
        stack: PromptStack | None = None,
        table: ClassTokenTable | None = None,
        trace: BranchTrace | None = None,
    ) -> torch.Tensor:
        """Text representations w (B, d) for the given classes."""
        if table is None:
            raise ContractError("encode_text requires a ClassTokenTable")
        self._check_stack(stack)
        idx = torch.as_tensor(class_indices, dtype=torch.long)
        scalar = idx.dim() == 0
        idx = idx.reshape(-1)
        if ((idx < 0) | (idx >= table.K)).any():
            raise IndexError(f"class index outside [0, {table.K})")
        e = table.E.to(self.dtype)[idx] + self.pos_text[1:]
        B = e.shape[0]
        start = (self.start_text + self.pos_text[0]).expand(B, 1, -1)
        seq = torch.cat([start, e], dim=1)
        prompts = self._branch_prompts(stack, "text")
        seq = self._run_branch(self.text_layers, seq, prompts, slot_start=1, trace=trace)
        w = self.proj_text(self.ln_text(seq[:, -1]))
        return w[0] if scalar else w

    def encode_text_all(
        self, stack: PromptStack | None, table: ClassTokenTable
    ) -> torch.Tensor:
        """All K text representations as a (K, d) matrix; row k == encode_text(k)."""
        return self.encode_text(torch.arange(table.K), stack, table)


def forward_text_led(
    encoder: DualEncoder,
    stack: PromptStack,
    images=None,
    class_indices=None,
    table: ClassTokenTable | None = None,
) -> torch.Tensor:
    """Forward in the coupling direction where text prompts are the free
    parameters and the vision branch receives their projections."""
    if stack.direction != TEXT_TO_VISION:
        raise ContractError(
            f"stack direction is {stack.direction!r}; text-led forward needs {TEXT_TO_VISION!r}"
        )
    if (images is None) == (class_indices is None):
        raise ContractError("pass exactly one of images / class_indices")
    if images is not None:
        return encoder.encode_image(images, stack)
    return encoder.encode_text(class_indices, stack, table)


def _fill_param(p: torch.Tensor, gen: torch.Generator, std: float) -> None:
    values = torch.randn(tuple(p.shape), generator=gen, dtype=torch.float64) * std
    with torch.no_grad():
        p.copy_(values.to(p.dtype))


def init_dual_encoder(
    config: EncoderConfig, seed: int, dtype: torch.dtype = torch.float32
) -> DualEncoder:
    """Random frozen backbone, deterministic per seed."""
    enc = DualEncoder(config, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    for layers in (enc.vision_layers, enc.text_layers):
        for layer in layers:
            w = layer.width
            _fill_param(layer.qkv.weight, gen, w**-0.5)
            _fill_param(layer.qkv.bias, gen, 0.01)
            _fill_param(layer.attn_out.weight, gen, w**-0.5)
            _fill_param(layer.attn_out.bias, gen, 0.01)
            _fill_param(layer.mlp_in.weight, gen, w**-0.5)
            _fill_param(layer.mlp_in.bias, gen, 0.01)
            _fill_param(layer.mlp_out.weight, gen, (_MLP_RATIO * w) ** -0.5)
            _fill_param(layer.mlp_out.bias, gen, 0.01)
    _fill_param(enc.patch_embed.weight, gen, config.patch_dim**-0.5)
    _fill_param(enc.patch_embed.bias, gen, 0.01)
    _fill_param(enc.pos_vision, gen, 0.1)
    _fill_param(enc.pos_text, gen, 0.1)
    _fill_param(enc.start_vision, gen, 1.0)
    _fill_param(enc.start_text, gen, 1.0)
    _fill_param(enc.proj_vision.weight, gen, config.d_V**-0.5)
    _fill_param(enc.proj_text.weight, gen, config.d_T**-0.5)
    enc.freeze()
    return enc


def contrastive_warmup(
    encoder: DualEncoder,
    table: ClassTokenTable,
    images: np.ndarray,
    labels: np.ndarray,
    steps: int = 300,
    batch_size: int = 32,
    lr: float = 3e-3,
    temperature: float = 0.1,
    seed: int = 0,
) -> float:
    """Short supervised contrastive warm-up of the backbone on held-out data,
    so the frozen encoder's zero-shot path is better than chance. Re-freezes
    the encoder before returning; returns the final batch loss.

    This is experiment setup, not part of the adaptation method.
    """
    for p in encoder.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    labels_t = torch.from_numpy(labels)
    loss_val = float("nan")
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        z = encoder.encode_image(images[idx])
        W = encoder.encode_text_all(None, table)
        logits = (F.normalize(z, dim=1) @ F.normalize(W, dim=1).t()) / temperature
        loss = F.cross_entropy(logits, labels_t[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_val = float(loss.detach())
    encoder.freeze()
    return loss_val


def save_encoder(encoder: DualEncoder, path: str | Path) -> Path:
    """Checkpoint: u32 manifest length, JSON manifest, then each tensor as
    float32 little-endian in manifest order, keyed by state_dict names."""
    path = Path(path)
    state = encoder.state_dict()
    names = sorted(state.keys())
    manifest = {
        "format_version": _CKPT_VERSION,
        "config": asdict(encoder.config),
        "tensors": [{"name": k, "shape": list(state[k].shape)} for k in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    chunks = [struct.pack("<I", len(blob)), blob]
    for k in names:
        chunks.append(state[k].detach().cpu().numpy().astype("<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_encoder(path: str | Path, dtype: torch.dtype = torch.float32) -> DualEncoder:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise DeserializationError("header: checkpoint shorter than 4 bytes")
    (mlen,) = struct.unpack_from("<I", data)
    if len(data) < 4 + mlen:
        raise DeserializationError("manifest: truncated checkpoint")
    manifest = json.loads(data[4 : 4 + mlen].decode("utf-8"))
    if manifest.get("format_version") != _CKPT_VERSION:
        raise DeserializationError(
            f"format_version: expected {_CKPT_VERSION}, found {manifest.get('format_version')}"
        )
    config = EncoderConfig(**manifest["config"])
    enc = DualEncoder(config, dtype=dtype)
    state = {}
    offset = 4 + mlen
    for meta in manifest["tensors"]:
        shape = tuple(meta["shape"])
        numel = int(np.prod(shape)) if shape else 1
        nbytes = 4 * numel
        if offset + nbytes > len(data):
            raise DeserializationError(f"tensor {meta['name']}: truncated data")
        arr = np.frombuffer(data, dtype="<f4", count=numel, offset=offset)
        state[meta["name"]] = torch.from_numpy(arr.reshape(shape).copy()).to(dtype)
        offset += nbytes
    if offset != len(data):
        raise DeserializationError("payload: trailing bytes after last tensor")
    enc.load_state_dict(state)
    enc.freeze()
    return enc


def encoder_checksum(encoder: DualEncoder) -> str:
    state = encoder.state_dict()
    h = hashlib.sha256()
    for k in sorted(state.keys()):
        h.update(k.encode("utf-8"))
        h.update(state[k].detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
