"""Domain-specific prompt stacks: per-layer free prompts plus per-layer
affine coupling projections, owned by one edge model and shipped to the
center as a small binary file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, DeserializationError

VISION_TO_TEXT = "v2t"  # vision prompts are free, text receives projections
TEXT_TO_VISION = "t2v"  # text prompts are free, vision receives projections

_MAGIC = b"EPSTACK1"
_VERSION = 1
_HEADER = struct.Struct("<8sHBIIIII")  # magic, version, direction, domain_id, J, b, d_T, d_V
_DIRECTION_CODE = {VISION_TO_TEXT: 0, TEXT_TO_VISION: 1}
_CODE_DIRECTION = {v: k for k, v in _DIRECTION_CODE.items()}
_MAX_DIM = 1 << 20


def _branch_widths(direction: str, d_T: int, d_V: int) -> tuple[int, int]:
    """(d_src, d_dst) for the free-prompt branch and the projected branch."""
    if direction == VISION_TO_TEXT:
        return d_V, d_T
    if direction == TEXT_TO_VISION:
        return d_T, d_V
    raise ConfigurationError(f"unknown direction {direction!r}")


class PromptStack(nn.Module):
    """Trainable prompt parameters of one edge model.

    free_prompts[l] has shape (b, d_src); projections[l] maps rows to the
    other branch's width d_dst. Which branch owns the free parameters is
    set by `direction`.
    """

    def __init__(
        self,
        domain_id: int,
        direction: str,
        J: int,
        b: int,
        d_T: int,
        d_V: int,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if J < 1 or b < 1 or d_T < 1 or d_V < 1:
            raise ConfigurationError("J, b, d_T, d_V must all be >= 1")
        d_src, d_dst = _branch_widths(direction, d_T, d_V)
        self.domain_id = int(domain_id)
        self.direction = direction
        self.J, self.b, self.d_T, self.d_V = J, b, d_T, d_V
        self.d_src, self.d_dst = d_src, d_dst
        self.version = _VERSION
        self.free_prompts = nn.ParameterList(
            nn.Parameter(torch.zeros(b, d_src, dtype=dtype)) for _ in range(J)
        )
        self.proj_weights = nn.ParameterList(
            nn.Parameter(torch.zeros(d_src, d_dst, dtype=dtype)) for _ in range(J)
        )
        self.proj_biases = nn.ParameterList(
            nn.Parameter(torch.zeros(d_dst, dtype=dtype)) for _ in range(J)
        )

    @property
    def param_count(self) -> int:
        count = sum(p.numel() for p in self.parameters())
        expected = self.J * (self.b * self.d_src + self.d_src * self.d_dst + self.d_dst)
        assert count == expected, (count, expected)
        return count

    def project_layer(self, layer: int) -> torch.Tensor:
        """Affine map of layer `layer`'s free prompt into the other branch."""
        if not 0 <= layer < self.J:
            raise IndexError(f"layer {layer} outside prompt depth J={self.J}")
        return self.free_prompts[layer] @ self.proj_weights[layer] + self.proj_biases[layer]

    def validate_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise ConfigurationError(f"non-finite values in {name}")

    def clone(self) -> "PromptStack":
        out = PromptStack(
            self.domain_id, self.direction, self.J, self.b, self.d_T, self.d_V,
            dtype=self.free_prompts[0].dtype,
        )
        out.load_state_dict({k: v.detach().clone() for k, v in self.state_dict().items()})
        return out


def init_prompt_stack(
    J: int,
    b: int,
    d_T: int,
    d_V: int,
    direction: str,
    domain_id: int,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> PromptStack:
    """Fresh stack: prompts ~ N(0, 0.02), projection weights ~ N(0, 1/sqrt(d_src)),
    zero biases; deterministic per seed."""
    stack = PromptStack(domain_id, direction, J, b, d_T, d_V, dtype=dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for l in range(J):
            stack.free_prompts[l].copy_(
                torch.randn(b, stack.d_src, generator=gen, dtype=torch.float64) * 0.02
            )
            stack.proj_weights[l].copy_(
                torch.randn(stack.d_src, stack.d_dst, generator=gen, dtype=torch.float64)
                / np.sqrt(stack.d_src)
            )
    return stack


def _layer_tensors(stack: PromptStack):
    for l in range(stack.J):
        yield stack.free_prompts[l]
        yield stack.proj_weights[l]
        yield stack.proj_biases[l]


def serialize(stack: PromptStack) -> bytes:
    """Little-endian binary upload: fixed header, then per layer the free
    prompt (b x d_src), projection weight (d_src x d_dst) and bias (d_dst),
    all float32 row-major."""
    stack.validate_finite()
    header = _HEADER.pack(
        _MAGIC,
        _VERSION,
        _DIRECTION_CODE[stack.direction],
        stack.domain_id,
        stack.J,
        stack.b,
        stack.d_T,
        stack.d_V,
    )
    chunks = [header]
    for t in _layer_tensors(stack):
        chunks.append(t.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(chunks)


def deserialize(data: bytes, dtype: torch.dtype = torch.float32) -> PromptStack:
    """Parse an upload; raises DeserializationError naming the bad field."""
    if len(data) < _HEADER.size:
        raise DeserializationError(
            f"header: file holds {len(data)} bytes, header needs {_HEADER.size}"
        )
    magic, version, dir_code, domain_id, J, b, d_T, d_V = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise DeserializationError(f"magic: expected {_MAGIC!r}, found {magic!r}")
    if version != _VERSION:
        raise DeserializationError(f"version: expected {_VERSION}, found {version}")
    if dir_code not in _CODE_DIRECTION:
        raise DeserializationError(f"direction: unknown code {dir_code}")
    for name, value in (("J", J), ("b", b), ("d_T", d_T), ("d_V", d_V)):
        if not 1 <= value <= _MAX_DIM:
            raise DeserializationError(f"{name}: implausible value {value}")
    direction = _CODE_DIRECTION[dir_code]
    stack = PromptStack(domain_id, direction, J, b, d_T, d_V, dtype=dtype)
    expected = _HEADER.size + 4 * stack.param_count
    if len(data) != expected:
        raise DeserializationError(
            f"payload: expected {expected} bytes for the header dimensions, found {len(data)}"
        )
    offset = _HEADER.size
    with torch.no_grad():
        for t in _layer_tensors(stack):
            nbytes = 4 * t.numel()
            arr = np.frombuffer(data, dtype="<f4", count=t.numel(), offset=offset)
            t.copy_(torch.from_numpy(arr.reshape(tuple(t.shape)).copy()))
            offset += nbytes
    stack.validate_finite()
    return stack


def save_stack(stack: PromptStack, path: str | Path) -> Path:
    """Write the binary upload plus a human-readable sidecar manifest."""
    path = Path(path)
    data = serialize(stack)
    path.write_bytes(data)
    sidecar = {
        "magic": _MAGIC.decode("ascii"),
        "version": _VERSION,
        "direction": stack.direction,
        "domain_id": stack.domain_id,
        "J": stack.J,
        "b": stack.b,
        "d_T": stack.d_T,
        "d_V": stack.d_V,
        "param_count": stack.param_count,
        "file_bytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))
    return path


def load_stack(path: str | Path, dtype: torch.dtype = torch.float32) -> PromptStack:
    return deserialize(Path(path).read_bytes(), dtype=dtype)


def stack_checksum(stack: PromptStack) -> str:
    return hashlib.sha256(serialize(stack)).hexdigest()


def header_size() -> int:
    return _HEADER.size
