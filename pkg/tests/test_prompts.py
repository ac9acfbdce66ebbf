import json

import numpy as np
import pytest
import torch

from edgeprompt import (
    DeserializationError,
    PromptStack,
    TEXT_TO_VISION,
    VISION_TO_TEXT,
    deserialize,
    init_prompt_stack,
    load_stack,
    save_stack,
    serialize,
)
from edgeprompt.prompts import header_size

TOY = dict(J=2, b=2, d_T=16, d_V=24)


def make(direction=VISION_TO_TEXT, seed=0, domain_id=0, **kw):
    args = {**TOY, **kw}
    return init_prompt_stack(direction=direction, domain_id=domain_id, seed=seed, **args)


def test_init_deterministic():
    a, b = make(seed=5), make(seed=5)
    assert serialize(a) == serialize(b)


def test_different_seeds_differ():
    assert serialize(make(seed=1)) != serialize(make(seed=2))


def test_param_count_closed_form():
    v2t = make(direction=VISION_TO_TEXT)
    assert v2t.param_count == 2 * (2 * 24 + 24 * 16 + 16) == 896
    t2v = make(direction=TEXT_TO_VISION)
    assert t2v.param_count == 2 * (2 * 16 + 16 * 24 + 24) == 880


def test_direction_swaps_branch_widths():
    v2t, t2v = make(direction=VISION_TO_TEXT), make(direction=TEXT_TO_VISION)
    assert (v2t.d_src, v2t.d_dst) == (24, 16)
    assert (t2v.d_src, t2v.d_dst) == (16, 24)
    # projection weight volume matches up to transposition
    assert v2t.proj_weights[0].numel() == t2v.proj_weights[0].numel()
    assert tuple(v2t.proj_weights[0].shape) == tuple(reversed(t2v.proj_weights[0].shape))


def test_project_layer_zero_weights_gives_zero():
    stack = make()
    with torch.no_grad():
        stack.proj_weights[0].zero_()
        stack.proj_biases[0].zero_()
    assert torch.count_nonzero(stack.project_layer(0)) == 0


def test_project_layer_identity_square_case():
    stack = init_prompt_stack(J=1, b=3, d_T=8, d_V=8, direction=VISION_TO_TEXT, domain_id=0, seed=0)
    with torch.no_grad():
        stack.proj_weights[0].copy_(torch.eye(8))
        stack.proj_biases[0].zero_()
    assert torch.equal(stack.project_layer(0), stack.free_prompts[0])


def test_project_layer_matches_triple_loop_oracle():
    stack = make(seed=3)
    stack = stack.double()
    out = stack.project_layer(1).detach().numpy()
    p = stack.free_prompts[1].detach().numpy()
    w = stack.proj_weights[1].detach().numpy()
    bias = stack.proj_biases[1].detach().numpy()
    oracle = np.zeros_like(out)
    for i in range(p.shape[0]):
        for j in range(w.shape[1]):
            acc = bias[j]
            for k in range(p.shape[1]):
                acc += p[i, k] * w[k, j]
            oracle[i, j] = acc
    assert np.abs(out - oracle).max() < 1e-12


def test_project_layer_out_of_depth():
    with pytest.raises(IndexError):
        make().project_layer(2)


def test_round_trip_bit_exact():
    stack = make(seed=8, domain_id=17)
    data = serialize(stack)
    back = deserialize(data)
    assert serialize(back) == data
    assert back.domain_id == 17 and back.direction == VISION_TO_TEXT
    for a, b in zip(stack.parameters(), back.parameters()):
        assert torch.equal(a, b)


def test_serialize_idempotent_through_round_trip():
    data = serialize(make(seed=4))
    assert serialize(deserialize(data)) == data


def test_file_size_formula():
    stack = make()
    assert len(serialize(stack)) == header_size() + 4 * stack.param_count


def test_corrupt_magic_names_field():
    data = bytearray(serialize(make()))
    data[0] ^= 0xFF
    with pytest.raises(DeserializationError, match="magic"):
        deserialize(bytes(data))


def test_corrupt_version_names_field():
    data = bytearray(serialize(make()))
    data[8] = 99
    with pytest.raises(DeserializationError, match="version"):
        deserialize(bytes(data))


def test_corrupt_direction_names_field():
    data = bytearray(serialize(make()))
    data[10] = 7
    with pytest.raises(DeserializationError, match="direction"):
        deserialize(bytes(data))


def test_truncated_payload_rejected():
    data = serialize(make())
    with pytest.raises(DeserializationError, match="payload"):
        deserialize(data[:-8])
    with pytest.raises(DeserializationError, match="header"):
        deserialize(data[:10])


def test_dimension_header_inconsistency_rejected():
    data = bytearray(serialize(make()))
    data[15] = 0  # J -> 0
    with pytest.raises(DeserializationError, match="J"):
        deserialize(bytes(data))


def test_save_stack_writes_sidecar(tmp_path):
    stack = make(seed=2, domain_id=3)
    path = save_stack(stack, tmp_path / "upload.stack")
    sidecar = json.loads((tmp_path / "upload.stack.json").read_text())
    assert sidecar["domain_id"] == 3
    assert sidecar["param_count"] == 896
    assert sidecar["file_bytes"] == path.stat().st_size
    loaded = load_stack(path)
    assert serialize(loaded) == serialize(stack)


def test_t2v_round_trip_preserves_direction():
    stack = make(direction=TEXT_TO_VISION, seed=9)
    back = deserialize(serialize(stack))
    assert back.direction == TEXT_TO_VISION
    assert back.param_count == 880


def test_non_finite_parameters_rejected():
    stack = make()
    with torch.no_grad():
        stack.free_prompts[0][0, 0] = float("nan")
    with pytest.raises(Exception, match="non-finite"):
        serialize(stack)


def test_all_parameters_finite_after_init():
    for direction in (VISION_TO_TEXT, TEXT_TO_VISION):
        stack = make(direction=direction, seed=11)
        stack.validate_finite()
        assert isinstance(stack, PromptStack)
