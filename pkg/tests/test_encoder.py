import numpy as np
import pytest
import torch

from edgeprompt import (
    BranchTrace,
    ConfigurationError,
    ContractError,
    DualEncoder,
    EncoderConfig,
    ShapeError,
    TEXT_TO_VISION,
    VISION_TO_TEXT,
    build_class_table,
    contrastive_warmup,
    encoder_checksum,
    forward_text_led,
    init_dual_encoder,
    init_prompt_stack,
    load_encoder,
    save_encoder,
)
from edgeprompt.errors import DeserializationError

CFG = EncoderConfig()  # L=4, J=2, b=2, d_T=16, d_V=24, d=8, heads=2, s=16, n=6


@pytest.fixture(scope="module")
def encoder():
    return init_dual_encoder(CFG, seed=101)


@pytest.fixture(scope="module")
def table():
    return build_class_table(CFG, K=3, seed=7)


def images(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, CFG.channels * CFG.image_size**2), dtype=np.float32)


def stack_for(direction=VISION_TO_TEXT, seed=5):
    return init_prompt_stack(CFG.J, CFG.b, CFG.d_T, CFG.d_V, direction, domain_id=0, seed=seed)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        EncoderConfig(J=5, L=4).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(d_T=15, heads=2).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(s=15).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(image_size=9, s=16).validate()
    with pytest.raises(ConfigurationError):
        EncoderConfig(temperature=0.0).validate()


def test_unprompted_sequence_length_constant(encoder):
    trace = BranchTrace()
    encoder.encode_image(images(2), None, trace=trace)
    for seq in trace.inputs:
        assert seq.shape[1] == 1 + CFG.s


def test_prompted_sequence_length(encoder):
    trace = BranchTrace()
    encoder.encode_image(images(2), stack_for(), trace=trace)
    for seq in trace.inputs:
        assert seq.shape[1] == 1 + CFG.s + CFG.b


def test_forward_deterministic(encoder):
    x = images(3)
    a = encoder.encode_image(x, stack_for())
    b = encoder.encode_image(x, stack_for())
    assert torch.equal(a, b)


def test_image_representation_shape(encoder):
    z = encoder.encode_image(images(5))
    assert z.shape == (5, CFG.d)


def test_text_distinct_per_class(encoder, table):
    W = encoder.encode_text_all(None, table)
    assert W.shape == (3, CFG.d)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not torch.allclose(W[i], W[j])


def test_text_batched_equals_per_class(encoder, table):
    stack = stack_for()
    W = encoder.encode_text_all(stack, table)
    for k in range(3):
        single = encoder.encode_text(k, stack, table)
        assert torch.equal(W[k], single)


def test_single_class_table(encoder):
    t1 = build_class_table(CFG, K=1, seed=3)
    W = encoder.encode_text_all(None, t1)
    assert W.shape == (1, CFG.d)


def test_class_index_out_of_range(encoder, table):
    with pytest.raises(IndexError):
        encoder.encode_text(3, None, table)
    with pytest.raises(IndexError):
        encoder.encode_text(-1, None, table)


def test_prompt_sensitivity_of_text_branch(encoder, table):
    """vision->text coupling: perturbing the first vision prompt moves w."""
    stack = stack_for()
    w0 = encoder.encode_text_all(stack, table)
    with torch.no_grad():
        stack.free_prompts[0][0, 0] += 1e-2
    w1 = encoder.encode_text_all(stack, table)
    assert (w1 - w0).abs().max() > 0


def test_prompt_depth_contract_vision(encoder):
    """Layers 1..J consume fresh prompts; J+1..L propagate slot outputs."""
    stack = stack_for()
    trace = BranchTrace()
    encoder.encode_image(images(2), stack, trace=trace)
    slot = trace.prompt_slot
    for li in range(CFG.J):
        expected = stack.free_prompts[li].detach().to(trace.inputs[li].dtype)
        got = trace.inputs[li][0, slot]
        assert torch.equal(got, expected)
    for li in range(CFG.J, CFG.L):
        assert torch.equal(trace.inputs[li][:, slot], trace.outputs[li - 1][:, slot])
        assert not torch.equal(
            trace.inputs[li][0, slot], stack.free_prompts[min(li, CFG.J - 1)].detach()
        )


def test_prompt_depth_contract_text(encoder, table):
    stack = stack_for()
    trace = BranchTrace()
    encoder.encode_text([0, 1], stack, table, trace=trace)
    slot = trace.prompt_slot
    for li in range(CFG.J):
        expected = stack.project_layer(li).detach().to(trace.inputs[li].dtype)
        assert torch.equal(trace.inputs[li][0, slot], expected)
    for li in range(CFG.J, CFG.L):
        assert torch.equal(trace.inputs[li][:, slot], trace.outputs[li - 1][:, slot])


def test_text_led_direction_mirrors(encoder, table):
    """text->vision: text consumes free prompts, vision the projections."""
    stack = stack_for(direction=TEXT_TO_VISION)
    trace = BranchTrace()
    encoder.encode_text(0, stack, table, trace=trace)
    assert torch.equal(
        trace.inputs[0][0, trace.prompt_slot],
        stack.free_prompts[0].detach().to(trace.inputs[0].dtype),
    )
    vtrace = BranchTrace()
    encoder.encode_image(images(1), stack, trace=vtrace)
    assert torch.equal(
        vtrace.inputs[0][0, vtrace.prompt_slot],
        stack.project_layer(0).detach().to(vtrace.inputs[0].dtype),
    )


def test_text_led_contract_checks(encoder, table):
    t2v = stack_for(direction=TEXT_TO_VISION)
    v2t = stack_for(direction=VISION_TO_TEXT)
    with pytest.raises(ContractError):
        forward_text_led(encoder, v2t, class_indices=0, table=table)
    with pytest.raises(ContractError):
        forward_text_led(encoder, t2v, images=images(1), class_indices=0, table=table)
    w = forward_text_led(encoder, t2v, class_indices=0, table=table)
    assert w.shape == (CFG.d,)
    z = forward_text_led(encoder, t2v, images=images(2))
    assert z.shape == (2, CFG.d)


def test_zero_projection_t2v_feeds_zero_rows_to_vision(encoder):
    stack = stack_for(direction=TEXT_TO_VISION)
    with torch.no_grad():
        for l in range(CFG.J):
            stack.proj_weights[l].zero_()
            stack.proj_biases[l].zero_()
    trace = BranchTrace()
    z = encoder.encode_image(images(2), stack, trace=trace)
    assert z.shape == (2, CFG.d)
    for li in range(CFG.J):
        assert torch.count_nonzero(trace.inputs[li][:, trace.prompt_slot]) == 0


def test_representations_finite_over_1000_trials(encoder, table):
    rng = np.random.default_rng(123)
    x = rng.random((1000, CFG.channels * CFG.image_size**2), dtype=np.float32)
    stack = stack_for()
    for s in (None, stack):
        z = encoder.encode_image(x, s)
        assert torch.isfinite(z).all()
    for s in (None, stack):
        W = encoder.encode_text_all(s, table)
        assert torch.isfinite(W).all()


def test_gradients_flow_only_into_stack(encoder, table):
    stack = stack_for()
    z = encoder.encode_image(images(2), stack)
    loss = z.square().sum()
    grads = torch.autograd.grad(loss, list(stack.parameters()), allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in grads)
    assert all(not p.requires_grad for p in encoder.parameters())


def test_stack_dimension_mismatch_rejected(encoder):
    bad = init_prompt_stack(CFG.J, CFG.b, CFG.d_T + 1, CFG.d_V, VISION_TO_TEXT, 0, seed=0)
    with pytest.raises(ShapeError):
        encoder.encode_image(images(1), bad)


def test_flat_image_shape_enforced(encoder):
    with pytest.raises(ShapeError):
        encoder.encode_image(np.zeros((2, 10), dtype=np.float32))


def test_checkpoint_round_trip_bit_exact(tmp_path, encoder, table):
    path = save_encoder(encoder, tmp_path / "enc.ckpt")
    loaded = load_encoder(path)
    x = images(3)
    assert torch.equal(encoder.encode_image(x), loaded.encode_image(x))
    assert torch.equal(
        encoder.encode_text_all(None, table), loaded.encode_text_all(None, table)
    )
    assert encoder_checksum(encoder) == encoder_checksum(loaded)


def test_checkpoint_truncation_rejected(tmp_path, encoder):
    path = save_encoder(encoder, tmp_path / "enc.ckpt")
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(data[:-17])
    with pytest.raises(DeserializationError):
        load_encoder(bad)


def test_init_deterministic_per_seed():
    a = init_dual_encoder(CFG, seed=42)
    b = init_dual_encoder(CFG, seed=42)
    assert encoder_checksum(a) == encoder_checksum(b)
    c = init_dual_encoder(CFG, seed=43)
    assert encoder_checksum(a) != encoder_checksum(c)


def test_warmup_reduces_loss_and_refreezes():
    enc = init_dual_encoder(CFG, seed=1)
    tbl = build_class_table(CFG, K=3, seed=2)
    rng = np.random.default_rng(0)
    x = rng.random((60, CFG.channels * CFG.image_size**2), dtype=np.float32)
    y = rng.integers(0, 3, size=60)
    before = encoder_checksum(enc)
    final = contrastive_warmup(enc, tbl, x, y.astype(np.int64), steps=30, batch_size=16,
                               lr=3e-3, temperature=0.1, seed=3)
    assert np.isfinite(final)
    assert encoder_checksum(enc) != before  # weights actually moved
    assert all(not p.requires_grad for p in enc.parameters())


def test_table_identical_for_same_seed():
    a = build_class_table(CFG, K=4, seed=9)
    b = build_class_table(CFG, K=4, seed=9)
    assert torch.equal(a.E, b.E)
    assert not a.E.requires_grad
