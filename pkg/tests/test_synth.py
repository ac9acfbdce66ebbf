import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edgeprompt import (
    ConfigurationError,
    DomainShift,
    DomainSpec,
    SamplingError,
    SplitError,
    base_glyphs,
    export_dataset_dir,
    generate_domain,
    load_dataset_dir,
    make_few_shot_split,
    sample_batch,
)


def spec(domain_id=0, rotation=0.0, mix=None, noise=0.0, n_per_class=4, size=8, channels=3):
    return DomainSpec(
        domain_id=domain_id,
        shift=DomainShift(rotation_angle=rotation, channel_mix=mix, noise_std=noise),
        n_per_class=n_per_class,
        image_size=size,
        channels=channels,
    )


def test_identity_transform_reproduces_base_glyphs():
    ds = generate_domain(spec(), K=3, seed=11)
    glyphs = base_glyphs(3, 8, 3).astype(np.float32).reshape(3, -1)
    assert ds.images.shape == (12, 3 * 8 * 8)
    for c in range(3):
        block = ds.images[ds.labels == c]
        assert block.shape[0] == 4
        assert np.array_equal(block, np.repeat(glyphs[c][None], 4, axis=0))


def test_same_seed_bit_identical():
    sp = spec(rotation=30.0, noise=0.1)
    a = generate_domain(sp, K=4, seed=7)
    b = generate_domain(sp, K=4, seed=7)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_rotation_changes_per_class_means():
    plain = generate_domain(spec(), K=3, seed=0)
    rotated = generate_domain(spec(rotation=45.0), K=3, seed=0)
    # oracle: mean image per class on the generated sets
    for c in range(3):
        mu_a = plain.images[plain.labels == c].mean(axis=0)
        mu_b = rotated.images[rotated.labels == c].mean(axis=0)
        assert np.linalg.norm(mu_a - mu_b) > 0


def test_invalid_k_rejected():
    with pytest.raises(ConfigurationError):
        generate_domain(spec(), K=1, seed=0)


def test_singular_channel_mix_rejected():
    singular = np.ones((3, 3))
    with pytest.raises(ConfigurationError):
        generate_domain(spec(mix=singular), K=3, seed=0)


def test_labels_in_range_and_class_major():
    ds = generate_domain(spec(n_per_class=5), K=4, seed=3)
    assert set(ds.labels.tolist()) == {0, 1, 2, 3}
    assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0


def test_shots_split_counts():
    ds = generate_domain(spec(), K=3, seed=0)  # 12 samples
    split = make_few_shot_split(ds, shots_per_class=1, seed=0)
    assert len(split.annotated_indices) == 3
    assert len(split.unannotated_indices) == 9
    assert set(split.annotated_labels.tolist()) == {0, 1, 2}


def test_fraction_split_counts():
    ds = generate_domain(spec(n_per_class=10), K=4, seed=0)  # 40 samples
    split = make_few_shot_split(ds, annotated_fraction=0.25, seed=0)
    assert len(split.annotated_indices) == 10
    assert len(split.unannotated_indices) == 30


def test_split_determinism():
    ds = generate_domain(spec(n_per_class=8), K=3, seed=0)
    a = make_few_shot_split(ds, shots_per_class=3, seed=42)
    b = make_few_shot_split(ds, shots_per_class=3, seed=42)
    assert np.array_equal(a.annotated_indices, b.annotated_indices)
    assert np.array_equal(a.unannotated_indices, b.unannotated_indices)


def test_split_disjoint_and_exhaustive():
    ds = generate_domain(spec(n_per_class=8), K=3, seed=1)
    split = make_few_shot_split(ds, annotated_fraction=0.2, seed=5)
    joined = np.concatenate([split.annotated_indices, split.unannotated_indices])
    assert len(np.intersect1d(split.annotated_indices, split.unannotated_indices)) == 0
    assert sorted(joined.tolist()) == list(range(len(ds)))


def test_shots_exceeding_pool_rejected():
    ds = generate_domain(spec(n_per_class=4), K=3, seed=0)
    with pytest.raises(SplitError):
        make_few_shot_split(ds, shots_per_class=5, seed=0)


def test_annotated_must_stay_minority():
    ds = generate_domain(spec(n_per_class=4), K=3, seed=0)
    with pytest.raises(SplitError):
        make_few_shot_split(ds, annotated_fraction=0.75, seed=0)


def test_exactly_one_split_mode():
    ds = generate_domain(spec(), K=3, seed=0)
    with pytest.raises(SplitError):
        make_few_shot_split(ds, shots_per_class=1, annotated_fraction=0.1, seed=0)
    with pytest.raises(SplitError):
        make_few_shot_split(ds, seed=0)


def test_full_pool_batch_is_permutation():
    ds = generate_domain(spec(n_per_class=6), K=3, seed=2)
    split = make_few_shot_split(ds, shots_per_class=2, seed=0)
    batch = sample_batch(split, n_a=6, n_u=3, rng=np.random.default_rng(0))
    assert sorted(batch.annotated_indices.tolist()) == list(range(6))


def test_batch_reproducible_for_fixed_rng():
    ds = generate_domain(spec(n_per_class=6), K=3, seed=2)
    split = make_few_shot_split(ds, shots_per_class=2, seed=0)
    a = sample_batch(split, 3, 4, np.random.default_rng(9))
    b = sample_batch(split, 3, 4, np.random.default_rng(9))
    assert np.array_equal(a.annotated_indices, b.annotated_indices)
    assert np.array_equal(a.unannotated_indices, b.unannotated_indices)


def test_batch_exceeding_pool_rejected():
    ds = generate_domain(spec(n_per_class=6), K=3, seed=2)
    split = make_few_shot_split(ds, shots_per_class=2, seed=0)
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError):
        sample_batch(split, n_a=7, n_u=1, rng=rng)
    with pytest.raises(SamplingError):
        sample_batch(split, n_a=1, n_u=100, rng=rng)


def test_published_batch_sizes_accepted_when_pools_suffice():
    ds = generate_domain(spec(n_per_class=40), K=3, seed=2)
    split = make_few_shot_split(ds, shots_per_class=3, seed=0)
    batch = sample_batch(split, n_a=4, n_u=64, rng=np.random.default_rng(1))
    assert batch.annotated_images.shape[0] == 4
    assert batch.unannotated_images.shape[0] == 64


@settings(max_examples=25, deadline=None)
@given(shots=st.integers(1, 3), seed=st.integers(0, 1000))
def test_split_properties_hold_for_any_seed(shots, seed):
    ds = generate_domain(spec(n_per_class=8), K=3, seed=0)
    split = make_few_shot_split(ds, shots_per_class=shots, seed=seed)
    assert len(split.annotated_indices) == 3 * shots
    assert len(np.intersect1d(split.annotated_indices, split.unannotated_indices)) == 0
    assert set(split.annotated_labels.tolist()) == {0, 1, 2}
    assert ((split.annotated_labels >= 0) & (split.annotated_labels < 3)).all()


def test_dataset_dir_round_trip(tmp_path):
    specs = [spec(domain_id=0, noise=0.05), spec(domain_id=1, rotation=20.0, noise=0.05)]
    datasets = [generate_domain(s, 3, seed=i) for i, s in enumerate(specs)]
    splits = [make_few_shot_split(d, shots_per_class=1, seed=3) for d in datasets]
    tspec = spec(domain_id=2, rotation=10.0, noise=0.05)
    target = generate_domain(tspec, 3, seed=9)
    out = export_dataset_dir(tmp_path / "data", splits, target, specs, tspec, K=3, seed=123)
    loaded_splits, loaded_target, manifest = load_dataset_dir(out)
    assert manifest["K"] == 3 and manifest["seed"] == 123
    for orig, back in zip(splits, loaded_splits):
        assert np.array_equal(orig.annotated_images, back.annotated_images)
        assert np.array_equal(orig.annotated_labels, back.annotated_labels)
        assert np.array_equal(orig.unannotated_images, back.unannotated_images)
    assert np.array_equal(target.images, loaded_target.images)
    assert np.array_equal(target.labels, loaded_target.labels)
    blob = (out / "target.f32").read_bytes()
    assert len(blob) == len(target) * 3 * 8 * 8 * 4  # count*C*H*W float32


def test_glyphs_do_not_depend_on_domain_seed():
    a = generate_domain(spec(noise=0.0), K=3, seed=1)
    b = generate_domain(spec(noise=0.0), K=3, seed=999)
    assert np.array_equal(a.images, b.images)
