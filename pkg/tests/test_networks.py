"""Head output mappings, invariants, jitter behavior, checkpoint format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osdalab.autodiff import Tensor
from osdalab.networks import (
    ModelBundle,
    leaky_softmax_rows,
    load_checkpoint,
    save_checkpoint,
    softmax_rows,
)


@pytest.fixture
def bundle():
    return ModelBundle.create(input_dim=4, n_classes=2, m=3, widths=(8, 6), seed=42)


class TestOpenProbs:
    def test_uniform_logits(self):
        probs = softmax_rows(Tensor(np.zeros((1, 3)))).data
        np.testing.assert_allclose(probs, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_analytic_logits(self):
        probs = softmax_rows(Tensor(np.array([[np.log(2.0), 0.0, 0.0]]))).data
        np.testing.assert_allclose(probs, [[0.5, 0.25, 0.25]], atol=1e-12)

    def test_saturated_unknown_component(self):
        probs = softmax_rows(Tensor(np.array([[0.0, 0.0, 20.0]]))).data
        assert probs[0, 2] >= 0.9999

    def test_rows_sum_to_one(self, bundle):
        rng = np.random.default_rng(0)
        probs = bundle.open_probs(bundle.features(rng.standard_normal((16, 4)))).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert probs.shape == (16, 3)


class TestLeakySoftmax:
    def test_zero_logits(self):
        probs = leaky_softmax_rows(Tensor(np.zeros((1, 2)))).data
        np.testing.assert_allclose(probs, [[0.25, 0.25]], atol=1e-15)
        assert probs.sum() == pytest.approx(0.5)

    def test_saturating_high_logits(self):
        probs = leaky_softmax_rows(Tensor(np.full((1, 2), 20.0))).data
        assert probs.sum() < 1.0
        np.testing.assert_allclose(probs, 0.5, atol=1e-8)

    def test_vanishing_low_logits(self):
        probs = leaky_softmax_rows(Tensor(np.full((1, 2), -20.0))).data
        assert probs.sum() == pytest.approx(0.0, abs=1e-8)
        assert (probs > 0.0).all()

    @settings(max_examples=200, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_components_open_interval_and_sum_below_one(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-30.0, 30.0, size=(8, 4))
        probs = leaky_softmax_rows(Tensor(logits)).data
        assert (probs > 0.0).all() and (probs < 1.0).all()
        assert (probs.sum(axis=1) < 1.0).all()


class TestMixProbs:
    def test_uniform(self):
        probs = softmax_rows(Tensor(np.zeros((1, 2)))).data
        np.testing.assert_allclose(probs, [[0.5, 0.5]], atol=1e-15)

    def test_analytic(self):
        probs = softmax_rows(Tensor(np.array([[np.log(3.0), 0.0]]))).data
        np.testing.assert_allclose(probs, [[0.75, 0.25]], atol=1e-12)

    def test_random_rows_sum_to_one(self, bundle):
        rng = np.random.default_rng(3)
        z = bundle.features(rng.standard_normal((32, 4)))
        for k in range(1, bundle.m + 1):
            probs = bundle.mix_probs(z, k).data
            np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_index_out_of_range(self, bundle):
        z = bundle.features(np.zeros((1, 4)))
        with pytest.raises(IndexError):
            bundle.mix_probs(z, 0)
        with pytest.raises(IndexError):
            bundle.mix_probs(z, bundle.m + 1)


class TestCommonProb:
    def test_product_of_masses(self, bundle):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 4))
        z = bundle.features(x)
        p1 = bundle.open_probs(z).data[:, : bundle.n_classes].sum(axis=1)
        p2 = bundle.aux_probs(z).data.sum(axis=1)
        np.testing.assert_allclose(bundle.common_prob(x).data, p1 * p2, atol=1e-12)

    def test_aux_excluded_variant(self, bundle):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 4))
        p1 = bundle.open_probs(bundle.features(x)).data[:, : bundle.n_classes].sum(axis=1)
        np.testing.assert_allclose(bundle.common_prob(x, include_aux=False).data, p1, atol=1e-12)

    def test_hand_product(self):
        assert (2 / 3) * (1 / 2) == pytest.approx(1 / 3)
        assert 0.1 * 0.9 == pytest.approx(0.09)

    def test_strictly_inside_unit_interval(self, bundle):
        rng = np.random.default_rng(6)
        values = bundle.common_prob(rng.standard_normal((64, 4))).data
        assert (values > 0.0).all() and (values < 1.0).all()


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.floats(min_value=-10.0, max_value=10.0, allow_nan=False),
)
def test_softmax_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-30.0, 30.0, size=(4, 5))
    base = softmax_rows(Tensor(logits)).data
    shifted = softmax_rows(Tensor(logits + shift)).data
    assert np.abs(base - shifted).max() <= 1e-12


class TestJitter:
    def test_identically_initialized_heads_agree(self):
        # Identical initialization means identical weights, bias, and
        # feature mask; with jitter off such heads must agree exactly.
        bundle = ModelBundle.create(4, 2, m=3, widths=(8, 6), seed=1, jitter_scale=0.0)
        reference = bundle.mix_heads[0]
        for head in bundle.mix_heads[1:]:
            head.linear.weight.data = reference.linear.weight.data.copy()
            head.linear.bias.data = reference.linear.bias.data.copy()
            head.feature_mask = None if reference.feature_mask is None else reference.feature_mask.copy()
        x = np.random.default_rng(2).standard_normal((5, 4))
        outs = [bundle.mix_probs(bundle.features(bundle.jitter(x, k)), k).data for k in range(1, 4)]
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(outs[1], outs[2])

    def test_enabled_heads_diverge(self, bundle):
        x = np.zeros((5, 4))
        assert np.array_equal(bundle.jitter(x, 1), x)  # head 1 has zero sigma
        j2 = bundle.jitter(x, 2)
        j3 = bundle.jitter(x, 3)
        assert not np.array_equal(j2, x)
        assert not np.array_equal(j2, j3)

    def test_sigma_ladder(self, bundle):
        sigmas = [head.jitter_sigma for head in bundle.mix_heads]
        np.testing.assert_allclose(sigmas, [0.0, 0.025, 0.05])

    def test_masks_are_architectural(self):
        # Same dims -> same masks, regardless of the training seed.
        a = ModelBundle.create(4, 2, m=3, widths=(8, 6), seed=1)
        b = ModelBundle.create(4, 2, m=3, widths=(8, 6), seed=99)
        for ha, hb in zip(a.mix_heads, b.mix_heads):
            if ha.feature_mask is None:
                assert hb.feature_mask is None
            else:
                np.testing.assert_array_equal(ha.feature_mask, hb.feature_mask)
        assert a.mix_heads[0].feature_mask is None  # head 1 sees everything
        assert a.mix_heads[-1].feature_mask is not None


class TestCheckpoint:
    def test_round_trip_preserves_parameters_and_outputs(self, bundle, tmp_path):
        path = tmp_path / "model.bin"
        save_checkpoint(bundle, path)
        loaded = load_checkpoint(path)
        assert loaded.n_classes == bundle.n_classes
        assert loaded.m == bundle.m
        assert loaded.input_dim == bundle.input_dim
        for ours, theirs in zip(bundle.parameters(), loaded.parameters()):
            np.testing.assert_array_equal(ours.data, theirs.data)
        x = np.random.default_rng(8).standard_normal((6, 4))
        np.testing.assert_array_equal(
            bundle.open_probs(bundle.features(x)).data,
            loaded.open_probs(loaded.features(x)).data,
        )

    def test_save_is_deterministic(self, bundle, tmp_path):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(bundle, p1)
        save_checkpoint(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(ValueError, match="not a model checkpoint"):
            load_checkpoint(path)

    def test_rejects_truncation(self, bundle, tmp_path):
        path = tmp_path / "model.bin"
        save_checkpoint(bundle, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)


def test_create_requires_two_mix_heads():
    with pytest.raises(ValueError):
        ModelBundle.create(4, 2, m=1, widths=(8, 6), seed=0)


def test_create_is_deterministic():
    a = ModelBundle.create(4, 3, m=2, widths=(8, 6), seed=5)
    b = ModelBundle.create(4, 3, m=2, widths=(8, 6), seed=5)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_glorot_bounds_and_zero_bias():
    bundle = ModelBundle.create(10, 4, m=2, widths=(16, 8), seed=9)
    first = bundle.extractor.layers[0]
    bound = np.sqrt(6.0 / (10 + 16))
    assert np.abs(first.weight.data).max() <= bound
    np.testing.assert_array_equal(first.bias.data, 0.0)
