import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgecollab.core import (
    AnnotationStack,
    Image,
    Sample,
    ValidationError,
    binarize_ground_truth,
    consensus,
    make_sample,
    validate_prob_map,
)


def _stack(*layers):
    return AnnotationStack(np.stack(layers, axis=2))


class TestConsensus:
    def test_identical_layers_reproduce_the_map(self):
        rng = np.random.default_rng(0)
        base = (rng.random((20, 20)) < 0.3).astype(np.uint8)
        stack = _stack(base, base, base)
        np.testing.assert_array_equal(consensus(stack), base.astype(np.float64))

    def test_two_annotators_one_vote_gives_half(self):
        a = np.zeros((16, 16), dtype=np.uint8)
        a[5, 5] = 1
        b = np.zeros((16, 16), dtype=np.uint8)
        cons = consensus(_stack(a, b))
        assert cons[5, 5] == 0.5

    def test_four_annotators_one_vote_gives_quarter(self):
        # oracle: 1 positive vote / 4 annotators = 0.25 by direct arithmetic
        layers = [np.zeros((16, 16), dtype=np.uint8) for _ in range(4)]
        layers[2][3, 7] = 1
        cons = consensus(_stack(*layers))
        assert cons[3, 7] == pytest.approx(0.25)
        assert cons[0, 0] == 0.0

    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant_over_annotators(self, n_annot, seed):
        rng = np.random.default_rng(seed)
        layers = (rng.random((8, 8, n_annot)) < 0.4).astype(np.uint8)
        perm = rng.permutation(n_annot)
        c1 = consensus(AnnotationStack(layers))
        c2 = consensus(AnnotationStack(layers[:, :, perm]))
        np.testing.assert_allclose(c1, c2)


class TestBinarize:
    def test_quarter_consensus_passes_point_two_threshold(self):
        cons = np.full((4, 4), 0.25)
        assert binarize_ground_truth(cons, 0.2).all()

    def test_zero_consensus_never_fires(self):
        cons = np.zeros((4, 4))
        for t in (0.05, 0.2, 0.5, 1.0):
            assert not binarize_ground_truth(cons, t).any()

    def test_single_annotator_is_identity_for_any_threshold(self):
        rng = np.random.default_rng(1)
        layer = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        cons = consensus(_stack(layer))
        for t in (0.01, 0.2, 0.7, 1.0):
            np.testing.assert_array_equal(binarize_ground_truth(cons, t), layer)

    @given(
        st.floats(min_value=0.05, max_value=0.95),
        st.floats(min_value=0.05, max_value=0.95),
        st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_threshold(self, t1, t2, seed):
        lo, hi = sorted((t1, t2))
        cons = np.random.default_rng(seed).random((10, 10))
        high = binarize_ground_truth(cons, hi)
        low = binarize_ground_truth(cons, lo)
        # raising the threshold never turns a 0 into a 1
        assert not np.any(high & ~low)

    def test_rejects_out_of_range_threshold(self):
        with pytest.raises(ValidationError):
            binarize_ground_truth(np.zeros((4, 4)), 0.0)
        with pytest.raises(ValidationError):
            binarize_ground_truth(np.zeros((4, 4)), 1.5)


class TestDomainTypes:
    def test_image_rejects_small_sides(self):
        with pytest.raises(ValidationError):
            Image(np.zeros((8, 64, 3), dtype=np.float32))

    def test_image_rejects_out_of_range(self):
        arr = np.zeros((16, 16, 3), dtype=np.float32)
        arr[0, 0, 0] = 1.5
        with pytest.raises(ValidationError):
            Image(arr)

    def test_image_rejects_nan(self):
        arr = np.zeros((16, 16, 3), dtype=np.float32)
        arr[1, 1, 1] = np.nan
        with pytest.raises(ValidationError):
            Image(arr)

    def test_annotations_must_be_binary(self):
        with pytest.raises(ValidationError):
            AnnotationStack(np.full((16, 16, 2), 0.5))

    def test_sample_shape_agreement(self):
        img = Image(np.zeros((16, 16, 3), dtype=np.float32))
        ann = AnnotationStack(np.zeros((16, 18, 1), dtype=np.uint8))
        with pytest.raises(ValidationError):
            Sample(img, ann, np.zeros((16, 16), dtype=np.uint8), "bad")

    def test_make_sample_binarizes_consensus(self):
        rng = np.random.default_rng(3)
        img = rng.random((16, 16, 3)).astype(np.float32)
        layers = (rng.random((16, 16, 5)) < 0.3).astype(np.uint8)
        sample = make_sample(img, layers, "s0", gt_threshold=0.2)
        expected = (layers.mean(axis=2) >= 0.2).astype(np.uint8)
        np.testing.assert_array_equal(sample.gt_binary, expected)

    def test_prob_map_validator_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            validate_prob_map(np.full((4, 4), 1.0001))
        validate_prob_map(np.zeros((4, 4)))
