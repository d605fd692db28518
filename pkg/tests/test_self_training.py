import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereopan.errors import ParameterError
from stereopan.self_training import (
    ScoredInstances,
    ViewTransform,
    apply_view,
    build_self_label,
    copy_paste,
    drop_loss_indicator,
    ensemble_instances,
    ensemble_semantics,
    invert_view,
    semantic_self_label,
    threshold_instances,
)
from stereopan.semantic_labeling import SoftSemantics
from stereopan.tensor_io import IGNORE_CLASS, PanopticLabel


def random_soft(rng, k, h, w):
    return SoftSemantics.from_unnormalized(rng.random((k, h, w)) + 1e-3)


def square_mask(h, w, y0, x0, size):
    m = np.zeros((h, w))
    m[y0 : y0 + size, x0 : x0 + size] = 1.0
    return m


class TestInvertView:
    def test_identity_transform(self):
        rng = np.random.default_rng(0)
        p = random_soft(rng, 3, 6, 8)
        out = invert_view(p, ViewTransform(), (6, 8))
        assert np.allclose(out.probs, p.probs, atol=1e-12)

    def test_double_flip_is_identity(self):
        rng = np.random.default_rng(1)
        p = random_soft(rng, 3, 6, 8)
        t = ViewTransform(hflip=True)
        out = invert_view(invert_view(p, t, (6, 8)), t, (6, 8))
        assert np.array_equal(out.probs, p.probs)

    def test_scale_invert_constant(self):
        p = SoftSemantics(np.stack([np.full((8, 8), 0.3), np.full((8, 8), 0.7)]))
        view = apply_view(p, ViewTransform(scale=0.5))
        assert view.probs.shape == (2, 4, 4)
        out = invert_view(view, ViewTransform(scale=0.5), (8, 8))
        assert np.allclose(out.probs[0], 0.3, atol=1e-12)

    def test_apply_then_invert_flip_scale(self):
        # smooth volume: up/down resampling round-trips closely
        ramp = np.linspace(0.2, 0.8, 16)[None, :].repeat(16, axis=0)
        p = SoftSemantics(np.stack([ramp, 1.0 - ramp]))
        t = ViewTransform(scale=1.25, hflip=True)
        out = invert_view(apply_view(p, t), t, (16, 16))
        assert np.abs(out.probs - p.probs).max() < 0.05
        assert np.abs(out.probs.sum(axis=0) - 1).max() < 1e-6

    def test_instances_round_trip_flip(self):
        masks = np.stack([square_mask(8, 8, 1, 1, 3)])
        s = ScoredInstances(masks, np.array([0.9]))
        t = ViewTransform(hflip=True)
        out = invert_view(invert_view(s, t, (8, 8)), t, (8, 8))
        assert np.array_equal(out.masks, masks)
        assert out.kappa.tolist() == [0.9]


class TestEnsembleSemantics:
    def test_single_view_identity(self):
        rng = np.random.default_rng(3)
        p = random_soft(rng, 3, 5, 5)
        assert np.allclose(ensemble_semantics([p]).probs, p.probs, atol=1e-12)

    def test_agreeing_one_hots(self):
        a = np.zeros((2, 3, 3))
        a[0] = 1.0
        out = ensemble_semantics([SoftSemantics(a), SoftSemantics(a.copy())])
        assert np.allclose(out.probs, a)

    def test_disagreeing_one_hots_average(self):
        a = np.zeros((2, 2, 2))
        a[0] = 1.0
        b = np.zeros((2, 2, 2))
        b[1] = 1.0
        out = ensemble_semantics([SoftSemantics(a), SoftSemantics(b)])
        assert np.allclose(out.probs, 0.5)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        views = [random_soft(rng, 3, 4, 4) for _ in range(4)]
        a = ensemble_semantics(views)
        b = ensemble_semantics(views[::-1])
        assert np.allclose(a.probs, b.probs, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            ensemble_semantics([])


class TestEnsembleInstances:
    def test_identical_masks_one_group(self):
        m = square_mask(8, 8, 2, 2, 4)
        views = [ScoredInstances(np.stack([m]), np.array([k])) for k in (0.9, 0.8, 0.7)]
        out = ensemble_instances(views)
        assert len(out) == 1
        assert out.kappa[0] == pytest.approx(0.8)
        assert np.allclose(out.masks[0], m)

    def test_disjoint_masks_separate_groups(self):
        a = square_mask(8, 8, 0, 0, 3)
        b = square_mask(8, 8, 5, 5, 3)
        out = ensemble_instances([ScoredInstances(np.stack([a, b]), np.array([0.9, 0.8]))])
        assert len(out) == 2

    def test_derived_grouping_case(self):
        # two views, IoU 0.6 masks, kappas 0.9/0.7 -> one group, kappa 0.8
        a = np.zeros((10, 10))
        a[0:5, 0:6] = 1.0  # 30 px
        b = np.zeros((10, 10))
        b[0:5, 2:8] = 1.0  # 30 px, overlap 20 -> IoU 20/40 = 0.5... adjust
        b = np.zeros((10, 10))
        b[0:5, 1:7] = 1.0  # overlap 25, union 35 -> IoU ~0.714 >= 0.5
        out = ensemble_instances(
            [
                ScoredInstances(np.stack([a]), np.array([0.9])),
                ScoredInstances(np.stack([b]), np.array([0.7])),
            ],
            group_iou=0.5,
        )
        assert len(out) == 1
        assert out.kappa[0] == pytest.approx(0.8)
        assert np.allclose(out.masks[0], (a + b) / 2)

    def test_empty_views(self):
        out = ensemble_instances([ScoredInstances.empty((4, 4))])
        assert len(out) == 0


class TestThresholdInstances:
    def test_strictness(self):
        s = ScoredInstances(np.zeros((2, 3, 3)), np.array([0.5, 0.9]))
        out = threshold_instances(s, gamma=0.5)
        assert out.kappa.tolist() == [0.9]

    def test_gamma_limits(self):
        s = ScoredInstances(np.zeros((2, 3, 3)), np.array([0.0, 1.0]))
        assert threshold_instances(s, 0.0).kappa.tolist() == [1.0]  # strictly > 0
        assert len(threshold_instances(s, 1.0)) == 0

    def test_gamma_range(self):
        with pytest.raises(ParameterError):
            threshold_instances(ScoredInstances.empty((2, 2)), gamma=1.5)


class TestSemanticSelfLabel:
    def test_zeta_zero_labels_everything(self):
        rng = np.random.default_rng(5)
        p = random_soft(rng, 4, 6, 6)
        label = semantic_self_label(p, zeta_hat=0.0)
        assert not (label == IGNORE_CLASS).any()
        assert np.array_equal(label, p.argmax().astype(np.uint8))

    def test_zeta_one_labels_only_spatial_maxima(self):
        rng = np.random.default_rng(6)
        p = random_soft(rng, 3, 5, 5)
        label = semantic_self_label(p, zeta_hat=1.0)
        peaks = p.probs.reshape(3, -1).max(axis=1)
        labeled = label != IGNORE_CLASS
        ys, xs = np.nonzero(labeled)
        for y, x in zip(ys, xs):
            k = label[y, x]
            assert p.probs[k, y, x] == pytest.approx(peaks[k])

    def test_derived_threshold_case(self):
        # class 1 peaks at 0.9; a 0.6 pixel with zeta_hat 0.7 falls below 0.63
        probs = np.zeros((2, 1, 3))
        probs[1] = [[0.9, 0.6, 0.2]]
        probs[0] = 1.0 - probs[1]
        p = SoftSemantics(probs)
        label = semantic_self_label(p, zeta_hat=0.7)
        assert label[0, 0] == 1
        assert label[0, 1] == IGNORE_CLASS  # 0.6 < 0.7 * 0.9
        assert label[0, 2] == 0  # class 0 wins there: 0.8 >= 0.7 * 0.8

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), lo=st.floats(0.0, 1.0), extra=st.floats(0.0, 1.0))
    def test_ignore_set_monotone_in_zeta(self, seed, lo, extra):
        rng = np.random.default_rng(seed)
        p = random_soft(rng, 3, 6, 6)
        hi = min(1.0, lo + extra)
        ig_lo = semantic_self_label(p, lo) == IGNORE_CLASS
        ig_hi = semantic_self_label(p, hi) == IGNORE_CLASS
        assert not (ig_lo & ~ig_hi).any()


class TestDropLossIndicator:
    def test_identical_mask_flagged(self):
        m = square_mask(8, 8, 1, 1, 4).astype(bool)
        assert drop_loss_indicator([m], [m.copy()]).tolist() == [True]

    def test_disjoint_not_flagged(self):
        a = square_mask(8, 8, 0, 0, 3).astype(bool)
        b = square_mask(8, 8, 5, 5, 3).astype(bool)
        assert drop_loss_indicator([a], [b]).tolist() == [False]

    def test_offset_squares_boundary(self):
        # 50x50 squares overlapping 25x50: IoU = 1250/3750 = 1/3
        a = np.zeros((100, 100), bool)
        a[:50, :50] = True
        b = np.zeros((100, 100), bool)
        b[:50, 25:75] = True
        assert drop_loss_indicator([a], [b], tau_iou=0.4).tolist() == [False]
        assert drop_loss_indicator([a], [b], tau_iou=0.3).tolist() == [True]

    def test_no_pseudo_masks_nothing_flagged(self):
        m = square_mask(4, 4, 0, 0, 2).astype(bool)
        assert drop_loss_indicator([m, m], []).tolist() == [False, False]

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**16), lo=st.floats(0.0, 1.0), extra=st.floats(0.0, 1.0))
    def test_monotone_decreasing_in_tau(self, seed, lo, extra):
        rng = np.random.default_rng(seed)
        preds = [rng.random((8, 8)) > 0.5 for _ in range(3)]
        pseudo = [rng.random((8, 8)) > 0.5 for _ in range(2)]
        hi = min(1.0, lo + extra)
        f_hi = drop_loss_indicator(preds, pseudo, hi)
        f_lo = drop_loss_indicator(preds, pseudo, lo)
        assert not (f_hi & ~f_lo).any()


class TestCopyPaste:
    def _target(self, h=20, w=20):
        image = np.zeros((h, w, 3), dtype=np.uint8)
        label = PanopticLabel(np.zeros((h, w), np.uint8), np.zeros((h, w), np.uint16))
        return image, label

    def _bank_entry(self, size=5, class_id=3):
        patch = np.full((size, size, 3), 200, dtype=np.uint8)
        mask = np.ones((size, size))
        return (patch, mask, class_id)

    def test_single_paste_changes_exactly_mask_area(self):
        image, label = self._target()
        entry = self._bank_entry(size=5)
        out_img, out_label = copy_paste(image, label, [entry], rng_seed=0, n_range=(1, 1))
        assert (out_label.instance != 0).sum() == 25
        assert (out_label.semantic == 3).sum() == 25
        assert (out_img != image).any(axis=-1).sum() == 25

    def test_deterministic(self):
        image, label = self._target()
        bank = [self._bank_entry(4, 1), self._bank_entry(6, 2)]
        a_img, a_label = copy_paste(image, label, bank, rng_seed=7)
        b_img, b_label = copy_paste(image, label, bank, rng_seed=7)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_label.semantic, b_label.semantic)
        assert np.array_equal(a_label.instance, b_label.instance)

    def test_fully_occluded_paste_vanishes(self):
        image, label = self._target(8, 8)
        big = (np.full((8, 8, 3), 50, np.uint8), np.ones((8, 8)), 1)
        out_img, out_label = copy_paste(image, label, [big], rng_seed=1, n_range=(2, 2))
        # both pastes cover the whole frame; only the later one survives
        assert set(np.unique(out_label.instance)) == {1}

    def test_overlap_carries_later_paste_id(self):
        # forced placement: patches as tall/wide as the target
        left = (np.full((8, 8, 3), 50, np.uint8), np.pad(np.ones((8, 5)), ((0, 0), (0, 3))), 1)
        mid = (np.full((8, 8, 3), 90, np.uint8), np.pad(np.ones((8, 4)), ((0, 0), (3, 1))), 2)
        seen_mixed = False
        for seed in range(12):
            image, label = self._target(8, 8)
            _, out = copy_paste(image, label, [left, mid], rng_seed=seed, n_range=(2, 2))
            ids = set(np.unique(out.instance)) - {0}
            if ids != {1, 2}:
                continue  # same entry drawn twice
            seen_mixed = True
            # cols 3..4 are covered by both masks: the later paste (id 2) wins
            assert set(np.unique(out.instance[:, 3:5])) == {2}
        assert seen_mixed

    def test_preserves_outside_pixels(self):
        image, label = self._target()
        image[:, :] = 9
        sem = label.semantic.copy()
        sem[:2, :2] = 7
        inst = label.instance.copy()
        inst[:2, :2] = 1
        label = PanopticLabel(sem, inst)
        out_img, out_label = copy_paste(image, label, [self._bank_entry(3)], rng_seed=3, n_range=(1, 1))
        pasted = out_label.instance != inst
        assert np.array_equal(out_img[~pasted], image[~pasted])

    def test_empty_bank_rejected(self):
        image, label = self._target()
        with pytest.raises(ParameterError):
            copy_paste(image, label, [], rng_seed=0)


class TestBuildSelfLabel:
    def test_identity_view_zero_thresholds(self):
        rng = np.random.default_rng(8)
        sem = random_soft(rng, 3, 8, 8)
        label = build_self_label(sem, ScoredInstances.empty((8, 8)), gamma=0.0, zeta_hat=0.0)
        assert np.array_equal(label.semantic, sem.argmax().astype(np.uint8))
        assert (label.instance == 0).all()

    def test_instances_painted(self):
        probs = np.zeros((2, 8, 8))
        probs[0] = 1.0
        sem = SoftSemantics(probs)
        m = square_mask(8, 8, 2, 2, 3)
        label = build_self_label(
            sem, ScoredInstances(np.stack([m]), np.array([0.9])), gamma=0.5, zeta_hat=0.0
        )
        assert (label.instance == 1).sum() == 9
        label.validate()
