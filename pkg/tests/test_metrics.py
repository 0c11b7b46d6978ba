import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainrobust import metrics as M


def brute_force_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int = M.IGNORE_ID):
    """Independent per-pixel counting oracle (pure python loops)."""
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    gt_count = [0] * num_classes
    correct = 0
    total = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if g == ignore_id:
            continue
        total += 1
        gt_count[g] += 1
        if p == g:
            tp[g] += 1
            correct += 1
        else:
            fp[p] += 1
            fn[g] += 1
    ious = []
    accs = []
    for c in range(num_classes):
        union = tp[c] + fp[c] + fn[c]
        if union > 0:
            ious.append(tp[c] / union)
        if gt_count[c] > 0:
            accs.append(tp[c] / gt_count[c])
    return (
        sum(ious) / len(ious),
        sum(accs) / len(accs),
        correct / total,
    )


class TestConfusionMatrix:
    def test_perfect_prediction_hits_diagonal_only(self):
        cm = M.ConfusionMatrix(3)
        arr = np.array([[0, 1], [2, 1]])
        M.accumulate(cm, arr, arr)
        assert np.array_equal(cm.counts, np.diag([1, 2, 1]))
        assert M.miou(cm) == M.macc(cm) == M.allacc(cm) == 1.0

    def test_all_ignored_leaves_matrix_unchanged(self):
        cm = M.ConfusionMatrix(3)
        gt = np.full((4, 4), M.IGNORE_ID)
        pred = np.random.default_rng(0).integers(0, 3, (4, 4))
        M.accumulate(cm, pred, gt)
        assert cm.total == 0

    def test_hand_enumerated_2x2_case(self):
        cm = M.ConfusionMatrix(2)
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        M.accumulate(cm, pred, gt)
        assert cm.counts[0][0] == 1 and cm.counts[0][1] == 1 and cm.counts[1][1] == 2
        iou, _ = M.per_class_iou(cm)
        assert iou[0] == pytest.approx(1 / 2)
        assert iou[1] == pytest.approx(2 / 3)
        assert M.miou(cm) == pytest.approx(7 / 12)
        assert M.allacc(cm) == pytest.approx(3 / 4)

    def test_out_of_range_ids_raise(self):
        cm = M.ConfusionMatrix(2)
        with pytest.raises(ValueError, match="prediction"):
            M.accumulate(cm, np.array([[5]]), np.array([[0]]))
        with pytest.raises(ValueError, match="ground truth"):
            M.accumulate(cm, np.array([[0]]), np.array([[3]]))

    def test_shape_mismatch_raises(self):
        cm = M.ConfusionMatrix(2)
        with pytest.raises(ValueError, match="shape"):
            M.accumulate(cm, np.zeros((2, 2), int), np.zeros((3, 3), int))

    def test_empty_matrix_rejected_by_stats(self):
        cm = M.ConfusionMatrix(3)
        for fn in (M.miou, M.macc, M.allacc):
            with pytest.raises(ValueError, match="empty"):
                fn(cm)

    def test_class_absent_everywhere_excluded_from_mean(self):
        cm = M.ConfusionMatrix(3)
        gt = np.array([[0, 0], [1, 1]])
        M.accumulate(cm, gt, gt)
        iou, present = M.per_class_iou(cm)
        assert not present[2] and np.isnan(iou[2])
        assert M.miou(cm) == 1.0

    def test_accumulation_is_order_independent(self):
        rng = np.random.default_rng(1)
        chunks = [(rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))) for _ in range(5)]
        a = M.ConfusionMatrix(4)
        b = M.ConfusionMatrix(4)
        for p, g in chunks:
            M.accumulate(a, p, g)
        for p, g in reversed(chunks):
            M.accumulate(b, p, g)
        assert a == b

    def test_merge_matches_joint_accumulation(self):
        rng = np.random.default_rng(2)
        p1, g1 = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
        p2, g2 = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
        split = M.accumulate(M.ConfusionMatrix(3), p1, g1) + M.accumulate(M.ConfusionMatrix(3), p2, g2)
        joint = M.ConfusionMatrix(3)
        M.accumulate(joint, p1, g1)
        M.accumulate(joint, p2, g2)
        assert split == joint

    def test_matches_brute_force_oracle_on_random_maps(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            num_classes = int(rng.integers(2, 6))
            gt = rng.integers(0, num_classes, (8, 8))
            pred = rng.integers(0, num_classes, (8, 8))
            gt[rng.random((8, 8)) < 0.1] = M.IGNORE_ID
            cm = M.accumulate(M.ConfusionMatrix(num_classes), pred, gt)
            ref_miou, ref_macc, ref_allacc = brute_force_metrics(pred, gt, num_classes)
            assert M.miou(cm) == ref_miou
            assert M.macc(cm) == ref_macc
            assert M.allacc(cm) == ref_allacc


class TestPSNR:
    def test_identical_images_report_cap(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert M.psnr(a, a) == 100.0

    def test_constant_half_difference_closed_form(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.5)
        assert M.psnr(a, b) == pytest.approx(10 * np.log10(1 / 0.25), abs=1e-9)
        assert M.psnr(a, b) == pytest.approx(6.0206, abs=1e-4)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
        assert M.psnr(a, b) == M.psnr(b, a)

    def test_strictly_decreasing_in_mse(self):
        a = np.zeros((4, 4))
        values = [M.psnr(a, np.full_like(a, v)) for v in (0.1, 0.2, 0.4, 0.8)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            M.psnr(np.zeros((4, 4)), np.zeros((5, 5)))


class TestSSIM:
    def test_self_similarity_is_one(self):
        a = np.random.default_rng(1).random((16, 16, 3))
        assert M.ssim(a, a) == pytest.approx(1.0, abs=1e-6)

    def test_inverted_checkerboard_is_negative(self):
        yy, xx = np.mgrid[0:16, 0:16]
        a = ((yy + xx) % 2).astype(np.float64)
        assert M.ssim(a, 1.0 - a) < 0

    def test_offset_invariance_up_to_stability_terms(self):
        rng = np.random.default_rng(4)
        a = 0.3 + 0.4 * rng.random((20, 20, 3))
        b = 0.3 + 0.4 * rng.random((20, 20, 3))
        base = M.ssim(a, b)
        shifted = M.ssim(a + 0.1, b + 0.1)
        assert abs(base - shifted) <= 1e-3

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((12, 12)), rng.random((12, 12))
        assert M.ssim(a, b) == pytest.approx(M.ssim(b, a), abs=1e-12)

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="window"):
            M.ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_agrees_with_skimage_reference(self):
        skimage_metrics = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(6)
        a = rng.random((24, 24, 3))
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
        ref = skimage_metrics.structural_similarity(
            a,
            b,
            channel_axis=-1,
            gaussian_weights=True,
            sigma=1.5,
            use_sample_covariance=False,
            data_range=1.0,
        )
        assert M.ssim(a, b) == pytest.approx(ref, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metric_ranges_property(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 5))
    gt = rng.integers(0, k, (8, 8))
    pred = rng.integers(0, k, (8, 8))
    cm = M.accumulate(M.ConfusionMatrix(k), pred, gt)
    for value in (M.miou(cm), M.macc(cm), M.allacc(cm)):
        assert 0.0 <= value <= 1.0
    perfect = np.array_equal(pred, gt)
    assert (M.allacc(cm) == 1.0) == perfect
    assert (M.miou(cm) == 1.0) == perfect
