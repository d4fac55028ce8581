import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from restlab import metrics as M
from oracles import (best_assignment_matches, brute_f1, flood_components, greedy_lesions,
                     sample_with_moments, welch_reference)

masks16 = arrays(np.uint8, (16, 16), elements=st.integers(0, 1))


def blob(shape, y0, x0, y1, x1):
    m = np.zeros(shape, np.uint8)
    m[y0:y1, x0:x1] = 1
    return m


# --- pixel F1 ------------------------------------------------------------------

def test_f1_examples():
    gt = blob((4, 4), 0, 0, 2, 2)
    assert M.pixel_f1(gt, gt) == 1.0
    assert M.pixel_f1(np.zeros((4, 4)), gt) == 0.0
    assert M.pixel_f1(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    pred = np.zeros((4, 4), np.uint8)
    pred[0, 0] = pred[0, 1] = pred[3, 3] = 1      # 3 px, 2 of them inside the 4 px truth
    assert M.pixel_f1(pred, gt) == pytest.approx(4 / 7)


def test_f1_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        M.pixel_f1(np.zeros((3, 3)), np.zeros((4, 4)))


@settings(max_examples=100, deadline=None)
@given(masks16, masks16)
def test_f1_matches_oracle_and_is_symmetric(a, b):
    assert abs(M.pixel_f1(a, b) - brute_f1(a, b)) < 1e-9
    assert M.pixel_f1(a, b) == M.pixel_f1(b, a)


@settings(max_examples=50, deadline=None)
@given(masks16, masks16)
def test_confusion_counts_cover_every_pixel(a, b):
    c = M.confusion(a, b)
    assert c.tp + c.fp + c.fn + c.tn == a.size


# --- components ------------------------------------------------------------------

def test_component_examples():
    assert M.connected_components(np.zeros((5, 5))) == []
    diag = np.array([[1, 0], [0, 1]])
    assert len(M.connected_components(diag)) == 2


@settings(max_examples=100, deadline=None)
@given(masks16)
def test_components_match_flood_fill(m):
    got = [sorted(c.tolist()) for c in M.connected_components(m)]
    assert got == flood_components(m)
    assert M.count_components(m) == len(got)


@settings(max_examples=30, deadline=None)
@given(masks16, st.sampled_from([(0, False), (2, False), (0, True)]))
def test_components_invariant_to_iteration_order(m, how):
    # relabel on a rotated / transposed copy, then map the pixel sets back
    k, transpose = how
    t = m.T if transpose else np.rot90(m, k)
    h, w = t.shape
    idx = np.arange(m.size).reshape(m.shape)
    idx_t = idx.T if transpose else np.rot90(idx, k)
    back = sorted(sorted(idx_t.ravel()[c].tolist()) for c in M.connected_components(t))
    assert back == sorted(flood_components(m))


# --- lesion matching -------------------------------------------------------------

def test_identical_masks_detect_everything():
    gt = blob((8, 8), 0, 0, 2, 2) | blob((8, 8), 5, 5, 7, 7)
    m = M.lesion_metrics(gt, gt)
    assert len(m.matched_gt) == 2 and m.false_positives == 0


def test_disjoint_blob_is_a_false_positive():
    m = M.lesion_metrics(blob((8, 8), 0, 0, 2, 2), blob((8, 8), 5, 5, 7, 7))
    assert m.matched_gt == [] and m.false_positives == 1


def test_constructed_ious_at_half():
    # gt A: 10 px row; gt B: 10 px row. pred 1 covers 6 of A (IoU 0.6),
    # pred 2 overlaps B with IoU 0.3, pred 3 is disjoint from both (IoU 0).
    gt = np.zeros((10, 12), np.uint8)
    gt[0, 0:10] = 1
    gt[4, 0:10] = 1
    pred = np.zeros_like(gt)
    pred[0, 0:6] = 1                 # 6 / 10
    pred[4, 0:3] = 1                 # 3 / 10
    pred[8, 0:4] = 1
    m = M.lesion_metrics(pred, gt, iou_thresh=0.5)
    assert len(m.matched_gt) == 1 and m.false_positives == 2
    ious = np.array([[0.6, 0.0], [0.0, 0.3], [0.0, 0.0]])
    assert best_assignment_matches(ious, 0.5) == 1


@settings(max_examples=100, deadline=None)
@given(masks16, masks16, st.sampled_from([0.1, 0.25, 0.5]))
def test_lesions_match_greedy_oracle(a, b, thresh):
    matched, n_gt, fps = greedy_lesions(a, b, thresh)
    m = M.lesion_metrics(a, b, thresh)
    assert (m.matched_gt, m.n_gt, m.false_positives) == (matched, n_gt, fps)


@settings(max_examples=50, deadline=None)
@given(masks16)
def test_no_false_positives_when_prediction_is_a_subset_of_matching_components(gt):
    # keep every gt component except a random half; the kept ones match with IoU 1
    comps = M.connected_components(gt)
    pred = np.zeros(gt.size, np.uint8)
    for c in comps[::2]:
        pred[c] = 1
    m = M.lesion_metrics(pred.reshape(gt.shape), gt)
    assert m.false_positives == 0


def test_iou_threshold_must_be_open_unit():
    with pytest.raises(ValueError):
        M.lesion_metrics(np.zeros((2, 2)), np.zeros((2, 2)), 1.0)


def test_evaluate_masks_pools_pixels_and_lesions():
    gt = [blob((6, 6), 0, 0, 2, 2), np.zeros((6, 6), np.uint8)]
    pred = [blob((6, 6), 0, 0, 2, 2), blob((6, 6), 4, 4, 5, 5)]
    s = M.evaluate_masks(pred, gt)
    assert s.sensitivity == 1.0 and s.fps_per_image == 0.5
    assert s.f1 == pytest.approx(2 * 4 / (2 * 4 + 1))


# --- Welch ---------------------------------------------------------------------------

def test_identical_samples_give_p_one():
    a = [0.1, 0.4, 0.35, 0.2]
    assert M.welch_t_test(a, a) == 1.0


def test_reference_value():
    assert M.welch_t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6]) == pytest.approx(0.3466, abs=1e-4)


def test_quarter_labels_row_shape():
    # means and standard deviations of the published 25% row, n = 25 each
    rng = np.random.default_rng(25)
    a = sample_with_moments(0.738, 0.015, 25, rng)
    b = sample_with_moments(0.764, 0.027, 25, rng)
    assert M.welch_t_test(a, b) < 1e-3


def test_degenerate_variance_is_refused():
    with pytest.raises(ValueError, match="variance"):
        M.welch_t_test([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        M.welch_t_test([1], [1, 2])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_welch_matches_reference_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), rng.integers(2, 30))
    b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 2), rng.integers(2, 30))
    p = M.welch_t_test(a, b)
    assert abs(p - welch_reference(a, b)) < 1e-6
    assert p == pytest.approx(M.welch_t_test(b, a), abs=1e-12)


def test_p_decreases_as_means_separate():
    rng = np.random.default_rng(0)
    base = sample_with_moments(0.0, 1.0, 12, rng)
    other = sample_with_moments(0.0, 1.5, 15, rng)
    ps = [M.welch_t_test(base, other + d) for d in np.linspace(0, 3, 13)]
    assert all(x > y for x, y in zip(ps, ps[1:]))


def test_betainc_edges():
    assert M.betainc(2, 3, 0.0) == 0.0 and M.betainc(2, 3, 1.0) == 1.0
    # I_x(1, 1) = x
    assert M.betainc(1, 1, 0.3) == pytest.approx(0.3)


# --- records, cross-validation, CSV ---------------------------------------------------

def rec(f1=0.5, **kw):
    base = dict(run_id="r", method="supervised", labeled_fraction=1.0, repeat=0, fold=0,
                iteration=0, f1=f1, sensitivity=0.5, fps_per_image=0.0)
    base.update(kw)
    return M.MetricsRecord(**base)


def test_record_rejects_non_finite_and_empty_context():
    with pytest.raises(ValueError):
        rec(f1=math.nan)
    with pytest.raises(ValueError):
        rec(run_id="")
    with pytest.raises(ValueError):
        rec(reward=math.inf)


def _split(n=20):
    from restlab.synthdata import MaskGrid, SampleGrid, DatasetSplit
    z = np.zeros((4, 4), np.float32)
    return DatasetSplit([(SampleGrid(i, z), MaskGrid(z.astype(np.uint8))) for i in range(n)], [])


def test_cross_validate_constant_runner():
    records, summary = M.cross_validate(lambda s, f, r: rec(repeat=r, fold=f), _split(), k=5, repeats=5)
    assert len(records) == 25
    assert summary.mean["f1"] == 0.5 and summary.sd["f1"] == 0.0


def test_cross_validate_folds_partition_each_repeat():
    seen = {}

    def runner(split, fold, repeat):
        seen.setdefault(repeat, []).append(split.folds[fold])
        return rec(repeat=repeat, fold=fold)

    M.cross_validate(runner, _split(), k=4, repeats=2)
    for groups in seen.values():
        flat = sorted(i for g in groups for i in g)
        assert flat == list(range(20))


def test_cross_validate_annotates_failures():
    def runner(split, fold, repeat):
        if fold == 2:
            raise RuntimeError("boom")
        return rec(repeat=repeat, fold=fold)

    with pytest.raises(M.CrossValidationError) as err:
        M.cross_validate(runner, _split(), k=5, repeats=1)
    assert err.value.fold == 2 and err.value.repeat == 0


def test_csv_round_trip_and_header(tmp_path):
    path = tmp_path / "m.csv"
    rows = [rec(f1=1 / 3, reward=0.25), rec(fold=1, f1=0.125)]
    M.append_records(path, rows[:1])
    M.append_records(path, rows[1:])
    assert path.read_text().splitlines()[0] == ",".join(M.CSV_FIELDS)
    assert M.read_records(path) == rows
