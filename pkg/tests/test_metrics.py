"""Metric tests built around three brute-force oracles:

- `_pair_count_auroc`: P(score+ > score-) + half the ties, by enumeration.
- `_enumerate_pr`: precision/recall/F1 at every threshold in the score set.
- `_exhaustive_aupro`: the PRO/FPR curve computed one threshold at a time
  with nothing shared with the module implementation.
"""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmad.metrics import (
    DEFAULT_FPR_LIMIT,
    LabeledScores,
    MetricPreconditionError,
    MetricsReport,
    aupro,
    auroc,
    average_precision,
    connected_components,
    evaluate,
    f1_max,
    mad,
)
from ssmad.tensor import BinaryMask, Tensor


# ---------------------------------------------------------------- oracles


def _pair_count_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = len(pos) * len(neg)
    acc = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                acc += 1.0
            elif p == n:
                acc += 0.5
    return acc / total


def _enumerate_pr(scores, labels):
    """(precision, recall, f1) at every distinct threshold, descending."""
    order = sorted(set(scores), reverse=True)
    p_total = sum(labels)
    rows = []
    for t in order:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        precision = tp / (tp + fp)
        recall = tp / p_total
        f1 = 2 * tp / (tp + fp + p_total) if tp + fp + p_total else 0.0
        rows.append((precision, recall, f1))
    return rows


def _oracle_ap(scores, labels):
    rows = _enumerate_pr(scores, labels)
    ap, prev_r = 0.0, 0.0
    for precision, recall, _ in rows:
        ap += (recall - prev_r) * precision
        prev_r = recall
    return ap


def _oracle_f1max(scores, labels):
    return max(f1 for _, _, f1 in _enumerate_pr(scores, labels))


def _regions_of(mask_bits):
    """Flood fill with 8-connectivity, the slow obvious way."""
    h, w = mask_bits.shape
    seen = np.zeros_like(mask_bits, dtype=bool)
    regions = []
    for r0 in range(h):
        for c0 in range(w):
            if mask_bits[r0, c0] == 1 and not seen[r0, c0]:
                stack = [(r0, c0)]
                seen[r0, c0] = True
                cells = []
                while stack:
                    r, c = stack.pop()
                    cells.append(r * w + c)
                    for dr in (-1, 0, 1):
                        for dc in (-1, 0, 1):
                            rr, cc = r + dr, c + dc
                            if 0 <= rr < h and 0 <= cc < w:
                                if mask_bits[rr, cc] == 1 and not seen[rr, cc]:
                                    seen[rr, cc] = True
                                    stack.append((rr, cc))
                regions.append(sorted(cells))
    return regions


def _exhaustive_aupro(maps, masks, fpr_limit):
    all_regions = []       # (map_index, set of flat cells)
    for idx, m in enumerate(masks):
        for cells in _regions_of(m):
            all_regions.append((idx, set(cells)))
    pooled = np.concatenate([t.reshape(-1) for t in maps])
    neg_total = sum(int((m == 0).sum()) for m in masks)

    points = [(0.0, 0.0)]
    for t in sorted(set(pooled.tolist()), reverse=True):
        pro_sum = 0.0
        for idx, cells in all_regions:
            flat = maps[idx].reshape(-1)
            hit = sum(1 for cell in cells if flat[cell] >= t)
            pro_sum += hit / len(cells)
        pro = pro_sum / len(all_regions)
        fp = 0
        for m_idx, m in enumerate(masks):
            flat = maps[m_idx].reshape(-1)
            mflat = m.reshape(-1)
            fp += int(((flat >= t) & (mflat == 0)).sum())
        fpr = fp / neg_total
        points.append((fpr, pro))

    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x1 <= fpr_limit:
            area += (x1 - x0) * (y0 + y1) / 2
        else:
            if x0 >= fpr_limit:
                break
            # interpolate the crossing
            frac = (fpr_limit - x0) / (x1 - x0)
            y_cross = y0 + frac * (y1 - y0)
            area += (fpr_limit - x0) * (y0 + y_cross) / 2
            break
    return area / fpr_limit


def _random_labeled(rng, n, tie_prob=0.3):
    scores = rng.standard_normal(n)
    if rng.random() < tie_prob:
        # force duplicated scores so the tie paths get exercised
        scores = np.round(scores, 1)
    labels = rng.integers(0, 2, n)
    if labels.sum() == 0:
        labels[rng.integers(0, n)] = 1
    if labels.sum() == n:
        labels[rng.integers(0, n)] = 0
    return scores, labels


# ------------------------------------------------------------------ auroc


def test_auroc_perfect():
    assert auroc(LabeledScores([0.9, 0.1], [1, 0])) == 1.0


def test_auroc_tie_symmetry():
    assert auroc(LabeledScores([0.5, 0.5], [1, 0])) == 0.5


def test_auroc_worked_example():
    got = auroc(LabeledScores([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]))
    assert got == 0.75


def test_auroc_needs_both_classes():
    with pytest.raises(MetricPreconditionError):
        auroc(LabeledScores([0.1, 0.2], [1, 1]))
    with pytest.raises(MetricPreconditionError):
        auroc(LabeledScores([0.1, 0.2], [0, 0]))


@pytest.mark.parametrize("seed", range(40))
def test_auroc_matches_pair_counting(seed):
    rng = np.random.default_rng(seed)
    scores, labels = _random_labeled(rng, int(rng.integers(2, 60)))
    got = auroc(LabeledScores(scores, labels))
    want = _pair_count_auroc(scores.tolist(), labels.tolist())
    assert abs(got - want) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40))
def test_auroc_invariant_under_monotone_transform(seed, n):
    rng = np.random.default_rng(seed)
    scores, labels = _random_labeled(rng, n)
    base = auroc(LabeledScores(scores, labels))
    warped = auroc(LabeledScores(np.exp(scores * 0.5) + 3, labels))
    assert abs(base - warped) <= 1e-12


def test_auroc_permutation_invariant():
    rng = np.random.default_rng(77)
    scores, labels = _random_labeled(rng, 31)
    perm = rng.permutation(31)
    a = auroc(LabeledScores(scores, labels))
    b = auroc(LabeledScores(scores[perm], labels[perm]))
    assert a == b


# --------------------------------------------------------------------- ap


def test_ap_perfect():
    assert average_precision(LabeledScores([0.9, 0.8, 0.1], [1, 1, 0])) == 1.0


def test_ap_worked_example():
    got = average_precision(LabeledScores([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]))
    np.testing.assert_allclose(got, 0.5 * 1.0 + 0.5 * (2 / 3), rtol=1e-12)


def test_ap_all_positive():
    assert average_precision(LabeledScores([0.2, 0.9, 0.5], [1, 1, 1])) == 1.0


def test_ap_needs_a_positive():
    with pytest.raises(MetricPreconditionError):
        average_precision(LabeledScores([0.2, 0.9], [0, 0]))


@pytest.mark.parametrize("seed", range(40))
def test_ap_matches_enumeration(seed):
    rng = np.random.default_rng(seed + 1000)
    scores, labels = _random_labeled(rng, int(rng.integers(2, 60)))
    got = average_precision(LabeledScores(scores, labels))
    want = _oracle_ap(scores.tolist(), labels.tolist())
    assert abs(got - want) <= 1e-12


# ----------------------------------------------------------------- f1 max


def test_f1_perfect_balanced():
    assert f1_max(LabeledScores([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0


def test_f1_worked_example():
    got = f1_max(LabeledScores([0.9, 0.8, 0.1], [1, 0, 1]))
    np.testing.assert_allclose(got, 0.8, rtol=1e-12)


def test_f1_single_top_positive():
    assert f1_max(LabeledScores([0.9, 0.3, 0.2], [1, 0, 0])) == 1.0


@pytest.mark.parametrize("seed", range(40))
def test_f1_matches_enumeration(seed):
    rng = np.random.default_rng(seed + 2000)
    scores, labels = _random_labeled(rng, int(rng.integers(2, 60)))
    got = f1_max(LabeledScores(scores, labels))
    want = _oracle_f1max(scores.tolist(), labels.tolist())
    assert abs(got - want) <= 1e-12


# ------------------------------------------------------------- components


def test_components_empty_mask():
    rs = connected_components(BinaryMask(np.zeros((3, 3), np.uint8)))
    assert len(rs.regions) == 0


def test_components_diagonal_join():
    mask = BinaryMask(np.array([[1, 0], [0, 1]], np.uint8))
    rs = connected_components(mask)
    assert len(rs.regions) == 1
    assert sorted(rs.regions[0].tolist()) == [0, 3]


def test_components_separated_rows():
    mask = BinaryMask(np.array([[1, 1], [0, 0], [1, 1]], np.uint8))
    rs = connected_components(mask)
    assert len(rs.regions) == 2


@pytest.mark.parametrize("seed", range(15))
def test_components_match_flood_fill(seed):
    rng = np.random.default_rng(seed + 3000)
    bits = (rng.random((9, 9)) > 0.6).astype(np.uint8)
    rs = connected_components(BinaryMask(bits))
    got = sorted(sorted(r.tolist()) for r in rs.regions)
    want = sorted(_regions_of(bits))
    assert got == want


# ------------------------------------------------------------------ aupro


def test_aupro_perfect_detector():
    mask = np.zeros((4, 4), np.uint8)
    mask[1:3, 1:3] = 1
    score = mask.astype(np.float32)
    got = aupro([Tensor(score)], [BinaryMask(mask)], DEFAULT_FPR_LIMIT)
    assert got == 1.0


def test_aupro_anti_correlated():
    # all negatives outrank all positives: overlap only appears once the
    # threshold has swept past every background pixel
    mask = np.zeros((4, 4), np.uint8)
    mask[0, 0] = 1
    score = 1.0 - mask.astype(np.float32)
    got = aupro([Tensor(score)], [BinaryMask(mask)], 0.3)
    want = _exhaustive_aupro([score.astype(np.float64)], [mask], 0.3)
    assert abs(got - want) <= 1e-12
    assert got <= 0.05


def test_aupro_validates_limit():
    mask = np.ones((2, 2), np.uint8)
    mask[0, 0] = 0
    with pytest.raises(MetricPreconditionError):
        aupro([Tensor(np.ones((2, 2), np.float32))], [BinaryMask(mask)], 0.0)
    with pytest.raises(MetricPreconditionError):
        aupro([Tensor(np.ones((2, 2), np.float32))], [BinaryMask(mask)], 1.5)


def test_aupro_needs_a_region():
    with pytest.raises(MetricPreconditionError):
        aupro([Tensor(np.ones((2, 2), np.float32))], [BinaryMask(np.zeros((2, 2), np.uint8))])


def test_aupro_needs_a_negative_pixel():
    with pytest.raises(MetricPreconditionError):
        aupro([Tensor(np.ones((2, 2), np.float32))], [BinaryMask(np.ones((2, 2), np.uint8))])


@pytest.mark.parametrize("seed", range(30))
def test_aupro_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed + 4000)
    n_maps = int(rng.integers(1, 4))
    maps, masks, raw_maps, raw_masks = [], [], [], []
    any_region = False
    for _ in range(n_maps):
        h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        score = np.round(rng.random((h, w)), 1).astype(np.float32)
        bits = (rng.random((h, w)) > 0.7).astype(np.uint8)
        if bits.all():
            bits[0, 0] = 0
        any_region = any_region or bits.any()
        maps.append(Tensor(score))
        masks.append(BinaryMask(bits))
        raw_maps.append(score.astype(np.float64))
        raw_masks.append(bits)
    if not any_region:
        raw_masks[0][0, 0] = 1
        masks[0] = BinaryMask(raw_masks[0])
    limit = float(rng.choice([0.1, 0.3, 1.0]))
    got = aupro(maps, masks, limit)
    want = _exhaustive_aupro(raw_maps, raw_masks, limit)
    assert abs(got - want) <= 1e-9


def test_aupro_order_invariant():
    rng = np.random.default_rng(5000)
    maps, masks = [], []
    for _ in range(3):
        score = rng.random((5, 5)).astype(np.float32)
        bits = (rng.random((5, 5)) > 0.7).astype(np.uint8)
        bits[2, 2] = 1
        bits[0, 0] = 0
        maps.append(Tensor(score))
        masks.append(BinaryMask(bits))
    a = aupro(maps, masks)
    b = aupro(maps[::-1], masks[::-1])
    assert abs(a - b) <= 1e-12


# -------------------------------------------------------------------- mad


def test_mad_all_ones():
    assert mad([1.0] * 7) == 1.0


def test_mad_all_halves():
    assert mad([0.5] * 7) == 0.5


def test_mad_headline_row():
    vals = (0.986, 0.996, 0.978, 0.977, 0.563, 0.592, 0.931)
    got = mad(vals)
    np.testing.assert_allclose(got, 0.860428571428, rtol=1e-9)
    assert f"{got * 100:.1f}" == "86.0"


def test_mad_validates_input():
    with pytest.raises(ValueError):
        mad([0.5] * 6)
    with pytest.raises(ValueError):
        mad([0.5] * 6 + [1.5])


def test_mad_monotone_in_each_argument():
    base = [0.5] * 7
    for i in range(7):
        bumped = list(base)
        bumped[i] = 0.9
        assert mad(bumped) > mad(base)


# --------------------------------------------------------------- evaluate


def _perfect_fixture():
    masks, maps = [], []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        bits = np.zeros((6, 6), np.uint8)
        r, c = rng.integers(0, 4), rng.integers(0, 4)
        bits[r : r + 2, c : c + 2] = 1
        masks.append(BinaryMask(bits))
        maps.append(Tensor(bits.astype(np.float32)))
    image = LabeledScores([1.0, 1.0, 0.0], [1, 1, 0])
    return image, maps, masks


def test_evaluate_perfect_everything():
    image, maps, masks = _perfect_fixture()
    report = evaluate(image, maps, masks)
    assert report.values() == (1.0,) * 7
    assert report.mad() == 1.0


def test_evaluate_pixel_pooling_matches_standalone():
    rng = np.random.default_rng(9)
    maps, masks = [], []
    for _ in range(3):
        score = rng.random((5, 5)).astype(np.float32)
        bits = (rng.random((5, 5)) > 0.6).astype(np.uint8)
        bits[0, 0] = 1
        bits[4, 4] = 0
        maps.append(Tensor(score))
        masks.append(BinaryMask(bits))
    image = LabeledScores([0.9, 0.2, 0.6], [1, 0, 1])
    report = evaluate(image, maps, masks)

    pooled_scores = np.concatenate([t.data for t in maps]).astype(np.float64)
    pooled_labels = np.concatenate([m.bits.reshape(-1) for m in masks])
    pooled = LabeledScores(pooled_scores, pooled_labels)
    assert report.pixel_auroc == auroc(pooled)
    assert report.pixel_ap == average_precision(pooled)
    assert report.pixel_f1_max == f1_max(pooled)
    assert report.pixel_aupro == aupro(maps, masks)
    assert report.image_auroc == auroc(image)


def test_report_json_roundtrip():
    image, maps, masks = _perfect_fixture()
    report = evaluate(image, maps, masks)
    text = report.to_json()
    back = MetricsReport.from_json(text)
    assert back == report
    payload = json.loads(text)
    assert set(payload) >= {"image", "pixel", "mad"}


def test_report_json_rounds_to_six_decimals():
    r = MetricsReport(
        image_auroc=0.1234567891,
        image_ap=0.2,
        image_f1_max=0.3,
        pixel_auroc=0.4,
        pixel_ap=0.5,
        pixel_f1_max=0.6,
        pixel_aupro=0.7,
    )
    payload = json.loads(r.to_json())
    assert payload["image"]["auroc"] == 0.123457


def test_report_csv_cells_headline_row():
    r = MetricsReport(
        image_auroc=0.986,
        image_ap=0.996,
        image_f1_max=0.978,
        pixel_auroc=0.977,
        pixel_ap=0.563,
        pixel_f1_max=0.592,
        pixel_aupro=0.931,
    )
    assert r.csv_cells() == ("98.6/99.6/97.8", "97.7/56.3/59.2/93.1", "86.0")
