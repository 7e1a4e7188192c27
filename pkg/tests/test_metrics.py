import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffhpe.metrics import (EvalReport, cross_domain_matrix, difference_matrix, evaluate_predictions,
                             matrix_from_table, mpjpe, read_table, symmetry_gap, temporal_std, write_table)
from diffhpe.skeleton import segment_lengths, standard_h36m_skeleton

from .conftest import random_rotation


# independent loop oracles ---------------------------------------------------------


def naive_mpjpe(pred, gt, root=0):
    K, L, J, _ = pred.shape
    total = 0.0
    for k in range(K):
        for l in range(L):
            shift = [gt[k, l, root, d] - pred[k, l, root, d] for d in range(3)]
            for j in range(J):
                total += math.sqrt(sum((pred[k, l, j, d] + shift[d] - gt[k, l, j, d]) ** 2 for d in range(3)))
    return total / (K * L * J)


def naive_lengths(clip, graph):
    L = clip.shape[0]
    return [[math.dist(clip[l, a], clip[l, b]) for a, b in graph.edges] for l in range(L)]


def naive_symmetry(preds, graph):
    total, count = 0.0, 0
    for clip in preds:
        y = naive_lengths(clip, graph)
        for row in y:
            for s in graph.left_segments:
                total += abs(row[s] - row[graph.tau[s]])
                count += 1
    return total / count


def naive_temporal(preds, graph):
    total = 0.0
    for clip in preds:
        y = naive_lengths(clip, graph)
        L = len(y)
        for s in range(len(graph.edges)):
            mean = sum(y[l][s] for l in range(L)) / L
            total += math.sqrt(sum((y[l][s] - mean) ** 2 for l in range(L)) / L)
    return total / (len(preds) * len(graph.edges))


@pytest.fixture(scope="module")
def clips():
    r = np.random.default_rng(99)
    return r.standard_normal((100, 6, 17, 3)), r.standard_normal((100, 6, 17, 3))


def test_oracles_on_random_clips(clips, h36m):
    pred, gt = clips
    assert mpjpe(pred, gt) == pytest.approx(naive_mpjpe(pred, gt), rel=1e-9)
    assert symmetry_gap(pred, h36m) == pytest.approx(naive_symmetry(pred, h36m), rel=1e-9)
    assert temporal_std(pred, h36m) == pytest.approx(naive_temporal(pred, h36m), rel=1e-9)
    np.testing.assert_allclose(segment_lengths(pred[:3], h36m), [naive_lengths(c, h36m) for c in pred[:3]],
                               rtol=1e-9)


def test_mpjpe_hand_case():
    gt = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 10.0]])
    pred = np.array([[5.0, 5.0, 5.0], [5.0, 5.0, 18.0]])
    assert mpjpe(pred, gt) == pytest.approx(naive_mpjpe(pred[None, None], gt[None, None]))
    assert mpjpe(pred, gt) == pytest.approx(1.5)


def test_mpjpe_translation_invariance(clips):
    pred, gt = clips
    shifted = pred + np.array([3.0, -7.5, 120.0])
    assert abs(mpjpe(shifted, gt) - mpjpe(pred, gt)) <= 1e-9 * mpjpe(pred, gt)


def test_mpjpe_zero_and_offset(clips):
    _, gt = clips
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + 4.0, gt) == pytest.approx(0.0, abs=1e-12)


def test_mpjpe_other_root(clips):
    pred, gt = clips
    assert mpjpe(pred, gt, root_index=7) == pytest.approx(naive_mpjpe(pred, gt, root=7), rel=1e-9)


def test_mpjpe_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 17, 3)), np.zeros((3, 17, 3)))


def test_symmetric_pose_zero_gap(h36m):
    pose = np.tile(h36m.rest_pose, (1, 4, 1, 1))
    assert symmetry_gap(pose, h36m) == pytest.approx(0.0, abs=1e-15)
    assert temporal_std(pose, h36m) == pytest.approx(0.0, abs=1e-15)


def test_one_longer_segment(h36m):
    pose = h36m.rest_pose.copy()
    s = h36m.left_segments[1]
    a, b = h36m.edges[s]
    d = 0.02
    direction = pose[b] - pose[a]
    direction /= np.linalg.norm(direction)
    # move the child subtree of b along the bone
    moved = {b} | {j for j in range(h36m.num_joints) if _descends(h36m, j, b)}
    for j in moved:
        pose[j] += d * direction
    assert symmetry_gap(pose[None, None], h36m) == pytest.approx(d / len(h36m.left_segments), rel=1e-9)


def _descends(graph, j, ancestor):
    parents = graph.parents
    while j != graph.root:
        j = parents[j]
        if j == ancestor:
            return True
    return False


def test_alternating_segment(h36m):
    L, a, b = 6, 0.40, 0.46
    pose = np.tile(h36m.rest_pose, (L, 1, 1))
    s = 2
    p, c = h36m.edges[s]
    direction = pose[0, c] - pose[0, p]
    direction /= np.linalg.norm(direction)
    for l in range(L):
        pose[l, c] = pose[l, p] + (a if l % 2 == 0 else b) * direction
    assert h36m.parents[c] == p and not any(h36m.parents[j] == c for j in range(17) if j != h36m.root)
    expected = abs(a - b) / (2 * h36m.num_segments)
    assert temporal_std(pose[None], h36m) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 10.0))
def test_coherence_metrics_rigid_invariant_and_scale_linear(seed, scale):
    graph = standard_h36m_skeleton()
    r = np.random.default_rng(seed)
    preds = r.standard_normal((2, 5, 17, 3))
    R = random_rotation(r)
    moved = preds @ R.T + r.standard_normal((2, 5, 1, 3))
    for fn in (symmetry_gap, temporal_std):
        base = fn(preds, graph)
        assert fn(moved, graph) == pytest.approx(base, rel=1e-9, abs=1e-12)
        assert fn(scale * preds, graph) == pytest.approx(scale * base, rel=1e-9, abs=1e-12)
        assert base >= 0
    gt = r.standard_normal((2, 5, 17, 3))
    assert mpjpe(scale * preds, scale * gt) == pytest.approx(scale * mpjpe(preds, gt), rel=1e-9)


def test_joint_count_checked(h36m):
    with pytest.raises(ValueError):
        symmetry_gap(np.zeros((1, 2, 5, 3)), h36m)


def test_evaluate_predictions_reports_mm(h36m, clips):
    pred, gt = clips
    hyp = np.stack([pred, pred + 0.01, pred - 0.01])
    rep = evaluate_predictions(pred, gt, h36m, hypotheses=hyp, model="m")
    assert rep.mpjpe_mm == pytest.approx(1000 * mpjpe(pred, gt))
    assert rep.symmetry_gap_mm == pytest.approx(1000 * symmetry_gap(pred, h36m))
    assert rep.temporal_std_mm == pytest.approx(1000 * temporal_std(pred, h36m))
    assert rep.K == 100 and rep.H == 3 and rep.model == "m"


def test_report_invariants():
    with pytest.raises(ValueError):
        EvalReport(1.0, 1.0, 1.0, K=0)
    with pytest.raises(ValueError):
        EvalReport(-1.0, 1.0, 1.0, K=1)


def test_cross_domain_matrix_constants():
    table = {"a": {"x": 1.0, "y": 2.0}, "b": {"x": 3.0, "y": 4.0}}
    m = cross_domain_matrix({"a": "a", "b": "b"}, ["a", "b"], ["x", "y"], lambda model, p: table[model][p])
    np.testing.assert_array_equal(m, [[1.0, 2.0], [3.0, 4.0]])


def test_cross_domain_single_cell(h36m, clips):
    pred, gt = clips
    rep = evaluate_predictions(pred, gt, h36m)
    m = cross_domain_matrix({"none": None}, ["none"], ["none"], lambda _m, _p: rep)
    assert m.shape == (1, 1) and m[0, 0] == rep.mpjpe_mm


def test_cross_domain_missing_model():
    with pytest.raises(KeyError):
        cross_domain_matrix({}, ["none"], ["none"], lambda m, p: 0.0)


def test_difference_matrix():
    a = np.array([[3.0, 5.0]])
    np.testing.assert_array_equal(difference_matrix(a, a), 0.0)
    np.testing.assert_array_equal(difference_matrix(a, np.array([[1.0, 6.0]])), [[2.0, -1.0]])
    with pytest.raises(ValueError):
        difference_matrix(a, np.zeros((2, 2)))


def test_table_roundtrip(tmp_path):
    reps = [EvalReport(10.0, 2.0, 1.0, K=5, H=5, mpjpe_hypotheses_mm=11.0, model="m", train_pattern=tp,
                       test_pattern=sp) for tp in ("none", "random") for sp in ("none", "random")]
    rows = read_table(write_table(reps, tmp_path / "t.csv"))
    assert rows[0]["H"] == 5 and rows[0]["mpjpe_mm"] == 10.0
    m = matrix_from_table(rows, "m", ["none", "random"], ["none", "random"])
    np.testing.assert_array_equal(m, 10.0)
    with pytest.raises(KeyError):
        matrix_from_table(rows, "other", ["none"], ["none"])
