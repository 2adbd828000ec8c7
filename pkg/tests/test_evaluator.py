import numpy as np
import pytest
import torch

from adp_reid.backbone import BackboneConfig, VisionTransformer
from adp_reid.evaluator import cmc_map, distance_matrix, extract_features

MEAN, STD = [0.5] * 3, [0.25] * 3


def brute_force_ranking(dist, q_pids, q_cams, g_pids, g_cams, max_rank):
    """Per-query re-sort and direct evaluation of the AP and CMC definitions."""
    aps, cmcs, invalid = [], [], 0
    for i in range(len(q_pids)):
        ranked = sorted(range(len(g_pids)), key=lambda j: (dist[i][j], j))
        ranked = [j for j in ranked if not (g_pids[j] == q_pids[i] and g_cams[j] == q_cams[i])]
        rel = [1 if g_pids[j] == q_pids[i] else 0 for j in ranked]
        if sum(rel) == 0:
            invalid += 1
            continue
        hits, precisions = 0, []
        for rank, r in enumerate(rel, start=1):
            if r:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
        first = rel.index(1) + 1
        cmcs.append([1.0 if first <= k else 0.0 for k in range(1, max_rank + 1)])
    cmc = [sum(row[k] for row in cmcs) / len(cmcs) for k in range(max_rank)]
    return aps, cmc, sum(aps) / len(aps), invalid


def test_ap_example():
    # gallery ranked [match, non-match, match]
    dist = np.array([[0.1, 0.2, 0.3]])
    result = cmc_map(dist, [1], [1], [1, 2, 1], [2, 2, 3], max_rank=3)
    assert result.average_precision[0] == 5 / 6
    assert result.mAP == 5 / 6


def test_perfect_retrieval():
    dist = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 2.0]])
    result = cmc_map(dist, [1, 2], [1, 1], [1, 2, 3], [2, 2, 2], max_rank=3)
    assert result.mAP == 1.0
    np.testing.assert_array_equal(result.cmc, np.ones(3))


def test_same_camera_only_match_is_excluded():
    dist = np.array([[0.0, 1.0], [0.0, 1.0]])
    result = cmc_map(dist, [1, 2], [1, 1], [1, 2], [1, 2], max_rank=2)
    assert result.num_invalid_queries == 1
    assert result.num_valid_queries == 1


def test_all_invalid_raises():
    with pytest.raises(ValueError):
        cmc_map(np.zeros((1, 1)), [1], [1], [1], [1])


def random_instance(rng):
    q, g = int(rng.integers(1, 21)), int(rng.integers(1, 51))
    n_ids = int(rng.integers(1, 6))
    dist = rng.uniform(size=(q, g))
    if rng.random() < 0.3:
        dist = np.round(dist, 1)  # exercise ties
    return dist, rng.integers(0, n_ids, q), rng.integers(0, 3, q), rng.integers(0, n_ids, g), rng.integers(0, 3, g)


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 50:
        dist, qp, qc, gp, gc = random_instance(rng)
        try:
            aps, cmc, mAP, invalid = brute_force_ranking(dist, qp, qc, gp, gc, 10)
        except ZeroDivisionError:
            with pytest.raises(ValueError):
                cmc_map(dist, qp, qc, gp, gc, max_rank=10)
            continue
        result = cmc_map(dist, qp, qc, gp, gc, max_rank=10)
        np.testing.assert_allclose(result.average_precision, aps, atol=1e-9)
        np.testing.assert_allclose(result.cmc, cmc, atol=1e-9)
        assert abs(result.mAP - mAP) < 1e-9
        assert result.num_invalid_queries == invalid
        assert np.all(np.diff(result.cmc) >= 0) and 0 <= result.cmc[0] <= result.cmc[-1] <= 1
        checked += 1


def test_invariant_to_monotone_transform():
    rng = np.random.default_rng(1)
    dist, qp, qc, gp, gc = random_instance(rng)
    gp[:3] = qp[0]
    gc[:3] = (qc[0] + 1) % 3
    a = cmc_map(dist, qp, qc, gp, gc, 10)
    b = cmc_map(np.exp(3 * dist) + 7, qp, qc, gp, gc, 10)
    assert a.mAP == b.mAP
    np.testing.assert_array_equal(a.cmc, b.cmc)


def test_rank1_is_nearest_valid_neighbour_accuracy():
    rng = np.random.default_rng(2)
    dist = rng.uniform(size=(15, 30))
    qp, qc = rng.integers(0, 4, 15), rng.integers(0, 2, 15)
    gp, gc = rng.integers(0, 4, 30), rng.integers(0, 2, 30)
    result = cmc_map(dist, qp, qc, gp, gc, 5)
    correct, valid = 0, 0
    for i in range(15):
        keep = [j for j in range(30) if not (gp[j] == qp[i] and gc[j] == qc[i])]
        if not any(gp[j] == qp[i] for j in keep):
            continue
        valid += 1
        nearest = min(keep, key=lambda j: (dist[i, j], j))
        correct += gp[nearest] == qp[i]
    assert result.cmc[0] == pytest.approx(correct / valid)


def test_report_fields():
    result = cmc_map(np.array([[0.1, 0.2, 0.3]]), [1], [1], [1, 2, 1], [2, 2, 3], max_rank=20)
    report = result.report()
    assert {"R-1", "R-5", "R-10", "mAP"} <= set(report)
    assert "R-1" in result.table()


def test_distance_matrix():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert distance_matrix(q[:1], q[:1])[0, 0] == 0.0
    assert distance_matrix(q[:1], q[1:])[0, 0] == 2.0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    brute = np.array([[sum((a[i, k] - b[j, k]) ** 2 for k in range(4)) for j in range(3)] for i in range(3)])
    np.testing.assert_allclose(distance_matrix(a, b), brute, atol=1e-12)
    np.testing.assert_allclose(distance_matrix(a, b), 2 - 2 * a @ b.T, atol=1e-12)
    with pytest.raises(ValueError):
        distance_matrix(a, b[:, :3])


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(0)
    return VisionTransformer(BackboneConfig(32, 16, 8, 8, depth=2, num_heads=2, embed_dim=16))


def test_extract_features_unit_norm_and_stateless(tiny_model):
    images = np.random.default_rng(0).uniform(size=(7, 3, 32, 16)).astype(np.float32)
    images[3] = images[1]
    feats = extract_features(tiny_model, images, MEAN, STD, batch_size=3)
    np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(feats[3], feats[1])
    perm = np.random.default_rng(1).permutation(7)
    permuted = extract_features(tiny_model, images[perm], MEAN, STD, batch_size=3)
    np.testing.assert_allclose(permuted, feats[perm], atol=1e-6)
