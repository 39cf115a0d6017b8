"""
Tests for the training objectives and retrieval metrics
"""
import math

import numpy as np
import pytest

from hybridtower.autograd.tensor import Parameter, Tensor
from hybridtower.errors import DataFormatError, NumericError, UsageError
from hybridtower.training.objectives import (
    compute_metrics, cosine_sim, ground_truth_ranks, info_nce, recon_loss, similarity_matrix, total_loss,
)


def _loop_info_nce(sim, tau):
    """Both directions with explicit per-row loops"""
    n = sim.shape[0]
    logits = sim * tau
    t2v = v2t = 0.0
    for i in range(n):
        t2v -= logits[i, i] - math.log(sum(math.exp(logits[i, j]) for j in range(n)))
        v2t -= logits[i, i] - math.log(sum(math.exp(logits[j, i]) for j in range(n)))
    return 0.5 * (t2v / n + v2t / n)


class TestCosine:

    def test_known_values(self):
        x = np.array([1.0, 2.0, -0.5])
        assert cosine_sim(x, x) == pytest.approx(1.0)
        assert cosine_sim(x, -x) == pytest.approx(-1.0)
        assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            cosine_sim([0.0, 0.0], [1.0, 0.0])

    def test_similarity_matrix(self, rng):
        t, v = rng.normal(size=(3, 5)), rng.normal(size=(4, 5))
        sim = similarity_matrix(Tensor(t), Tensor(v)).data
        for i in range(3):
            for j in range(4):
                assert sim[i, j] == pytest.approx(cosine_sim(t[i], v[j]), abs=1e-12)


class TestInfoNCE:

    def test_single_pair_is_zero(self):
        assert info_nce(Tensor([[0.3]]), 50.0).item() == pytest.approx(0.0, abs=1e-12)

    def test_two_by_two_identity(self):
        loss = info_nce(Tensor(np.eye(2)), 1.0).item()
        assert loss == pytest.approx(-math.log(math.e / (math.e + 1.0)), abs=1e-9)

    def test_matches_loop_reference(self, rng):
        sim = rng.uniform(-1.0, 1.0, size=(6, 6))
        assert info_nce(Tensor(sim), 7.5).item() == pytest.approx(_loop_info_nce(sim, 7.5), abs=1e-10)

    def test_learnable_temperature_gets_gradient(self, rng):
        log_tau = Parameter(np.array([math.log(10.0)]))
        info_nce(Tensor(rng.uniform(-1, 1, size=(4, 4))), log_tau.exp()).backward()
        assert log_tau.grad is not None and np.isfinite(log_tau.grad).all()

    def test_rejects_non_square(self):
        with pytest.raises(UsageError):
            info_nce(Tensor(np.zeros((2, 3))), 1.0)


class TestReconstruction:

    def test_endpoints(self, rng):
        t = rng.normal(size=(1, 6))
        assert recon_loss(Tensor(t), Tensor(t)).item() == pytest.approx(0.0, abs=1e-12)
        assert recon_loss(Tensor(-t), Tensor(t)).item() == pytest.approx(2.0, abs=1e-12)
        assert recon_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 3.0]])).item() == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariant(self, rng):
        t_p, t = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        assert recon_loss(Tensor(5.0 * t_p), Tensor(t)).item() == pytest.approx(recon_loss(Tensor(t_p), Tensor(t)).item())

    def test_zero_norm(self):
        with pytest.raises(NumericError):
            recon_loss(Tensor(np.zeros((1, 3))), Tensor(np.ones((1, 3))))

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            recon_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


class TestTotalLoss:

    def test_weighted_sum(self):
        assert total_loss(1.5, 0.25, 2.0) == pytest.approx(2.0)
        assert total_loss(1.5, 0.25, 0.0) == pytest.approx(1.5)

    def test_negative_alpha(self):
        with pytest.raises(UsageError):
            total_loss(1.0, 1.0, -0.1)


class TestMetrics:

    def test_perfect_ranking(self):
        metrics = compute_metrics(np.eye(10), np.arange(10))
        assert (metrics.r1, metrics.r5, metrics.r10) == (100.0, 100.0, 100.0)
        assert metrics.sum_r == 300.0
        assert metrics.mnr == 1.0 and metrics.mdr == 1.0 and metrics.count == 10

    def test_reversed_ranking(self):
        # ground truth is always the least similar of 12 videos
        sim = np.tile(np.arange(12, 0, -1, dtype=np.float64), (12, 1))
        metrics = compute_metrics(sim, np.full(12, 11))
        assert metrics.r10 == 0.0
        assert metrics.mnr == 12.0

    def test_ties_broken_by_video_id(self):
        sim = np.ones((1, 3))
        assert ground_truth_ranks(sim, [1]).tolist() == [2]
        assert ground_truth_ranks(sim, [1], video_ids=[9, 2, 5]).tolist() == [1]
        assert ground_truth_ranks(sim, [2], video_ids=[9, 2, 5]).tolist() == [2]

    def test_matches_sort_reference(self, rng):
        sim = rng.integers(0, 5, size=(20, 15)).astype(np.float64)
        gt = rng.integers(0, 15, size=20)
        ids = rng.permutation(100)[:15]
        ranks = ground_truth_ranks(sim, gt, ids)
        for i in range(20):
            order = sorted(range(15), key=lambda j: (-sim[i, j], ids[j]))
            assert ranks[i] == order.index(gt[i]) + 1

    def test_missing_ground_truth(self):
        with pytest.raises(DataFormatError):
            compute_metrics(np.eye(3), [0, 1, 3])
        with pytest.raises(DataFormatError):
            compute_metrics(np.eye(3), [0, 1])

    def test_line_format(self):
        line = compute_metrics(np.eye(4), np.arange(4)).to_line(split="test")
        assert line.startswith("r1=100.00 r5=100.00 r10=100.00 sum_r=300.00 mnr=1.00 mdr=1.0 count=4")
        assert line.endswith("split=test")
