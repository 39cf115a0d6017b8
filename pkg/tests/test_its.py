"""
Tests for informativeness token selection
"""
import math

import numpy as np
import pytest

from hybridtower.autograd.nn import MultiHeadAttention
from hybridtower.autograd.tensor import Parameter, Tensor
from hybridtower.errors import ConfigError, UsageError
from hybridtower.models import its
from hybridtower.models.features import InformativenessMatrix


def _loop_informativeness(cls_row, patch_rows, attention, scale):
    """Per-head, per-patch reference computation with explicit loops"""
    h, dh = attention.heads, attention.head_dim
    q = cls_row @ attention.q_proj.weight.data + attention.q_proj.bias.data
    best = np.full(patch_rows.shape[0], -np.inf)
    for head in range(h):
        cols = slice(head * dh, (head + 1) * dh)
        logits = []
        for row in patch_rows:
            k = row @ attention.k_proj.weight.data + attention.k_proj.bias.data
            logits.append(float(np.dot(q[cols], k[cols])) * scale)
        logits = np.array(logits)
        e = np.exp(logits - logits.max())
        best = np.maximum(best, e / e.sum())
    return best


class TestInformativeness:

    @pytest.mark.parametrize("heads", [1, 2, 4])
    def test_matches_loop_reference(self, rng, heads):
        frames, patches, d = 3, 5, 8
        attention = MultiHeadAttention(d, heads, rng)
        cls_row = rng.normal(size=d)
        patch_rows = rng.normal(size=(frames * patches, d))
        matrix = its.informativeness(cls_row, patch_rows, attention, frames, patches)
        expected = _loop_informativeness(cls_row, patch_rows, attention, 1.0 / math.sqrt(d / heads))
        assert matrix.scores.shape == (frames, patches)
        assert matrix.per_head.shape == (heads, frames, patches)
        np.testing.assert_allclose(matrix.scores.reshape(-1), expected, atol=1e-12)

    def test_literal_scale(self, rng):
        attention = MultiHeadAttention(8, 2, rng)
        cls_row, patch_rows = rng.normal(size=8), rng.normal(size=(6, 8))
        matrix = its.informativeness(cls_row, patch_rows, attention, 2, 3, scale_mode="paper_literal")
        expected = _loop_informativeness(cls_row, patch_rows, attention, 1.0 / math.sqrt(8 / 3))
        np.testing.assert_allclose(matrix.scores.reshape(-1), expected, atol=1e-12)

    def test_scale_modes(self):
        assert its.attention_scale(64, 4, 16, "per_head") == pytest.approx(0.25)
        assert its.attention_scale(64, 4, 16, "paper_literal") == pytest.approx(0.5)
        with pytest.raises(ConfigError):
            its.attention_scale(64, 4, 16, "global")

    def test_single_patch_scores_one(self, rng):
        attention = MultiHeadAttention(8, 2, rng)
        matrix = its.informativeness(rng.normal(size=8), rng.normal(size=(1, 8)), attention, 1, 1)
        np.testing.assert_array_equal(matrix.scores, np.array([[1.0]]))

    def test_identical_patches_score_uniformly(self, rng):
        attention = MultiHeadAttention(8, 2, rng)
        patch_rows = np.broadcast_to(rng.normal(size=8), (6, 8)).copy()
        matrix = its.informativeness(rng.normal(size=8), patch_rows, attention, 2, 3)
        np.testing.assert_allclose(matrix.scores, np.full((2, 3), 1.0 / 6.0), atol=1e-12)

    def test_permuting_patches_permutes_scores(self, rng):
        attention = MultiHeadAttention(8, 2, rng)
        cls_row, patch_rows = rng.normal(size=8), rng.normal(size=(12, 8))
        perm = rng.permutation(12)
        base = its.informativeness(cls_row, patch_rows, attention, 3, 4).scores.reshape(-1)
        moved = its.informativeness(cls_row, patch_rows[perm], attention, 3, 4).scores.reshape(-1)
        np.testing.assert_allclose(moved, base[perm], atol=1e-12)

    def test_scale_modes_differ_only_in_sharpness(self, rng):
        # one head and two patches per frame: 1/sqrt(d/n) is the larger scale
        attention = MultiHeadAttention(8, 1, rng)
        cls_row, patch_rows = rng.normal(size=8), rng.normal(size=(4, 8))
        soft = its.informativeness(cls_row, patch_rows, attention, 2, 2, "per_head").scores.reshape(-1)
        sharp = its.informativeness(cls_row, patch_rows, attention, 2, 2, "paper_literal").scores.reshape(-1)
        assert its.attention_scale(8, 1, 2, "paper_literal") > its.attention_scale(8, 1, 2, "per_head")
        assert np.argmax(sharp) == np.argmax(soft)
        np.testing.assert_array_equal(np.argsort(sharp), np.argsort(soft))

        def entropy(p):
            return float(-(p * np.log(p)).sum())

        assert entropy(sharp) < entropy(soft)

    def test_row_count_checked(self, rng):
        attention = MultiHeadAttention(8, 2, rng)
        with pytest.raises(ConfigError):
            its.informativeness(rng.normal(size=8), rng.normal(size=(5, 8)), attention, 2, 3)

    def test_reuses_encoder_attention(self, tiny_model, tiny_dataset):
        features = tiny_model.encode_videos(tiny_dataset.videos[:3])
        attention = tiny_model.video_encoder.last_attention_layer
        scale = its.attention_scale(attention.dim, attention.heads, 4, "per_head")
        per_head = its.head_scores(features.its_query, features.its_keys, attention, scale)
        np.testing.assert_allclose(per_head, features.last_attention, atol=1e-10)
        np.testing.assert_allclose(tiny_model.informativeness(features), per_head.max(axis=1), atol=1e-12)


class TestTopK:

    def test_matches_sort_reference(self, rng):
        for _ in range(60):
            count = int(rng.integers(1, 30))
            k = int(rng.integers(1, count + 1))
            # few distinct values so ties are common
            scores = rng.integers(0, 4, size=count).astype(np.float64)
            expected = sorted(range(count), key=lambda i: (-scores[i], i))[:k]
            assert its.top_k_order(scores, k).tolist() == expected

    def test_batched_rows_are_independent(self, rng):
        scores = rng.normal(size=(4, 10))
        batched = its.top_k_order(scores, 3)
        for row in range(4):
            np.testing.assert_array_equal(batched[row], its.top_k_order(scores[row], 3))

    def test_raising_a_score_pulls_it_in(self, rng):
        scores = rng.uniform(size=12)
        chosen = its.top_k_order(scores, 4)
        outsider = next(i for i in range(12) if i not in chosen)
        raised = scores.copy()
        raised[outsider] = scores[chosen].min() + 1.0
        assert its.top_k_order(raised, 4)[0] == outsider

    @pytest.mark.parametrize("k", [0, 13])
    def test_k_out_of_range(self, k):
        with pytest.raises(UsageError):
            its.top_k_order(np.zeros(12), k)


class TestGather:

    def test_select_top_k_indices_and_rows(self, rng):
        scores = rng.normal(size=(3, 4))
        x_p = Parameter(rng.normal(size=(3, 4, 5)))
        matrix = InformativenessMatrix(scores=scores, per_head=scores[None])
        selected = its.select_top_k(matrix, x_p, 5)
        order = its.top_k_order(scores.reshape(-1), 5)
        assert selected.indices == [(int(i // 4), int(i % 4)) for i in order]
        for row, (f, p) in enumerate(selected.indices):
            np.testing.assert_array_equal(selected.x_ip.data[row], x_p.data[f, p])

    def test_gradient_reaches_selected_rows_only(self, rng):
        scores = rng.normal(size=(2, 3))
        x_p = Parameter(rng.normal(size=(2, 3, 4)))
        matrix = InformativenessMatrix(scores=scores, per_head=scores[None])
        selected = its.select_top_k(matrix, x_p, 2)
        selected.x_ip.sum().backward()
        touched = {(f, p) for f in range(2) for p in range(3) if np.any(x_p.grad[f, p] != 0.0)}
        assert touched == set(selected.indices)

    def test_shape_mismatch(self, rng):
        scores = rng.normal(size=(2, 3))
        matrix = InformativenessMatrix(scores=scores, per_head=scores[None])
        with pytest.raises(UsageError):
            its.select_top_k(matrix, Tensor(np.zeros((3, 2, 4))), 2)

    def test_batch_gather(self, rng):
        scores = rng.normal(size=(2, 6))
        x_p = Tensor(rng.normal(size=(2, 2, 3, 4)))
        x_ip, order = its.select_top_k_batch(scores, x_p, 3)
        assert x_ip.shape == (2, 3, 4)
        flat = x_p.data.reshape(2, 6, 4)
        for b in range(2):
            np.testing.assert_array_equal(x_ip.data[b], flat[b, order[b]])
