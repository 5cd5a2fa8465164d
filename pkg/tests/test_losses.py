"""
Unit tests for losses.py
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.attack import apply_patch
from src.attention import AttentionTrace, HeadTrace
from src.exceptions import ConfigError, DegenerateInputError, IndexRangeError, ShapeError
from src.losses import (
    LossConfig, aggregate, cross_entropy, l12_normalize, loss_kq, loss_kq_head_layer,
    loss_kq_star, loss_kq_star_head_layer, loss_patch_fool, loss_terms, total_loss,
)
from src.tensor import Tape, Tensor, softmax_lastdim
from src.vit import ViTConfig, ViTModel, forward


def head_from_logits(logits) -> HeadTrace:
    logits = Tensor(np.asarray(logits, dtype=np.float64))
    n = logits.shape[-1]
    return HeadTrace(p_q=Tensor(np.ones((n, 2))), p_k=Tensor(np.ones((n, 2))),
                     logits=logits, weights=softmax_lastdim(logits))


def head_from_projections(p_q, p_k) -> HeadTrace:
    p_q, p_k = np.asarray(p_q, dtype=np.float64), np.asarray(p_k, dtype=np.float64)
    logits = p_q @ p_k.T / np.sqrt(p_q.shape[-1])
    return HeadTrace(p_q=Tensor(p_q), p_k=Tensor(p_k), logits=Tensor(logits),
                     weights=softmax_lastdim(logits))


def traces_from_logits(grid) -> list:
    """grid[layer][head] -> logit matrix"""
    return [AttentionTrace(layer=l, heads=[head_from_logits(b) for b in heads]) for l, heads in enumerate(grid)]


B = [[1.0, 2.0], [3.0, 4.0]]


class TestLossConfig:
    """Validation of the objective configuration"""

    def test_targeted_requires_target_class(self):
        with pytest.raises(ConfigError):
            LossConfig(ce_mode="targeted_minimize")

    def test_unknown_term(self):
        with pytest.raises(ConfigError):
            LossConfig(terms=["ce", "tv"])

    def test_empty_terms(self):
        with pytest.raises(ConfigError):
            LossConfig(terms=[])

    def test_unknown_aggregation(self):
        with pytest.raises(ConfigError):
            LossConfig(head_aggregation="median")

    def test_duplicate_terms_collapsed(self):
        assert LossConfig(terms=["kq", "kq", "ce"]).terms == ["kq", "ce"]

    def test_with_target_key(self):
        config = LossConfig(terms=["kq"]).with_target_key(5)
        assert config.target_key == 5
        assert config.terms == ["kq"]


class TestNormalization:
    """l1,2 normalization"""

    def test_single_row(self):
        assert np.allclose(l12_normalize(np.array([[3.0, 4.0]])).data, [[0.6, 0.8]])

    def test_identity_unchanged(self):
        assert np.allclose(l12_normalize(np.eye(2)).data, np.eye(2))

    def test_mean_row_norm_is_one(self):
        P = np.random.default_rng(0).normal(size=(6, 4)) * 7
        out = l12_normalize(P).data
        assert np.mean(np.linalg.norm(out, axis=-1)) == pytest.approx(1.0)

    def test_all_zero_rows(self):
        with pytest.raises(DegenerateInputError):
            l12_normalize(np.zeros((3, 2)))

    def test_scaling_invariance(self):
        rng = np.random.default_rng(1)
        p_q, p_k = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        base = loss_kq_head_layer(head_from_projections(p_q, p_k), 2, normalize=True).item()
        for factor in (1e-3, 0.5, 40.0):
            scaled = head_from_projections(p_q * factor, p_k * factor)
            assert loss_kq_head_layer(scaled, 2, normalize=True).item() == pytest.approx(base, abs=1e-10)


class TestPerHeadTerms:
    """kq and kq_star on a single head"""

    def test_kq_is_column_mean(self):
        assert loss_kq_head_layer(head_from_logits(B), 0, normalize=False).item() == pytest.approx(2.0)

    def test_kq_star_is_single_entry(self):
        head = head_from_logits(B)
        assert loss_kq_star_head_layer(head, 0, target_query=1, normalize=False).item() == pytest.approx(3.0)

    def test_constant_logits(self):
        head = head_from_logits(np.full((4, 4), 2.5))
        assert loss_kq_head_layer(head, 3, normalize=False).item() == pytest.approx(2.5)

    def test_single_token(self):
        head = head_from_logits([[1.7]])
        assert loss_kq_head_layer(head, 0, normalize=False).item() == pytest.approx(1.7)
        assert loss_kq_star_head_layer(head, 0, 0, normalize=False).item() == pytest.approx(1.7)

    def test_target_key_out_of_range(self):
        with pytest.raises(IndexRangeError):
            loss_kq_head_layer(head_from_logits(B), 2, normalize=False)


class TestAggregate:
    """smax / mean / max"""

    def test_smax_singleton(self):
        assert aggregate([Tensor(1.3)], "smax").item() == pytest.approx(1.3)

    def test_smax_of_zeros(self):
        assert aggregate([Tensor(0.0), Tensor(0.0)], "smax").item() == pytest.approx(np.log(2.0))

    def test_smax_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            values = rng.normal(scale=5.0, size=rng.integers(1, 8))
            smax = aggregate([Tensor(v) for v in values], "smax").item()
            assert values.max() - 1e-12 <= smax <= values.max() + np.log(len(values)) + 1e-12

    def test_max_routes_gradient(self):
        tape = Tape()
        leaves = [tape.leaf(np.array(v)) for v in (1.0, 3.0, 2.0)]
        grads = tape.backward(aggregate(leaves, "max"))
        assert [grads[leaf].item() for leaf in leaves] == [0.0, 1.0, 0.0]

    def test_mean(self):
        assert aggregate([Tensor(1.0), Tensor(2.0), Tensor(6.0)], "mean").item() == pytest.approx(3.0)

    def test_empty(self):
        with pytest.raises(ShapeError):
            aggregate([], "smax")


class TestTraceLosses:
    """Head and layer aggregation over traces"""

    def test_single_head_single_layer_equals_head_loss(self):
        traces = traces_from_logits([[B]])
        config = LossConfig(terms=["kq"], target_key=1, normalize=False)
        assert loss_kq(traces, config).item() == pytest.approx(3.0)

    def test_log_sum_exp_composition(self):
        grid = [[B, [[0.0, 1.0], [0.0, 5.0]]], [[[2.0, 2.0], [2.0, 2.0]], [[1.0, -1.0], [1.0, -3.0]]]]
        config = LossConfig(terms=["kq"], target_key=1, normalize=False)
        per_head = [[3.0, 3.0], [2.0, -2.0]]
        per_layer = [np.log(np.sum(np.exp(heads))) for heads in per_head]
        expected = np.log(np.sum(np.exp(per_layer)))
        assert loss_kq(traces_from_logits(grid), config).item() == pytest.approx(expected)

    def test_mean_of_constant_heads(self):
        grid = [[np.full((3, 3), 0.7)] * 2] * 3
        config = LossConfig(terms=["kq"], target_key=0, normalize=False,
                            head_aggregation="mean", layer_aggregation="mean")
        assert loss_kq(traces_from_logits(grid), config).item() == pytest.approx(0.7)

    def test_layer_selector_on_single_layer_model(self):
        traces = traces_from_logits([[B, B]])
        everything = LossConfig(terms=["kq_star"], target_key=0, normalize=False)
        first = LossConfig(terms=["kq_star"], target_key=0, normalize=False, layer_selector=0)
        assert loss_kq_star(traces, first).item() == pytest.approx(loss_kq_star(traces, everything).item(), abs=1e-12)

    def test_layer_selector_out_of_range(self):
        config = LossConfig(terms=["kq"], target_key=0, layer_selector=3)
        with pytest.raises(IndexRangeError):
            loss_kq(traces_from_logits([[B]]), config)

    def test_missing_target_key(self):
        with pytest.raises(ConfigError):
            loss_kq(traces_from_logits([[B]]), LossConfig(terms=["kq"]))

    def test_patch_fool_uniform_attention(self):
        traces = traces_from_logits([[np.zeros((5, 5))] * 2] * 2)
        assert loss_patch_fool(traces, 3).item() == pytest.approx(0.2)

    def test_patch_fool_column_mean(self):
        head = HeadTrace(p_q=Tensor(np.ones((2, 1))), p_k=Tensor(np.ones((2, 1))),
                         logits=Tensor(np.zeros((2, 2))), weights=Tensor(np.array([[0.9, 0.1], [0.4, 0.6]])))
        traces = [AttentionTrace(layer=0, heads=[head])]
        assert loss_patch_fool(traces, 0).item() == pytest.approx(0.65)


class TestTotalLoss:
    """Signed combination of terms"""

    logits = Tensor(np.array([0.5, -1.0, 2.0]))

    def test_untargeted_is_plain_cross_entropy(self):
        config = LossConfig(terms=["ce"])
        expected = cross_entropy(self.logits, 0).item()
        assert total_loss(self.logits, [], 0, config).item() == pytest.approx(expected)

    def test_targeted_is_negated_cross_entropy(self):
        config = LossConfig(terms=["ce"], ce_mode="targeted_minimize", target_class=2)
        expected = -cross_entropy(self.logits, 2).item()
        assert total_loss(self.logits, [], 2, config).item() == pytest.approx(expected)

    def test_weighted_sum_of_terms(self):
        traces = traces_from_logits([[B]])
        config = LossConfig(terms=["ce", "kq_star"], target_key=0, normalize=False, weights={"kq_star": 0.5})
        terms = loss_terms(self.logits, traces, 1, config)
        assert set(terms) == {"ce", "kq_star"}
        expected = cross_entropy(self.logits, 1).item() + 0.5 * 1.0
        assert total_loss(self.logits, traces, 1, config).item() == pytest.approx(expected)

    def test_cross_entropy_batch_mean(self):
        batch = Tensor(np.array([[0.0, 0.0], [10.0, 0.0]]))
        assert cross_entropy(batch, [0, 0]).item() == pytest.approx((np.log(2.0) + np.log1p(np.exp(-10.0))) / 2)

    def test_cross_entropy_label_range(self):
        with pytest.raises(IndexRangeError):
            cross_entropy(self.logits, 3)


class TestAscentDirection:
    """Every term increases along its own gradient on random patch instances"""

    CONFIG = ViTConfig(image_size=8, channels=1, patch_size=4, d_model=8, depth=2, heads=2, mlp_hidden=8,
                       num_classes=2)

    @pytest.mark.parametrize("term", ["ce", "kq", "kq_star", "patch_fool"])
    def test_directional_derivative_is_positive(self, term):
        config = LossConfig(terms=[term], target_key=1)
        for seed in range(3):
            rng = np.random.default_rng(seed)
            model = ViTModel.initialize(self.CONFIG, seed=seed)
            image = rng.uniform(size=self.CONFIG.image_shape)
            pixels = rng.uniform(size=(1, 4, 4))

            def objective(patch):
                logits, traces = forward(model, apply_patch(image, patch, (0, 0)))
                return loss_terms(logits, traces, 0, config)[term]

            tape = Tape()
            leaf = tape.leaf(pixels)
            grad = tape.backward(objective(leaf))[leaf].data
            norm = float(np.linalg.norm(grad))
            assert norm > 0.0
            direction = grad / norm
            h = 1e-5
            slope = (objective(pixels + h * direction).item() - objective(pixels - h * direction).item()) / (2 * h)
            assert slope > 0.0
            assert slope == pytest.approx(norm, rel=1e-3)
