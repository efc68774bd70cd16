import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import assert_grads_close, central_difference_grads
from proxytta.data import DepthMap
from proxytta.errors import ConfigurationError, ContractError, EmptySupportError
from proxytta.losses import (
    LossWeights,
    adapt_loss,
    local_smoothness,
    proxy_consistency,
    sparse_consistency,
    supervised_loss,
)
from proxytta.proxy import EmbeddingPair

T64 = torch.float64


def depth_from(values):
    return DepthMap.from_array(np.asarray(values, dtype=np.float32))


class TestSparseConsistency:
    def test_exact_match_is_zero(self):
        z = depth_from([[2, 0], [0, 5]])
        pred = torch.tensor(z.data, dtype=T64)
        assert float(sparse_consistency(pred, z)) == 0.0

    def test_hand_computed_mean(self):
        z = depth_from([[2, 3, 5, 0]])
        pred = torch.tensor([[2.5, 3.0, 4.0, 99.0]], dtype=T64)
        assert abs(float(sparse_consistency(pred, z)) - 0.5) < 1e-9

    def test_empty_support_raises(self):
        z = depth_from([[0.0, 0.0]])
        with pytest.raises(EmptySupportError):
            sparse_consistency(torch.ones(1, 2, dtype=T64), z)

    def test_mask_locality(self):
        z = depth_from([[2, 0], [0, 5]])
        base = torch.tensor([[2.5, 1.0], [7.0, 5.5]], dtype=T64)
        poked = base.clone()
        poked[0, 1] = 123.0
        poked[1, 0] = -7.0
        assert float(sparse_consistency(base, z)) == float(sparse_consistency(poked, z))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            sparse_consistency(torch.ones(2, 2, dtype=T64), depth_from([[1, 2, 3]]))


class TestLocalSmoothness:
    def test_constant_prediction_is_zero(self):
        pred = torch.full((5, 7), 4.2, dtype=T64)
        image = torch.rand(3, 5, 7, dtype=T64)
        assert float(local_smoothness(pred, image)) == 0.0

    def test_unit_ramp_on_4x4(self):
        # X-ramp with constant image: 12 unit gradients over 16 pixels = 0.75.
        pred = torch.arange(4, dtype=T64).repeat(4, 1)
        image = torch.full((3, 4, 4), 0.5, dtype=T64)
        assert abs(float(local_smoothness(pred, image)) - 0.75) < 1e-9

    def test_intensity_step_halves_penalty_at_ln2(self):
        pred = torch.zeros(1, 2, dtype=T64)
        pred[0, 1] = 1.0  # one unit X-gradient
        flat = torch.full((3, 1, 2), 0.5, dtype=T64)
        base = float(local_smoothness(pred, flat))
        stepped = flat.clone()
        stepped[:, 0, 1] = 0.5 + float(np.log(2.0))
        assert abs(float(local_smoothness(pred, stepped)) - base / 2.0) < 1e-9

    def test_translation_invariance(self):
        rng = np.random.default_rng(0)
        pred = torch.tensor(rng.uniform(1, 9, (6, 6)))
        image = torch.tensor(rng.uniform(0, 1, (3, 6, 6)))
        a = float(local_smoothness(pred, image))
        b = float(local_smoothness(pred + 13.7, image))
        assert abs(a - b) < 1e-9

    @given(st.floats(min_value=-50, max_value=50))
    @settings(max_examples=30, deadline=None)
    def test_translation_invariance_property(self, shift):
        rng = np.random.default_rng(1)
        pred = torch.tensor(rng.uniform(1, 9, (5, 5)))
        image = torch.tensor(rng.uniform(0, 1, (3, 5, 5)))
        assert abs(float(local_smoothness(pred + shift, image)) - float(local_smoothness(pred, image))) < 1e-8


class TestProxyConsistency:
    def test_identical_embeddings(self):
        p = torch.tensor([1.0, 2.0, 3.0], dtype=T64)
        pair = EmbeddingPair(p=p, q=p.clone(), role="target_adapt")
        assert abs(float(proxy_consistency(pair))) < 1e-9

    def test_orthogonal(self):
        pair = EmbeddingPair(
            p=torch.tensor([1.0, 0.0], dtype=T64),
            q=torch.tensor([0.0, 1.0], dtype=T64),
            role="target_adapt",
        )
        assert abs(float(proxy_consistency(pair)) - 1.0) < 1e-9

    def test_range(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            pair = EmbeddingPair(
                p=torch.tensor(rng.normal(size=8)), q=torch.tensor(rng.normal(size=8)), role="x"
            )
            v = float(proxy_consistency(pair))
            assert 0.0 <= v <= 2.0


class TestSupervisedLoss:
    def test_exact_match(self):
        gt = depth_from([[1, 2], [3, 4]])
        assert float(supervised_loss(torch.tensor(gt.data, dtype=T64), gt)) == 0.0

    def test_constant_offset(self):
        gt = depth_from([[1, 2], [3, 4]])
        pred = torch.tensor(gt.data, dtype=T64) + 0.1
        assert abs(float(supervised_loss(pred, gt)) - 0.1) < 1e-9

    def test_invalid_pixels_excluded(self):
        gt = depth_from([[1, 0], [0, 4]])
        pred = torch.tensor([[1.0, 50.0], [-3.0, 4.0]], dtype=T64)
        assert float(supervised_loss(pred, gt)) == 0.0

    def test_empty_gt_raises(self):
        with pytest.raises(EmptySupportError):
            supervised_loss(torch.ones(2, 2, dtype=T64), depth_from([[0, 0], [0, 0]]))


class TestLossWeights:
    def test_non_negative_required(self):
        with pytest.raises(ConfigurationError):
            LossWeights(-0.1, 1.0, 0.0)

    def test_all_zero_forbidden(self):
        with pytest.raises(ConfigurationError):
            LossWeights(0.0, 0.0, 0.0)


def _adapt_inputs():
    rng = np.random.default_rng(3)
    pred = torch.tensor(rng.uniform(1, 9, (4, 4)), requires_grad=True)
    z = depth_from(np.where(rng.uniform(size=(4, 4)) < 0.5, rng.uniform(1, 9, (4, 4)), 0.0))
    image = torch.tensor(rng.uniform(0, 1, (3, 4, 4)))
    pair = EmbeddingPair(
        p=torch.tensor(rng.normal(size=6)), q=torch.tensor(rng.normal(size=6)), role="target_adapt"
    )
    return pred, z, image, pair


class TestAdaptLoss:
    def test_weighted_sum_arithmetic(self):
        pred, z, image, pair = _adapt_inputs()
        weights = LossWeights(1.0, 1.0, 0.2)
        report = adapt_loss(pred, z, image, pair, weights)
        expected = (
            weights.w_z * report.components["l_z"]
            + weights.w_sm * report.components["l_sm"]
            + weights.w_proxy * report.components["l_proxy"]
        )
        assert abs(float(report.total) - expected) < 1e-9
        assert report.valid_point_count == int(z.valid_mask.sum())

    def test_single_term_equals_component(self):
        pred, z, image, pair = _adapt_inputs()
        report = adapt_loss(pred, z, image, pair, LossWeights(1.0, 0.0, 0.0))
        direct = float(sparse_consistency(pred, z))
        assert abs(float(report.total) - direct) < 1e-12

    def test_example_arithmetic(self):
        # weights (1, 1, 0.2) with components (0.5, 0.2, 1.0) -> 0.9
        total = 1.0 * 0.5 + 1.0 * 0.2 + 0.2 * 1.0
        assert abs(total - 0.9) < 1e-12

    def test_zero_weight_components_still_reported_but_out_of_graph(self):
        pred, z, image, pair = _adapt_inputs()
        report = adapt_loss(pred, z, image, pair, LossWeights(1.0, 0.0, 0.0))
        assert report.components["l_sm"] > 0.0
        assert report.components["l_proxy"] > 0.0
        report.total.backward()
        grad_with_only_lz = pred.grad.clone()
        pred.grad = None
        direct = sparse_consistency(pred, z)
        direct.backward()
        assert torch.equal(grad_with_only_lz, pred.grad)

    def test_linear_in_weights(self):
        pred, z, image, pair = _adapt_inputs()
        w = LossWeights(1.0, 0.7, 0.3)
        a = adapt_loss(pred, z, image, pair, w)
        b = adapt_loss(pred, z, image, pair, w.scaled(2.0))
        assert abs(float(b.total) - 2.0 * float(a.total)) < 1e-9

    def test_empty_support_propagates(self):
        pred, _, image, pair = _adapt_inputs()
        z0 = depth_from(np.zeros((4, 4)))
        with pytest.raises(EmptySupportError):
            adapt_loss(pred, z0, image, pair, LossWeights(1.0, 1.0, 0.5))

    def test_pair_required_when_proxy_weighted(self):
        pred, z, image, _ = _adapt_inputs()
        with pytest.raises(ContractError):
            adapt_loss(pred, z, image, None, LossWeights(1.0, 1.0, 0.5))
        report = adapt_loss(pred, z, image, None, LossWeights(1.0, 1.0, 0.0))
        assert report.components["l_proxy"] == 0.0


class TestGradientOracles:
    """Analytic gradients w.r.t. the prediction vs central differences."""

    def test_sparse_consistency_gradient(self):
        rng = np.random.default_rng(5)
        z = depth_from(np.where(rng.uniform(size=(6, 6)) < 0.4, rng.uniform(1, 9, (6, 6)), 0.0))
        pred = torch.tensor(rng.uniform(1, 9, (6, 6)), requires_grad=True)
        loss = sparse_consistency(pred, z)
        loss.backward()
        idx = rng.choice(36, size=8, replace=False)
        fd = central_difference_grads(lambda: sparse_consistency(pred.detach(), z), pred.data, idx)
        assert_grads_close(pred.grad.reshape(-1)[idx].numpy(), fd)

    def test_local_smoothness_gradient(self):
        rng = np.random.default_rng(6)
        image = torch.tensor(rng.uniform(0, 1, (3, 6, 6)))
        pred = torch.tensor(rng.uniform(1, 9, (6, 6)), requires_grad=True)
        loss = local_smoothness(pred, image)
        loss.backward()
        idx = rng.choice(36, size=8, replace=False)
        fd = central_difference_grads(lambda: local_smoothness(pred.detach(), image), pred.data, idx)
        assert_grads_close(pred.grad.reshape(-1)[idx].numpy(), fd)

    def test_proxy_consistency_gradient(self):
        rng = np.random.default_rng(7)
        q = torch.tensor(rng.normal(size=8), requires_grad=True)
        p = torch.tensor(rng.normal(size=8))
        pair = EmbeddingPair(p=p, q=q, role="target_adapt")
        loss = proxy_consistency(pair)
        loss.backward()
        idx = list(range(8))
        fd = central_difference_grads(
            lambda: proxy_consistency(EmbeddingPair(p=p, q=q.detach(), role="x")), q.data, idx
        )
        assert_grads_close(q.grad.numpy(), fd)

    def test_adapt_loss_gradient(self):
        pred, z, image, pair = _adapt_inputs()
        weights = LossWeights(1.0, 0.8, 0.0)
        loss = adapt_loss(pred, z, image, pair, weights).total
        loss.backward()
        rng = np.random.default_rng(8)
        idx = rng.choice(16, size=6, replace=False)
        fd = central_difference_grads(
            lambda: adapt_loss(pred.detach(), z, image, pair, weights).total, pred.data, idx
        )
        assert_grads_close(pred.grad.reshape(-1)[idx].numpy(), fd)

    def test_supervised_loss_gradient(self):
        rng = np.random.default_rng(9)
        gt = depth_from(rng.uniform(1, 9, (6, 6)))
        pred = torch.tensor(rng.uniform(1, 9, (6, 6)), requires_grad=True)
        loss = supervised_loss(pred, gt)
        loss.backward()
        idx = rng.choice(36, size=8, replace=False)
        fd = central_difference_grads(lambda: supervised_loss(pred.detach(), gt), pred.data, idx)
        assert_grads_close(pred.grad.reshape(-1)[idx].numpy(), fd)


def test_all_losses_non_negative_and_finite():
    rng = np.random.default_rng(10)
    for _ in range(20):
        pred, z, image, pair = _adapt_inputs()
        report = adapt_loss(pred, z, image, pair, LossWeights(1.0, 1.0, 1.0))
        assert float(report.total) >= 0.0 and np.isfinite(float(report.total))
        for v in report.components.values():
            assert v >= 0.0 and np.isfinite(v)
