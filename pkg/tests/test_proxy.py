import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import TINY_MODEL, assert_grads_close, central_difference_grads, tiny_samples
from proxytta.errors import (
    ConfigurationError,
    ContractError,
    DegenerateEmbeddingError,
    LifecycleError,
)
from proxytta.model import collate, forward_batch, init_model, insert_adaptation_layer
from proxytta.proxy import (
    ProxyHeads,
    cosine_distance,
    cosine_loss,
    ema_update,
    make_source_pair,
    make_target_pair,
    pool_features,
)

T64 = torch.float64


def vec(*values):
    return torch.tensor(values, dtype=T64)


class TestPooling:
    def test_constant_map_pools_to_constant(self):
        feat = torch.full((5, 8, 8), 3.0, dtype=T64)
        assert torch.allclose(pool_features(feat), torch.full((5,), 3.0, dtype=T64))

    def test_pooling_is_linear(self):
        feat = torch.randn(4, 6, 6, dtype=T64)
        assert torch.allclose(pool_features(2.5 * feat), 2.5 * pool_features(feat))

    def test_pooled_shape(self):
        feat = torch.randn(2, 64, 8, 8, dtype=T64)
        assert pool_features(feat).shape == (2, 64)
        with pytest.raises(ContractError):
            pool_features(torch.randn(8, 8, dtype=T64))


class TestCosine:
    def test_identical_vectors(self):
        assert abs(float(cosine_loss(vec(1, 2, 3), vec(1, 2, 3)))) < 1e-9

    def test_orthogonal(self):
        assert abs(float(cosine_loss(vec(1, 0), vec(0, 1))) - 1.0) < 1e-9

    def test_antipodal(self):
        assert abs(float(cosine_loss(vec(1, 0), vec(-1, 0))) - 2.0) < 1e-9

    def test_degenerate_norm_raises(self):
        with pytest.raises(DegenerateEmbeddingError):
            cosine_loss(vec(0, 0, 0), vec(1, 2, 3))
        with pytest.raises(DegenerateEmbeddingError):
            cosine_loss(vec(1e-13, 0), vec(1, 0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            cosine_loss(vec(1, 2), vec(1, 2, 3))

    def test_range_and_scale_invariance_bulk(self):
        rng = np.random.default_rng(0)
        p = torch.tensor(rng.normal(size=(10_000, 8)))
        q = torch.tensor(rng.normal(size=(10_000, 8)))
        d = cosine_distance(p, q)
        assert float(d.min()) >= 0.0 and float(d.max()) <= 2.0
        a = torch.tensor(rng.uniform(1e-3, 1e3, size=(10_000, 1)))
        b = torch.tensor(rng.uniform(1e-3, 1e3, size=(10_000, 1)))
        d_scaled = cosine_distance(a * p, b * q)
        assert float((d - d_scaled).abs().max()) < 1e-9

    @given(
        st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=3),
        st.floats(min_value=1e-2, max_value=1e2),
        st.floats(min_value=1e-2, max_value=1e2),
    )
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance_property(self, values, a, b):
        p = vec(*values)
        q = vec(*[v + 1.0 for v in values])
        if float(p.norm()) < 1e-6 or float(q.norm()) < 1e-6:
            return
        assert abs(float(cosine_loss(a * p, b * q)) - float(cosine_loss(p, q))) < 1e-9


class TestEMA:
    def make_heads(self, tau):
        torch.manual_seed(0)
        return ProxyHeads(pool_dim=4, embed_dim=4, hidden_dim=4, tau=tau).double()

    def test_arithmetic(self):
        heads = self.make_heads(0.9)
        with torch.no_grad():
            for p in heads.target_projector.parameters():
                p.fill_(1.0)
            for p in heads.online_projector.parameters():
                p.fill_(0.0)
        ema_update(heads)
        for p in heads.target_projector.parameters():
            assert torch.allclose(p, torch.full_like(p, 0.9), atol=1e-9)

    def test_tau_zero_copies_online(self):
        heads = self.make_heads(0.0)
        ema_update(heads)
        for t, o in zip(heads.target_projector.parameters(), heads.online_projector.parameters()):
            assert torch.equal(t, o)

    def test_tau_one_keeps_target(self):
        heads = self.make_heads(1.0)
        before = [t.clone() for t in heads.target_projector.parameters()]
        with torch.no_grad():
            for p in heads.online_projector.parameters():
                p.add_(1.0)
        ema_update(heads)
        for t, b in zip(heads.target_projector.parameters(), before):
            assert torch.equal(t, b)

    def test_geometric_convergence(self):
        heads = self.make_heads(0.5)
        with torch.no_grad():
            for p in heads.target_projector.parameters():
                p.fill_(1.0)
            for p in heads.online_projector.parameters():
                p.fill_(0.0)
        gap0 = 1.0
        for n in range(1, 6):
            ema_update(heads)
            for p in heads.target_projector.parameters():
                expected = gap0 * 0.5**n
                assert torch.allclose(p, torch.full_like(p, expected), atol=1e-12)

    def test_online_and_predictor_untouched(self):
        heads = self.make_heads(0.5)
        online = [p.clone() for p in heads.online_projector.parameters()]
        pred = [p.clone() for p in heads.predictor.parameters()]
        ema_update(heads)
        assert all(torch.equal(a, b) for a, b in zip(online, heads.online_projector.parameters()))
        assert all(torch.equal(a, b) for a, b in zip(pred, heads.predictor.parameters()))

    def test_bad_tau_rejected(self):
        with pytest.raises(ConfigurationError):
            ProxyHeads(pool_dim=4, tau=1.5)


@pytest.fixture()
def proxy_setup(tiny_dataset):
    model = init_model(TINY_MODEL, seed=0).double()
    insert_adaptation_layer(model, seed=1)
    model.adaptation_layer.double()
    with torch.no_grad():
        for p in model.adaptation_layer.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    torch.manual_seed(0)
    heads = ProxyHeads(pool_dim=64, embed_dim=16, hidden_dim=16).double()
    image, depth_in = collate(tiny_dataset[:3], torch.float64)
    return model, heads, image, depth_in


class TestStopGradientLedger:
    """The four exact-zero gradient-path claims of the two pair builders."""

    def _taps(self, model, image, depth_in):
        for p in model.parameters():
            p.requires_grad_(True)
        _, taps_both = forward_batch(model, image, depth_in, "eval")
        _, taps_depth = forward_batch(model, torch.zeros_like(image), depth_in, "eval")
        return taps_depth, taps_both

    def test_prep_pair_gradients(self, proxy_setup):
        model, heads, image, depth_in = proxy_setup
        taps_depth, taps_both = self._taps(model, image, depth_in)
        pair = make_source_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)
        loss = cosine_loss(pair.p, pair.q)
        loss.backward()
        # Claim 1: no gradient reaches the encoder through the p branch.
        assert all(p.grad is None or not p.grad.any() for p in model.parameters())
        # Claim 2: the target projector never sees gradients.
        assert all(p.grad is None for p in heads.target_projector.parameters())
        # Online projector and predictor do train.
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in heads.online_projector.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in heads.predictor.parameters())

    def test_target_pair_gradients(self, proxy_setup):
        model, heads, image, depth_in = proxy_setup
        heads.freeze()
        taps_depth, taps_both = self._taps(model, image, depth_in)
        pair = make_target_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)
        loss = cosine_loss(pair.p, pair.q)
        loss.backward()
        # Claim 3: frozen heads receive no gradient at adaptation time.
        assert all(p.grad is None for p in heads.parameters())
        # Claim 4: p_t is fully stopped, but q_t reaches the adaptation layer.
        assert not pair.p.requires_grad
        adapt_grads = [p.grad for p in model.adaptation_layer.parameters()]
        assert any(g is not None and g.abs().sum() > 0 for g in adapt_grads)

    def test_target_pair_requires_prepared_heads(self, proxy_setup):
        model, heads, image, depth_in = proxy_setup
        taps_depth, taps_both = self._taps(model, image, depth_in)
        with pytest.raises(LifecycleError):
            make_target_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)


def test_fifty_steps_on_fixed_batch_halve_preparation_loss():
    """Optimization smoke: the preparation objective on one frozen feature
    batch drops by at least half within 50 steps."""
    torch.manual_seed(3)
    heads = ProxyHeads(pool_dim=16, embed_dim=16, hidden_dim=16, tau=0.99)
    feat_depth = torch.randn(8, 16, 4, 4)
    feat_both = torch.randn(8, 16, 4, 4)
    opt = torch.optim.Adam(heads.trainable_parameters(), lr=1e-2)
    losses = []
    for _ in range(50):
        pair = make_source_pair(heads, feat_depth, feat_both)
        loss = cosine_loss(pair.p, pair.q)
        losses.append(float(loss))
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(heads)
    pair = make_source_pair(heads, feat_depth, feat_both)
    final = float(cosine_loss(pair.p, pair.q))
    assert final <= 0.5 * losses[0]


class TestPairGradientsNonzeroByFiniteDifference:
    def test_head_gradients_match_fd_on_toy_heads(self):
        torch.manual_seed(1)
        heads = ProxyHeads(pool_dim=2, embed_dim=2, hidden_dim=2).double()
        feat_depth = torch.randn(1, 2, 2, 2, dtype=T64)
        feat_both = torch.randn(1, 2, 2, 2, dtype=T64)

        def loss_fn():
            pair = make_source_pair(heads, feat_depth, feat_both)
            return cosine_loss(pair.p, pair.q)

        loss = loss_fn()
        loss.backward()
        for param in heads.trainable_parameters():
            idx = 0
            analytic = float(param.grad.reshape(-1)[idx])
            fd = central_difference_grads(loss_fn, param.data, [idx])[0]
            assert_grads_close([analytic], [fd])

    def test_adaptation_layer_gradient_matches_fd(self, proxy_setup):
        """The p branch is stop-gradient, so the oracle holds p fixed and
        differentiates only through the live q path."""
        model, heads, image, depth_in = proxy_setup
        heads.freeze()
        with torch.no_grad():
            _, taps_depth = forward_batch(model, torch.zeros_like(image), depth_in, "eval")
            p_fixed = heads.predictor(heads.online_projector(pool_features(taps_depth.fused_feat)))

        def loss_fn():
            _, taps_both = forward_batch(model, image, depth_in, "eval")
            q = heads.target_projector(pool_features(taps_both.fused_feat))
            return cosine_loss(p_fixed, q)

        # Analytic side goes through the real pair builder.
        _, taps_both = forward_batch(model, image, depth_in, "eval")
        pair = make_target_pair(heads, taps_depth.fused_feat, taps_both.fused_feat)
        loss = cosine_loss(pair.p, pair.q)
        loss.backward()
        param = model.adaptation_layer.expand.weight
        grads = param.grad.reshape(-1)
        idx = int(torch.argmax(grads.abs()))
        fd = central_difference_grads(loss_fn, param.data, [idx])[0]
        assert_grads_close([float(grads[idx])], [fd])
