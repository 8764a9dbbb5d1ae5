from __future__ import annotations

import numpy as np
import pytest

from udsx.csr import (
    CsrConfig,
    StreamBatch,
    batch_hard_triplet,
    center_loss,
    cross_extractor_triplet,
    csc_loss,
    csp_loss,
    csr_loss,
    cst_loss,
)

from conftest import fd_grad, rel_err


def make_batch(rng, p=3, k=2, dim=4, identical=False):
    labels = np.repeat(np.arange(p), k)
    domains = rng.integers(0, 2, size=labels.size)
    f_d = rng.standard_normal((labels.size, dim))
    f_p = f_d.copy() if identical else rng.standard_normal((labels.size, dim))
    return StreamBatch(labels, domains, f_d, f_p)


def exhaustive_cst_oracle(batch: StreamBatch, margin: float) -> float:
    """Brute force over every (anchor, positive, negative) combination."""
    m = batch.size
    total = 0.0
    for anchor_set, other_set in ((batch.f_d, batch.f_p), (batch.f_p, batch.f_d)):
        for i in range(m):
            pos = max(
                np.linalg.norm(anchor_set[i] - other_set[j])
                for j in range(m)
                if batch.labels[j] == batch.labels[i]
            )
            neg = min(
                np.linalg.norm(anchor_set[i] - anchor_set[j])
                for j in range(m)
                if batch.labels[j] != batch.labels[i]
            )
            total += max(pos - neg + margin, 0.0)
    return total / (2 * m)


class TestCsp:
    def test_identical_streams_give_zero(self, rng):
        batch = make_batch(rng, identical=True)
        assert csp_loss(batch).value == 0.0

    def test_hand_value(self):
        batch = StreamBatch([0], [0], [[1.0, 2.0]], [[0.0, 0.0]])
        assert csp_loss(batch).value == 3.0

    def test_gradients_match_finite_differences(self, rng):
        for _ in range(10):
            batch = make_batch(rng)
            out = csp_loss(batch)
            num_d = fd_grad(
                lambda v: csp_loss(
                    StreamBatch(batch.labels, batch.domains, v, batch.f_p)
                ).value,
                batch.f_d,
            )
            num_p = fd_grad(
                lambda v: csp_loss(
                    StreamBatch(batch.labels, batch.domains, batch.f_d, v)
                ).value,
                batch.f_p,
            )
            assert rel_err(out.grad_d, num_d) < 1e-6
            assert rel_err(out.grad_p, num_p) < 1e-6

    def test_misaligned_streams_rejected(self, rng):
        with pytest.raises(ValueError):
            StreamBatch([0, 1], [0, 0], rng.standard_normal((2, 3)), rng.standard_normal((3, 3)))


class TestCenterLoss:
    def test_identical_members_give_zero(self):
        emb = np.array([[1.0, 2.0], [1.0, 2.0], [5.0, 5.0], [5.0, 5.0]])
        value, grad = center_loss(emb, [0, 0, 1, 1])
        assert value == 0.0
        assert np.array_equal(grad, np.zeros_like(emb))

    def test_hand_value(self):
        value, _ = center_loss(np.array([[0.0], [2.0]]), [0, 0])
        assert value == 1.0

    def test_singleton_class_contributes_zero(self, rng):
        emb = rng.standard_normal((3, 4))
        value_pair, _ = center_loss(emb[:2], [0, 0])
        value_with_singleton, _ = center_loss(emb, [0, 0, 1])
        assert value_with_singleton == pytest.approx(value_pair * 2 / 3, rel=1e-12)

    def test_gradients_match_finite_differences_through_centroids(self, rng):
        for _ in range(10):
            emb = rng.standard_normal((6, 3))
            labels = np.array([0, 0, 1, 1, 1, 2])
            _, grad = center_loss(emb, labels)
            numeric = fd_grad(lambda v: center_loss(v, labels)[0], emb)
            assert rel_err(grad, numeric) < 1e-6


class TestCsc:
    def test_identical_streams_equal_twice_center_loss(self, rng):
        for _ in range(20):
            batch = make_batch(rng, identical=True)
            expected, _ = center_loss(batch.f_d, batch.labels)
            assert csc_loss(batch).value == pytest.approx(2 * expected, abs=1e-12)

    def test_hand_value_single_class(self):
        batch = StreamBatch([0], [0], [[0.0]], [[2.0]])
        assert csc_loss(batch).value == 4.0

    def test_gradients_match_finite_differences(self, rng):
        for _ in range(10):
            batch = make_batch(rng)
            out = csc_loss(batch)
            num_d = fd_grad(
                lambda v: csc_loss(
                    StreamBatch(batch.labels, batch.domains, v, batch.f_p)
                ).value,
                batch.f_d,
            )
            num_p = fd_grad(
                lambda v: csc_loss(
                    StreamBatch(batch.labels, batch.domains, batch.f_d, v)
                ).value,
                batch.f_p,
            )
            assert rel_err(out.grad_d, num_d) < 1e-6
            assert rel_err(out.grad_p, num_p) < 1e-6


class TestCrossExtractorTriplet:
    def test_inactive_hinge(self):
        a, p, n = np.zeros(2), np.zeros(2), np.array([5.0, 0.0])
        assert cross_extractor_triplet(a, p, n, margin=0.3) == 0.0

    def test_hand_value(self):
        a = np.zeros(1)
        p = np.array([2.0])
        n = np.array([1.0])
        assert cross_extractor_triplet(a, p, n, margin=0.3) == pytest.approx(1.3)

    def test_equal_distances_zero_margin(self, rng):
        a = rng.standard_normal(3)
        x = rng.standard_normal(3)
        assert cross_extractor_triplet(a, x, x, margin=0.0) == 0.0


class TestCst:
    def test_identical_streams_zero_margin_equals_batch_hard(self, rng):
        for _ in range(30):
            batch = make_batch(rng, p=int(rng.integers(2, 5)), k=int(rng.integers(2, 4)), identical=True)
            ours = cst_loss(batch, CsrConfig(margin=0.0)).value
            reference = batch_hard_triplet(batch.f_d, batch.labels, margin=0.0)
            assert ours == pytest.approx(reference, abs=1e-12)

    def test_matches_exhaustive_mining_oracle(self, rng):
        for _ in range(30):
            batch = make_batch(rng, p=2, k=2)
            ours = cst_loss(batch, CsrConfig(margin=0.3)).value
            assert ours == pytest.approx(exhaustive_cst_oracle(batch, 0.3), abs=1e-12)

    def test_well_separated_classes_give_zero(self, rng):
        base = rng.standard_normal((2, 3)) * 0.01
        far = np.array([100.0, 0.0, 0.0])
        f_d = np.vstack([base, base + far])
        batch = StreamBatch([0, 0, 1, 1], [0, 0, 0, 0], f_d, f_d + 0.001)
        assert cst_loss(batch, CsrConfig(margin=0.3)).value == 0.0

    def test_gradients_match_finite_differences(self, rng):
        cfg = CsrConfig(margin=0.3)
        count = 0
        for _ in range(20):
            batch = make_batch(rng)
            out = cst_loss(batch, cfg)
            if out.value == 0.0:
                continue
            count += 1
            num_d = fd_grad(
                lambda v: cst_loss(
                    StreamBatch(batch.labels, batch.domains, v, batch.f_p), cfg
                ).value,
                batch.f_d,
            )
            num_p = fd_grad(
                lambda v: cst_loss(
                    StreamBatch(batch.labels, batch.domains, batch.f_d, v), cfg
                ).value,
                batch.f_p,
            )
            assert rel_err(out.grad_d, num_d) < 1e-6
            assert rel_err(out.grad_p, num_p) < 1e-6
        assert count >= 5

    def test_single_class_batch_rejected(self, rng):
        batch = StreamBatch(
            [0, 0], [0, 0], rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        )
        with pytest.raises(ValueError):
            cst_loss(batch, CsrConfig())

    def test_singleton_class_rejected(self, rng):
        batch = StreamBatch(
            [0, 0, 1], [0, 0, 0], rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        )
        with pytest.raises(ValueError):
            cst_loss(batch, CsrConfig())


class TestCsrCombination:
    def test_all_zero_weights_give_zero(self, rng):
        batch = make_batch(rng)
        out = csr_loss(batch, CsrConfig(psi1=0, psi2=0, psi3=0))
        assert out.value == 0.0
        assert np.array_equal(out.grad_d, np.zeros_like(batch.f_d))

    def test_default_weights(self, rng):
        batch = make_batch(rng)
        cfg = CsrConfig()
        assert (cfg.psi1, cfg.psi2, cfg.psi3) == (2.0, 5e-4, 1.0)
        out = csr_loss(batch, cfg)
        expected = 2.0 * out.csp + 5e-4 * out.csc + 1.0 * out.cst
        assert out.value == pytest.approx(expected, rel=1e-12)

    def test_doubling_psi1_doubles_the_csp_contribution(self, rng):
        batch = make_batch(rng)
        base = csr_loss(batch, CsrConfig(psi1=1.0, psi2=0.0, psi3=0.0))
        doubled = csr_loss(batch, CsrConfig(psi1=2.0, psi2=0.0, psi3=0.0))
        assert doubled.value == 2.0 * base.value

    def test_stream_swap_symmetry(self, rng):
        for _ in range(10):
            batch = make_batch(rng)
            swapped = StreamBatch(batch.labels, batch.domains, batch.f_p, batch.f_d)
            cfg = CsrConfig()
            assert csp_loss(batch).value == csp_loss(swapped).value
            assert csc_loss(batch).value == pytest.approx(csc_loss(swapped).value, abs=1e-12)
            assert cst_loss(batch, cfg).value == pytest.approx(
                cst_loss(swapped, cfg).value, abs=1e-12
            )

    def test_permutation_invariance(self, rng):
        batch = make_batch(rng)
        perm = rng.permutation(batch.size)
        permuted = StreamBatch(
            batch.labels[perm], batch.domains[perm], batch.f_d[perm], batch.f_p[perm]
        )
        cfg = CsrConfig()
        a, b = csr_loss(batch, cfg), csr_loss(permuted, cfg)
        assert a.value == pytest.approx(b.value, abs=1e-12)

    def test_cst_nonnegative_and_zero_losses_iff_streams_coincide(self, rng):
        batch = make_batch(rng, identical=True)
        assert cst_loss(batch, CsrConfig(margin=0.0)).value >= 0.0
        assert csp_loss(batch).value == 0.0
        distinct = make_batch(rng)
        assert csp_loss(distinct).value > 0.0
