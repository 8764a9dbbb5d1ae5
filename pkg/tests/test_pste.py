from __future__ import annotations

import numpy as np
import pytest

from udsx.pste import (
    PsteConfig,
    apply_expansion,
    candidate_layers,
    expand_feature,
    select_layer,
    stratify_channels,
)
from udsx.stats import DomainStats, UnknownDomainError


class TestCandidateLayers:
    def test_default_schedule_table(self):
        cfg = PsteConfig()
        assert candidate_layers(cfg, 0) == [0, 1, 2]
        assert candidate_layers(cfg, 45) == [0, 1, 2, 3]
        for t in (60, 61, 100, 10_000):
            assert candidate_layers(cfg, t) == [0, 1, 2, 3, 4]

    def test_monotone_widening(self):
        cfg = PsteConfig()
        previous: list[int] = []
        for t in range(0, 130):
            current = candidate_layers(cfg, t)
            assert set(previous) <= set(current)
            previous = current

    def test_minimum_size_at_start(self):
        cfg = PsteConfig(min_width=2)
        assert candidate_layers(cfg, 0) == [0, 1]

    def test_step_schedule_jumps_at_horizon(self):
        cfg = PsteConfig(schedule="step")
        assert candidate_layers(cfg, 0) == [0, 1, 2, 3]
        assert candidate_layers(cfg, 59) == [0, 1, 2, 3]
        assert candidate_layers(cfg, 60) == [0, 1, 2, 3, 4]

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            candidate_layers(PsteConfig(), -1)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            PsteConfig(min_width=0)
        with pytest.raises(ValueError):
            PsteConfig(min_width=6)
        with pytest.raises(ValueError):
            PsteConfig(strata_lo=0.7, strata_hi=0.6)
        with pytest.raises(ValueError):
            PsteConfig(schedule="exponential")


class TestSelectLayer:
    def test_single_candidate(self):
        assert select_layer([0], np.random.default_rng(0)) == 0

    def test_reproducible_given_seed(self):
        draws_a = [select_layer([0, 1, 2], np.random.default_rng(7)) for _ in range(50)]
        draws_b = [select_layer([0, 1, 2], np.random.default_rng(7)) for _ in range(50)]
        assert draws_a == draws_b

    def test_uniform_frequencies(self):
        rng = np.random.default_rng(11)
        n = 30_000
        draws = np.array([select_layer([0, 1, 2], rng) for _ in range(n)])
        sigma = np.sqrt((1 / 3) * (2 / 3) / n)
        for k in range(3):
            assert abs((draws == k).mean() - 1 / 3) < 3 * sigma

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            select_layer([], np.random.default_rng(0))


class TestStratifyChannels:
    def test_hand_ranked_example(self):
        means = np.array([0.9, 0.1, 0.5, 0.7, 0.3, 0.8, 0.2, 0.6])
        picked = stratify_channels(means.reshape(8, 1))
        assert picked.tolist() == [2, 7]

    def test_all_ties_break_by_lower_index(self):
        picked = stratify_channels(np.ones((8, 3)))
        assert picked.tolist() == [3, 4]

    def test_four_channels_select_one(self):
        picked = stratify_channels(np.random.default_rng(0).standard_normal((4, 5)))
        assert picked.size == 1

    def test_matches_sort_oracle(self, rng):
        for _ in range(200):
            c = int(rng.integers(1, 40))
            feature = rng.standard_normal((c, int(rng.integers(1, 6))))
            means = feature.mean(axis=1)
            order = sorted(range(c), key=lambda i: (-means[i], i))
            expected = sorted(order[int(np.floor(0.375 * c)) : int(np.floor(0.625 * c))])
            assert stratify_channels(feature).tolist() == expected

    def test_size_depends_only_on_channel_count(self, rng):
        for c in (1, 2, 4, 8, 13, 32):
            sizes = {
                stratify_channels(rng.standard_normal((c, 4))).size for _ in range(10)
            }
            assert len(sizes) == 1


def make_stats(channels=4, variance_samples=((0.0, 0.0, 0.0, 0.0),)):
    stats = DomainStats(embedding_dim=2, layer_channels={0: channels})
    for sample in variance_samples:
        stats.update_channel_variance(0, 0, np.array(sample)[:, None])
    return stats


class TestApplyExpansion:
    def test_zero_variance_leaves_feature_unchanged(self, rng):
        stats = make_stats(variance_samples=[(1.0, 2.0, 3.0, 4.0)] * 3)
        feature = rng.standard_normal((4, 6))
        out = apply_expansion(feature, 0, 0, stats, [0, 1, 2, 3], np.random.default_rng(0))
        assert np.array_equal(out, feature)  # constant stream has zero variance

    def test_empty_selection_leaves_feature_unchanged(self, rng):
        stats = make_stats(variance_samples=[(0.0,) * 4, (4.0,) * 4])
        feature = rng.standard_normal((4, 6))
        out = apply_expansion(feature, 0, 0, stats, [], np.random.default_rng(0))
        assert np.array_equal(out, feature)

    def test_unselected_rows_bit_identical(self, rng):
        stats = make_stats(variance_samples=[(0.0,) * 4, (4.0,) * 4])
        feature = rng.standard_normal((4, 6))
        out = apply_expansion(feature, 0, 0, stats, [1], np.random.default_rng(0))
        assert np.array_equal(out[[0, 2, 3]], feature[[0, 2, 3]])
        assert not np.array_equal(out[1], feature[1])

    def test_noise_scale_matches_tracked_variance(self):
        stats = make_stats(variance_samples=[(0.0,) * 4, (4.0,) * 4])
        # tracked population variance of {0, 4} is 4, std 2
        np.testing.assert_allclose(stats.channel_variance(0, 0), [4.0] * 4)
        rng = np.random.default_rng(5)
        draws = []
        feature = np.zeros((4, 1))
        for _ in range(10_000):
            out = apply_expansion(feature, 0, 0, stats, [2], rng)
            draws.append(out[2, 0])
        assert 1.9 <= np.std(draws) <= 2.1

    def test_noise_broadcast_across_spatial_positions(self):
        stats = make_stats(variance_samples=[(0.0,) * 4, (4.0,) * 4])
        out = apply_expansion(np.zeros((4, 5)), 0, 0, stats, [0], np.random.default_rng(3))
        assert np.unique(out[0]).size == 1  # one draw shared by the whole row

    def test_per_element_mode_varies_within_row(self):
        stats = make_stats(variance_samples=[(0.0,) * 4, (4.0,) * 4])
        out = apply_expansion(
            np.zeros((4, 5)), 0, 0, stats, [0], np.random.default_rng(3), per_element=True
        )
        assert np.unique(out[0]).size == 5

    def test_missing_stats_entry_is_an_error(self, rng):
        stats = make_stats()
        with pytest.raises(UnknownDomainError):
            apply_expansion(rng.standard_normal((4, 2)), 9, 0, stats, [0], rng)


class TestExpandFeature:
    def test_decision_records_selection_and_perturbation(self, rng):
        stats = make_stats(channels=8, variance_samples=[(0.0,) * 8, (1.0,) * 8])
        feature = rng.standard_normal((8, 4))
        out, decision = expand_feature(
            feature, 0, 0, stats, PsteConfig(layers=(0,), min_width=1), 5, np.random.default_rng(1)
        )
        assert decision.epoch == 5 and decision.layer == 0
        assert decision.channel_indices.size == 2  # floor(5/8*8) - floor(3/8*8)
        np.testing.assert_array_equal(out - feature, decision.perturbation)
        untouched = np.setdiff1d(np.arange(8), decision.channel_indices)
        assert np.array_equal(decision.perturbation[untouched], np.zeros((6, 4)))
