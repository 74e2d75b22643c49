import numpy as np
import pytest

from dropout import (DropoutSpec, Mask, MaskSampler, RngStream, apply_mask, block_gamma,
                     derive_stream_id, fitted_block_size, sample_block_mask,
                     sample_channel_mask, sample_element_mask, sample_layer_gates)
from errors import ConfigurationError


def _three_sigma(p, n):
    return 3. * np.sqrt(p * (1. - p) / n)


class TestRngStream:

    def test_named__same_parts__same_draws(self):
        a = RngStream.named(3, 'mc_sample', 4, 'stem').generator().random(5)
        b = RngStream.named(3, 'mc_sample', 4, 'stem').generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_named__different_parts__different_draws(self):
        a = RngStream.named(3, 'mc_sample', 4, 'stem').generator().random(5)
        b = RngStream.named(3, 'mc_sample', 5, 'stem').generator().random(5)
        assert not np.array_equal(a, b)

    def test_derive_stream_id__fits_64_bits(self):
        assert 0 <= derive_stream_id('a', 1, 'b') < 2 ** 64


class TestDropoutSpec:

    def test_new__unknown_variant__configuration_error(self):
        with pytest.raises(ConfigurationError):
            DropoutSpec('gaussian', 0.1)

    @pytest.mark.parametrize('rate', [-0.1, 1.0])
    def test_new__rate_outside_unit_interval__configuration_error(self, rate):
        with pytest.raises(ConfigurationError):
            DropoutSpec('element', rate)

    def test_new__even_block_size__configuration_error(self):
        with pytest.raises(ConfigurationError):
            DropoutSpec('block', 0.1, block_size=4)

    def test_is_active__zero_rate__false(self):
        assert not DropoutSpec('element', 0.).is_active
        assert DropoutSpec('layer', 0.1).is_active


class TestElementAndChannelMasks:

    def test_sample_element_mask__million_draws__within_three_sigma(self):
        p, n = 0.3, 10 ** 6
        mask = sample_element_mask((n,), p, np.random.default_rng(0))
        assert abs((1. - mask.keep.mean()) - p) < _three_sigma(p, n)
        assert mask.scale == pytest.approx(1. / 0.7)

    def test_sample_element_mask__zero_rate__all_kept(self):
        mask = sample_element_mask((3, 4), 0., np.random.default_rng(0))
        assert mask.keep.all()
        assert mask.scale == 1.

    def test_sample_channel_mask__million_draws__within_three_sigma(self):
        p, n = 0.2, 10 ** 6
        mask = sample_channel_mask(n, p, np.random.default_rng(1))
        assert abs((1. - mask.keep.mean()) - p) < _three_sigma(p, n)

    def test_sample_channel_mask__broadcast__constant_over_spatial_extent(self):
        mask = sample_channel_mask(8, 0.5, np.random.default_rng(2), batch_size=4)
        tensor = np.ones((4, 8, 5, 5))
        dropped = apply_mask(tensor, mask)
        per_channel = dropped.reshape(4, 8, -1)
        assert np.all(per_channel.min(axis=2) == per_channel.max(axis=2))
        assert set(np.unique(dropped)) <= {0., 2.}


class TestBlockMask:

    def test_block_gamma__rate_matching__expected_value(self):
        assert block_gamma(0.1, 3, 32, 32) == pytest.approx(0.1 / 9 * 1024 / 900)

    def test_sample_block_mask__ten_thousand_masks__drop_rate_near_p(self):
        mask = sample_block_mask((10 ** 4, 32, 32), 0.1, 3, np.random.default_rng(3))
        drop_rate = 1. - mask.keep.mean()
        assert 0.05 <= drop_rate <= 0.15

    def test_sample_block_mask__single_seed__zeroes_a_3x3_patch(self, mocker):
        rng = mocker.MagicMock()
        seeds = np.ones((7, 7))
        seeds[3, 3] = 0.
        rng.random.return_value = seeds
        mask = sample_block_mask((7, 7), 0.1, 3, rng)
        expected = np.ones((7, 7), dtype=np.uint8)
        expected[2:5, 2:5] = 0
        np.testing.assert_array_equal(mask.keep, expected)

    def test_sample_block_mask__seed_on_border__patch_clipped(self, mocker):
        rng = mocker.MagicMock()
        seeds = np.ones((5, 5))
        seeds[0, 0] = 0.
        rng.random.return_value = seeds
        mask = sample_block_mask((5, 5), 0.1, 3, rng)
        assert mask.keep.sum() == 25 - 4

    def test_sample_block_mask__block_bigger_than_map__configuration_error(self):
        with pytest.raises(ConfigurationError):
            sample_block_mask((2, 2), 0.1, 3, np.random.default_rng(0))

    @pytest.mark.parametrize('block_size,shape,expected', [
        (3, (1, 1, 8, 8), 3),
        (5, (1, 1, 4, 4), 3),
        (3, (1, 1, 2, 2), 1),
    ])
    def test_fitted_block_size__small_maps__largest_odd_fit(self, block_size, shape, expected):
        assert fitted_block_size(block_size, shape) == expected


class TestLayerGates:

    def test_sample_layer_gates__mc_test__never_drops_downsampling(self):
        rng = np.random.default_rng(4)
        flags = [False, True, False, True]
        violations = 0
        for _ in range(10 ** 5):
            gates = sample_layer_gates(4, 0.5, flags, 'mc_test', rng)
            violations += int(np.any(gates[[1, 3]] == 0.))
        assert violations == 0

    def test_sample_layer_gates__train__drops_downsampling_too(self):
        rng = np.random.default_rng(5)
        gates = np.array([sample_layer_gates(2, 0.5, [True, True], 'train', rng)
                          for _ in range(200)])
        assert np.any(gates == 0.)

    def test_sample_layer_gates__train__mean_dropped_matches_rate(self):
        rng = np.random.default_rng(6)
        flags = [False, False, True, False, False, True, False, False]
        draws = 10 ** 5
        dropped = np.array([8 - sample_layer_gates(8, 0.25, flags, 'train', rng).sum()
                            for _ in range(draws)])
        sigma = np.sqrt(8 * 0.25 * 0.75 / draws)
        assert abs(dropped.mean() - 2.) <= 3. * sigma

    def test_sample_layer_gates__flag_count_mismatch__configuration_error(self):
        with pytest.raises(ConfigurationError):
            sample_layer_gates(3, 0.1, [True], 'train', np.random.default_rng(0))


class TestApplyMask:

    def test_apply_mask__inverted_scaling__kept_values_rescaled(self):
        mask = Mask(keep=np.array([1, 0, 1], dtype=np.uint8), scale=2.)
        np.testing.assert_array_equal(apply_mask(np.array([1., 1., 3.]), mask), [2., 0., 6.])

    def test_apply_mask__shape_mismatch__configuration_error(self):
        mask = Mask(keep=np.ones((3,), dtype=np.uint8), scale=1.)
        with pytest.raises(ConfigurationError):
            apply_mask(np.ones((2, 4)), mask)


class TestMaskSampler:

    def test_site_mask__deterministic_mode__none(self):
        sampler = MaskSampler(DropoutSpec('element', 0.5), 0.1, 'deterministic', 0)
        assert sampler.site_mask('stem', (2, 3)) is None
        assert sampler.head_mask((2, 3)) is None

    def test_site_mask__same_sample_index__identical_masks(self):
        spec = DropoutSpec('block', 0.3)
        a = MaskSampler(spec, 0.1, 'mc_sample', 9, pass_id=2).site_mask('s', (2, 4, 8, 8))
        b = MaskSampler(spec, 0.1, 'mc_sample', 9, pass_id=2).site_mask('s', (2, 4, 8, 8))
        np.testing.assert_array_equal(a.keep, b.keep)

    def test_site_mask__different_batch_offsets__different_masks(self):
        spec = DropoutSpec('element', 0.5)
        a = MaskSampler(spec, 0., 'mc_sample', 9, 0, batch_offset=0).site_mask('s', (64,))
        b = MaskSampler(spec, 0., 'mc_sample', 9, 0, batch_offset=64).site_mask('s', (64,))
        assert not np.array_equal(a.keep, b.keep)

    def test_layer_gates__different_batch_offsets__same_subnetwork(self):
        spec = DropoutSpec('layer', 0.5)
        flags = [False] * 6
        a = MaskSampler(spec, 0., 'mc_sample', 1, 3, batch_offset=0).layer_gates(flags)
        b = MaskSampler(spec, 0., 'mc_sample', 1, 3, batch_offset=128).layer_gates(flags)
        np.testing.assert_array_equal(a, b)

    def test_site_mask__channel_variant_on_features__falls_back_to_element(self):
        mask = MaskSampler(DropoutSpec('channel', 0.5), 0., 'train', 0, 'x').site_mask('h', (4, 6))
        assert mask.keep.shape == (4, 6)

    def test_site_mask__layer_variant__no_site_masks(self):
        sampler = MaskSampler(DropoutSpec('layer', 0.5), 0., 'train', 0, 'x')
        assert sampler.site_mask('stem', (1, 3, 4, 4)) is None
