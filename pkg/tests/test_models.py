import os

import numpy as np
import pytest

import config
from dropout import DropoutSpec
from errors import ConfigurationError, DataFormatError, UsageError
from models import (DenseConfig, DenseNetwork, PreActResNet, ResNetConfig, build_network,
                    load_network, network_config_from_run)
from models.model import CHECKPOINT_NAME, iterate_batches


class TestConfigs:

    def test_resnet_config__bad_input_shape__configuration_error(self):
        with pytest.raises(ConfigurationError):
            ResNetConfig(input_shape=(32, 32))

    def test_resnet_config__dropout_dict__coerced_to_spec(self):
        cfg = ResNetConfig(dropout={'variant': 'block', 'rate': 0.1, 'block_size': 3})
        assert cfg.dropout == DropoutSpec('block', 0.1, block_size=3)

    def test_dense_config__non_positive_size__configuration_error(self):
        with pytest.raises(ConfigurationError):
            DenseConfig(input_dim=2, hidden_sizes=(0,))

    def test_build_network__one_class__configuration_error(self, dense_config):
        with pytest.raises(ConfigurationError):
            build_network(dense_config._replace(num_classes=1), seed=0)

    def test_build_network__same_seed__same_parameters(self, tiny_resnet_config):
        a = build_network(tiny_resnet_config, seed=4)
        b = build_network(tiny_resnet_config, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            np.testing.assert_array_equal(pa.value, pb.value)

    def test_network_config_from_run__dense__input_dim_from_shape(self):
        run_config = config.load_run_config(os.path.join(config.DIR_CONFIGS, 'toy_dense.yaml'))
        cfg = network_config_from_run(run_config, input_shape=(5,), num_classes=4)
        assert isinstance(cfg, DenseConfig)
        assert cfg.input_dim == 5
        assert cfg.num_classes == 4


class TestForward:

    def test_forward__resnet__logit_shape(self, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        logits = net.forward(tiny_images[0])
        assert logits.shape == (4, 3)
        assert logits.dtype == np.float64

    def test_forward__wrong_input_shape__configuration_error(self, tiny_resnet_config):
        net = PreActResNet(tiny_resnet_config, seed=0)
        with pytest.raises(ConfigurationError):
            net.forward(np.zeros((2, 3, 5, 5)))

    def test_forward__unknown_mode__configuration_error(self, dense_config):
        net = DenseNetwork(dense_config, seed=0)
        with pytest.raises(ConfigurationError):
            net.forward(np.zeros((2, 2)), mode='eval')

    def test_forward__deterministic__repeatable(self, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        np.testing.assert_array_equal(net.forward(tiny_images[0]), net.forward(tiny_images[0]))

    def test_forward__mc_sample_same_index__identical(self, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        a = net.forward(tiny_images[0], mode='mc_sample', sample_index=2)
        b = net.forward(tiny_images[0], mode='mc_sample', sample_index=2)
        np.testing.assert_array_equal(a, b)

    def test_forward__mc_sample_other_index__differs(self, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        a = net.forward(tiny_images[0], mode='mc_sample', sample_index=0)
        b = net.forward(tiny_images[0], mode='mc_sample', sample_index=1)
        assert not np.allclose(a, b)

    def test_forward__mc_sample_without_index__usage_error(self, dense_config):
        net = DenseNetwork(dense_config, seed=0)
        with pytest.raises(UsageError):
            net.forward(np.zeros((2, 2)), mode='mc_sample')

    def test_forward__mc_sample__running_statistics_untouched(self, tiny_resnet_config,
                                                               tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        before = {k: v.copy() for k, v in net.buffers().items()}
        net.forward(tiny_images[0], mode='mc_sample', sample_index=0)
        for key, value in net.buffers().items():
            np.testing.assert_array_equal(value, before[key])

    def test_forward__train_pinned_mask_seed__repeatable(self, dense_config):
        net = DenseNetwork(dense_config, seed=0)
        inputs = np.random.default_rng(0).standard_normal((6, 2))
        a = net.forward(inputs, mode='train', mask_seed='0:0')
        b = net.forward(inputs, mode='train', mask_seed='0:0')
        np.testing.assert_array_equal(a, b)

    def test_forward__train_unpinned__fresh_masks_each_call(self, dense_config):
        net = DenseNetwork(dense_config._replace(dropout=DropoutSpec('element', 0.5)), seed=0)
        inputs = np.random.default_rng(0).standard_normal((6, 2))
        a = net.forward(inputs, mode='train')
        b = net.forward(inputs, mode='train')
        assert not np.allclose(a, b)

    def test_forward__frozen_batchnorm_no_dropout__train_equals_deterministic(
            self, tiny_resnet_config, tiny_images):
        cfg = tiny_resnet_config._replace(dropout=DropoutSpec('element', 0.),
                                          final_fc_dropout_rate=0.)
        net = PreActResNet(cfg, seed=0)
        net.freeze_batchnorm()
        train = net.forward(tiny_images[0], mode='train', mask_seed=0)
        np.testing.assert_allclose(train, net.forward(tiny_images[0]), rtol=1e-12)

    def test_forward__layer_variant_mc__downsampling_blocks_kept(self, tiny_resnet_config,
                                                                   tiny_images):
        cfg = tiny_resnet_config._replace(dropout=DropoutSpec('layer', 0.9))
        net = PreActResNet(cfg, seed=0)
        for index in range(20):
            net.forward(tiny_images[0], mode='mc_sample', sample_index=index, record=True)
            gates = net.last_gates()
            assert np.all(gates[np.array(net.is_downsampling)] == 1.)

    def test_predict_proba__rows_on_simplex(self, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=0)
        probs = net.predict_proba(tiny_images[0], mode='mc_sample', sample_index=0, batch_size=3)
        assert probs.shape == (4, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1., atol=1e-12)

    def test_backward__no_recorded_pass__usage_error(self, dense_config):
        net = DenseNetwork(dense_config, seed=0)
        net.forward(np.zeros((2, 2)))
        with pytest.raises(UsageError):
            net.backward(np.zeros((2, 3)))


class TestCheckpoint:

    def test_save_load__resnet__same_predictions(self, tmpdir, tiny_resnet_config, tiny_images):
        net = PreActResNet(tiny_resnet_config, seed=1)
        net.forward(tiny_images[0], mode='train', mask_seed=0)
        net.save(str(tmpdir))

        loaded = load_network(str(tmpdir))

        assert isinstance(loaded, PreActResNet)
        assert loaded.config_hash() == net.config_hash()
        for index in range(3):
            np.testing.assert_array_equal(
                loaded.forward(tiny_images[0], mode='mc_sample', sample_index=index),
                net.forward(tiny_images[0], mode='mc_sample', sample_index=index))

    def test_load__wrong_architecture__data_format_error(self, tmpdir, dense_config):
        DenseNetwork(dense_config, seed=0).save(str(tmpdir))
        with pytest.raises(DataFormatError):
            PreActResNet.load(str(tmpdir))

    def test_load__missing_checkpoint__data_format_error(self, tmpdir):
        with pytest.raises(DataFormatError):
            load_network(str(tmpdir))

    def test_load__corrupted_file__data_format_error(self, tmpdir):
        tmpdir.join(CHECKPOINT_NAME).write_binary(b'not an archive')
        with pytest.raises(DataFormatError):
            load_network(str(tmpdir))

    def test_restore__missing_arrays__data_format_error(self, dense_config):
        net = DenseNetwork(dense_config, seed=0)
        arrays = net.snapshot()
        arrays.pop(sorted(arrays)[0])
        with pytest.raises(DataFormatError):
            net.restore(arrays)


class TestIterateBatches:

    @pytest.mark.parametrize('num_samples,batch_size,expected', [
        (5, 2, [(0, 2), (2, 4), (4, 5)]),
        (4, 4, [(0, 4)]),
        (0, 3, []),
    ])
    def test_iterate_batches__bounds(self, num_samples, batch_size, expected):
        assert list(iterate_batches(num_samples, batch_size)) == expected
