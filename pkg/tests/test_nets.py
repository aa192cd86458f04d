import numpy as np
import pytest
import torch

from mechknow import data, nets, transforms as tf


def rand_images(n, size, ch, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, size, size, ch)).astype(np.float32)


class TestLayerStack:
    def test_grayscale_individual_rows(self):
        # published stack, row by row
        stack = nets.layer_stack(data.EXP_MNIST, tf.ROTATION)
        assert stack[0] == ("conv", 5, 96, 2)
        assert stack[1] == ("conv", 1, 64, 0)
        assert stack[2] == ("conv", 1, 32, 0)
        assert stack[3] == ("pool",)
        for g in range(1, 3):  # two middle groups open with a 3x3 conv
            base = 4 * g
            assert stack[base] == ("conv", 3, 32, 1)
            assert stack[base + 1] == ("conv", 1, 32, 0)
            assert stack[base + 2] == ("conv", 1, 32, 0)
            assert stack[base + 3] == ("pool",)
        assert stack[12] == ("conv", 2, 32, 0)  # last group opens with 2x2
        assert stack[15] == ("pool",)
        assert len(stack) == 16

    def test_color_individual_rows(self):
        stack = nets.layer_stack(data.EXP_CIFAR, tf.SCALING)
        assert stack[0] == ("conv", 5, 192, 2)
        assert stack[1] == ("conv", 1, 128, 0)
        assert stack[2] == ("conv", 1, 64, 0)
        assert all(s[2] == 128 for s in stack[4:] if s[0] == "conv")

    def test_joint_widening(self):
        gray = nets.layer_stack(data.EXP_NOISE, tf.JOINT)
        assert gray[0] == ("conv", 5, 192, 2)  # 96 doubled
        assert gray[12] == ("conv", 2, 64, 0)
        color = nets.layer_stack(data.EXP_CIFAR, tf.JOINT)
        assert color[0] == ("conv", 5, 288, 2)  # 192 * 1.5
        assert color[4] == ("conv", 3, 192, 1)


class TestModelSpec:
    def test_head_dims(self):
        assert nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION).head_dim == 1
        assert nets.ModelSpec("factornet", data.EXP_MNIST, tf.TRANSLATION).head_dim == 2
        assert nets.ModelSpec("factornet", data.EXP_MNIST, tf.JOINT).head_dim == 4
        assert nets.ModelSpec("factornet", data.EXP_NOISE, nets.IDENTITY).head_dim == 1
        assert nets.ModelSpec("vanilla", data.EXP_MNIST, nets.CLASSIFY).head_dim == 10

    def test_bad_specs(self):
        with pytest.raises(tf.ConfigurationError):
            nets.ModelSpec("transformer", data.EXP_MNIST, tf.ROTATION)
        with pytest.raises(tf.ConfigurationError):
            nets.ModelSpec("siamese", data.EXP_NOISE, nets.IDENTITY)
        with pytest.raises(tf.ConfigurationError):
            nets.ModelSpec("factornet", data.EXP_MNIST, nets.CLASSIFY)
        with pytest.raises(tf.ConfigurationError):
            nets.ModelSpec("factornet", "Exp_SVHN", tf.ROTATION)

    def test_round_trip_dict(self):
        spec = nets.ModelSpec("siamese", data.EXP_CIFAR, tf.SCALING)
        assert nets.ModelSpec.from_dict(spec.to_dict()) == spec


class TestBuildAndForward:
    def test_factornet_input_channels(self):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION))
        first = next(l for l in m.net.backbone if isinstance(l, torch.nn.Conv2d))
        assert first.in_channels == 2 and first.out_channels == 96
        c = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_CIFAR, tf.ROTATION))
        first = next(l for l in c.net.backbone if isinstance(l, torch.nn.Conv2d))
        assert first.in_channels == 6 and first.out_channels == 192

    def test_joint_has_more_parameters(self):
        ind = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION))
        joint = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.JOINT))
        assert nets.parameter_count(joint) > nets.parameter_count(ind)

    @pytest.mark.parametrize("family", ["factornet", "siamese"])
    @pytest.mark.parametrize(
        "experiment,size,ch", [(data.EXP_MNIST, 28, 1), (data.EXP_CIFAR, 32, 3)]
    )
    def test_pair_forward_shapes(self, family, experiment, size, ch):
        for kind in (tf.ROTATION, tf.TRANSLATION, tf.JOINT):
            m = nets.build_backbone(nets.ModelSpec(family, experiment, kind))
            out = m.predict_pairs(rand_images(3, size, ch), rand_images(3, size, ch, seed=1))
            assert out.shape == (3, tf.PARAM_DIM[kind])

    def test_vanilla_forward_shape(self):
        m = nets.build_backbone(nets.ModelSpec("vanilla", data.EXP_NOISE, tf.SCALING))
        out = m.predict_images(rand_images(4, 28, 1))
        assert out.shape == (4, 1)

    def test_identity_output_is_probability(self):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_NOISE, nets.IDENTITY))
        out = m.predict_pairs(rand_images(5, 28, 1), rand_images(5, 28, 1, seed=2))
        assert np.all((out > 0.0) & (out < 1.0))

    def test_classifier_softmax_sums_to_one(self):
        m = nets.build_backbone(nets.ModelSpec("vanilla", data.EXP_MNIST, nets.CLASSIFY))
        out = m.predict_images(rand_images(4, 28, 1))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert out.shape == (4, 10)

    def test_vanilla_rejects_pairs(self):
        m = nets.build_backbone(nets.ModelSpec("vanilla", data.EXP_MNIST, tf.ROTATION))
        with pytest.raises(ValueError):
            m.predict_pairs(rand_images(2, 28, 1), rand_images(2, 28, 1))

    def test_factornet_rejects_single_images(self):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION))
        with pytest.raises(ValueError):
            m.predict_images(rand_images(2, 28, 1))

    def test_pair_shape_mismatch_rejected(self):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION))
        with pytest.raises(ValueError):
            m.predict_pairs(rand_images(2, 28, 1), rand_images(3, 28, 1))

    def test_eval_forward_deterministic(self):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_MNIST, tf.ROTATION))
        a, b = rand_images(3, 28, 1), rand_images(3, 28, 1, seed=3)
        np.testing.assert_array_equal(m.predict_pairs(a, b), m.predict_pairs(a, b))

    def test_siamese_branches_share_weights(self):
        m = nets.build_backbone(nets.ModelSpec("siamese", data.EXP_MNIST, tf.ROTATION))
        net = m.net
        x = torch.rand(2, 1, 28, 28)
        y = torch.rand(2, 1, 28, 28)
        net.eval()
        with torch.no_grad():
            feats_x = torch.flatten(net.backbone(x), 1)
            feats_y = torch.flatten(net.backbone(y), 1)
            want = net.head(net.relu(net.fc1(torch.cat([feats_x, feats_y], dim=1))))
            got = net(x, y)
        torch.testing.assert_close(got, want)


class TestCheckpoints:
    def test_round_trip_bit_identical(self, tmp_path):
        m = nets.build_backbone(nets.ModelSpec("factornet", data.EXP_NOISE, tf.ROTATION))
        m.training_meta = {"seed": 7, "epochs": 1, "final_loss": 0.5, "train_source": "noise"}
        a, b = rand_images(3, 28, 1), rand_images(3, 28, 1, seed=5)
        before = m.predict_pairs(a, b)
        p = tmp_path / "ckpt.zip"
        nets.save_checkpoint(m, p)
        loaded = nets.load_checkpoint(p)
        np.testing.assert_array_equal(loaded.predict_pairs(a, b), before)
        assert loaded.training_meta["train_source"] == "noise"
        assert loaded.spec == m.spec

    def test_unknown_format_rejected(self, tmp_path):
        import json
        import zipfile

        p = tmp_path / "bad.zip"
        with zipfile.ZipFile(p, "w") as z:
            z.writestr("meta.json", json.dumps({"format": "other/9"}))
        with pytest.raises(ValueError, match="format"):
            nets.load_checkpoint(p)

    def test_checkpoint_is_not_a_pickle(self, tmp_path):
        m = nets.build_backbone(nets.ModelSpec("vanilla", data.EXP_MNIST, tf.ROTATION))
        p = tmp_path / "ckpt.zip"
        nets.save_checkpoint(m, p)
        import zipfile

        with zipfile.ZipFile(p) as z:
            names = z.namelist()
        assert "meta.json" in names
        assert all(n == "meta.json" or n.endswith(".npy") for n in names)
