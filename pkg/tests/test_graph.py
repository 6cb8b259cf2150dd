import numpy as np
import pytest

from conftest import as_float64
from src.architectures import build_model, build_resnet_tiny, build_vgg_tiny
from src.autodiff.tensor import Tensor
from src.config import ModelSection
from src.errors import ConfigError, ShapeError, StructuralError
from src.graph import INPUT, NetworkGraph
from src.models import LayerSpec


def two_layer_graph():
    layers = [
        LayerSpec(id="conv", kind="Conv2d", inputs=[INPUT], in_channels=3, out_channels=2, kernel=1),
        LayerSpec(id="pool", kind="GlobalAvgPool", inputs=["conv"]),
        LayerSpec(id="fc", kind="Linear", inputs=["pool"], in_channels=2, out_channels=2, bias=True),
    ]
    params = {
        "conv": {"weight": Tensor(np.ones((2, 3, 1, 1)))},
        "fc": {"weight": Tensor(np.eye(2)), "bias": Tensor(np.zeros(2))},
    }
    return layers, params


class TestStructure:
    def test_resnet_layout(self, resnet):
        ids = [layer.id for layer in resnet.layers]
        assert ids[:3] == ["stem.conv", "stem.bn", "stem.relu"]
        assert resnet.backbone_boundary == "pool"
        assert [layer.id for layer in resnet.head_layers()] == ["fc"]
        assert resnet.tap_layers() == ["s0.b0.relu", "s1.b0.relu"]
        assert "s1.b0.proj" in ids
        assert "s0.b0.proj" not in ids

    def test_resnet_prunable_layers(self, resnet):
        prunable = [layer.id for layer in resnet.layers if layer.prunable]
        assert prunable == ["s0.b0.conv1", "s1.b0.conv1"]

    def test_vgg_layout(self, vgg):
        assert vgg.backbone_boundary == "relu2"
        assert vgg.tap_layers() == ["bn0", "bn1", "bn2"]
        assert not vgg.layer("conv2").prunable
        assert [layer.id for layer in vgg.head_layers()] == ["head.pool", "head.fc"]

    def test_vgg_rejects_malformed_plan(self):
        with pytest.raises(ConfigError):
            build_vgg_tiny([4, "X"], num_classes=2)
        with pytest.raises(ConfigError):
            build_vgg_tiny(["M"], num_classes=2)

    def test_resnet_rejects_mismatched_stages(self):
        with pytest.raises(ConfigError):
            build_resnet_tiny([4, 8], [1], num_classes=2)

    def test_builders_are_seeded(self):
        a = build_resnet_tiny([4], [1], 2, seed=3)
        b = build_resnet_tiny([4], [1], 2, seed=3)
        c = build_resnet_tiny([4], [1], 2, seed=4)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != c.fingerprint()

    def test_build_model_dispatch(self):
        graph = build_model(ModelSection(arch="vgg_tiny", vgg_plan=[4, "M", 8], num_classes=2))
        assert graph.layer("head.fc").out_channels == 2

    def test_head_may_only_consume_boundary(self):
        layers, params = two_layer_graph()
        layers[2].inputs = ["conv"]
        with pytest.raises(StructuralError):
            NetworkGraph(layers, params, backbone_boundary="pool")

    def test_unknown_input_rejected(self):
        layers, params = two_layer_graph()
        layers[1].inputs = ["missing"]
        with pytest.raises(StructuralError):
            NetworkGraph(layers, params, backbone_boundary="pool")

    def test_parameter_shape_checked(self):
        layers, params = two_layer_graph()
        params["conv"]["weight"] = Tensor(np.ones((2, 4, 1, 1)))
        with pytest.raises(StructuralError):
            NetworkGraph(layers, params, backbone_boundary="pool")

    def test_batchnorm_must_follow_conv(self):
        layers = [
            LayerSpec(id="relu", kind="ReLU", inputs=[INPUT]),
            LayerSpec(id="bn", kind="BatchNorm2d", inputs=["relu"], in_channels=3, out_channels=3),
        ]
        params = {"bn": {name: Tensor(np.ones(3)) for name in ("gamma", "beta", "running_mean", "running_var")}}
        with pytest.raises(StructuralError):
            NetworkGraph(layers, params, backbone_boundary="bn")


class TestForward:
    def test_forward_equals_head_of_backbone(self, resnet, images):
        x = Tensor(images)
        y, _ = resnet.forward(x)
        z = resnet.backbone_forward(x)
        np.testing.assert_allclose(resnet.head_forward(z).data, y.data, rtol=1e-6)

    def test_taps_captured_in_depth_order(self, resnet, images):
        _, taps = resnet.forward(Tensor(images), capture_taps=True)
        assert [name for name, _ in taps] == ["s0.b0.relu", "s1.b0.relu"]
        assert taps[1][1].shape == (4, 8, 4, 4)

    def test_stop_at_boundary_returns_features(self, vgg, images):
        z, _ = vgg.forward(Tensor(images), stop_at_boundary=True)
        assert z.shape == (4, 8, 4, 4)

    def test_eval_forward_leaves_buffers(self, resnet, images):
        before = resnet.tensor_digests()
        resnet.eval().forward(Tensor(images))
        assert resnet.tensor_digests() == before

    def test_train_forward_updates_buffers(self, resnet, images):
        before = resnet.tensor_digests()
        resnet.train().forward(Tensor(images))
        assert resnet.tensor_digests() != before

    def test_eval_forwards_are_bitwise_identical(self, resnet, images):
        first = resnet.eval().forward(Tensor(images), capture_taps=True)
        second = resnet.eval().forward(Tensor(images), capture_taps=True)
        assert first[0].data.tobytes() == second[0].data.tobytes()
        for (name_a, a), (name_b, b) in zip(first[1], second[1]):
            assert name_a == name_b
            assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.parametrize("builder", ["resnet", "vgg"])
    def test_full_momentum_running_stats_reproduce_train_output(self, builder, request, rng):
        graph = as_float64(request.getfixturevalue(builder))
        graph.bn_momentum = 1.0
        x = Tensor(rng.uniform(0.0, 1.0, size=(4, 3, 8, 8)))
        trained = graph.execute(x, bn_mode="train").output.data
        evaluated = graph.execute(x, bn_mode="eval").output.data
        np.testing.assert_allclose(evaluated, trained, atol=1e-6)

    def test_wrong_input_channels(self, resnet):
        with pytest.raises(ShapeError):
            resnet.forward(Tensor(np.zeros((1, 1, 8, 8))))

    def test_shape_error_names_layer(self, vgg):
        with pytest.raises(ShapeError, match="pool"):
            vgg.forward(Tensor(np.zeros((1, 3, 1, 1))))


class TestParameters:
    def test_scopes_partition_parameters(self, resnet):
        backbone = resnet.parameters("backbone")
        head = resnet.parameters("head")
        assert set(head) == {"fc.weight", "fc.bias"}
        assert not set(backbone) & set(head)
        assert set(backbone) | set(head) == set(resnet.parameters("all"))

    def test_buffers_only_on_request(self, resnet):
        assert "stem.bn.running_mean" not in resnet.parameters()
        assert "stem.bn.running_mean" in resnet.parameters(include_buffers=True)

    def test_set_trainable(self, resnet):
        trainable = resnet.set_trainable("backbone")
        assert all(t.requires_grad for t in trainable.values())
        assert not resnet.params["fc"]["weight"].requires_grad
        assert not resnet.params["stem.bn"]["running_var"].requires_grad
        resnet.set_trainable(None)
        assert not any(t.requires_grad for t in resnet.parameters("all", include_buffers=True).values())

    def test_num_parameters(self, resnet):
        assert resnet.num_parameters("head") == 8 * 3 + 3
        assert resnet.num_parameters() == resnet.num_parameters("backbone") + resnet.num_parameters("head")

    def test_copy_is_independent(self, resnet):
        clone = resnet.copy()
        clone.params["fc"]["weight"].data[...] = 0.0
        clone.layer("fc").tap = True
        assert np.any(resnet.params["fc"]["weight"].data != 0.0)
        assert not resnet.layer("fc").tap

    def test_architecture_round_trip(self, vgg):
        rebuilt = NetworkGraph.from_architecture(vgg.architecture(), vgg.copy().params)
        assert rebuilt.fingerprint() == vgg.fingerprint()

    def test_unsupported_descriptor_version(self, vgg):
        descriptor = vgg.architecture()
        descriptor["version"] = 99
        with pytest.raises(StructuralError):
            NetworkGraph.from_architecture(descriptor, vgg.params)

    def test_head_fingerprint_ignores_backbone(self, resnet):
        before = resnet.fingerprint_scope("head")
        resnet.params["stem.conv"]["weight"].data[...] += 1.0
        assert resnet.fingerprint_scope("head") == before
