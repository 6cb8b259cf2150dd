import numpy as np
import pytest

from conftest import randomize_bn
from src.architectures import build_resnet_tiny, build_vgg_tiny
from src.autodiff.tensor import Tensor
from src.errors import ConfigError, StructuralError
from src.models import PrunePlan
from src.pruning import (
    apply_prune,
    plan_prune,
    removal_counts,
    report,
    score_filters_l1,
    select_kept,
)


def masked_original(graph, plan):
    """Original graph with the removed input channels of every consumer zeroed"""
    oracle = graph.copy()
    for consumer, kept in plan.rewiring.items():
        weight = oracle.params[consumer]["weight"].data
        dropped = np.setdiff1d(np.arange(weight.shape[1]), kept)
        weight[:, dropped] = 0.0
    return oracle


def expected_kept(scores, n_remove):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:len(scores) - n_remove])


class TestSelection:
    def test_l1_scores(self):
        weight = np.zeros((3, 2, 1, 1))
        weight[0] = -1.0
        weight[2, 0] = 0.5
        np.testing.assert_allclose(score_filters_l1(Tensor(weight)), [2.0, 0.0, 0.5])

    def test_ties_keep_lower_index(self):
        assert select_kept(np.array([1.0, 2.0, 1.0, 1.0]), 2) == [0, 1]

    def test_uniform_counts(self):
        assert removal_counts({"a": 4, "b": 10}, 0.25, "uniform") == {"a": 1, "b": 2}

    def test_size_weighted_equals_uniform_for_equal_layers(self):
        assert removal_counts({"a": 10, "b": 10}, 0.5, "size_weighted") == {"a": 5, "b": 5}

    def test_size_weighted_prefers_wide_layers(self):
        counts = removal_counts({"narrow": 8, "wide": 32}, 0.4, "size_weighted")
        assert counts["wide"] / 32 > counts["narrow"] / 8
        assert all(counts[lid] <= int(0.9 * f) for lid, f in {"narrow": 8, "wide": 32}.items())
        assert abs(sum(counts.values()) - 0.4 * 40) <= 2


class TestPlan:
    @pytest.mark.parametrize("ratio", [1.0, -0.1, 1.5])
    def test_ratio_outside_unit_interval(self, vgg, ratio):
        with pytest.raises(ConfigError, match=r"ratio must be in \[0,1\)"):
            plan_prune(vgg, ratio)

    def test_unknown_strategy_and_mode(self, vgg):
        with pytest.raises(ConfigError):
            plan_prune(vgg, 0.5, strategy="random")
        with pytest.raises(ConfigError):
            plan_prune(vgg, 0.5, mode="greedy")

    def test_zero_ratio_is_identity(self, resnet, images):
        pruned = apply_prune(resnet, plan_prune(resnet, 0.0))
        assert pruned.fingerprint() == resnet.fingerprint()
        np.testing.assert_array_equal(pruned.forward(Tensor(images))[0].data, resnet.forward(Tensor(images))[0].data)

    def test_bn_scale_ranks_by_gamma(self, vgg):
        vgg.params["bn0"]["gamma"].data[...] = [0.1, -0.9, 0.5, 0.2]
        plan = plan_prune(vgg, 0.5, strategy="bn_scale")
        assert plan.kept["conv0"] == [1, 2]
        assert plan.rewiring["conv1"] == [1, 2]

    def test_plan_serializes(self, resnet):
        plan = plan_prune(resnet, 0.5)
        assert PrunePlan.from_dict(plan.to_dict()) == plan

    def test_fingerprint_mismatch(self, vgg):
        plan = plan_prune(vgg, 0.5)
        vgg.params["conv0"]["weight"].data[0, 0, 0, 0] += 1.0
        with pytest.raises(StructuralError, match="different graph"):
            apply_prune(vgg, plan)

    def test_boundary_width_is_protected(self, vgg):
        vgg.layer("conv2").prunable = True
        with pytest.raises(StructuralError):
            plan_prune(vgg, 0.5)

    def test_residual_join_is_protected(self, resnet):
        resnet.layer("s0.b0.conv2").prunable = True
        with pytest.raises(StructuralError, match="residual"):
            plan_prune(resnet, 0.5)


class TestApply:
    def test_vgg_shapes_taps_and_report(self, vgg):
        pruned = apply_prune(vgg, plan_prune(vgg, 0.5))
        assert pruned.filter_counts() == {"conv0": 2, "conv1": 4, "conv2": 8}
        assert pruned.params["conv2"]["weight"].shape == (8, 4, 3, 3)
        assert pruned.params["bn0"]["running_var"].shape == (2,)
        assert pruned.tap_layers() == ["bn2"]
        assert vgg.tap_layers() == ["bn0", "bn1", "bn2"]

        stats = report(vgg, pruned)
        assert stats.removed_filters_pct == pytest.approx(50.0)
        assert stats.removed_filters_pct_backbone == pytest.approx(30.0)
        assert stats.backbone_params_before == 1012
        assert stats.backbone_params_after == 442
        assert stats.removed_params_pct == pytest.approx(100.0 * 570 / 1012)

    def test_resnet_keeps_taps_and_head(self, resnet):
        pruned = apply_prune(resnet, plan_prune(resnet, 0.5))
        assert pruned.tap_layers() == resnet.tap_layers()
        assert pruned.filter_counts()["s1.b0.conv1"] == 4
        assert pruned.params["s1.b0.conv2"]["weight"].shape == (8, 4, 3, 3)
        assert pruned.tensor_digests("head") == resnet.tensor_digests("head")

    def test_larger_ratios_remove_more(self):
        graph = build_resnet_tiny([8, 16], [1, 1], num_classes=3, seed=0)
        pruned = [apply_prune(graph, plan_prune(graph, r)) for r in (0.1, 0.2, 0.3, 0.4)]
        params = [p.num_parameters("backbone") for p in pruned]
        assert all(a > b for a, b in zip(params, params[1:]))
        assert params[0] < graph.num_parameters("backbone")
        removed = [report(graph, p).removed_params_pct for p in pruned]
        assert removed == sorted(removed)

    @pytest.mark.parametrize("strategy", ["l1", "bn_scale"])
    def test_filter_counts_never_grow_with_ratio(self, strategy, rng):
        graph = randomize_bn(build_vgg_tiny([8, "M", 12, 16, "M", 8], num_classes=3, seed=0), rng)
        previous = graph.filter_counts()
        for ratio in np.linspace(0.0, 0.85, 12):
            counts = apply_prune(graph, plan_prune(graph, float(ratio), strategy=strategy)).filter_counts()
            assert all(counts[k] <= previous[k] for k in counts)
            previous = counts

    def test_original_is_untouched(self, resnet):
        before = resnet.fingerprint()
        apply_prune(resnet, plan_prune(resnet, 0.5))
        assert resnet.fingerprint() == before

    def test_params_pct_matches_tensor_recount(self, resnet):
        pruned = apply_prune(resnet, plan_prune(resnet, 0.5, mode="size_weighted"))

        def count(graph):
            return sum(t.size for layer in graph.backbone_layers()
                       for name, t in graph.params.get(layer.id, {}).items()
                       if not name.startswith("running_"))

        stats = report(resnet, pruned)
        assert stats.removed_params_pct == pytest.approx(100.0 * (count(resnet) - count(pruned)) / count(resnet))

    @pytest.mark.parametrize("seed", range(50))
    def test_pruned_network_matches_masked_original(self, seed):
        rng = np.random.default_rng(seed)
        if seed % 2:
            graph = build_resnet_tiny([4, 6], [1, 2], num_classes=3, seed=seed)
        else:
            graph = build_vgg_tiny([6, "M", 5, 4], num_classes=3, seed=seed)
        randomize_bn(graph, rng)
        ratio = float(rng.uniform(0.0, 0.9))
        strategy = ["l1", "bn_scale"][seed % 4 // 2]
        mode = ["uniform", "size_weighted"][seed % 3 % 2]

        plan = plan_prune(graph, ratio, strategy=strategy, mode=mode)
        for conv_id, kept in plan.kept.items():
            if strategy == "l1":
                scores = np.abs(graph.params[conv_id]["weight"].data.astype(np.float64)).sum(axis=(1, 2, 3))
            else:
                bn_id = conv_id.replace("conv", "bn")
                scores = np.abs(graph.params[bn_id]["gamma"].data.astype(np.float64))
            assert kept == expected_kept(scores, plan.original_filters[conv_id] - len(kept))

        pruned = apply_prune(graph, plan)
        x = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, 8, 8)).astype(np.float32))
        expected = masked_original(graph, plan).forward(x)[0].data
        np.testing.assert_allclose(pruned.forward(x)[0].data, expected, rtol=1e-4, atol=1e-5)
