"""Shared fixtures: tiny graphs, seeded generators, temporary run directories"""
import numpy as np
import pytest

from src.architectures import build_resnet_tiny, build_vgg_tiny
from src.autodiff.tensor import Tensor
from src.config import RunConfig
from src.graph import NetworkGraph
from src.storage import RunDirectory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def resnet():
    return build_resnet_tiny([4, 8], [1, 1], num_classes=3, seed=0)


@pytest.fixture
def vgg():
    return build_vgg_tiny([4, "M", 8, 8], num_classes=3, seed=0)


@pytest.fixture
def images(rng):
    return rng.uniform(0.0, 1.0, size=(4, 3, 8, 8)).astype(np.float32)


@pytest.fixture
def run_dir(tmp_path):
    return RunDirectory(tmp_path / "run")


@pytest.fixture
def smoke_config():
    return RunConfig.model_validate({
        "seed": 0,
        "model": {"arch": "resnet_tiny", "stage_channels": [4, 8], "blocks_per_stage": [1, 1], "num_classes": 4},
        "data": {"dataset": "shapes", "shapes_train_per_class": 6, "shapes_test_per_class": 3, "image_size": 16},
        "train": {"epochs": 1, "batch_size": 8},
        "prune": {"ratio": 0.5},
        "synth": {"image_size": [16, 16], "num_images": 6, "batch_size": 4, "steps": 2},
        "distill": {"epochs": 1, "batch_size": 4},
        "eval": {"batch_size": 16},
    })


def as_float64(graph: NetworkGraph) -> NetworkGraph:
    """Copy of ``graph`` with every tensor promoted to float64"""
    params = {lid: {name: Tensor(t.data.astype(np.float64)) for name, t in tensors.items()}
              for lid, tensors in graph.params.items()}
    return NetworkGraph(graph.layers, params, graph.backbone_boundary, graph.input_channels)


def randomize_bn(graph: NetworkGraph, rng: np.random.Generator) -> NetworkGraph:
    """Give every BatchNorm non-trivial affine and running statistics"""
    for layer in graph.layers:
        if layer.kind == "BatchNorm2d":
            p = graph.params[layer.id]
            n = p["gamma"].shape[0]
            p["gamma"].data[...] = rng.uniform(0.5, 1.5, n)
            p["beta"].data[...] = rng.normal(0.0, 0.1, n)
            p["running_mean"].data[...] = rng.normal(0.0, 0.2, n)
            p["running_var"].data[...] = rng.uniform(0.5, 1.5, n)
    return graph
