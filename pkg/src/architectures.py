"""Desk-scale ResNet and VGG builders"""
import logging
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import ConfigError
from src.graph import INPUT, NetworkGraph
from src.models import LayerSpec

logger = logging.getLogger(__name__)

PlanToken = Union[int, str]


class _GraphBuilder:
    """Accumulates layers and Kaiming-uniform initialized parameters"""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: List[LayerSpec] = []
        self.params: Dict[str, Dict[str, Tensor]] = {}

    def _uniform(self, bound: float, shape) -> Tensor:
        return Tensor(self.rng.uniform(-bound, bound, size=shape).astype(np.float32))

    def conv(self, lid: str, src: str, cin: int, cout: int, kernel: int, stride: int = 1,
             prunable: bool = False) -> str:
        fan_in = cin * kernel * kernel
        self.layers.append(LayerSpec(id=lid, kind="Conv2d", inputs=[src], in_channels=cin,
                                     out_channels=cout, kernel=kernel, stride=stride,
                                     padding=kernel // 2, prunable=prunable))
        self.params[lid] = {"weight": self._uniform(np.sqrt(6.0 / fan_in), (cout, cin, kernel, kernel))}
        return lid

    def bn(self, lid: str, src: str, channels: int, tap: bool = False) -> str:
        self.layers.append(LayerSpec(id=lid, kind="BatchNorm2d", inputs=[src], in_channels=channels,
                                     out_channels=channels, tap=tap))
        self.params[lid] = {
            "gamma": Tensor(np.ones(channels, dtype=np.float32)),
            "beta": Tensor(np.zeros(channels, dtype=np.float32)),
            "running_mean": Tensor(np.zeros(channels, dtype=np.float32)),
            "running_var": Tensor(np.ones(channels, dtype=np.float32)),
        }
        return lid

    def simple(self, lid: str, kind: str, inputs: List[str], tap: bool = False, **hyper) -> str:
        self.layers.append(LayerSpec(id=lid, kind=kind, inputs=inputs, tap=tap, **hyper))
        return lid

    def linear(self, lid: str, src: str, fin: int, fout: int) -> str:
        self.layers.append(LayerSpec(id=lid, kind="Linear", inputs=[src], in_channels=fin,
                                     out_channels=fout, bias=True))
        self.params[lid] = {
            "weight": self._uniform(np.sqrt(6.0 / fin), (fout, fin)),
            "bias": self._uniform(1.0 / np.sqrt(fin), (fout,)),
        }
        return lid

    def build(self, boundary: str) -> NetworkGraph:
        return NetworkGraph(self.layers, self.params, backbone_boundary=boundary)


def build_resnet_tiny(stage_channels: Sequence[int], blocks_per_stage: Sequence[int],
                      num_classes: int, seed: int = 0) -> NetworkGraph:
    """Stem + basic residual blocks + global pooling boundary + linear head.

    Only the first conv of each block is prunable so residual joins and
    block-output taps keep their width.
    """
    if not stage_channels or not blocks_per_stage:
        raise ConfigError("stage_channels and blocks_per_stage must be non-empty")
    if len(stage_channels) != len(blocks_per_stage):
        raise ConfigError("stage_channels and blocks_per_stage must have the same length")
    if min(stage_channels) < 1 or min(blocks_per_stage) < 1 or num_classes < 1:
        raise ConfigError("channel, block and class counts must all be >= 1")

    b = _GraphBuilder(np.random.default_rng(seed))
    width = stage_channels[0]
    b.conv("stem.conv", INPUT, 3, width, 3)
    b.bn("stem.bn", "stem.conv", width)
    x = b.simple("stem.relu", "ReLU", ["stem.bn"])

    for s, (channels, blocks) in enumerate(zip(stage_channels, blocks_per_stage)):
        for k in range(blocks):
            stride = 2 if s > 0 and k == 0 else 1
            p = f"s{s}.b{k}"
            b.conv(f"{p}.conv1", x, width, channels, 3, stride, prunable=True)
            b.bn(f"{p}.bn1", f"{p}.conv1", channels)
            b.simple(f"{p}.relu1", "ReLU", [f"{p}.bn1"])
            b.conv(f"{p}.conv2", f"{p}.relu1", channels, channels, 3)
            b.bn(f"{p}.bn2", f"{p}.conv2", channels)
            shortcut = x
            if stride != 1 or width != channels:
                b.conv(f"{p}.proj", x, width, channels, 1, stride)
                shortcut = b.bn(f"{p}.proj_bn", f"{p}.proj", channels)
            b.simple(f"{p}.add", "ResidualAdd", [f"{p}.bn2", shortcut])
            x = b.simple(f"{p}.relu", "ReLU", [f"{p}.add"], tap=True)
            width = channels

    b.simple("pool", "GlobalAvgPool", [x], tap=True)
    b.linear("fc", "pool", width, num_classes)
    graph = b.build(boundary="pool")
    logger.debug(f"Built ResNet-tiny {list(stage_channels)}x{list(blocks_per_stage)} "
                 f"with {graph.num_parameters()} parameters")
    return graph


def build_vgg_tiny(conv_plan: Sequence[PlanToken], num_classes: int, seed: int = 0) -> NetworkGraph:
    """Conv-BN-ReLU stacks with "M" max-pool entries; head is global pooling + linear.

    Every BatchNorm output is a tap candidate; the last conv stays unpruned
    so the backbone output keeps its width.
    """
    convs = [t for t in conv_plan if not isinstance(t, str)]
    for token in conv_plan:
        if isinstance(token, bool) or not (token == "M" or (isinstance(token, int) and token >= 1)):
            raise ConfigError(f"malformed VGG plan token {token!r}; use positive ints or 'M'")
    if not convs:
        raise ConfigError("VGG plan needs at least one conv entry")
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")

    b = _GraphBuilder(np.random.default_rng(seed))
    x, width, conv_index, pool_index = INPUT, 3, 0, 0
    for token in conv_plan:
        if token == "M":
            x = b.simple(f"pool{pool_index}", "MaxPool2d", [x], kernel=2, stride=2)
            pool_index += 1
            continue
        last = conv_index == len(convs) - 1
        b.conv(f"conv{conv_index}", x, width, token, 3, prunable=not last)
        b.bn(f"bn{conv_index}", f"conv{conv_index}", token, tap=True)
        x = b.simple(f"relu{conv_index}", "ReLU", [f"bn{conv_index}"])
        width = token
        conv_index += 1

    boundary = x
    b.simple("head.pool", "GlobalAvgPool", [boundary])
    b.linear("head.fc", "head.pool", width, num_classes)
    return b.build(boundary=boundary)


def build_model(section, seed: Optional[int] = None) -> NetworkGraph:
    """Build the architecture named by a ``model`` config section"""
    seed = section.init_seed if seed is None else seed
    if section.arch == "resnet_tiny":
        return build_resnet_tiny(section.stage_channels, section.blocks_per_stage, section.num_classes, seed)
    if section.arch == "vgg_tiny":
        return build_vgg_tiny(section.vgg_plan, section.num_classes, seed)
    raise ConfigError(f"unknown architecture {section.arch!r}")
