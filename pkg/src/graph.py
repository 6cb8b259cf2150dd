"""Layer graph of a backbone + head network"""
import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from src.autodiff import functional as F
from src.autodiff.functional import BatchStats
from src.autodiff.tensor import Tensor
from src.errors import ShapeError, StructuralError
from src.models import LAYER_KINDS, LayerSpec

logger = logging.getLogger(__name__)

INPUT = "input"
ARCHITECTURE_VERSION = 1
BUFFER_NAMES = ("running_mean", "running_var")
PASS_THROUGH_KINDS = ("BatchNorm2d", "ReLU", "MaxPool2d", "GlobalAvgPool")


@dataclass
class ForwardResult:
    """Output of a graph execution plus whatever was captured along the way"""
    output: Tensor
    taps: List[Tuple[str, Tensor]] = field(default_factory=list)
    bn_stats: List[Tuple[str, BatchStats]] = field(default_factory=list)


class NetworkGraph:
    """Topologically ordered layers with named parameter tensors.

    Layers up to and including ``backbone_boundary`` form the backbone b(x);
    the remaining layers form the head h(z).
    """

    def __init__(self, layers: Iterable[LayerSpec], params: Dict[str, Dict[str, Tensor]],
                 backbone_boundary: str, input_channels: int = 3, mode: str = "eval",
                 bn_momentum: float = 0.1, bn_eps: float = 1e-5):
        self.layers: List[LayerSpec] = list(layers)
        self.params = params
        self.backbone_boundary = backbone_boundary
        self.input_channels = input_channels
        self.mode = mode
        self.bn_momentum = bn_momentum
        self.bn_eps = bn_eps
        self.validate()

    # ------------------------------------------------------------------ structure

    def validate(self) -> None:
        """Check DAG order, arities, boundary placement and channel bookkeeping"""
        seen: Dict[str, LayerSpec] = {}
        channels: Dict[str, int] = {INPUT: self.input_channels}
        ids = [layer.id for layer in self.layers]
        if self.backbone_boundary not in ids:
            raise StructuralError(f"backbone boundary {self.backbone_boundary!r} is not a layer")
        boundary_pos = ids.index(self.backbone_boundary)

        for pos, layer in enumerate(self.layers):
            if layer.id in seen or layer.id == INPUT:
                raise StructuralError(f"duplicate or reserved layer id {layer.id!r}")
            if layer.kind not in LAYER_KINDS:
                raise StructuralError(f"layer {layer.id}: unknown kind {layer.kind!r}")
            arity = 2 if layer.kind == "ResidualAdd" else 1
            if len(layer.inputs) != arity:
                raise StructuralError(f"layer {layer.id}: {layer.kind} needs {arity} input(s), has {len(layer.inputs)}")
            for src in layer.inputs:
                if src != INPUT and src not in seen:
                    raise StructuralError(f"layer {layer.id}: input {src!r} is not an earlier layer")
                if pos > boundary_pos and src != self.backbone_boundary and self._position(src) <= boundary_pos:
                    raise StructuralError(f"head layer {layer.id} may only consume the backbone boundary")
            if layer.kind == "BatchNorm2d":
                producer = seen.get(layer.inputs[0])
                if producer is None or producer.kind != "Conv2d":
                    raise StructuralError(f"layer {layer.id}: BatchNorm2d must follow a Conv2d")
            channels[layer.id] = self._check_channels(layer, [channels[s] for s in layer.inputs])
            seen[layer.id] = layer

    def _position(self, layer_id: str) -> int:
        if layer_id == INPUT:
            return -1
        return [layer.id for layer in self.layers].index(layer_id)

    def _check_channels(self, layer: LayerSpec, incoming: List[int]) -> int:
        params = self.params.get(layer.id, {})

        def expect(name: str, shape: Tuple[int, ...]) -> None:
            if name not in params:
                raise StructuralError(f"layer {layer.id}: missing parameter {name}")
            if params[name].shape != shape:
                raise StructuralError(f"layer {layer.id}: {name} has shape {params[name].shape}, expected {shape}")

        if layer.kind in ("Conv2d", "Linear"):
            if incoming[0] != layer.in_channels:
                raise StructuralError(f"layer {layer.id}: expects {layer.in_channels} channels, receives {incoming[0]}")
            if layer.kind == "Conv2d":
                expect("weight", (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
            else:
                expect("weight", (layer.out_channels, layer.in_channels))
            if layer.bias:
                expect("bias", (layer.out_channels,))
            return layer.out_channels
        if layer.kind == "BatchNorm2d":
            for name in ("gamma", "beta") + BUFFER_NAMES:
                expect(name, (incoming[0],))
            return incoming[0]
        if layer.kind == "ResidualAdd":
            if incoming[0] != incoming[1]:
                raise StructuralError(f"layer {layer.id}: residual inputs carry {incoming[0]} and {incoming[1]} channels")
        return incoming[0]

    def layer(self, layer_id: str) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(layer_id)

    def successors(self, layer_id: str) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer_id in layer.inputs]

    @property
    def boundary_index(self) -> int:
        return [layer.id for layer in self.layers].index(self.backbone_boundary)

    def backbone_layers(self) -> List[LayerSpec]:
        return self.layers[:self.boundary_index + 1]

    def head_layers(self) -> List[LayerSpec]:
        return self.layers[self.boundary_index + 1:]

    def in_head(self, layer_id: str) -> bool:
        return any(layer.id == layer_id for layer in self.head_layers())

    def tap_layers(self) -> List[str]:
        """Intermediate tap ids, shallowest first; the boundary output is not a tap"""
        return [layer.id for layer in self.backbone_layers()
                if layer.tap and layer.id != self.backbone_boundary]

    # ------------------------------------------------------------------ execution

    def train(self) -> "NetworkGraph":
        self.mode = "train"
        return self

    def eval(self) -> "NetworkGraph":
        self.mode = "eval"
        return self

    def execute(self, x: Tensor, capture_taps: bool = False, stop_at_boundary: bool = False,
                from_boundary: bool = False, bn_mode: Optional[str] = None,
                collect_bn_stats: bool = False) -> ForwardResult:
        """Run the graph on x.

        ``from_boundary`` treats x as the backbone output z and runs the head
        only; ``stop_at_boundary`` returns z. ``bn_mode`` overrides the graph
        mode for BatchNorm layers (train, eval or synthesis).
        """
        mode = bn_mode or self.mode
        if from_boundary:
            values = {self.backbone_boundary: x}
            sequence = self.head_layers()
        else:
            if x.ndim != 4 or x.shape[1] != self.input_channels:
                raise ShapeError(f"graph expects [B,{self.input_channels},H,W] input, got {x.shape}")
            values = {INPUT: x}
            sequence = self.backbone_layers() if stop_at_boundary else self.layers

        result = ForwardResult(output=x)
        for layer in sequence:
            try:
                out, stats = self._run_layer(layer, [values[s] for s in layer.inputs], mode)
            except ShapeError as e:
                raise ShapeError(f"layer {layer.id}: {e}") from e
            values[layer.id] = out
            if stats is not None and collect_bn_stats:
                result.bn_stats.append((layer.id, stats))
            if capture_taps and layer.tap and layer.id != self.backbone_boundary:
                result.taps.append((layer.id, out))
            result.output = out
        return result

    def _run_layer(self, layer: LayerSpec, args: List[Tensor], mode: str):
        p = self.params.get(layer.id, {})
        if layer.kind == "Conv2d":
            return F.conv2d(args[0], p["weight"], p.get("bias"), layer.stride, layer.padding), None
        if layer.kind == "BatchNorm2d":
            return F.batchnorm2d(args[0], p["gamma"], p["beta"], p["running_mean"], p["running_var"],
                                 mode=mode, momentum=self.bn_momentum, eps=self.bn_eps)
        if layer.kind == "ReLU":
            return F.relu(args[0]), None
        if layer.kind == "MaxPool2d":
            return F.maxpool2d(args[0], layer.kernel, layer.stride), None
        if layer.kind == "GlobalAvgPool":
            return F.global_avg_pool(args[0]), None
        if layer.kind == "Linear":
            return F.linear(args[0], p["weight"], p.get("bias")), None
        return F.add(args[0], args[1]), None

    def forward(self, x: Tensor, capture_taps: bool = False,
                stop_at_boundary: bool = False) -> Tuple[Tensor, List[Tuple[str, Tensor]]]:
        """Return (y, taps), or (z, taps) when stopping at the boundary"""
        result = self.execute(x, capture_taps=capture_taps, stop_at_boundary=stop_at_boundary)
        return result.output, result.taps

    def backbone_forward(self, x: Tensor) -> Tensor:
        return self.execute(x, stop_at_boundary=True).output

    def head_forward(self, z: Tensor) -> Tensor:
        return self.execute(z, from_boundary=True).output

    # ------------------------------------------------------------------ parameters

    def parameters(self, scope: str = "all", include_buffers: bool = False) -> Dict[str, Tensor]:
        """Tensors named ``<layer>.<param>``, restricted to backbone or head on request"""
        if scope == "backbone":
            layers = self.backbone_layers()
        elif scope == "head":
            layers = self.head_layers()
        elif scope == "all":
            layers = self.layers
        else:
            raise ValueError(f"unknown parameter scope {scope!r}")
        named = {}
        for layer in layers:
            for name, tensor in self.params.get(layer.id, {}).items():
                if include_buffers or name not in BUFFER_NAMES:
                    named[f"{layer.id}.{name}"] = tensor
        return named

    def set_trainable(self, scope: Optional[str]) -> Dict[str, Tensor]:
        """Make exactly the parameters in ``scope`` require gradients (None freezes all)"""
        trainable = self.parameters(scope) if scope else {}
        for name, tensor in self.parameters("all", include_buffers=True).items():
            tensor.requires_grad = name in trainable
            tensor.grad = None
        logger.debug(f"{len(trainable)} trainable tensors (scope={scope})")
        return trainable

    def num_parameters(self, scope: str = "all") -> int:
        return int(sum(t.size for t in self.parameters(scope).values()))

    def tensor_digests(self, scope: str = "all") -> Dict[str, str]:
        """SHA-256 of every tensor (buffers included), keyed by name"""
        digests = {}
        for name, tensor in self.parameters(scope, include_buffers=True).items():
            h = hashlib.sha256(f"{tensor.dtype.str}{tensor.shape}".encode())
            h.update(tensor.data.tobytes())
            digests[name] = h.hexdigest()
        return digests

    def fingerprint(self) -> str:
        payload = json.dumps({"architecture": self.architecture(), "tensors": self.tensor_digests()},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def fingerprint_scope(self, scope: str) -> str:
        """Hash over the tensor digests of one scope (e.g. the head alone)"""
        payload = json.dumps(self.tensor_digests(scope), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()

    def architecture(self) -> Dict:
        return {
            "version": ARCHITECTURE_VERSION,
            "input_channels": self.input_channels,
            "backbone_boundary": self.backbone_boundary,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_architecture(cls, descriptor: Dict, params: Dict[str, Dict[str, Tensor]]) -> "NetworkGraph":
        if descriptor.get("version") != ARCHITECTURE_VERSION:
            raise StructuralError(f"unsupported architecture descriptor version {descriptor.get('version')}")
        return cls(
            layers=[LayerSpec.from_dict(entry) for entry in descriptor["layers"]],
            params=params,
            backbone_boundary=descriptor["backbone_boundary"],
            input_channels=descriptor.get("input_channels", 3),
            bn_momentum=descriptor.get("bn_momentum", 0.1),
            bn_eps=descriptor.get("bn_eps", 1e-5),
        )

    def copy(self) -> "NetworkGraph":
        params = {lid: {name: t.copy() for name, t in tensors.items()} for lid, tensors in self.params.items()}
        return NetworkGraph(copy.deepcopy(self.layers), params, self.backbone_boundary,
                            self.input_channels, self.mode, self.bn_momentum, self.bn_eps)

    def filter_counts(self) -> Dict[str, int]:
        """Output filters of every backbone conv"""
        return {layer.id: self.params[layer.id]["weight"].shape[0]
                for layer in self.backbone_layers() if layer.kind == "Conv2d"}

    def summary(self) -> List[Dict]:
        rows = []
        for layer in self.layers:
            rows.append({
                "id": layer.id,
                "kind": layer.kind,
                "out": layer.out_channels or "",
                "params": int(sum(t.size for n, t in self.params.get(layer.id, {}).items()
                                  if n not in BUFFER_NAMES)),
                "tap": layer.tap,
                "prunable": layer.prunable,
                "part": "head" if self.in_head(layer.id) else "backbone",
            })
        return rows
