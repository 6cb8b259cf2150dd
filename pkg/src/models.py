"""Data models for the DFBF toolkit"""
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

LAYER_KINDS = ("Conv2d", "BatchNorm2d", "ReLU", "MaxPool2d", "GlobalAvgPool", "Linear", "ResidualAdd")


@dataclass
class LayerSpec:
    """One node of a network graph.

    For Linear layers in_channels/out_channels are the feature counts.
    """
    id: str
    kind: str
    inputs: List[str]
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False
    tap: bool = False
    prunable: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LayerSpec':
        """Create a LayerSpec from its architecture-descriptor entry"""
        return cls(
            id=data['id'],
            kind=data['kind'],
            inputs=list(data['inputs']),
            in_channels=data.get('in_channels', 0),
            out_channels=data.get('out_channels', 0),
            kernel=data.get('kernel', 0),
            stride=data.get('stride', 1),
            padding=data.get('padding', 0),
            bias=data.get('bias', False),
            tap=data.get('tap', False),
            prunable=data.get('prunable', False),
        )


@dataclass
class PrunePlan:
    """Kept filters per pruned conv plus the input-channel rewiring they imply"""
    strategy: str
    global_ratio: float
    mode: str
    graph_fingerprint: str
    kept: Dict[str, List[int]] = field(default_factory=dict)
    original_filters: Dict[str, int] = field(default_factory=dict)
    rewiring: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PrunePlan':
        return cls(
            strategy=data['strategy'],
            global_ratio=data['global_ratio'],
            mode=data['mode'],
            graph_fingerprint=data['graph_fingerprint'],
            kept={k: list(v) for k, v in data.get('kept', {}).items()},
            original_filters=dict(data.get('original_filters', {})),
            rewiring={k: list(v) for k, v in data.get('rewiring', {}).items()},
        )

    def removed_filters(self) -> int:
        return sum(self.original_filters[k] - len(v) for k, v in self.kept.items())


@dataclass
class LayerPruneStats:
    layer: str
    filters_before: int
    filters_after: int
    prunable: bool


@dataclass
class PruneReport:
    """Removed filters and parameters, backbone only"""
    removed_filters_pct: float
    removed_filters_pct_backbone: float
    removed_params_pct: float
    backbone_params_before: int
    backbone_params_after: int
    layers: List[LayerPruneStats] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class MuSchedule:
    """Weights of the intermediate taps (mu) and of the output loss (mu_out)"""
    n_taps: int
    gamma: float
    mu: List[float]
    mu_out: float


@dataclass
class LabeledDataset:
    """Images [N,3,h,w] in [0,1] with integer labels in [0, num_classes)"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def checksum(self) -> str:
        digest = hashlib.sha256(np.ascontiguousarray(self.images, dtype='<f4').tobytes())
        digest.update(np.ascontiguousarray(self.labels, dtype=np.uint8).tobytes())
        return digest.hexdigest()


@dataclass
class SynthDataset:
    """Label-free synthetic images [M,3,h,w] and the header describing their origin"""
    images: np.ndarray
    header: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.images, dtype='<f4').tobytes()).hexdigest()


@dataclass
class LossRecord:
    """One fine-tuning step"""
    step: int
    epoch: int
    l_out: float
    l_inter: float
    l_total: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class MetricsRecord:
    phase: str
    step: int
    metric: str
    value: float
    wall_ms: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalResult:
    accuracy: float
    per_class: Dict[int, float]
    num_samples: int
    predictions: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'accuracy': self.accuracy,
            'per_class': {str(k): v for k, v in self.per_class.items()},
            'num_samples': self.num_samples,
        }
