"""Backbone fine-tuning by feature-map distillation.

The pruned backbone learns to reproduce the unpruned backbone's output z
and its intermediate tap activations on synthetic images:

    L_DFBF = mu_out * L_out + sum_n mu_n * L_n
    mu_n   = n / (N + 1) * gamma + 1,    mu_out = gamma + 1

Every l1 term sums over channels, averages over the spatial positions and
over the batch. Taps are numbered shallow to deep starting at n = 1. The
head is never touched; the full model is the pruned backbone followed by
the original head.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.autodiff import functional as F
from src.autodiff.optim import SGD
from src.autodiff.tensor import Tape, Tensor, backward
from src.config import DistillConfig
from src.data import batch_iterator
from src.errors import ConfigError, DataFormatError, StructuralError
from src.graph import NetworkGraph
from src.models import LossRecord, MuSchedule, SynthDataset

logger = logging.getLogger(__name__)

TAP_SELECTIONS = ("all", "every_second", "output_only")


def mu_schedule(n_taps: int, gamma: float) -> MuSchedule:
    if n_taps < 0:
        raise ConfigError(f"number of taps must be >= 0, got {n_taps}")
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    mu = [n / (n_taps + 1) * gamma + 1 for n in range(1, n_taps + 1)]
    return MuSchedule(n_taps=n_taps, gamma=gamma, mu=mu, mu_out=gamma + 1)


def out_loss(z_hat: Tensor, z: Tensor, normalize_channels: bool = False) -> Tensor:
    """sum|z_hat - z| / (B * h * w); [B,C] features count as 1x1 maps"""
    if z_hat.shape != z.shape:
        raise StructuralError(f"feature maps differ in shape: {z_hat.shape} vs {z.shape}")
    batch, channels = z.shape[0], z.shape[1]
    spatial = int(np.prod(z.shape[2:], dtype=np.int64))
    divisor = batch * spatial * (channels if normalize_channels else 1)
    return F.scale(F.l1_distance_sum(z_hat, z), 1.0 / divisor)


def inter_loss(taps_pruned: Sequence[Tensor], taps_teacher: Sequence[Tensor], schedule: MuSchedule,
               normalize_channels: bool = False) -> Tensor:
    """mu-weighted sum of the per-tap l1 losses, shallowest tap first"""
    if not len(taps_pruned) == len(taps_teacher) == schedule.n_taps:
        raise StructuralError(f"tap lists of length {len(taps_pruned)} and {len(taps_teacher)} "
                              f"do not match a schedule over {schedule.n_taps} taps")
    total = Tensor(np.zeros((), dtype=np.float32))
    for a_hat, a, mu in zip(taps_pruned, taps_teacher, schedule.mu):
        total = F.add(total, F.scale(out_loss(a_hat, a, normalize_channels), mu))
    return total


@dataclass
class DFBFLoss:
    total: Tensor
    l_out: Tensor
    l_inter: Tensor


def dfbf_loss(pruned_forward: Tuple[Tensor, Sequence[Tensor]], teacher_forward: Tuple[Tensor, Sequence[Tensor]],
              schedule: MuSchedule, normalize_channels: bool = False) -> DFBFLoss:
    """mu_out * L_out + L_inter from (z, taps) pairs of the pruned and the teacher backbone"""
    z_hat, taps_hat = pruned_forward
    z, taps = teacher_forward
    l_out = out_loss(z_hat, z, normalize_channels)
    l_inter = inter_loss(taps_hat, taps, schedule, normalize_channels)
    total = F.add(F.scale(l_out, schedule.mu_out), l_inter)
    return DFBFLoss(total=total, l_out=l_out, l_inter=l_inter)


def select_taps(tap_ids: Sequence[str], selection: str) -> List[str]:
    """all keeps every tap, every_second keeps n = 1, 3, ..., output_only keeps none"""
    if selection == "all":
        return list(tap_ids)
    if selection == "every_second":
        return list(tap_ids[0::2])
    if selection == "output_only":
        return []
    raise ConfigError(f"unknown tap selection {selection!r}; choose one of {TAP_SELECTIONS}")


def aligned_taps(pruned: NetworkGraph, teacher: NetworkGraph) -> List[str]:
    """Tap ids the pruned backbone still exposes, in depth order.

    Taps cleared by pruning are skipped; a tap the teacher lacks is a
    structural error.
    """
    teacher_taps = teacher.tap_layers()
    pruned_taps = pruned.tap_layers()
    unknown = [tap for tap in pruned_taps if tap not in teacher_taps]
    if unknown:
        raise StructuralError(f"pruned backbone taps {unknown} do not exist in the teacher")
    skipped = [tap for tap in teacher_taps if tap not in pruned_taps]
    if skipped:
        logger.info(f"Skipping {len(skipped)} teacher tap(s) behind pruned layers: {skipped}")
    return pruned_taps


def _tap_values(taps: List[Tuple[str, Tensor]], ids: Sequence[str]) -> List[Tensor]:
    by_id = dict(taps)
    return [by_id[tap] for tap in ids]


class BackboneFinetuner:
    """Trains only the backbone of a pruned graph against a frozen teacher"""

    def __init__(self, cfg: DistillConfig, metrics=None, phase: str = "finetune"):
        self.cfg = cfg
        self.metrics = metrics
        self.phase = phase

    def _teacher_targets(self, teacher: NetworkGraph, x: Tensor, tap_ids: Sequence[str]) -> Tuple[Tensor, List[Tensor]]:
        result = teacher.execute(x, capture_taps=True, stop_at_boundary=True, bn_mode="eval")
        return result.output, _tap_values(result.taps, tap_ids)

    def _decay_options(self, params: Dict[str, Tensor]) -> Dict:
        no_decay = frozenset(name for name in params if not name.endswith(".weight"))
        anchors = {}
        if self.cfg.decay_toward == "initial":
            anchors = {name: p.data.copy() for name, p in params.items() if name not in no_decay}
        return {"no_decay": no_decay, "anchors": anchors, "max_grad_norm": self.cfg.max_grad_norm}

    def _check_alignment(self, graph: NetworkGraph, teacher: NetworkGraph, sample: np.ndarray,
                         tap_ids: Sequence[str]) -> None:
        x = Tensor(sample)
        z, taps = self._teacher_targets(teacher, x, tap_ids)
        result = graph.execute(x, capture_taps=True, stop_at_boundary=True, bn_mode="eval")
        pairs = [("backbone output", result.output, z)]
        pairs += list(zip(tap_ids, _tap_values(result.taps, tap_ids), taps))
        for name, mine, theirs in pairs:
            if mine.shape != theirs.shape:
                raise StructuralError(f"{name}: pruned shape {mine.shape} does not match teacher {theirs.shape}")

    def finetune(self, pruned: NetworkGraph, teacher: NetworkGraph,
                 data: Union[SynthDataset, np.ndarray]) -> Tuple[NetworkGraph, List[LossRecord]]:
        """Return a fine-tuned copy of ``pruned`` and the per-step loss history"""
        images = data.images if isinstance(data, SynthDataset) else np.asarray(data)
        if len(images) == 0:
            raise DataFormatError("fine-tuning needs at least one image")

        graph = pruned.copy().eval()
        if self.cfg.epochs == 0:
            return graph, []

        tap_ids = select_taps(aligned_taps(graph, teacher), self.cfg.taps)
        schedule = mu_schedule(len(tap_ids), self.cfg.gamma)
        self._check_alignment(graph, teacher, images[:1], tap_ids)
        logger.info(f"Fine-tuning backbone on {len(images)} images with {len(tap_ids)} tap(s), "
                    f"gamma={self.cfg.gamma}, mu_out={schedule.mu_out}")

        params = graph.set_trainable("backbone")
        optimizer = SGD(params, lr=self.cfg.lr, momentum=self.cfg.momentum, weight_decay=self.cfg.weight_decay,
                        **self._decay_options(params))
        epoch_seeds = np.random.default_rng(self.cfg.seed).integers(0, 2**32, size=self.cfg.epochs)
        container = SynthDataset(images=images)

        history: List[LossRecord] = []
        step = 0
        for epoch in tqdm(range(self.cfg.epochs), desc=self.phase, unit="epoch"):
            epoch_losses = []
            for batch in batch_iterator(container, self.cfg.batch_size, shuffle_seed=int(epoch_seeds[epoch])):
                x = Tensor(batch.images)
                target = self._teacher_targets(teacher, x, tap_ids)
                optimizer.zero_grad()
                with Tape() as tape:
                    result = graph.execute(x, capture_taps=True, stop_at_boundary=True, bn_mode="eval")
                    loss = dfbf_loss((result.output, _tap_values(result.taps, tap_ids)), target,
                                     schedule, self.cfg.normalize_channels)
                    backward(loss.total, tape)
                optimizer.step()

                record = LossRecord(step=step, epoch=epoch, l_out=loss.l_out.item(),
                                    l_inter=loss.l_inter.item(), l_total=loss.total.item())
                history.append(record)
                if self.metrics is not None:
                    self.metrics.log(self.phase, step, "l_total", record.l_total)
                    self.metrics.log(self.phase, step, "l_out", record.l_out)
                    self.metrics.log(self.phase, step, "l_inter", record.l_inter)
                logger.debug(f"step {step}: L_DFBF={record.l_total:.6f}")
                epoch_losses.append(record.l_total)
                step += 1
            logger.info(f"Epoch {epoch + 1}/{self.cfg.epochs}: mean L_DFBF {np.mean(epoch_losses):.6f}")

        graph.set_trainable(None)
        return graph, history


def epoch_means(history: Sequence[LossRecord]) -> Dict[int, float]:
    """Mean total loss per epoch"""
    grouped: Dict[int, List[float]] = {}
    for record in history:
        grouped.setdefault(record.epoch, []).append(record.l_total)
    return {epoch: float(np.mean(values)) for epoch, values in grouped.items()}


def assemble(pruned_backbone: NetworkGraph, head: NetworkGraph) -> NetworkGraph:
    """Pruned backbone followed by bitwise copies of ``head``'s head tensors"""
    mine = [layer.to_dict() for layer in pruned_backbone.head_layers()]
    theirs = [layer.to_dict() for layer in head.head_layers()]
    if mine != theirs or pruned_backbone.backbone_boundary != head.backbone_boundary:
        raise StructuralError("backbone and head come from different architectures")
    model = pruned_backbone.copy()
    for layer in head.head_layers():
        if layer.id in head.params:
            model.params[layer.id] = {name: t.copy() for name, t in head.params[layer.id].items()}
    model.validate()
    return model.eval()


def assemble_and_predict(pruned_backbone: NetworkGraph, head: NetworkGraph, x: Tensor,
                         batch_size: Optional[int] = None) -> Tensor:
    """y_hat = h(b_p(x)) with both parts in eval mode"""
    if batch_size is None:
        batch_size = max(1, x.shape[0])
    outputs = []
    for start in range(0, x.shape[0], batch_size):
        chunk = Tensor(x.data[start:start + batch_size])
        z = pruned_backbone.execute(chunk, stop_at_boundary=True, bn_mode="eval").output
        outputs.append(head.execute(z, from_boundary=True, bn_mode="eval").output.data)
    return Tensor(np.concatenate(outputs))
