"""Structured filter pruning of the backbone.

Filters are ranked by the l1 sum of their weights or by |gamma| of the
BatchNorm that follows them. Removing a filter also removes the matching
BatchNorm entries and the input channel of every downstream consumer.
"""
import logging
import math
from typing import Dict, List, Tuple

import numpy as np

from src.autodiff.tensor import Tensor
from src.errors import ConfigError, ShapeError, StructuralError
from src.graph import PASS_THROUGH_KINDS, NetworkGraph
from src.models import LayerPruneStats, LayerSpec, PrunePlan, PruneReport

logger = logging.getLogger(__name__)

STRATEGIES = ("l1", "bn_scale")
MODES = ("uniform", "size_weighted")
MAX_LAYER_RATIO = 0.9


def score_filters_l1(weight: Tensor) -> np.ndarray:
    """s_i = sum |w_i| over each filter's (Cin, kh, kw) block"""
    if weight.ndim != 4:
        raise ShapeError(f"l1 scoring needs a 4-D conv weight, got shape {weight.shape}")
    return np.abs(weight.data.astype(np.float64)).sum(axis=(1, 2, 3))


def score_filters_bnscale(gamma: Tensor) -> np.ndarray:
    if gamma.ndim != 1:
        raise ShapeError(f"bn_scale scoring needs a 1-D gamma, got shape {gamma.shape}")
    return np.abs(gamma.data.astype(np.float64))


def select_kept(scores: np.ndarray, n_remove: int) -> List[int]:
    """Indices of the highest-scoring filters, ascending; ties keep the lower index"""
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:len(scores) - n_remove])


def removal_counts(filters: Dict[str, int], ratio: float, mode: str) -> Dict[str, int]:
    """Number of filters to remove from each prunable layer"""
    if mode == "uniform" or ratio == 0 or not filters:
        return {lid: math.floor(ratio * f + 1e-9) for lid, f in filters.items()}
    if mode != "size_weighted":
        raise ConfigError(f"unknown prune mode {mode!r}")

    mean_filters = float(np.mean(list(filters.values())))
    total = sum(filters.values())

    def layer_ratios(s: float) -> Dict[str, float]:
        return {lid: min(max(s * ratio * f / mean_filters, 0.0), MAX_LAYER_RATIO) for lid, f in filters.items()}

    def removed_fraction(s: float) -> float:
        return sum(r * filters[lid] for lid, r in layer_ratios(s).items()) / total

    lo, hi = 0.0, 1.0
    while removed_fraction(hi) < ratio and hi < 1e6:
        hi *= 2.0
    if removed_fraction(hi) < ratio:
        logger.warning(f"size_weighted pruning cannot reach ratio {ratio}; every layer is capped at {MAX_LAYER_RATIO}")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if removed_fraction(mid) < ratio:
            lo = mid
        else:
            hi = mid
    return {lid: math.floor(r * filters[lid] + 1e-9) for lid, r in layer_ratios(hi).items()}


def prunable_convs(graph: NetworkGraph) -> List[LayerSpec]:
    return [layer for layer in graph.backbone_layers() if layer.kind == "Conv2d" and layer.prunable]


def trace_consumers(graph: NetworkGraph, conv_id: str) -> Tuple[List[str], List[str], List[str]]:
    """Follow a conv's output through pass-through layers.

    Returns (batchnorm ids, pass-through ids, consumer ids). Residual joins,
    the backbone boundary and head layers cannot absorb a width change.
    """
    norms, passes, consumers = [], [], []
    frontier = [conv_id]
    while frontier:
        current = frontier.pop()
        for succ in graph.successors(current):
            if graph.in_head(succ.id):
                raise StructuralError(f"pruning {conv_id} would change the input of head layer {succ.id}")
            if succ.kind in ("Conv2d", "Linear"):
                consumers.append(succ.id)
                continue
            if succ.kind == "ResidualAdd":
                raise StructuralError(f"pruning {conv_id} would break residual join {succ.id}")
            if succ.kind not in PASS_THROUGH_KINDS:
                raise StructuralError(f"cannot propagate pruning of {conv_id} through {succ.kind} {succ.id}")
            if succ.id == graph.backbone_boundary:
                raise StructuralError(f"pruning {conv_id} would change the backbone output width")
            (norms if succ.kind == "BatchNorm2d" else passes).append(succ.id)
            frontier.append(succ.id)
    return norms, passes, consumers


def _following_bn(graph: NetworkGraph, conv_id: str) -> LayerSpec:
    for succ in graph.successors(conv_id):
        if succ.kind == "BatchNorm2d":
            return succ
    raise StructuralError(f"bn_scale pruning needs a BatchNorm2d after {conv_id}")


def plan_prune(graph: NetworkGraph, global_ratio: float, strategy: str = "l1",
               mode: str = "uniform") -> PrunePlan:
    """Choose which filters each prunable backbone conv keeps"""
    if not 0.0 <= global_ratio < 1.0:
        raise ConfigError("ratio must be in [0,1)")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown prune strategy {strategy!r}; choose one of {STRATEGIES}")
    if mode not in MODES:
        raise ConfigError(f"unknown prune mode {mode!r}; choose one of {MODES}")

    layers = prunable_convs(graph)
    filters = {layer.id: graph.params[layer.id]["weight"].shape[0] for layer in layers}
    counts = removal_counts(filters, global_ratio, mode)
    plan = PrunePlan(strategy=strategy, global_ratio=global_ratio, mode=mode,
                     graph_fingerprint=graph.fingerprint(), original_filters=filters)

    for layer in layers:
        n_remove = counts[layer.id]
        if n_remove >= filters[layer.id]:
            raise StructuralError(f"ratio {global_ratio} would remove every filter of {layer.id}")
        if strategy == "l1":
            scores = score_filters_l1(graph.params[layer.id]["weight"])
        else:
            scores = score_filters_bnscale(graph.params[_following_bn(graph, layer.id).id]["gamma"])
        kept = select_kept(scores, n_remove)
        _, _, consumers = trace_consumers(graph, layer.id)
        plan.kept[layer.id] = kept
        for consumer in consumers:
            plan.rewiring[consumer] = kept
        logger.debug(f"{layer.id}: keeping {len(kept)}/{filters[layer.id]} filters")

    logger.info(f"Planned {strategy}/{mode} pruning at ratio {global_ratio}: "
                f"{plan.removed_filters()} of {sum(filters.values())} prunable filters removed")
    return plan


def apply_prune(graph: NetworkGraph, plan: PrunePlan) -> NetworkGraph:
    """Return a structurally pruned copy; head tensors are copied bitwise"""
    if plan.graph_fingerprint != graph.fingerprint():
        raise StructuralError("prune plan was computed for a different graph")
    pruned = graph.copy()

    for conv_id, kept in plan.kept.items():
        if len(kept) == plan.original_filters[conv_id]:
            continue
        index = np.asarray(kept, dtype=np.int64)
        conv = pruned.layer(conv_id)
        tensors = pruned.params[conv_id]
        tensors["weight"] = Tensor(tensors["weight"].data[index])
        if "bias" in tensors:
            tensors["bias"] = Tensor(tensors["bias"].data[index])
        conv.out_channels = len(kept)

        norms, passes, consumers = trace_consumers(pruned, conv_id)
        for bn_id in norms:
            bn = pruned.layer(bn_id)
            pruned.params[bn_id] = {name: Tensor(t.data[index]) for name, t in pruned.params[bn_id].items()}
            bn.in_channels = bn.out_channels = len(kept)
        for layer_id in norms + passes:
            layer = pruned.layer(layer_id)
            if layer.tap:
                layer.tap = False
                logger.info(f"Tap {layer_id} dropped: its producer {conv_id} was pruned")
        for consumer_id in consumers:
            consumer = pruned.layer(consumer_id)
            weight = pruned.params[consumer_id]["weight"]
            pruned.params[consumer_id]["weight"] = Tensor(np.ascontiguousarray(weight.data[:, index]))
            consumer.in_channels = len(kept)

    pruned.validate()
    return pruned


def report(before: NetworkGraph, after: NetworkGraph) -> PruneReport:
    """Removed filter and parameter percentages, recomputed from tensor sizes"""
    counts_before = before.filter_counts()
    counts_after = after.filter_counts()
    prunable = {layer.id for layer in prunable_convs(before)}

    layers = [LayerPruneStats(layer=lid, filters_before=f, filters_after=counts_after.get(lid, 0),
                              prunable=lid in prunable)
              for lid, f in counts_before.items()]

    def pct(removed: float, total: float) -> float:
        return 100.0 * removed / total if total else 0.0

    prunable_before = sum(s.filters_before for s in layers if s.prunable)
    prunable_after = sum(s.filters_after for s in layers if s.prunable)
    all_before = sum(s.filters_before for s in layers)
    all_after = sum(s.filters_after for s in layers)
    params_before = before.num_parameters("backbone")
    params_after = after.num_parameters("backbone")

    return PruneReport(
        removed_filters_pct=pct(prunable_before - prunable_after, prunable_before),
        removed_filters_pct_backbone=pct(all_before - all_after, all_before),
        removed_params_pct=pct(params_before - params_after, params_before),
        backbone_params_before=params_before,
        backbone_params_after=params_after,
        layers=layers,
    )
