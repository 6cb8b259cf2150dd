"""Label-free image synthesis against the frozen model's BatchNorm statistics.

Pixels start from seeded Gaussian noise and are optimized with momentum
gradient descent on

    L_image = a_bn * L_BN + a_tv * L_TV + a_l2 * L_reg

where L_BN sums, over every backbone BatchNorm, the squared distance between
the batch statistics and the stored running statistics (divided by the
channel count), L_TV is the total variation and L_reg the mean squared pixel
value. The head never runs and no model tensor changes.
"""
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from tqdm import tqdm

from src.autodiff import functional as F
from src.autodiff.tensor import Tape, Tensor, backward
from src.config import SynthConfig
from src.errors import DatasetIntegrityWarning, NumericalError, StructuralError
from src.formats import load_image_container, save_image_container
from src.graph import NetworkGraph
from src.models import SynthDataset

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence]


@dataclass
class ImageLossTerms:
    """Weighted loss terms of one pixel batch"""
    bn: Tensor
    tv: Tensor
    reg: Tensor
    total: Tensor

    def values(self) -> Dict[str, float]:
        return {"bn": self.bn.item(), "tv": self.tv.item(), "reg": self.reg.item(), "total": self.total.item()}


class ImageSynthesizer:
    """Optimizes noise batches into synthetic images for a frozen model.

    The model is only read: parameters are marked as not requiring
    gradients and BatchNorm runs in synthesis mode, so several threads may
    synthesize against the same model at once.
    """

    def __init__(self, model: NetworkGraph, cfg: SynthConfig, threads: int = 1):
        self.model = model
        self.cfg = cfg
        self.threads = max(1, threads)
        if not any(layer.kind == "BatchNorm2d" for layer in model.backbone_layers()):
            raise StructuralError("image synthesis needs at least one BatchNorm2d layer in the backbone")
        model.set_trainable(None)

    def image_loss_terms(self, batch: Tensor) -> ImageLossTerms:
        """Each weighted term of L_image, differentiable w.r.t. the batch pixels"""
        B, C, h, w = batch.shape
        result = self.model.execute(batch, stop_at_boundary=True, bn_mode="synthesis", collect_bn_stats=True)

        l_bn = None
        for layer_id, stats in result.bn_stats:
            params = self.model.params[layer_id]
            channels = stats.mean.shape[0]
            mean_gap = F.sq_l2_norm(F.sub(stats.mean, Tensor(params["running_mean"].data, dtype=stats.mean.dtype)))
            var_gap = F.sq_l2_norm(F.sub(stats.var, Tensor(params["running_var"].data, dtype=stats.var.dtype)))
            term = F.scale(F.add(mean_gap, var_gap), 1.0 / channels)
            l_bn = term if l_bn is None else F.add(l_bn, term)

        bn = F.scale(l_bn, self.cfg.alpha_bn)
        tv = F.scale(F.tv_loss(batch), self.cfg.alpha_tv)
        reg = F.scale(F.sq_l2_norm(batch), self.cfg.alpha_l2 / (B * C * h * w))
        total = F.add(F.add(bn, tv), reg)

        for name, term in (("bn", bn), ("tv", tv), ("reg", reg)):
            if not np.all(np.isfinite(term.data)):
                raise NumericalError(f"synthesis loss term {name} is not finite ({term.data.reshape(-1)[0]})")
        return ImageLossTerms(bn=bn, tv=tv, reg=reg, total=total)

    def image_loss(self, batch: Tensor) -> Tensor:
        return self.image_loss_terms(batch).total

    def initial_batch(self, seed: Seed, size: Optional[int] = None) -> np.ndarray:
        """Seeded Gaussian noise centred in the clamp range, already clamped"""
        lo, hi = self.cfg.clamp
        span = hi - lo
        w, h = self.cfg.image_size
        rng = np.random.default_rng(seed)
        noise = rng.normal(lo + 0.5 * span, 0.2 * span, size=(size or self.cfg.batch_size, 3, h, w))
        return np.clip(noise, lo, hi).astype(np.float32)

    def synthesize_batch(self, seed: Seed, size: Optional[int] = None,
                         history: Optional[List[float]] = None) -> Tensor:
        """Optimize one batch of pixels.

        When ``history`` is given it receives L_image before every step and
        once more after the last one.
        """
        lo, hi = self.cfg.clamp
        pixels = self.initial_batch(seed, size)
        velocity = np.zeros_like(pixels)

        for _ in range(self.cfg.steps):
            x = Tensor(pixels, requires_grad=True, name="pixels")
            with Tape() as tape:
                loss = self.image_loss(x)
                backward(loss, tape)
            if history is not None:
                history.append(loss.item())
            velocity = self.cfg.momentum * velocity + x.grad
            pixels = np.clip(pixels - self.cfg.lr * velocity, lo, hi).astype(np.float32)

        if history is not None:
            history.append(self.image_loss(Tensor(pixels)).item())
        return Tensor(pixels)

    def batch_plan(self) -> List[int]:
        """Sizes of the ceil(M/B) batches; only the last may be short"""
        M, B = self.cfg.num_images, self.cfg.batch_size
        n_batches = math.ceil(M / B)
        return [min(B, M - i * B) for i in range(n_batches)]

    def generate_dataset(self, metrics=None, phase: str = "synthesize") -> SynthDataset:
        """Synthesize all M images; batches run on up to ``threads`` workers"""
        sizes = self.batch_plan()
        seeds = np.random.SeedSequence(self.cfg.seed).spawn(len(sizes))
        logger.info(f"Synthesizing {self.cfg.num_images} images in {len(sizes)} batches "
                    f"({self.cfg.steps} steps each, {self.threads} worker(s))")

        batches: Dict[int, np.ndarray] = {}
        histories: Dict[int, List[float]] = {}

        def work(index: int):
            history: List[float] = []
            images = self.synthesize_batch(seeds[index], sizes[index], history)
            return index, images.data, history

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            futures = [pool.submit(work, i) for i in range(len(sizes))]
            for future in tqdm(as_completed(futures), total=len(futures), desc=phase, unit="batch"):
                index, images, history = future.result()
                batches[index] = images
                histories[index] = history

        for index in range(len(sizes)):
            history = histories[index]
            logger.info(f"Batch {index}: L_image {history[0]:.4f} -> {history[-1]:.4f}")
            if metrics is not None:
                metrics.log(phase, index, "synth_loss_initial", history[0])
                metrics.log(phase, index, "synth_loss_final", history[-1])

        images = np.concatenate([batches[i] for i in range(len(sizes))])
        header = {
            "kind": "synthetic",
            "model_fingerprint": self.model.fingerprint(),
            "synth_config": self.cfg.model_dump(mode="json"),
            "num_batches": len(sizes),
        }
        return SynthDataset(images=images, header=header)


def save_synthetic(ds: SynthDataset, path: Path) -> SynthDataset:
    """Write a DFDS file; the returned dataset carries the stored header"""
    header = save_image_container(path, ds.images, ds.header)
    return SynthDataset(images=ds.images, header=header)


def load_synthetic(path: Path, verify_model: Optional[NetworkGraph] = None) -> SynthDataset:
    """Read a DFDS file, optionally checking it was synthesized from ``verify_model``"""
    images, header, labels = load_image_container(path)
    if labels is not None:
        logger.debug(f"{path}: ignoring the label block of a labeled container")
    if verify_model is not None:
        expected = verify_model.fingerprint()
        if header.get("model_fingerprint") != expected:
            message = (f"dataset {path} was synthesized from model {str(header.get('model_fingerprint'))[:12]}, "
                       f"not from the supplied model {expected[:12]}")
            logger.warning(message)
            warnings.warn(message, DatasetIntegrityWarning, stacklevel=2)
    return SynthDataset(images=images, header=header)
