"""Supervised baseline training and evaluation"""
import logging
from typing import Optional

import numpy as np
from tqdm import tqdm

from src.autodiff import functional as F
from src.autodiff.optim import SGD
from src.autodiff.tensor import Tape, Tensor, backward
from src.config import TrainSection
from src.data import batch_iterator
from src.errors import DataFormatError
from src.graph import NetworkGraph
from src.models import EvalResult, LabeledDataset

logger = logging.getLogger(__name__)


class Trainer:
    """Cross-entropy training of every parameter with SGD + momentum"""

    def __init__(self, section: TrainSection, seed: int = 0, metrics=None, phase: str = "train"):
        self.section = section
        self.seed = seed
        self.metrics = metrics
        self.phase = phase

    def fit(self, graph: NetworkGraph, train: LabeledDataset,
            test: Optional[LabeledDataset] = None) -> NetworkGraph:
        """Train ``graph`` in place and return it in eval mode"""
        if len(train) == 0:
            raise DataFormatError("cannot train on an empty dataset")
        params = graph.set_trainable("all")
        optimizer = SGD(params, lr=self.section.lr, momentum=self.section.momentum,
                        weight_decay=self.section.weight_decay)
        epoch_seeds = np.random.default_rng(self.seed).integers(0, 2**32, size=self.section.epochs)
        logger.info(f"Training {graph.num_parameters()} parameters on {len(train)} images "
                    f"for {self.section.epochs} epochs")

        graph.train()
        step = 0
        for epoch in tqdm(range(self.section.epochs), desc=self.phase, unit="epoch"):
            losses = []
            for batch in batch_iterator(train, self.section.batch_size, shuffle_seed=int(epoch_seeds[epoch])):
                optimizer.zero_grad()
                with Tape() as tape:
                    logits = graph.execute(Tensor(batch.images), bn_mode="train").output
                    loss = F.softmax_cross_entropy(logits, batch.labels)
                    backward(loss, tape)
                optimizer.step()
                losses.append(loss.item())
                if self.metrics is not None:
                    self.metrics.log(self.phase, step, "ce_loss", losses[-1])
                step += 1

            message = f"Epoch {epoch + 1}/{self.section.epochs}: mean loss {np.mean(losses):.4f}"
            if test is not None and len(test):
                graph.eval()
                accuracy = evaluate(graph, test).accuracy
                graph.train()
                message += f", test accuracy {accuracy:.4f}"
                if self.metrics is not None:
                    self.metrics.log(self.phase, step, "test_accuracy", accuracy)
            logger.info(message)

        graph.set_trainable(None)
        return graph.eval()


def predict(graph: NetworkGraph, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits of the full graph with BatchNorm in eval mode"""
    outputs = [graph.execute(Tensor(images[start:start + batch_size]), bn_mode="eval").output.data
               for start in range(0, len(images), batch_size)]
    return np.concatenate(outputs)


def evaluate(graph: NetworkGraph, ds: LabeledDataset, batch_size: int = 256) -> EvalResult:
    """Top-1 accuracy overall and per class present in ``ds``"""
    if len(ds) == 0:
        raise DataFormatError("cannot evaluate on an empty dataset")
    predictions = predict(graph, ds.images, batch_size).argmax(axis=1)
    correct = predictions == ds.labels
    per_class = {int(k): float(correct[ds.labels == k].mean())
                 for k in range(ds.num_classes) if np.any(ds.labels == k)}
    return EvalResult(accuracy=float(correct.mean()), per_class=per_class,
                      num_samples=len(ds), predictions=predictions)
