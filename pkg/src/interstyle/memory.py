"""Per-domain memory classifiers: unit-norm class prototypes queried with a
temperature-scaled cosine softmax and refreshed by exponential moving
average. Prototypes never receive gradients; they are updated by value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError

UPDATE_RULES = ("sequential", "joint")


@dataclass
class MemoryBank:
    domain: str
    prototypes: np.ndarray          # [K, d], unit rows
    eta: float = 0.2
    tau: float = 0.05
    renormalize: bool = True
    update_rule: str = "joint"

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        if self.prototypes.ndim != 2:
            raise ConfigurationError("prototypes must be a K x d matrix")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0,1], got {self.eta}")
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigurationError(
                f"unknown update rule {self.update_rule!r}; expected {UPDATE_RULES}")

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def snapshot(self) -> np.ndarray:
        return self.prototypes.copy()


def class_prototypes(features: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """L2-normalized per-class mean of the given embeddings."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    protos = np.zeros((num_classes, features.shape[1]), dtype=np.float32)
    for k in range(num_classes):
        members = features[labels == k]
        if members.shape[0] == 0:
            raise ConfigurationError(f"class {k} has no samples to initialize from")
        mean = members.mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-6:
            raise ConfigurationError(f"degenerate class centroid for class {k}")
        protos[k] = mean / norm
    return protos


def init_bank(backbone, images: np.ndarray, labels: np.ndarray, domain: str,
              eta: float = 0.2, tau: float = 0.05, renormalize: bool = True,
              update_rule: str = "joint") -> MemoryBank:
    """Build a bank from one stylizer-free pass over a domain's images."""
    num_classes = int(np.max(labels)) + 1
    features = backbone.embed(images)
    protos = class_prototypes(features, labels, num_classes)
    return MemoryBank(domain=domain, prototypes=protos, eta=eta, tau=tau,
                      renormalize=renormalize, update_rule=update_rule)


def identification_loss(bank: MemoryBank, features: Tensor,
                        labels: np.ndarray) -> Tensor:
    """Mean cosine-softmax cross entropy of the batch against the bank.

    Prototypes enter as constants; the loss is differentiable in the
    features only and is stabilized through log-sum-exp.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("identification_loss needs a non-empty batch")
    if labels.min() < 0 or labels.max() >= bank.num_classes:
        raise ValueError(
            f"label out of range [0, {bank.num_classes}) for domain {bank.domain}")
    protos = Tensor(bank.prototypes.T, dtype=features.dtype)   # constant [d, K]
    logits = ag.mul(ag.matmul(features, protos), 1.0 / bank.tau)
    lse = ag.log_sum_exp(logits, axis=1)
    positive = ag.gather_rows(logits, labels)
    return ag.tmean(ag.sub(lse, positive))


def total_loss(losses: Sequence[Tensor]) -> Tensor:
    """Arithmetic mean of the per-domain losses."""
    if not losses:
        raise ValueError("total_loss needs at least one domain loss")
    acc = losses[0]
    for extra in losses[1:]:
        acc = ag.add(acc, extra)
    return ag.div(acc, float(len(losses)))


def update_prototypes(bank: MemoryBank, features: np.ndarray,
                      labels: np.ndarray) -> MemoryBank:
    """EMA-update the positive prototypes with the batch features (by value).

    ``joint`` (default) applies one EMA step per class toward the class
    mean of the batch; ``sequential`` applies one step per sample in batch
    order. With few identities and a high replacement rate the sequential
    reading collapses a prototype onto single restyled samples, which
    starves the interleaved variants of a usable classifier.
    """
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels)
    eta = bank.eta
    if bank.update_rule == "sequential":
        for feat, label in zip(features, labels):
            c = eta * bank.prototypes[label] + (1.0 - eta) * feat
            if bank.renormalize:
                c = c / max(float(np.linalg.norm(c)), 1e-12)
            bank.prototypes[label] = c
    else:
        for label in np.unique(labels):
            mean = features[labels == label].mean(axis=0)
            c = eta * bank.prototypes[label] + (1.0 - eta) * mean
            if bank.renormalize:
                c = c / max(float(np.linalg.norm(c)), 1e-12)
            bank.prototypes[label] = c
    return bank
