"""Training loops.

The interleaved scheme runs two forward propagations and one backward per
iteration: the first forward computes the loss on unmodified styles (banks
untouched), the backward updates the extractor, and a gradient-free second
forward through the updated extractor produces restyled features that only
refresh the memory banks. Ablation variants cover conventional training,
stylization-as-augmentation, and the forward-forward-backward ordering.

Per-domain batches are concatenated before the forward pass so batch-level
style statistics span all source domains at once.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, active_tape, backward, no_grad
from .backbone import STAGES, Backbone, save_checkpoint
from .errors import ConfigurationError, NumericalError
from .evaluation import evaluate, self_retrieval_split
from .memory import (MemoryBank, identification_loss, init_bank, total_loss,
                     update_prototypes)
from .optim import Adam, lr_at_epoch
from .stylize import StylizerSpec, apply_stylizer
from .synth import DomainBatch, SynthDataset, sample_batch

MODES = ("baseline", "aug", "il", "il_no_isg", "il_ffb")


@dataclass
class TrainConfig:
    mode: str = "il"
    stylizer: StylizerSpec = field(default_factory=StylizerSpec)
    insertion: str = "after_stage1"
    epochs: int = 30
    P: int = 16
    K: int = 4
    lr: float = 3.5e-4
    warmup_epochs: int = 3
    decay_epochs: tuple[int, ...] = (15, 25)
    decay_factor: float = 0.1
    eta: float = 0.2
    tau: float = 0.05
    seed: int = 0
    iters_per_epoch: Optional[int] = None
    bank_update: str = "joint"
    renorm_prototypes: bool = True
    record_timing: bool = False
    eval_domain: str = "target"

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigurationError(
                f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.insertion not in STAGES:
            raise ConfigurationError(
                f"unknown insertion {self.insertion!r}; expected one of {STAGES}")
        if self.epochs < 0 or self.P < 1 or self.K < 1:
            raise ConfigurationError("epochs must be >= 0 and P, K >= 1")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        self.stylizer.validate()
        return self


@dataclass
class IterationRecord:
    loss: float
    domain_losses: list[float]
    t_forward1_ms: float = 0.0
    t_backward_ms: float = 0.0
    t_forward2_ms: float = 0.0
    t_update_ms: float = 0.0
    t_total_ms: float = 0.0


@dataclass
class EpochRecord:
    epoch: int
    mode: str
    seed: int
    mean_loss: Optional[float]
    lr: Optional[float]
    iter_time_ms: Optional[float]
    map_target: float
    rank1_target: float

    def json_line(self) -> str:
        return json.dumps({
            "epoch": self.epoch,
            "mode": self.mode,
            "seed": self.seed,
            "mean_loss": self.mean_loss,
            "lr": self.lr,
            "iter_time_ms": self.iter_time_ms,
            "map_target": self.map_target,
            "rank1_target": self.rank1_target,
        })


class Trainer:
    def __init__(self, config: TrainConfig, dataset: SynthDataset):
        self.config = config.validate()
        self.dataset = dataset
        self.model = Backbone(seed=config.seed)
        self.optimizer = Adam(self.model.parameters(), lr=config.lr)
        self._styl_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(0,)))
        self.banks = self._init_banks()
        self.iteration_records: list[IterationRecord] = []

    def _init_banks(self) -> list[MemoryBank]:
        banks = []
        for d in self.dataset.sources:
            banks.append(init_bank(self.model, d.images, d.labels, domain=d.name,
                                   eta=self.config.eta, tau=self.config.tau,
                                   renormalize=self.config.renorm_prototypes,
                                   update_rule=self.config.bank_update))
        return banks

    # -- forward helpers ------------------------------------------------------

    def _active_spec(self) -> StylizerSpec:
        if self.config.mode == "il_no_isg":
            return replace(self.config.stylizer, method="none")
        return self.config.stylizer

    def _transform(self, spec: StylizerSpec):
        if spec.method == "none":
            return None
        return lambda f: apply_stylizer(f, spec, self._styl_rng, training=True)

    def _combined_forward(self, batches: list[DomainBatch],
                          spec: Optional[StylizerSpec]) -> Tensor:
        images = np.concatenate([b.images for b in batches])
        transform = self._transform(spec) if spec is not None else None
        return self.model.forward(images, stylizer=transform,
                                  insertion=self.config.insertion)

    def _split_losses(self, embeddings: Tensor,
                      batches: list[DomainBatch]) -> list[Tensor]:
        losses = []
        offset = 0
        for bank, batch in zip(self.banks, batches):
            n = batch.images.shape[0]
            feats = ag.take_batch(embeddings, np.arange(offset, offset + n))
            losses.append(identification_loss(bank, feats, batch.labels))
            offset += n
        return losses

    def _loss_forward(self, batches: list[DomainBatch],
                      stylized: bool) -> tuple[Tensor, list[Tensor], Tensor]:
        spec = self._active_spec() if stylized else None
        embeddings = self._combined_forward(batches, spec)
        losses = self._split_losses(embeddings, batches)
        return embeddings, losses, total_loss(losses)

    def _second_forward(self, batches: list[DomainBatch]) -> list[np.ndarray]:
        """Gradient-free stylized pass used only to refresh the banks."""
        with no_grad():
            embeddings = self._combined_forward(batches, self._active_spec())
        feats = []
        offset = 0
        for batch in batches:
            n = batch.images.shape[0]
            feats.append(embeddings.data[offset:offset + n])
            offset += n
        return feats

    def _update_banks(self, feats: list[np.ndarray], batches: list[DomainBatch]):
        for bank, f, batch in zip(self.banks, feats, batches):
            update_prototypes(bank, f, batch.labels)

    def _check_finite(self, loss_value: float, epoch: int, iteration: int):
        if not math.isfinite(loss_value):
            raise NumericalError(
                f"non-finite loss {loss_value} at epoch {epoch} iteration {iteration}")

    # -- iteration variants ----------------------------------------------------

    def run_iteration(self, batches: list[DomainBatch], epoch: int = 0,
                      iteration: int = 0) -> IterationRecord:
        mode = self.config.mode
        active_tape().clear()
        t0 = time.perf_counter()
        if mode in ("il", "il_no_isg"):
            rec = self._il_iteration(batches, epoch, iteration)
        elif mode == "il_ffb":
            rec = self._ffb_iteration(batches, epoch, iteration)
        elif mode == "baseline":
            rec = self._single_forward_iteration(batches, epoch, iteration,
                                                 stylized=False)
        else:  # aug
            rec = self._single_forward_iteration(batches, epoch, iteration,
                                                 stylized=True)
        rec.t_total_ms = (time.perf_counter() - t0) * 1e3
        self.iteration_records.append(rec)
        return rec

    def _il_iteration(self, batches, epoch, iteration) -> IterationRecord:
        t0 = time.perf_counter()
        _, losses, loss = self._loss_forward(batches, stylized=False)
        loss_value = loss.item()
        per_domain = [l.item() for l in losses]
        self._check_finite(loss_value, epoch, iteration)
        t1 = time.perf_counter()
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step()
        t2 = time.perf_counter()
        second = self._second_forward(batches)
        t3 = time.perf_counter()
        assert len(active_tape()) == 0, "second forward must stay off the tape"
        self._update_banks(second, batches)
        t4 = time.perf_counter()
        return IterationRecord(loss=loss_value, domain_losses=per_domain,
                               t_forward1_ms=(t1 - t0) * 1e3,
                               t_backward_ms=(t2 - t1) * 1e3,
                               t_forward2_ms=(t3 - t2) * 1e3,
                               t_update_ms=(t4 - t3) * 1e3)

    def _ffb_iteration(self, batches, epoch, iteration) -> IterationRecord:
        """Both forwards run through the pre-step extractor."""
        t0 = time.perf_counter()
        _, losses, loss = self._loss_forward(batches, stylized=False)
        loss_value = loss.item()
        per_domain = [l.item() for l in losses]
        self._check_finite(loss_value, epoch, iteration)
        t1 = time.perf_counter()
        tape_size = len(active_tape())
        second = self._second_forward(batches)
        assert len(active_tape()) == tape_size, \
            "second forward must stay off the tape"
        self._update_banks(second, batches)
        t2 = time.perf_counter()
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step()
        t3 = time.perf_counter()
        return IterationRecord(loss=loss_value, domain_losses=per_domain,
                               t_forward1_ms=(t1 - t0) * 1e3,
                               t_backward_ms=(t3 - t2) * 1e3,
                               t_forward2_ms=(t2 - t1) * 1e3,
                               t_update_ms=0.0)

    def _single_forward_iteration(self, batches, epoch, iteration,
                                  stylized: bool) -> IterationRecord:
        t0 = time.perf_counter()
        embeddings, losses, loss = self._loss_forward(batches, stylized=stylized)
        loss_value = loss.item()
        per_domain = [l.item() for l in losses]
        self._check_finite(loss_value, epoch, iteration)
        t1 = time.perf_counter()
        self.optimizer.zero_grad()
        backward(loss)
        self.optimizer.step()
        t2 = time.perf_counter()
        feats = []
        offset = 0
        for batch in batches:
            n = batch.images.shape[0]
            feats.append(embeddings.data[offset:offset + n].copy())
            offset += n
        self._update_banks(feats, batches)
        t3 = time.perf_counter()
        return IterationRecord(loss=loss_value, domain_losses=per_domain,
                               t_forward1_ms=(t1 - t0) * 1e3,
                               t_backward_ms=(t2 - t1) * 1e3,
                               t_forward2_ms=0.0,
                               t_update_ms=(t3 - t2) * 1e3)

    # -- epoch loop --------------------------------------------------------------

    def iters_per_epoch(self) -> int:
        if self.config.iters_per_epoch is not None:
            return self.config.iters_per_epoch
        largest = max(d.images.shape[0] for d in self.dataset.sources)
        return max(1, math.ceil(largest / (self.config.P * self.config.K)))

    def _epoch_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.config.seed, spawn_key=(1, epoch)))

    def evaluate_target(self) -> dict:
        domain = self.dataset.domain(self.config.eval_domain)
        feats = self.model.embed(domain.images)
        return evaluate(self_retrieval_split(feats, domain.labels))

    def fit(self) -> list[EpochRecord]:
        records = []
        cfg = self.config
        if cfg.epochs == 0:
            metrics = self.evaluate_target()
            records.append(EpochRecord(epoch=0, mode=cfg.mode, seed=cfg.seed,
                                       mean_loss=None, lr=None, iter_time_ms=None,
                                       map_target=metrics["mAP"],
                                       rank1_target=metrics["rank1"]))
            return records
        iters = self.iters_per_epoch()
        for epoch in range(cfg.epochs):
            self.model.train()
            self.optimizer.lr = lr_at_epoch(cfg.lr, epoch, cfg.warmup_epochs,
                                            cfg.decay_epochs, cfg.decay_factor)
            rng = self._epoch_rng(epoch)
            losses = []
            times = []
            for it in range(iters):
                batches = [sample_batch(d, cfg.P, cfg.K, rng)
                           for d in self.dataset.sources]
                rec = self.run_iteration(batches, epoch, it)
                losses.append(rec.loss)
                times.append(rec.t_total_ms)
            metrics = self.evaluate_target()
            records.append(EpochRecord(
                epoch=epoch, mode=cfg.mode, seed=cfg.seed,
                mean_loss=float(np.mean(losses)),
                lr=self.optimizer.lr,
                iter_time_ms=float(np.mean(times)) if cfg.record_timing else None,
                map_target=metrics["mAP"],
                rank1_target=metrics["rank1"]))
        return records

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        arrays = {f"backbone.{k}": v for k, v in self.model.state_dict().items()}
        for bank in self.banks:
            arrays[f"memory.{bank.domain}.prototypes"] = bank.snapshot()
        save_checkpoint(path, arrays)


def write_metrics(records: list[EpochRecord], path):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.json_line())
            fh.write("\n")
