"""Per-attribute training loop with optional frozen extractor, plus reporting."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import TrainState, save_checkpoint, write_manifest
from .data import ComparisonPair, PairDataset, minibatches
from .nn import FeatureExtractorSpec, RankModel
from .optim import OptimState, ParamGroup, RMSProp
from .ranking import PosteriorConfig, batch_pair_loss

__all__ = [
    "ConfigError",
    "NumericIntegrityError",
    "TrainConfig",
    "EpochRecord",
    "TrainReport",
    "train",
    "param_hash",
    "ordered_accuracy_from_scores",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericIntegrityError(FloatingPointError):
    """A non-finite loss or gradient appeared during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    batch_pairs: int = 16
    lr_extractor: float = 1e-5
    lr_ranker: float = 1e-4
    weight_decay: float = 1e-5
    clip_lo: float = 1e-7
    clip_hi: float = 1.0 - 1e-7
    rho: float = 0.9
    eps: float = 1e-8
    seed: int = 1
    freeze_extractor: bool = False
    decay_biases: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_pairs < 1:
            raise ConfigError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if not (self.lr_extractor > 0 and self.lr_ranker > 0):
            raise ConfigError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0.0 <= self.rho < 1.0 or not self.eps > 0:
            raise ConfigError(f"invalid rmsprop rho={self.rho} / eps={self.eps}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        try:
            self.posterior
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def posterior(self) -> PosteriorConfig:
        return PosteriorConfig(self.clip_lo, self.clip_hi)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_acc: float
    seconds: float

    def log_line(self) -> str:
        return f"{self.epoch}, {self.mean_loss:.6f}, {self.train_acc:.4f}, {self.seconds:.3f}"


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    freeze_extractor: bool = False
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.mean_loss for e in self.epochs]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def log_text(self) -> str:
        return "".join(e.log_line() + "\n" for e in self.epochs)


def param_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def ordered_accuracy_from_scores(scores: dict[str, float], pairs: list[ComparisonPair]) -> float:
    """Share of t in {0, 1} pairs ordered correctly (ties wrong); nan when there are none."""
    good = total = 0
    for p in pairs:
        if p.t == 0.5:
            continue
        total += 1
        d = scores[p.id_i] - scores[p.id_j]
        good += (d > 0) if p.t == 1.0 else (d < 0)
    return good / total if total else float("nan")


def _score_ids(model: RankModel, ds: PairDataset, ids: list[str]) -> dict[str, float]:
    return dict(zip(ids, model.scores(ds.stack(ids)).tolist()))


def _groups(model: RankModel, cfg: TrainConfig) -> tuple[list[int], list[ParamGroup]]:
    """One group per trainable tensor, in model order, so caches line up with the checkpoint."""
    n_extractor = len(model.params)
    index, groups = [], []
    for k, (name, p) in enumerate(model.named_parameters()):
        in_extractor = k < n_extractor
        if in_extractor and cfg.freeze_extractor:
            continue
        is_bias = name.endswith("bias") or name == "ranker.b"
        decay = cfg.weight_decay if (cfg.decay_biases or not is_bias) else 0.0
        lr = cfg.lr_extractor if in_extractor else cfg.lr_ranker
        index.append(k)
        groups.append(ParamGroup([p], lr, decay, name))
    return index, groups


def _check_inputs(dataset: PairDataset, spec: FeatureExtractorSpec) -> None:
    if not dataset.train_pairs:
        raise ConfigError("dataset has no training pairs")
    if dataset.image_shape != spec.input_shape:
        raise ConfigError(f"images are {dataset.image_shape} but the extractor expects {spec.input_shape}")


def train(dataset: PairDataset, spec: FeatureExtractorSpec, cfg: TrainConfig, *,
          model: RankModel | None = None, state: TrainState | None = None,
          out_dir=None, on_epoch_end: Callable[[int, RankModel], None] | None = None,
          ) -> tuple[RankModel, TrainReport, TrainState]:
    """Train one rank model on ``dataset.train_pairs`` for ``cfg.epochs`` epochs.

    Passing ``model`` and ``state`` (from :func:`load_checkpoint`) resumes at
    ``state.epoch``; the minibatch schedule depends only on (seed, epoch), so
    a resumed run reproduces an uninterrupted one. With ``out_dir`` the final
    checkpoint, its manifest, ``report.json`` and ``train_log.txt`` are
    written there. ``on_epoch_end(epoch, model)`` is also called once with
    epoch 0 before any update.
    """
    _check_inputs(dataset, spec)
    if model is None:
        model = RankModel.initialize(spec, cfg.seed)
    elif model.spec != spec:
        raise ConfigError("resumed model was built from a different extractor spec")
    params = model.parameters()
    if state is None:
        state = TrainState(OptimState.zeros_like(params), 0)
    index, groups = _groups(model, cfg)
    opt = RMSProp(groups, cfg.rho, cfg.eps,
                  OptimState([state.optim.cache[k] for k in index], state.optim.step))
    post = cfg.posterior
    report = TrainReport(freeze_extractor=cfg.freeze_extractor)
    train_ids = dataset.ids_in(dataset.train_pairs)
    frozen = model.extractor_parameters() if cfg.freeze_extractor else []
    if on_epoch_end is not None and state.epoch == 0:
        on_epoch_end(0, model)

    saved = [p.requires_grad for p in frozen]
    for p in frozen:
        p.requires_grad = False
    try:
        for epoch in range(state.epoch, cfg.epochs):
            t0 = time.perf_counter()
            losses = []
            for batch in minibatches(dataset.train_pairs, cfg.batch_pairs, cfg.seed, epoch):
                xi = dataset.stack([p.id_i for p in batch])
                xj = dataset.stack([p.id_j for p in batch])
                loss = batch_pair_loss(model, xi, xj, [p.t for p in batch], post)
                value = loss.item()
                opt.zero_grad()
                ad.backward(loss)
                if not np.isfinite(value) or not all(
                        np.isfinite(p.grad).all() for g in groups for p in g.params if p.grad is not None):
                    raise NumericIntegrityError(f"non-finite loss or gradient in epoch {epoch + 1}")
                opt.step()
                losses.append(value * len(batch))
            state.epoch = epoch + 1
            state.optim.step = opt.state.step
            scores = _score_ids(model, dataset, train_ids)
            rec = EpochRecord(epoch + 1, float(np.sum(losses) / len(dataset.train_pairs)),
                              ordered_accuracy_from_scores(scores, dataset.train_pairs),
                              time.perf_counter() - t0)
            report.epochs.append(rec)
            log.info("epoch %s", rec.log_line())
            if on_epoch_end is not None:
                on_epoch_end(epoch + 1, model)
    finally:
        for p, flag in zip(frozen, saved):
            p.requires_grad = flag
        for p in params:
            p.grad = None

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.ckpt"
        save_checkpoint(model, state, ckpt)
        report.checkpoint = str(ckpt)
        write_manifest(out / "model.ckpt.manifest", {
            "seed": cfg.seed,
            "epoch": state.epoch,
            "freeze_extractor": cfg.freeze_extractor,
            "loss_history": ",".join(f"{v:.17g}" for v in report.losses),
        })
        (out / "report.json").write_text(report.to_json())
        (out / "train_log.txt").write_text("epoch, mean_loss, train_acc, seconds\n" + report.log_text())
    return model, report, state
