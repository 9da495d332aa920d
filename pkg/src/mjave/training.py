"""Losses, the Adam optimizer and the (multitask or split) training loop."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dataio import Instance, Manifest, Vocabulary
from .evaluation import evaluate
from .model import AblationConfig, Batch, MJAVE, ModelConfig, SeparateModels
from .numerics import Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingDiverged(nx.NumericalError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss ({value}) at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    train_fraction: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int | None = None
    attr_reduction: str = "sum"
    d: int = 64
    layers: int = 2
    ff: int = 128
    d_a: int = 200
    dtype: str = "float32"
    untie_visual_value: bool = False
    include_special_in_sum: bool = False
    freeze_text_encoder: bool = False
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationConfig(**self.ablation)
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    def model_config(self, manifest: Manifest, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig(
            labels=list(manifest.labels), vocab_size=len(vocab), max_len=manifest.max_len, d=self.d,
            layers=self.layers, ff=self.ff, d_a=self.d_a, d_v=manifest.d_v, k=manifest.k,
            untie_visual_value=self.untie_visual_value, include_special_in_sum=self.include_special_in_sum,
            dtype=self.dtype, ablation=self.ablation,
        )


# ---------------------------------------------------------------------------
# losses


def loss_attribute(attr: Tensor, gold: np.ndarray, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy over labels, averaged over the batch if there is one.

    ``reduction`` combines the L per-label terms: ``"mean"`` or ``"sum"``.
    """
    gold = np.asarray(gold, dtype=attr.dtype)
    p = nx.clamp(attr, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = nx.log(p) * gold + nx.log(1.0 - p) * (1.0 - gold)
    loss = nx.neg(nx.mean(ll))
    if reduction == "sum":
        return nx.scale(loss, attr.shape[-1])
    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


def loss_value(values: Tensor, tag_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the gold tags over unmasked tokens.

    With a batch, each instance's token mean is averaged over instances.
    """
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    nll = nx.neg(nx.log(nx.pick(values, tag_ids)))
    counts = mask.sum(axis=-1, keepdims=True)
    if (counts == 0).any():
        raise ValueError("loss_value: an instance has no unmasked token")
    w = (mask / counts / mask.shape[0]).astype(values.dtype).reshape(nll.shape)
    return nx.sum(nll * w)


def map_value_to_attribute(values: Tensor, mask: np.ndarray) -> Tensor:
    """Per-label score 0.5 * (max_i P(B-l) + max_i P(I-l)) over masked-in tokens.

    Tag layout is ``O, B-l0, I-l0, B-l1, I-l1, ...``.
    """
    mask = np.asarray(mask, dtype=bool)[..., None]
    b_cols = nx.index(values, (Ellipsis, slice(1, None, 2)))
    i_cols = nx.index(values, (Ellipsis, slice(2, None, 2)))
    return nx.scale(nx.masked_max(b_cols, mask, axis=-2) + nx.masked_max(i_cols, mask, axis=-2), 0.5)


def kl_penalty(attr: Tensor, mapped) -> Tensor:
    """sum_l a_l log(a_l / m_l), verbatim over sigmoid scores (may be negative).

    Both arguments are floored at 1e-12 inside the logs; a batch is averaged.
    """
    mapped = nx.as_tensor(mapped, like=attr)
    per = nx.sum(attr * (nx.log(attr) - nx.log(mapped)), axis=-1)
    return nx.mean(per)


def total_loss(loss_a: Tensor, loss_v: Tensor, kl: Tensor, lam: float, ablation: AblationConfig | None = None) -> Tensor:
    if ablation is not None and not ablation.use_kl:
        lam = 0.0
    out = loss_a + loss_v
    return out + nx.scale(kl, lam) if lam else out


def compute_losses(model: MJAVE, batch: Batch, lam: float, ablation: AblationConfig | None = None,
                   objective: str = "joint", attr_reduction: str = "sum") -> dict[str, Tensor]:
    """Forward pass plus every loss term; ``objective`` is joint, attr or value."""
    ab = ablation or model.ablation
    out = model.forward(batch, ab)
    la = loss_attribute(out.attr, batch.gold_attr, attr_reduction)
    lv = loss_value(out.values, batch.tag_ids, batch.content)
    if ab.teacher_force_values:
        mapped = Tensor(batch.gold_mapped.astype(model.dtype))
    else:
        mapped = map_value_to_attribute(out.values, batch.content)
    kl = kl_penalty(out.attr, mapped)
    if objective == "attr":
        loss = la
    elif objective == "value":
        loss = lv
    else:
        loss = total_loss(la, lv, kl, lam, ab)
    return {"loss": loss, "loss_a": la, "loss_v": lv, "kl": kl}


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def sample_fraction(instances: Sequence[Instance], fraction: float, seed: int) -> list[Instance]:
    """Seeded subsample stratified by each instance's first (sorted) attribute."""
    if fraction >= 1.0:
        return list(instances)
    rng = np.random.default_rng([seed, 17])
    groups: dict[str, list[int]] = {}
    for i, inst in enumerate(instances):
        key = sorted(inst.attributes)[0] if inst.attributes else ""
        groups.setdefault(key, []).append(i)
    keep = []
    for key in sorted(groups):
        idx = groups[key]
        n = max(1, int(round(fraction * len(idx))))
        keep.extend(rng.permutation(idx)[:n].tolist())
    return [instances[i] for i in sorted(keep)]


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params: dict[str, Tensor], snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        params[k].data = arr.copy()


@dataclass
class TrainResult:
    model: MJAVE | SeparateModels
    history: list[dict]
    best_epoch: int | dict


def mean_loss(model: MJAVE, instances: Sequence[Instance], lam: float, batch_size: int = 64,
              objective: str = "joint", attr_reduction: str = "sum") -> dict[str, float]:
    totals = {"loss": 0.0, "loss_a": 0.0, "loss_v": 0.0, "kl": 0.0}
    for start in range(0, len(instances), batch_size):
        chunk = instances[start:start + batch_size]
        parts = compute_losses(model, model.batch(chunk), lam, objective=objective, attr_reduction=attr_reduction)
        for k in totals:
            totals[k] += float(parts[k].data) * len(chunk)
    return {k: v / len(instances) for k, v in totals.items()}


def _fit(model: MJAVE, train_set: Sequence[Instance], valid_set: Sequence[Instance], cfg: TrainConfig,
         objective: str, log_fh=None, tag: str | None = None) -> tuple[list[dict], int]:
    params = model.trainable()
    if cfg.freeze_text_encoder:
        params = {k: p for k, p in params.items() if not k.startswith("enc.")}
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([cfg.seed, 3])
    select = "attr_f1" if objective == "attr" else "value_f1"
    history = []

    def record(entry):
        if tag:
            entry = {"head": tag, **entry}
        history.append(entry)
        if log_fh is not None:
            log_fh.write(json.dumps(entry) + "\n")
            log_fh.flush()

    init = mean_loss(model, train_set, cfg.lam, objective=objective, attr_reduction=cfg.attr_reduction)
    record({"epoch": 0, **init, **_valid_scores(model, valid_set)})

    best_score, best_epoch, best = -1.0, 0, _snapshot(params)
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = {"loss": 0.0, "loss_a": 0.0, "loss_v": 0.0, "kl": 0.0}
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            parts = compute_losses(model, model.batch(chunk), cfg.lam, objective=objective,
                                   attr_reduction=cfg.attr_reduction)
            value = float(parts["loss"].data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, bi, value)
            for p in model.trainable().values():
                p.zero_grad()
            nx.backward(parts["loss"], params)
            opt.step()
            for k in sums:
                sums[k] += float(parts[k].data) * len(chunk)
        entry = {"epoch": epoch, **{k: v / len(order) for k, v in sums.items()}, **_valid_scores(model, valid_set)}
        record(entry)
        log.info("epoch %d %s", epoch, entry)
        score = entry[select] if valid_set else -entry["loss"]
        if score > best_score:
            best_score, best_epoch, best = score, epoch, _snapshot(params)
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    _restore(params, best)
    return history, best_epoch


def _valid_scores(model: MJAVE, valid_set: Sequence[Instance]) -> dict[str, float]:
    if not valid_set:
        return {}
    rep = evaluate(model, valid_set)
    return {"attr_f1": rep.attribute["f1"], "value_f1": rep.value["f1"]}


def train(train_set: Sequence[Instance], valid_set: Sequence[Instance], manifest: Manifest, cfg: TrainConfig,
          log_path: str | Path | None = None) -> TrainResult:
    """Fit a model; returns the best-validation parameters and the epoch log.

    With multitask learning ablated, two models sharing the same
    initialisation seed are fitted separately, one per subtask.
    """
    train_set = sample_fraction(train_set, cfg.train_fraction, cfg.seed)
    vocab = Vocabulary.build(train_set)
    mcfg = cfg.model_config(manifest, vocab)
    log_fh = open(log_path, "w") if log_path else None
    try:
        if cfg.ablation.use_mtl:
            model = MJAVE(mcfg, vocab, seed=cfg.seed)
            history, best = _fit(model, train_set, valid_set, cfg, "joint", log_fh)
            return TrainResult(model, history, best)
        attr_model = MJAVE(copy.deepcopy(mcfg), vocab, seed=cfg.seed)
        value_model = MJAVE(copy.deepcopy(mcfg), vocab, seed=cfg.seed)
        h_a, best_a = _fit(attr_model, train_set, valid_set, cfg, "attr", log_fh, tag="attr")
        h_v, best_v = _fit(value_model, train_set, valid_set, cfg, "value", log_fh, tag="value")
        return TrainResult(SeparateModels(attr_model, value_model), h_a + h_v, {"attr": best_a, "value": best_v})
    finally:
        if log_fh is not None:
            log_fh.close()
