"""Two-stage training plus debugging fine-tune and the remove-and-finetune
baseline.

Stage 1 fits the embedding and prototypes jointly with the aggregation
frozen at its +1/-0.5 pattern, projecting prototypes onto latent patches
periodically. Stage 2 refits only the aggregation as a (ridge) logistic
regression on the image-level activations. Debug fine-tuning keeps the
embedding frozen and disables projection, which otherwise drags prototypes
back onto confounders.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BaselineInapplicable, ConfigError, TrainingError
from .explain import image_activations
from .losses import ConceptSets, LossWeights, composite_loss, div_loss, forget_loss
from .metrics import f1
from .model import PartProtoNet, stage1_weights

__all__ = [
    "TrainConfig",
    "TrainReport",
    "train_stage1",
    "train_stage2",
    "finetune_debug",
    "remove_and_finetune",
    "fit_aggregation",
    "aggregation_ce",
]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    proto_lr_decay: float = 0.15   # prototype lr scale factor, applied every period
    proto_lr_period: int = 4
    projection_period: int = 10    # 0 disables projection
    freeze_embedding: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    robust_k: int = 3
    seed: int = 0
    optimizer: str = "adam"

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.proto_lr_decay <= 1:
            raise ConfigError("proto_lr_decay must be in (0, 1]")
        if self.proto_lr_period < 1 or self.projection_period < 0:
            raise ConfigError("bad lr or projection period")
        if self.optimizer != "adam":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        self.weights.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        kw = dict(d)
        kw["weights"] = LossWeights(**kw["weights"])
        return TrainConfig(**kw)


@dataclass
class TrainReport:
    epoch_losses: list[dict[str, float]]
    train_macro_f1: float
    test_macro_f1: float
    wall_time_s: float

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "train_macro_f1": self.train_macro_f1,
            "test_macro_f1": self.test_macro_f1,
            "wall_time_s": self.wall_time_s,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _Adam:
    """Adam over named parameter groups; each group takes its own lr per step."""

    def __init__(self, groups: list[tuple[str, Tensor]],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for _, t in groups]
        self.v = [np.zeros_like(t.data) for _, t in groups]
        self.t = 0

    def zero_grad(self) -> None:
        for _, tensor in self.groups:
            tensor.zero_grad()

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for (group, tensor), m, v in zip(self.groups, self.m, self.v):
            if tensor.grad is None:
                continue
            g = tensor.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tensor.data = tensor.data - lrs[group] * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _stacked(examples) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([e.pixels for e in examples])
    ys = np.array([e.label for e in examples], dtype=np.int64)
    return xs, ys


def _run_loop(model: PartProtoNet, dataset, config: TrainConfig, *,
              train_embedding: bool, project: bool,
              forbidden: ConceptSets | None, valid: ConceptSets | None,
              iaia_batch) -> TrainReport:
    """Shared epoch loop; mutates `model` in place."""
    start = time.perf_counter()
    train = dataset.train
    if config.batch_size > len(train):
        raise ConfigError(f"batch_size {config.batch_size} exceeds train size {len(train)}")
    groups: list[tuple[str, Tensor]] = [("proto", model.prototypes)]
    if train_embedding:
        groups += [("embed", t) for t in model.embedding_params()]
    opt = _Adam(groups)
    rng = np.random.default_rng(config.seed)
    xs_all, ys_all = _stacked(train)
    epoch_losses: list[dict[str, float]] = []

    for epoch in range(config.epochs):
        lrs = {"embed": config.lr,
               "proto": config.lr * config.proto_lr_decay ** (epoch // config.proto_lr_period)}
        perm = rng.permutation(len(train))
        sums: dict[str, float] = {}
        steps = 0
        for lo in range(0, len(train), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            opt.zero_grad()
            loss, parts = composite_loss(model, xs_all[idx], ys_all[idx], config.weights,
                                         robust_k=config.robust_k, forbidden=forbidden,
                                         valid=valid, iaia_batch=iaia_batch)
            if config.weights.lambda_div > 0:
                term = div_loss(model)
                parts["div"] = term.item()
                loss = ad.add(loss, ad.scale(term, config.weights.lambda_div))
                parts["total"] = loss.item()
            if not np.isfinite(parts["total"]):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step(lrs)
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val
            steps += 1
        epoch_losses.append({key: val / steps for key, val in sums.items()})
        if project and config.projection_period and (epoch + 1) % config.projection_period == 0:
            model.project(train)

    labels_train = [e.label for e in train]
    labels_test = [e.label for e in dataset.test]
    report = TrainReport(
        epoch_losses=epoch_losses,
        train_macro_f1=f1(model.predict(train), labels_train, mode="macro", v=model.config.v),
        test_macro_f1=f1(model.predict(dataset.test), labels_test, mode="macro", v=model.config.v),
        wall_time_s=time.perf_counter() - start)
    return report


def train_stage1(dataset, model: PartProtoNet, config: TrainConfig,
                 iaia_batch=None) -> tuple[PartProtoNet, TrainReport]:
    """Joint embedding + prototype fit with the aggregation frozen."""
    config.validate()
    cfg = model.config
    if not np.array_equal(model.aggregation.data, stage1_weights(cfg.v, cfg.protos_per_class)):
        raise ConfigError("stage 1 requires the fixed +1/-0.5 aggregation pattern")
    out = model.clone()
    report = _run_loop(out, dataset, config,
                       train_embedding=not config.freeze_embedding, project=True,
                       forbidden=None, valid=None, iaia_batch=iaia_batch)
    return out, report


def aggregation_ce(features: np.ndarray, labels: np.ndarray, w: np.ndarray,
                   ridge: float = 0.0) -> float:
    """Mean cross-entropy of softmax(features @ w.T), plus ridge * ||w||^2."""
    logits = features @ w.T
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    nll = lse - logits[np.arange(len(labels)), labels]
    return float(nll.mean() + ridge * (w ** 2).sum())


def fit_aggregation(features: np.ndarray, labels: np.ndarray, v: int, *,
                    steps: int = 500, lr: float = 0.05, ridge: float = 1e-4,
                    w0: np.ndarray | None = None,
                    pinned: np.ndarray | None = None) -> np.ndarray:
    """Deterministic full-batch Adam on the convex (ridge) logistic objective.

    `pinned` entries stay at their w0 values; the small ridge term keeps the
    optimum finite on separable features. The lr drops 10x at 60% and 85% of
    the budget so the iterate settles instead of orbiting the optimum."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = features.shape
    w = np.zeros((v, k)) if w0 is None else np.array(w0, dtype=np.float64)
    onehot = np.zeros((n, v))
    onehot[np.arange(n), labels] = 1.0
    m = np.zeros_like(w)
    s = np.zeros_like(w)
    b1, b2, eps = 0.9, 0.999, 1e-8
    decays = (int(steps * 0.6), int(steps * 0.85))
    for t in range(1, steps + 1):
        if t in decays:
            lr *= 0.1
        logits = features @ w.T
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (p - onehot).T @ features / n + 2.0 * ridge * w
        if pinned is not None:
            grad[pinned] = 0.0
        m = b1 * m + (1 - b1) * grad
        s = b2 * s + (1 - b2) * grad * grad
        w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(s / (1 - b2 ** t)) + eps)
        if pinned is not None:
            w[pinned] = w0[pinned] if w0 is not None else 0.0
    return w


def train_stage2(dataset, model: PartProtoNet, *, steps: int = 500, lr: float = 0.05,
                 ridge: float = 1e-4) -> PartProtoNet:
    """Refit only the aggregation on the frozen activation features."""
    out = model.clone()
    features, _ = image_activations(model, dataset.train)
    labels = np.array([e.label for e in dataset.train], dtype=np.int64)
    out.aggregation.data = fit_aggregation(features, labels, model.config.v,
                                           steps=steps, lr=lr, ridge=ridge)
    return out


def finetune_debug(dataset, model: PartProtoNet, forbidden: ConceptSets,
                   valid: ConceptSets, config: TrainConfig,
                   iaia_batch=None) -> tuple[PartProtoNet, TrainReport]:
    """Fine-tune against the forbidden/valid concept sets.

    Projection stays off here: it tends to pull prototypes straight back
    onto confounder patches. With the embedding frozen the forbidden patches
    are constants, so forget/remember gradients flow to prototypes only."""
    config.validate()
    out = model.clone()
    pre = forget_loss(out, forbidden).item() if forbidden else 0.0
    report = _run_loop(out, dataset, config,
                       train_embedding=not config.freeze_embedding, project=False,
                       forbidden=forbidden, valid=valid, iaia_batch=iaia_batch)
    # the decrease is asserted only while there is something left to forget:
    # below 1% of the activation ceiling (a patch equal to the prototype) the
    # forbidden set counts as forgotten and the comparison is noise-level
    floor = 0.01 * float(out.act_from_sqdist(0.0))
    if forbidden and config.weights.lambda_f > 0 and config.epochs > 0 and pre > floor:
        post = forget_loss(out, forbidden).item()
        if post >= pre:
            raise TrainingError(
                f"forgetting failed to decrease on the forbidden set ({pre:.6g} -> {post:.6g})")
    return out, report


def remove_and_finetune(dataset, model: PartProtoNet, bad_prototypes, *,
                        steps: int = 500, lr: float = 0.05,
                        ridge: float = 1e-4) -> PartProtoNet:
    """Baseline: zero the flagged prototypes' aggregation weights, then refit
    the remaining aggregation entries. Inapplicable when a class would lose
    all of its prototypes."""
    bad = sorted(set(int(j) for j in bad_prototypes))
    k = model.config.k
    if any(j < 0 or j >= k for j in bad):
        raise ConfigError(f"prototype ids out of range: {bad}")
    for y in range(model.config.v):
        if all(j in bad for j in model.prototype_range(y)):
            raise BaselineInapplicable(f"class {y} would keep no prototypes")
    out = model.clone()
    out.aggregation.data[:, bad] = 0.0
    if steps > 0:
        features, _ = image_activations(model, dataset.train)
        labels = np.array([e.label for e in dataset.train], dtype=np.int64)
        pinned = np.zeros_like(out.aggregation.data, dtype=bool)
        pinned[:, bad] = True
        out.aggregation.data = fit_aggregation(
            features, labels, model.config.v, steps=steps, lr=lr, ridge=ridge,
            w0=out.aggregation.data, pinned=pinned)
    return out
