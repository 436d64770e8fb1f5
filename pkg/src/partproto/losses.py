"""Training and debugging objectives.

Every term is built as an autodiff graph over the model parameters, so a
single backward() gives exact gradients. The brute-force loop oracles these
are tested against live in the test suite, not here.

Forbidden/valid concept sets (F, V) map class id -> list of cut-outs, each
cut-out being an (m, d') array of latent patches. Empty sets contribute 0,
so with F = V = {} the debugging loss reduces to the base loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import ConfigError, DataError
from .model import BatchForward, PartProtoNet

__all__ = [
    "LossWeights",
    "ConceptSets",
    "cluster_loss",
    "sep_loss",
    "rrr_loss",
    "iaia_loss",
    "forget_loss",
    "remember_loss",
    "div_loss",
    "param_distance",
    "composite_loss",
]

ConceptSets = dict[int, list[np.ndarray]]


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.5
    lambda_s: float = 0.08
    lambda_f: float = 100.0
    lambda_r: float = 0.0
    lambda_iaia: float = 0.0
    lambda_div: float = 0.0

    def validate(self) -> None:
        for name, val in self.__dict__.items():
            if val < 0:
                raise ConfigError(f"{name} must be nonnegative, got {val}")


def _mean_scalars(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def _check_labels(model: PartProtoNet, ys: np.ndarray) -> None:
    if ys.min() < 0 or ys.max() >= model.config.v:
        raise ConfigError("label outside the model's class range has no prototypes")


def _own_rows(fwd_dists: Tensor, i: int, y: int, model: PartProtoNet) -> Tensor:
    per = model.config.protos_per_class
    return fwd_dists[i, y * per:(y + 1) * per, :]


def _other_rows(fwd_dists: Tensor, i: int, y: int, model: PartProtoNet) -> Tensor:
    per = model.config.protos_per_class
    k = model.config.k
    parts = []
    if y > 0:
        parts.append(fwd_dists[i, 0:y * per, :])
    if (y + 1) * per < k:
        parts.append(fwd_dists[i, (y + 1) * per:k, :])
    if not parts:
        raise ConfigError("separation needs at least two classes")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def _cluster_from(fwd: BatchForward, ys: np.ndarray, model: PartProtoNet, robust_k: int) -> Tensor:
    terms = [ad.smallest_k_mean(_own_rows(fwd.dists, i, int(y), model), robust_k)
             for i, y in enumerate(ys)]
    return _mean_scalars(terms)


def _sep_from(fwd: BatchForward, ys: np.ndarray, model: PartProtoNet, robust_k: int) -> Tensor:
    terms = [ad.smallest_k_mean(_other_rows(fwd.dists, i, int(y), model), robust_k)
             for i, y in enumerate(ys)]
    return ad.neg(_mean_scalars(terms))


def _check_robust_k(robust_k: int) -> None:
    if robust_k not in (1, 3):
        raise ConfigError(f"robust_k must be 1 or 3, got {robust_k}")


def cluster_loss(model: PartProtoNet, xs: np.ndarray, ys: np.ndarray, robust_k: int = 1) -> Tensor:
    """Mean over examples of the (robust) min over pairs (p in P^y, patch q)
    of |p-q|^2: pulls some own-class prototype toward every example."""
    _check_robust_k(robust_k)
    ys = np.asarray(ys)
    _check_labels(model, ys)
    return _cluster_from(model.forward_batch_t(xs), ys, model, robust_k)


def sep_loss(model: PartProtoNet, xs: np.ndarray, ys: np.ndarray, robust_k: int = 1) -> Tensor:
    """Negated mean of the (robust) min over pairs with OTHER classes'
    prototypes: pushes them away from this example. Always <= 0."""
    _check_robust_k(robust_k)
    ys = np.asarray(ys)
    _check_labels(model, ys)
    if model.config.v < 2:
        raise ConfigError("separation needs at least two classes")
    return _sep_from(model.forward_batch_t(xs), ys, model, robust_k)


def rrr_loss(masks: np.ndarray, input_gradients: np.ndarray) -> float:
    """Right-for-the-right-reasons penalty on precomputed input gradients:
    mean over examples of sum((1-m) * grad)^2 elementwise."""
    masks = np.asarray(masks, dtype=np.float64)
    gs = np.asarray(input_gradients, dtype=np.float64)
    if gs.shape[:3] != masks.shape or gs.ndim != 4:
        raise ShapeError(f"rrr_loss: gradients {gs.shape} do not match masks {masks.shape}")
    off = (1.0 - masks)[..., None] * gs
    return float((off ** 2).sum(axis=(1, 2, 3)).mean())


def iaia_loss(model: PartProtoNet, xs: np.ndarray, ys: np.ndarray,
              masks: list[np.ndarray | None], lambda_iaia: float) -> Tensor:
    """Attribution-mask penalty: own-class prototype activation outside the
    mask plus any activation of other classes' prototypes, as L2 norms of
    the latent-resolution attribution maps, averaged over examples and
    scaled by lambda_iaia. Masks are averaged over receptive fields to
    latent resolution before gating."""
    ys = np.asarray(ys)
    _check_labels(model, ys)
    for i, m in enumerate(masks):
        if m is None:
            raise DataError(f"iaia_loss: example {i} has no mask")
    fwd = model.forward_batch_t(xs)
    per = model.config.protos_per_class
    k = model.config.k
    terms = []
    for i, y in enumerate(ys):
        own = range(int(y) * per, (int(y) + 1) * per)
        gate = Tensor(1.0 - model.mask_to_latent(masks[i]).reshape(-1))
        parts = []
        for p in range(k):
            amap = fwd.acts[i, p, :]
            parts.append(ad.l2norm(ad.mul(amap, gate) if p in own else amap))
        total = parts[0]
        for t in parts[1:]:
            total = ad.add(total, t)
        terms.append(total)
    return ad.scale(_mean_scalars(terms), lambda_iaia)


def _act_on_patches(model: PartProtoNet, y: int, patches: np.ndarray) -> Tensor:
    rows = model.prototype_range(y)
    protos = model.prototypes[rows.start:rows.stop]
    return model.act_from_sqdist_t(ad.pairwise_sqdist(protos, Tensor(patches)))


def forget_loss(model: PartProtoNet, forbidden: ConceptSets) -> Tensor:
    """(1/v) sum over classes of the single highest activation any of the
    class's prototypes reaches on any patch of any forbidden cut-out."""
    v = model.config.v
    terms = []
    for y in range(v):
        cuts = forbidden.get(y, [])
        if not cuts:
            continue
        pile = np.concatenate(cuts, axis=0)
        terms.append(ad.amax(_act_on_patches(model, y, pile)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / v)


def remember_loss(model: PartProtoNet, valid: ConceptSets) -> Tensor:
    """-(1/v) sum over classes of the weakest best-match activation between
    the class's prototypes and its valid cut-outs. Each cut-out is
    represented by its best-matching patch per prototype (the max), and the
    min runs over (prototype, cut-out) pairs."""
    v = model.config.v
    terms = []
    for y in range(v):
        cuts = valid.get(y, [])
        if not cuts:
            continue
        best = [ad.amax(_act_on_patches(model, y, c), axis=1) for c in cuts]
        stacked = best[0] if len(best) == 1 else ad.concat(best, axis=0)
        terms.append(ad.amin(stacked))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0 / v)


def div_loss(model: PartProtoNet) -> Tensor:
    """(1/k) sum over prototypes of the squared distance to the nearest
    OTHER prototype of the same class; singleton classes contribute 0."""
    per = model.config.protos_per_class
    if per < 2:
        return Tensor(0.0)
    terms = []
    for y in range(model.config.v):
        rows = model.prototype_range(y)
        block = model.prototypes[rows.start:rows.stop]
        d = ad.pairwise_sqdist(block, block)
        for r in range(per):
            others = []
            if r > 0:
                others.append(d[r, 0:r])
            if r + 1 < per:
                others.append(d[r, r + 1:per])
            row = others[0] if len(others) == 1 else ad.concat(others, axis=0)
            terms.append(ad.amin(row))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / model.config.k)


def param_distance(a: PartProtoNet, b: PartProtoNet, global_match: bool = False) -> float:
    """Permutation-invariant squared parameter distance: embedding and
    aggregation compare directly; prototypes compare under the best
    permutation, matched within same-class blocks unless global_match."""
    ca, cb = a.config, b.config
    if (ca.v, ca.protos_per_class, ca.d_latent, ca.conv_channels) != \
       (cb.v, cb.protos_per_class, cb.d_latent, cb.conv_channels):
        raise ShapeError("param_distance: models have different shapes")
    total = 0.0
    for pa, pb in zip(a.embedding_params(), b.embedding_params()):
        total += float(((pa.data - pb.data) ** 2).sum())
    total += float(((a.aggregation.data - b.aggregation.data) ** 2).sum())

    pa, pb = a.prototypes.data, b.prototypes.data
    cost = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
    if global_match:
        rows, cols = linear_sum_assignment(cost)
        total += float(cost[rows, cols].sum())
    else:
        for y in range(ca.v):
            r = a.prototype_range(y)
            block = cost[r.start:r.stop, r.start:r.stop]
            rows, cols = linear_sum_assignment(block)
            total += float(block[rows, cols].sum())
    return total


def composite_loss(model: PartProtoNet, xs: np.ndarray, ys: np.ndarray,
                   weights: LossWeights, robust_k: int = 3,
                   forbidden: ConceptSets | None = None,
                   valid: ConceptSets | None = None,
                   iaia_batch: tuple[np.ndarray, np.ndarray, list[np.ndarray]] | None = None,
                   ) -> tuple[Tensor, dict[str, float]]:
    """Cross-entropy plus the weighted auxiliary terms, sharing one forward
    pass for the batch terms. Returns (loss tensor, per-term floats)."""
    weights.validate()
    _check_robust_k(robust_k)
    ys = np.asarray(ys)
    _check_labels(model, ys)
    fwd = model.forward_batch_t(xs)
    ce = ad.softmax_cross_entropy_mean(fwd.logits, ys)
    parts = {"ce": ce.item()}
    loss = ce
    if weights.lambda_c > 0:
        term = _cluster_from(fwd, ys, model, robust_k)
        parts["cluster"] = term.item()
        loss = ad.add(loss, ad.scale(term, weights.lambda_c))
    if weights.lambda_s > 0:
        if model.config.v < 2:
            raise ConfigError("separation needs at least two classes")
        term = _sep_from(fwd, ys, model, robust_k)
        parts["sep"] = term.item()
        loss = ad.add(loss, ad.scale(term, weights.lambda_s))
    if weights.lambda_f > 0 and forbidden:
        term = forget_loss(model, forbidden)
        parts["forget"] = term.item()
        loss = ad.add(loss, ad.scale(term, weights.lambda_f))
    if weights.lambda_r > 0 and valid:
        term = remember_loss(model, valid)
        parts["remember"] = term.item()
        loss = ad.add(loss, ad.scale(term, weights.lambda_r))
    if weights.lambda_iaia > 0 and iaia_batch is not None:
        ixs, iys, imasks = iaia_batch
        term = iaia_loss(model, ixs, iys, list(imasks), weights.lambda_iaia)
        parts["iaia"] = term.item()
        loss = ad.add(loss, term)
    parts["total"] = loss.item()
    return loss, parts
