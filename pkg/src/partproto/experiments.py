"""End-to-end pipelines for the confounded-square benchmark.

Wraps dataset generation, two-stage training, oracle-driven debugging and
the mask-supervised baseline into deterministic seedable runs, so the
headline comparisons (confounding gap, debugging recovery) come out of a
single call per seed.
"""

from __future__ import annotations

import dataclasses
import functools
import time

import numpy as np

from .data import DEFAULT_CONFOUNDER_COLORS, Dataset, DatasetSpec, generate
from .debugger import DebugConfig, DebugSession, Verdict, oracle_annotator
from .explain import prototype_activation_precision
from .losses import LossWeights
from .metrics import f1
from .model import ModelConfig, PartProtoNet
from .training import TrainConfig, TrainingError, train_stage1, train_stage2

__all__ = [
    "benchmark_spec",
    "single_confounder_spec",
    "train_baseline",
    "benchmark_debug_config",
    "benchmark_oracle",
    "farthest_candidate_patch",
    "all_forbidden_prototypes",
    "debug_loop",
    "mask_batch",
    "train_mask_baseline",
    "confounding_run",
    "recovery_run",
    "remembering_ablation",
]

# Texture settings for the benchmark variant: enough jitter that glyphs are
# non-trivial, little enough that the shortcut squares dominate stage-1
# training on every seed.
BENCHMARK_TEXTURE = dict(glyph_color_jitter=8, glyph_pixel_noise=3,
                         glyph_sizes=(13, 16))


def benchmark_spec(seed: int, confounded: bool = True) -> DatasetSpec:
    """Dataset spec for one benchmark arm. The unconfounded arm differs
    only in dropping the squares, so the glyph task itself is identical."""
    kw = dict(BENCHMARK_TEXTURE)
    if not confounded:
        kw.update(confounded_classes=(), confounder_colors=())
    return DatasetSpec(seed=seed, **kw)


def single_confounder_spec(seed: int) -> DatasetSpec:
    """Benchmark variant with a single confounded class. With only one
    square family to unlearn, a plain collect/fine-tune session (no readout
    refit between rounds) can reach an all-keep round on its own."""
    return DatasetSpec(seed=seed, confounded_classes=(0,),
                       confounder_colors=(DEFAULT_CONFOUNDER_COLORS[0],),
                       **BENCHMARK_TEXTURE)


def train_baseline(dataset: Dataset, seed: int, *, epochs: int = 20) -> PartProtoNet:
    """Two-stage training. The epoch count is a multiple of the projection
    period so stage 1 ends exactly on a projection step: round-zero
    attribution maps then peak on real training patches instead of on
    drifted off-manifold prototypes."""
    model = PartProtoNet(ModelConfig(seed=seed))
    model, _ = train_stage1(dataset, model, TrainConfig(epochs=epochs, seed=seed))
    return train_stage2(dataset, model)


def benchmark_debug_config(seed: int) -> DebugConfig:
    """Session settings for the recovery runs.

    The fine-tune keeps the embedding frozen (stored cut-outs stay valid
    constants), runs longer than the interactive default so repelled
    prototypes can cross between latent families within one round, and uses
    a forgetting weight scaled to the latent diameter of this model family
    (the published weight assumes distances two orders larger; here it
    would blow prototypes off the data manifold entirely).
    """
    return DebugConfig(
        max_rounds=6,
        overlap_threshold=0.02,
        finetune=TrainConfig(epochs=40, lr=3e-3, proto_lr_decay=1.0,
                             freeze_embedding=True, projection_period=0,
                             seed=seed,
                             weights=LossWeights(lambda_f=1.0, lambda_r=1.0)))


def benchmark_oracle(config: DebugConfig, scope: str = "all"):
    """Oracle annotator for the benchmark.

    Default scope is "all": the squares and the noise background are
    artifacts for every class, so a rejected patch lands in every class's
    forgetting set. The overlap threshold is low because displays quantize
    coarsely on the small latent grid; only patches that miss the glyph
    (very nearly) entirely should count as confounders.
    """
    return functools.partial(oracle_annotator,
                             threshold=config.overlap_threshold, scope=scope)


def farthest_candidate_patch(model: PartProtoNet, dataset: Dataset, y: int,
                             pile: np.ndarray) -> np.ndarray:
    """The class-y training patch farthest from every stored forbidden
    patch. With the annotator's rejections carpeting the artifact families,
    the farthest remaining patch sits deep inside a genuine concept."""
    best, best_d = None, -1.0
    for e in dataset.train:
        if e.label != y:
            continue
        z = model.embed(e.pixels).data.reshape(-1, model.config.d_latent)
        dmin = ((z[:, None, :] - pile[None, :, :]) ** 2).sum(axis=2).min(axis=1)
        i = int(np.argmax(dmin))
        if dmin[i] > best_d:
            best_d, best = float(dmin[i]), z[i].copy()
    return best


def all_forbidden_prototypes(verdicts: list[Verdict]) -> list[int]:
    """Prototypes every one of whose displays was rejected in a round:
    the annotator found nothing worth keeping about them."""
    per_proto: dict[int, list[str]] = {}
    for v in verdicts:
        per_proto.setdefault(v.prototype, []).append(v.decision)
    return sorted(j for j, ds in per_proto.items()
                  if ds and all(d == "forbid" for d in ds))


def _forbidden_pile(session: DebugSession) -> np.ndarray | None:
    cuts = [c for y in session.forbidden for c in session.forbidden[y]]
    if not cuts:
        return None
    return np.concatenate(cuts, axis=0)


def debug_loop(dataset: Dataset, model: PartProtoNet, config: DebugConfig,
               annotator, *, reseed_patience: int = 2,
               session: DebugSession | None = None) -> tuple[PartProtoNet, DebugSession]:
    """Managed debugging session for the benchmark experiments.

    Per round: collect verdicts, reseed prototypes the annotator has fully
    rejected for `reseed_patience` consecutive rounds (they jump to the
    own-class patch farthest from the forbidden pile -- rejection by
    elimination), fine-tune, then refit the linear readout on the frozen
    activations, since prototype movement leaves it stale. A fine-tune
    round that can no longer reduce activation on the forbidden pile stops
    the session with the model from the last completed round.
    """
    if session is None:
        session = DebugSession(dataset, model, config)
    rejections = {j: 0 for j in range(model.config.k)}
    while session.round_index < config.max_rounds and session.status != "converged":
        verdicts = session.collect(annotator)
        rejected = set(all_forbidden_prototypes(verdicts))
        for j in rejections:
            rejections[j] = rejections[j] + 1 if j in rejected else 0
        session.apply(verdicts)
        if session.status != "finetuning":
            break
        pile = _forbidden_pile(session)
        if pile is not None and reseed_patience > 0:
            for j, n in rejections.items():
                if n >= reseed_patience:
                    y = session.model.class_of_prototype(j)
                    session.model.prototypes.data[j] = farthest_candidate_patch(
                        session.model, dataset, y, pile)
                    rejections[j] = 0
        try:
            session.finetune()
        except TrainingError:
            break
        session.model = train_stage2(dataset, session.model)
        session.annotate_metrics()
    return session.model, session


def mask_batch(dataset: Dataset, n: int) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """The first n training examples of the confounded classes, one per
    class round-robin, as a mask-supervision batch."""
    classes = list(dataset.spec.confounded_classes) or sorted(
        {e.label for e in dataset.train})
    picked = []
    i = 0
    while len(picked) < n:
        y = classes[i % len(classes)]
        skip = i // len(classes)
        pool = [e for e in dataset.train if e.label == y]
        picked.append(pool[skip])
        i += 1
    xs = np.stack([e.pixels for e in picked])
    ys = np.array([e.label for e in picked], dtype=np.int64)
    masks = [e.mask for e in picked]
    return xs, ys, masks


def train_mask_baseline(dataset: Dataset, seed: int, *, n_masks: int = 3,
                        lambda_iaia: float = 1.0, epochs: int = 20) -> PartProtoNet:
    """Two-stage training with the attribution-mask penalty on n annotated
    examples, matching the cut-out supervision given to the debugger."""
    model = PartProtoNet(ModelConfig(seed=seed))
    cfg = TrainConfig(epochs=epochs, seed=seed,
                      weights=LossWeights(lambda_iaia=lambda_iaia))
    model, _ = train_stage1(dataset, model, cfg, iaia_batch=mask_batch(dataset, n_masks))
    return train_stage2(dataset, model)


def _macro_f1(model: PartProtoNet, examples) -> float:
    labels = [e.label for e in examples]
    return f1(model.predict(examples), labels, mode="macro", v=model.config.v)


def confounding_run(seed: int) -> dict:
    """One seed of the confounding-gap comparison: identical training on
    the confounded and unconfounded arms, scored on the clean test split."""
    t0 = time.perf_counter()
    clean_ds = generate(benchmark_spec(seed, confounded=False))
    conf_ds = generate(benchmark_spec(seed, confounded=True))
    clean = train_baseline(clean_ds, seed)
    vanilla = train_baseline(conf_ds, seed)
    return {
        "seed": seed,
        "clean_f1": _macro_f1(clean, clean_ds.test),
        "vanilla_f1": _macro_f1(vanilla, conf_ds.test),
        "wall_s": time.perf_counter() - t0,
    }


def _mean_ap(model: PartProtoNet, examples) -> float:
    per_proto = prototype_activation_precision(model, examples, tau=5.0,
                                               variant="modified")
    return float(np.nanmean(per_proto))


def recovery_run(seed: int, *, with_mask_baseline: bool = True) -> dict:
    """One seed of the debugging-recovery comparison.

    Returns clean / vanilla / debugged test macro-F1 (all on the clean test
    split), mean modified activation precision of the vanilla and debugged
    prototypes, plus the mask-supervised baseline arm and session metadata.
    """
    t0 = time.perf_counter()
    clean_ds = generate(benchmark_spec(seed, confounded=False))
    conf_ds = generate(benchmark_spec(seed, confounded=True))
    clean = train_baseline(clean_ds, seed)
    vanilla = train_baseline(conf_ds, seed)

    config = benchmark_debug_config(seed)
    debugged, session = debug_loop(conf_ds, vanilla.clone(), config,
                                   benchmark_oracle(config))
    out = {
        "seed": seed,
        "clean_f1": _macro_f1(clean, clean_ds.test),
        "vanilla_f1": _macro_f1(vanilla, conf_ds.test),
        "debugged_f1": _macro_f1(debugged, conf_ds.test),
        "vanilla_ap": _mean_ap(vanilla, conf_ds.test),
        "debugged_ap": _mean_ap(debugged, conf_ds.test),
        "converged": session.status == "converged",
        "n_rounds": session.round_index,
    }
    if with_mask_baseline:
        masked = train_mask_baseline(conf_ds, seed)
        out["mask_baseline_f1"] = _macro_f1(masked, conf_ds.test)
    out["wall_s"] = time.perf_counter() - t0
    return out


def remembering_ablation(seed: int, *, rounds: int = 2) -> dict:
    """One seed of the remembering-loss ablation.

    Two plain collect/fine-tune sessions from the same confounded baseline,
    identical in everything but the remembering weight. No readout refit
    between rounds: the comparison should read out where the prototypes
    ended up, not how well a fresh linear layer can route around them.
    """
    t0 = time.perf_counter()
    dataset = generate(benchmark_spec(seed, confounded=True))
    vanilla = train_baseline(dataset, seed)
    base = dataclasses.replace(benchmark_debug_config(seed), max_rounds=rounds)
    arms = {}
    for name, lambda_r in (("with_remember_f1", base.finetune.weights.lambda_r),
                           ("without_remember_f1", 0.0)):
        weights = dataclasses.replace(base.finetune.weights, lambda_r=lambda_r)
        config = dataclasses.replace(
            base, finetune=dataclasses.replace(base.finetune, weights=weights))
        session = DebugSession(dataset, vanilla.clone(), config)
        oracle = benchmark_oracle(config)
        for _ in range(rounds):
            session.apply(session.collect(oracle))
            if session.status == "converged":
                break
            try:
                session.finetune()
            except TrainingError:
                break
        arms[name] = _macro_f1(session.model, dataset.test)
    arms["seed"] = seed
    arms["wall_s"] = time.perf_counter() - t0
    return arms
