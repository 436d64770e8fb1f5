"""Concept-level debugging sessions.

A session repeats: inspect each prototype's most activated images, show the
highlighted patch to an annotator, collect forbid/keep/skip verdicts, turn
forbid and keep regions into cut-outs feeding the forgetting and remembering
losses, fine-tune, and stop once a whole round produces no forbid verdict.

Rounds are atomic: nothing is recorded until every verdict of the round is
in, so an annotator timeout leaves the session exactly as it was. All state
serializes to JSON (the model rides along as a base64 checkpoint), which is
what makes sessions resumable and reports byte-reproducible.
"""

from __future__ import annotations

import base64
import copy
import dataclasses
import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, ImageExample
from .errors import AnnotatorTimeout, DebugError
from .explain import (
    DisplayPatch,
    attribution,
    display_patches,
    extract_cutout,
    prototype_activation_precision,
    top_activated,
)
from .metrics import evaluate, f1
from .model import PartProtoNet, load_checkpoint, save_checkpoint
from .training import TrainConfig, finetune_debug

__all__ = [
    "Verdict",
    "DebugConfig",
    "DebugSession",
    "SessionReport",
    "collect_round",
    "oracle_annotator",
    "run_session",
    "replay_annotator",
    "load_feedback",
]

DECISIONS = ("forbid", "keep", "skip")
SCOPES = ("class", "all")


@dataclass(frozen=True)
class Verdict:
    prototype: int
    image_id: str
    decision: str  # forbid | keep | skip
    scope: str = "class"

    def validate(self) -> None:
        if self.decision not in DECISIONS:
            raise DebugError(f"unknown decision {self.decision!r}")
        if self.scope not in SCOPES:
            raise DebugError(f"unknown scope {self.scope!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "Verdict":
        return Verdict(prototype=int(d["prototype"]), image_id=d["image_id"],
                       decision=d["decision"], scope=d.get("scope", "class"))


@dataclass
class DebugConfig:
    a: int = 5                     # images inspected per prototype
    max_rounds: int = 8
    overlap_threshold: float = 0.10
    min_display_area: int = 20     # 32x32 inputs leave ~50 px above the cut
    tau: float = 5.0
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=20, freeze_embedding=True, projection_period=0))

    def validate(self) -> None:
        if self.a < 1 or self.max_rounds < 1:
            raise DebugError("a and max_rounds must be >= 1")
        if not 0 <= self.overlap_threshold <= 1:
            raise DebugError("overlap_threshold must be in [0, 1]")
        self.finetune.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DebugConfig":
        kw = dict(d)
        kw["finetune"] = TrainConfig.from_dict(kw["finetune"])
        return DebugConfig(**kw)


@dataclass
class SessionReport:
    rounds: list[dict]
    converged: bool
    final_train_macro_f1: float
    final_test_macro_f1: float

    @property
    def n_rounds(self) -> int:
        return len(self.rounds)

    def to_dict(self) -> dict:
        return {
            "rounds": self.rounds,
            "converged": self.converged,
            "n_rounds": self.n_rounds,
            "final_train_macro_f1": self.final_train_macro_f1,
            "final_test_macro_f1": self.final_test_macro_f1,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def oracle_annotator(patch, example: ImageExample, threshold: float = 0.10,
                     scope: str = "class") -> Verdict:
    """Simulated annotator: forbid when the highlighted patch lies (very
    nearly) outside the object mask, keep otherwise, skip without a mask."""
    if example.mask is None:
        return Verdict(prototype=-1, image_id=example.id, decision="skip", scope=scope)
    patch_px = int(patch.pixels.sum())
    if patch_px == 0:
        return Verdict(prototype=-1, image_id=example.id, decision="skip", scope=scope)
    overlap = int((patch.pixels & (example.mask > 0)).sum()) / patch_px
    decision = "forbid" if overlap < threshold else "keep"
    return Verdict(prototype=-1, image_id=example.id, decision=decision, scope=scope)


def replay_annotator(verdicts: list[Verdict]):
    """Annotator that replays recorded verdicts in traversal order."""
    queue = list(verdicts)

    def annotator(patch, example: ImageExample) -> Verdict:
        if not queue:
            raise DebugError("replay exhausted: more patches shown than verdicts recorded")
        v = queue.pop(0)
        if v.image_id != example.id:
            raise DebugError(f"replay diverged: expected image {v.image_id}, got {example.id}")
        return v

    return annotator


def _empty_patch(example: ImageExample) -> "DisplayPatch":
    h, w = example.pixels.shape[:2]
    return DisplayPatch(image_id=example.id, contours=[], area=0,
                        overlay=np.clip(example.pixels * 255, 0, 255).astype(np.uint8),
                        pixels=np.zeros((h, w), dtype=bool))


def _b64_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "b64": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()}


def _array_b64(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["b64"]), dtype="<f8").reshape(d["shape"]).copy()


class DebugSession:
    """Holds the model, the accumulated forbidden/valid concept sets, the
    feedback log, and the per-round history."""

    def __init__(self, dataset: Dataset, model: PartProtoNet, config: DebugConfig,
                 feedback_path=None):
        config.validate()
        self.dataset = dataset
        self.model = model.clone()
        self.config = config
        self.feedback_path = feedback_path
        self.round_index = 0
        self.status = "collecting"
        self.forbidden: dict[int, list[np.ndarray]] = {}
        self.valid: dict[int, list[np.ndarray]] = {}
        self.feedback: list[dict] = []
        self.history: list[dict] = []
        # inspection pool: the augmentation-free visualization split when the
        # dataset has one, the train split otherwise
        self.pool = dataset.visualization if dataset.visualization else dataset.train
        self._by_id = {ex.id: ex for ex in self.pool}

    def example(self, image_id: str) -> ImageExample | None:
        """The inspection-pool example with this id, if any."""
        return self._by_id.get(image_id)

    # -- round mechanics -----------------------------------------------------

    def inspect(self) -> list[tuple[int, ImageExample, DisplayPatch]]:
        """The round's inspection items in canonical order: for each
        prototype, its top-a pool images with the largest display patch (an
        empty patch when nothing clears the area floor). Pure."""
        if self.status == "converged":
            raise DebugError("session already converged")
        items = []
        for j in range(self.model.config.k):
            for example, _ in top_activated(self.model, self.pool, j, self.config.a):
                amap = attribution(self.model, j, example)
                patches = display_patches(amap, example, min_area=self.config.min_display_area)
                shown = (max(patches, key=lambda p: p.area) if patches
                         else _empty_patch(example))
                items.append((j, example, shown))
        return items

    def collect(self, annotator) -> list[Verdict]:
        """One inspection pass over all prototypes. Pure: session state is
        untouched, so an AnnotatorTimeout aborts the round cleanly."""
        verdicts = []
        for j, example, shown in self.inspect():
            # the annotator is consulted even when nothing is displayable
            # (it sees an empty patch), so a replayed session consumes
            # recorded verdicts in lockstep
            raw = annotator(shown, example)
            raw.validate()
            if shown.area == 0 and raw.decision != "skip":
                raise DebugError("forbid/keep verdicts need a displayable patch")
            verdicts.append(dataclasses.replace(raw, prototype=j, image_id=example.id))
        return verdicts

    def apply(self, verdicts: list[Verdict]) -> None:
        """Record a completed round: log feedback, grow F and V, update
        status. Cut-outs are recomputed from (prototype, image) pairs, which
        is deterministic given the current model."""
        if self.status == "converged":
            raise DebugError("session already converged")
        records = []
        additions: list[tuple[str, int, str, np.ndarray, list]] = []
        for v in verdicts:
            v.validate()
            record = v.to_dict()
            record["round"] = self.round_index
            record["ts"] = time.time()
            if v.decision in ("forbid", "keep"):
                example = self._by_id.get(v.image_id)
                if example is None:
                    raise DebugError(f"verdict references unknown image {v.image_id!r}")
                if not 0 <= v.prototype < self.model.config.k:
                    raise DebugError(f"verdict references unknown prototype {v.prototype}")
                amap = attribution(self.model, v.prototype, example)
                cut = extract_cutout(self.model, amap, example,
                                     scope="ALL" if v.scope == "all" else
                                     self.model.class_of_prototype(v.prototype))
                record["boxes"] = [list(b) for b in cut.boxes]
                additions.append((v.decision, v.prototype, v.scope, cut.patches, cut.boxes))
            records.append(record)

        for decision, proto, scope, patches, _ in additions:
            target = self.forbidden if decision == "forbid" else self.valid
            classes = (range(self.model.config.v) if scope == "all"
                       else [self.model.class_of_prototype(proto)])
            for y in classes:
                target.setdefault(y, []).append(patches.copy())

        self.feedback.extend(records)
        if self.feedback_path is not None:
            with open(self.feedback_path, "a") as fh:
                for record in records:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.round_index += 1
        n_forbid = sum(1 for v in verdicts if v.decision == "forbid")
        self.status = "converged" if n_forbid == 0 else "finetuning"
        self._record_round(verdicts)

    def _record_round(self, verdicts: list[Verdict]) -> None:
        self.history.append({
            "round": self.round_index - 1,
            "verdicts": [v.to_dict() for v in verdicts],
            "n_forbid": sum(1 for v in verdicts if v.decision == "forbid"),
            "n_keep": sum(1 for v in verdicts if v.decision == "keep"),
            "n_skip": sum(1 for v in verdicts if v.decision == "skip"),
        })

    def finetune(self) -> None:
        if self.status != "finetuning":
            raise DebugError(f"nothing to fine-tune in status {self.status!r}")
        self.model, _ = finetune_debug(self.dataset, self.model, self.forbidden,
                                       self.valid, self.config.finetune)
        self.status = "collecting"

    def step(self, annotator) -> bool:
        """Collect one round, then fine-tune if it found confounders.
        Returns True when the session has converged."""
        verdicts = self.collect(annotator)
        self.apply(verdicts)
        if self.status == "finetuning":
            self.finetune()
            self.annotate_metrics()
            return False
        self.annotate_metrics()
        return True

    def annotate_metrics(self) -> None:
        """Attach end-of-round model quality to the last history entry."""
        entry = self.history[-1]
        labels_train = [e.label for e in self.dataset.train]
        labels_test = [e.label for e in self.dataset.test]
        v = self.model.config.v
        entry["train_macro_f1"] = f1(self.model.predict(self.dataset.train),
                                     labels_train, mode="macro", v=v)
        test_eval = evaluate(self.model.predict(self.dataset.test), labels_test, v)
        entry["test_macro_f1"] = test_eval.macro_f1
        entry["test_eval"] = test_eval.to_dict()
        aps = prototype_activation_precision(self.model, self.dataset.test,
                                             tau=self.config.tau, variant="modified")
        # None instead of NaN so the entry survives strict JSON parsers
        entry["prototype_ap"] = [None if np.isnan(x) else float(x) for x in aps]
        entry["prototypes"] = self.model.prototypes.data.tolist()

    # -- state ------------------------------------------------------------------

    def to_state(self) -> dict:
        with tempfile.NamedTemporaryFile(delete=False) as tmp:
            path = tmp.name
        try:
            save_checkpoint(self.model, path)
            with open(path, "rb") as fh:
                model_bytes = fh.read()
        finally:
            os.unlink(path)
        return {
            "version": 1,
            "round_index": self.round_index,
            "status": self.status,
            "config": self.config.to_dict(),
            "forbidden": {str(y): [_b64_array(a) for a in cuts]
                          for y, cuts in sorted(self.forbidden.items())},
            "valid": {str(y): [_b64_array(a) for a in cuts]
                      for y, cuts in sorted(self.valid.items())},
            "feedback": self.feedback,
            "history": self.history,
            "model_b64": base64.b64encode(model_bytes).decode(),
        }

    def save_state(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_state(), fh, sort_keys=True)

    @classmethod
    def from_state(cls, state: dict, dataset: Dataset, feedback_path=None) -> "DebugSession":
        if state.get("version") != 1:
            raise DebugError(f"unsupported session state version {state.get('version')}")
        with tempfile.NamedTemporaryFile(delete=False) as tmp:
            tmp.write(base64.b64decode(state["model_b64"]))
            path = tmp.name
        try:
            model = load_checkpoint(path)
        finally:
            os.unlink(path)
        session = cls(dataset, model, DebugConfig.from_dict(state["config"]),
                      feedback_path=feedback_path)
        session.round_index = state["round_index"]
        session.status = state["status"]
        session.forbidden = {int(y): [_array_b64(d) for d in cuts]
                             for y, cuts in state["forbidden"].items()}
        session.valid = {int(y): [_array_b64(d) for d in cuts]
                         for y, cuts in state["valid"].items()}
        session.feedback = list(state["feedback"])
        session.history = list(state["history"])
        return session

    @classmethod
    def load_state(cls, path, dataset: Dataset, feedback_path=None) -> "DebugSession":
        with open(path) as fh:
            return cls.from_state(json.load(fh), dataset, feedback_path=feedback_path)

    def report(self) -> SessionReport:
        rounds = copy.deepcopy(self.history)  # timestamps live only in the feedback log
        labels_train = [e.label for e in self.dataset.train]
        labels_test = [e.label for e in self.dataset.test]
        v = self.model.config.v
        return SessionReport(
            rounds=rounds,
            converged=self.status == "converged",
            final_train_macro_f1=f1(self.model.predict(self.dataset.train),
                                    labels_train, mode="macro", v=v),
            final_test_macro_f1=f1(self.model.predict(self.dataset.test),
                                   labels_test, mode="macro", v=v))


def collect_round(session: DebugSession, annotator) -> list[Verdict]:
    """One inspection round over every prototype's top-a images."""
    return session.collect(annotator)


def load_feedback(path) -> list[Verdict]:
    """Verdicts from a feedback JSONL file, in recorded order."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(Verdict.from_dict(json.loads(line)))
    return out


def run_session(dataset: Dataset, model: PartProtoNet, config: DebugConfig,
                annotator, feedback_path=None,
                session: DebugSession | None = None) -> tuple[PartProtoNet, SessionReport]:
    """Drive a session to convergence or the round cap."""
    if session is None:
        session = DebugSession(dataset, model, config, feedback_path=feedback_path)
    while session.round_index < config.max_rounds and session.status != "converged":
        try:
            done = session.step(annotator)
        except AnnotatorTimeout:
            break
        if done:
            break
    return session.model, session.report()
