"""Debugging sessions: verdict collection, concept-set growth, convergence,
resumability, and feedback replay.

Session runs here use scripted annotators so every path is deterministic.
"""

import json

import numpy as np
import pytest

from partproto.data import DatasetSpec, generate
from partproto.debugger import (
    DebugConfig,
    DebugSession,
    SessionReport,
    Verdict,
    collect_round,
    load_feedback,
    oracle_annotator,
    replay_annotator,
    run_session,
)
from partproto.errors import AnnotatorTimeout, DebugError
from partproto.explain import DisplayPatch
from partproto.model import ModelConfig, PartProtoNet, save_checkpoint
from partproto.training import TrainConfig


@pytest.fixture(scope="module")
def data():
    return generate(DatasetSpec(v=3, train_per_class=3, test_per_class=2,
                                confounded_classes=(), confounder_colors=(), seed=3))


def small_net(seed=0):
    return PartProtoNet(ModelConfig(v=3, d_latent=8, conv_channels=(6, 8), seed=seed))


def quick_debug_config(**kw):
    base = dict(a=2, max_rounds=3, min_display_area=1,
                finetune=TrainConfig(epochs=2, batch_size=9, freeze_embedding=True,
                                     projection_period=0))
    base.update(kw)
    return DebugConfig(**base)


def keep_all(patch, example):
    decision = "keep" if patch.area > 0 else "skip"
    return Verdict(prototype=-1, image_id=example.id, decision=decision)


def skip_all(patch, example):
    return Verdict(prototype=-1, image_id=example.id, decision="skip")


def forbid_first_call_only():
    state = {"calls": 0}

    def annotator(patch, example):
        state["calls"] += 1
        if state["calls"] == 1 and patch.area > 0:
            return Verdict(prototype=-1, image_id=example.id, decision="forbid")
        return keep_all(patch, example)

    return annotator


def forbid_always(patch, example):
    decision = "forbid" if patch.area > 0 else "skip"
    return Verdict(prototype=-1, image_id=example.id, decision=decision)


def fake_patch(image_id, pixels):
    return DisplayPatch(image_id=image_id, contours=[], area=int(pixels.sum()),
                        overlay=np.zeros((*pixels.shape, 3), dtype=np.uint8),
                        pixels=pixels)


# -- oracle annotator ------------------------------------------------------------


def example_with_mask(mask):
    from partproto.data import ImageExample
    rng = np.random.default_rng(0)
    return ImageExample(id="x", pixels=rng.uniform(0, 1, (8, 8, 3)), label=0, mask=mask)


def test_oracle_keeps_patch_inside_mask():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[2:6, 2:6] = 1
    pixels = np.zeros((8, 8), dtype=bool)
    pixels[3:5, 3:5] = True
    v = oracle_annotator(fake_patch("x", pixels), example_with_mask(mask))
    assert v.decision == "keep"


def test_oracle_forbids_patch_outside_mask():
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[0:2, 0:2] = 1
    pixels = np.zeros((8, 8), dtype=bool)
    pixels[5:8, 5:8] = True
    v = oracle_annotator(fake_patch("x", pixels), example_with_mask(mask))
    assert v.decision == "forbid"


def test_oracle_threshold_boundary():
    # 10 patch pixels, exactly 1 on the mask: ratio 0.1 is NOT below 0.1
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[0, 0] = 1
    pixels = np.zeros((8, 8), dtype=bool)
    pixels[0, 0:5] = True
    pixels[1, 0:5] = True
    pixels[0, 0] = True
    assert oracle_annotator(fake_patch("x", pixels), example_with_mask(mask)).decision == "keep"
    mask2 = np.zeros((8, 8), dtype=np.uint8)
    assert oracle_annotator(fake_patch("x", pixels), example_with_mask(mask2)).decision == "forbid"


def test_oracle_matches_pixel_count_rule():
    rng = np.random.default_rng(1)
    for _ in range(30):
        mask = (rng.uniform(size=(8, 8)) < 0.4).astype(np.uint8)
        pixels = rng.uniform(size=(8, 8)) < 0.3
        if not pixels.any():
            continue
        got = oracle_annotator(fake_patch("x", pixels), example_with_mask(mask))
        ratio = (pixels & (mask > 0)).sum() / pixels.sum()
        assert got.decision == ("forbid" if ratio < 0.10 else "keep")


def test_oracle_skips_without_mask_or_patch():
    assert oracle_annotator(fake_patch("x", np.ones((8, 8), dtype=bool)),
                            example_with_mask(None)).decision == "skip"
    mask = np.ones((8, 8), dtype=np.uint8)
    assert oracle_annotator(fake_patch("x", np.zeros((8, 8), dtype=bool)),
                            example_with_mask(mask)).decision == "skip"


# -- session runs -------------------------------------------------------------------


def test_keep_only_session_converges_unchanged(data):
    net = small_net()
    final, report = run_session(data, net, quick_debug_config(), keep_all)
    assert report.converged
    assert report.n_rounds == 1
    for name in net.PARAM_NAMES:
        np.testing.assert_array_equal(getattr(final, name).data, getattr(net, name).data)
    assert report.rounds[0]["n_forbid"] == 0
    assert report.rounds[0]["n_keep"] > 0


def test_skip_only_round_counts_as_converged(data):
    session = DebugSession(data, small_net(), quick_debug_config())
    done = session.step(skip_all)
    assert done and session.status == "converged"
    assert session.forbidden == {} and session.valid == {}


def test_forbid_round_then_convergence(data):
    net = small_net()
    session = DebugSession(data, net, quick_debug_config())
    final, report = run_session(data, net, quick_debug_config(),
                                forbid_first_call_only(), session=session)
    assert report.converged
    assert report.n_rounds == 2
    assert report.rounds[0]["n_forbid"] == 1
    assert report.rounds[1]["n_forbid"] == 0
    # the forbidden cut-out lands in the flagged prototype's class
    y = net.class_of_prototype(report.rounds[0]["verdicts"][0]["prototype"])
    assert len(session.forbidden[y]) == 1
    assert not np.array_equal(final.prototypes.data, net.prototypes.data)


def test_all_scope_mirrors_into_every_class(data):
    def forbid_all_scope(patch, example):
        if patch.area > 0:
            return Verdict(prototype=-1, image_id=example.id, decision="forbid", scope="all")
        return Verdict(prototype=-1, image_id=example.id, decision="skip")

    session = DebugSession(data, small_net(), quick_debug_config(max_rounds=1))
    verdicts = collect_round(session, forbid_all_scope)
    session.apply(verdicts)
    assert set(session.forbidden) == {0, 1, 2}
    counts = {y: len(cuts) for y, cuts in session.forbidden.items()}
    assert len(set(counts.values())) == 1
    np.testing.assert_array_equal(session.forbidden[0][0], session.forbidden[1][0])


def test_concept_sets_grow_monotonically(data):
    session = DebugSession(data, small_net(), quick_debug_config(max_rounds=2))
    sizes = []
    for _ in range(2):
        if session.status == "converged":
            break
        session.step(forbid_always)
        sizes.append(sum(len(c) for c in session.forbidden.values()))
    assert sizes == sorted(sizes)
    assert sizes[-1] > 0


def test_max_rounds_without_convergence_flagged(data):
    _, report = run_session(data, small_net(), quick_debug_config(max_rounds=2), forbid_always)
    assert not report.converged
    assert report.n_rounds == 2
    assert all(r["n_forbid"] > 0 for r in report.rounds)


def test_convergence_iff_no_forbids(data):
    for annotator, want in ((keep_all, True), (forbid_always, False)):
        _, report = run_session(data, small_net(), quick_debug_config(max_rounds=1), annotator)
        assert report.converged is want
        assert (report.rounds[-1]["n_forbid"] == 0) is want


def test_round_history_carries_metrics(data):
    session = DebugSession(data, small_net(), quick_debug_config())
    session.step(keep_all)
    entry = session.history[-1]
    assert 0.0 <= entry["train_macro_f1"] <= 1.0
    assert 0.0 <= entry["test_macro_f1"] <= 1.0
    assert len(entry["prototype_ap"]) == session.model.config.k
    assert np.array(entry["prototypes"]).shape == session.model.prototypes.data.shape


# -- timeouts and resumability -----------------------------------------------------


def timeout_after(n):
    state = {"calls": 0}

    def annotator(patch, example):
        state["calls"] += 1
        if state["calls"] > n:
            raise AnnotatorTimeout("no answer")
        return keep_all(patch, example)

    return annotator


def test_timeout_aborts_round_cleanly(data):
    session = DebugSession(data, small_net(), quick_debug_config())
    with pytest.raises(AnnotatorTimeout):
        session.collect(timeout_after(3))
    assert session.round_index == 0
    assert session.status == "collecting"
    assert session.feedback == [] and session.forbidden == {} and session.history == []
    # resumable: a later full round behaves like a fresh session
    done = session.step(keep_all)
    assert done
    _, fresh_report = run_session(data, small_net(), quick_debug_config(), keep_all)
    assert session.report().to_json() == fresh_report.to_json()


def test_state_round_trip_resumes_identically(data, tmp_path):
    cfg = quick_debug_config(max_rounds=2)

    live = DebugSession(data, small_net(), cfg)
    run_session(data, small_net(), cfg, forbid_first_call_only(), session=live)
    live_report = live.report()

    resumed = DebugSession(data, small_net(), cfg)
    resumed.step(forbid_first_call_only())
    resumed.save_state(tmp_path / "state.json")
    restored = DebugSession.load_state(tmp_path / "state.json", data)
    assert restored.round_index == resumed.round_index
    assert restored.status == resumed.status
    while restored.status != "converged" and restored.round_index < cfg.max_rounds:
        restored.step(keep_all)

    assert restored.report().to_json() == live_report.to_json()
    pa = save_checkpoint(live.model, tmp_path / "live.ckpt")
    pb = save_checkpoint(restored.model, tmp_path / "restored.ckpt")
    assert pa.read_bytes() == pb.read_bytes()


def test_feedback_log_replays_to_identical_outcome(data, tmp_path):
    log = tmp_path / "feedback.jsonl"
    final, report = run_session(data, small_net(), quick_debug_config(),
                                forbid_first_call_only(), feedback_path=log)
    lines = [json.loads(line) for line in log.read_text().strip().split("\n")]
    assert all("ts" in d and "round" in d for d in lines)

    verdicts = load_feedback(log)
    assert len(verdicts) == len(lines)
    replay_final, replay_report = run_session(data, small_net(), quick_debug_config(),
                                              replay_annotator(verdicts))
    assert replay_report.to_json() == report.to_json()
    pa = save_checkpoint(final, tmp_path / "a.ckpt")
    pb = save_checkpoint(replay_final, tmp_path / "b.ckpt")
    assert pa.read_bytes() == pb.read_bytes()


def test_reports_byte_identical_across_runs(data, tmp_path):
    a_model, a_report = run_session(data, small_net(), quick_debug_config(),
                                    forbid_first_call_only())
    b_model, b_report = run_session(data, small_net(), quick_debug_config(),
                                    forbid_first_call_only())
    assert a_report.to_json() == b_report.to_json()
    pa = save_checkpoint(a_model, tmp_path / "a.ckpt")
    pb = save_checkpoint(b_model, tmp_path / "b.ckpt")
    assert pa.read_bytes() == pb.read_bytes()
    assert isinstance(a_report, SessionReport)


# -- validation ---------------------------------------------------------------------


def test_verdict_validation():
    with pytest.raises(DebugError):
        Verdict(0, "x", "maybe").validate()
    with pytest.raises(DebugError):
        Verdict(0, "x", "keep", scope="galaxy").validate()
    Verdict(0, "x", "keep").validate()


def test_apply_rejects_unknown_references(data):
    session = DebugSession(data, small_net(), quick_debug_config())
    with pytest.raises(DebugError):
        session.apply([Verdict(0, "no-such-image", "forbid")])
    with pytest.raises(DebugError):
        session.apply([Verdict(99, session.pool[0].id, "forbid")])
    assert session.feedback == [] and session.forbidden == {}


def test_converged_session_rejects_more_rounds(data):
    session = DebugSession(data, small_net(), quick_debug_config())
    session.step(keep_all)
    with pytest.raises(DebugError):
        session.collect(keep_all)
    with pytest.raises(DebugError):
        session.finetune()


def test_config_validation(data):
    with pytest.raises(DebugError):
        quick_debug_config(a=0).validate()
    with pytest.raises(DebugError):
        quick_debug_config(overlap_threshold=1.5).validate()
    quick_debug_config().validate()
