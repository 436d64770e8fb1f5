"""HTTP adapter exposing one debugging session to a browser.

The server wraps a single DebugSession. Verdicts posted over HTTP are staged
for the current round and committed all at once when the round is closed,
ordered by the session's canonical inspection traversal (with skip filled in
for uninspected items), so a session driven over HTTP produces byte-identical
checkpoints and reports to one driven in process. Every endpoint delegates to
one debugger or metrics operation; no model math lives here.

Round closing runs as a background job (one at a time). Reads during a job
serve the previous round's cached snapshot.
"""

from __future__ import annotations

import base64
import io
import itertools
import threading
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel

from .debugger import DebugSession, Verdict
from .errors import DebugError
from .explain import attribution, display_patches

__all__ = ["JobStatus", "create_app"]

TERMINAL_STATES = ("done", "failed")


@dataclass
class JobStatus:
    id: str
    kind: str               # train | finetune
    state: str = "queued"   # queued | running | done | failed
    progress: float = 0.0
    message: str = ""

    def advance(self, state: str | None = None, progress: float | None = None,
                message: str | None = None) -> None:
        if self.state in TERMINAL_STATES:
            raise DebugError(f"job {self.id} is already {self.state}")
        if state is not None:
            self.state = state
        if progress is not None:
            self.progress = float(progress)
        if message is not None:
            self.message = message

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "state": self.state,
                "progress": self.progress, "message": self.message}


class FeedbackIn(BaseModel):
    prototype: int
    image: str
    decision: str
    scope: str = "class"


def _packed_pixels(pixels: np.ndarray) -> str:
    return base64.b64encode(np.packbits(pixels.astype(np.uint8)).tobytes()).decode()


def _png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


class _Service:
    """Session wrapper holding staged verdicts, the round snapshot, and jobs.

    The lock serializes writes (staging, round commit); the long fine-tune
    computation runs outside it so polling reads never stall.
    """

    def __init__(self, session: DebugSession):
        self.session = session
        self.lock = threading.RLock()
        self.jobs: dict[str, JobStatus] = {}
        self._job_ids = itertools.count(1)
        self.staged: dict[tuple[int, str], Verdict] = {}
        self._view: list | None = None
        self._view_round = -1

    # -- snapshots ------------------------------------------------------------

    def view(self) -> list:
        """Inspection items for the current round, cached until the round
        commits. After convergence the last cached view keeps serving reads."""
        with self.lock:
            if (self._view is None or self._view_round != self.session.round_index):
                if self.session.status != "collecting":
                    return self._view or []
                self._view = self.session.inspect()
                self._view_round = self.session.round_index
            return self._view

    def view_entry(self, prototype: int, image_id: str):
        for j, example, patch in self.view():
            if j == prototype and example.id == image_id:
                return example, patch
        return None

    def counts(self) -> tuple[dict, dict]:
        """Committed forbidden/valid sizes per class plus the contribution of
        verdicts staged in the open round."""
        model = self.session.model
        forbidden = {y: len(c) for y, c in self.session.forbidden.items()}
        valid = {y: len(c) for y, c in self.session.valid.items()}
        for (j, _), v in self.staged.items():
            if v.decision == "skip":
                continue
            target = forbidden if v.decision == "forbid" else valid
            classes = (range(model.config.v) if v.scope == "all"
                       else [model.class_of_prototype(j)])
            for y in classes:
                target[y] = target.get(y, 0) + 1
        as_json = lambda d: {str(y): d.get(y, 0) for y in range(model.config.v)}
        return as_json(forbidden), as_json(valid)

    def active_job(self) -> JobStatus | None:
        for job in self.jobs.values():
            if job.state not in TERMINAL_STATES:
                return job
        return None

    # -- round commit -----------------------------------------------------------

    def assemble(self) -> list[Verdict]:
        """The round's verdicts in canonical inspection order; items the
        client never judged default to skip. Matches what an in-process
        collect() would have returned for the same decisions."""
        out = []
        for j, example, _ in self.view():
            v = self.staged.get((j, example.id))
            out.append(v if v is not None else
                       Verdict(prototype=j, image_id=example.id, decision="skip"))
        return out

    def start_round_close(self) -> JobStatus:
        job = JobStatus(id=f"job-{next(self._job_ids)}", kind="finetune")
        self.jobs[job.id] = job
        threading.Thread(target=self._run_round_close, args=(job,), daemon=True).start()
        return job

    def _run_round_close(self, job: JobStatus) -> None:
        try:
            job.advance(state="running", progress=0.1, message="recording feedback")
            with self.lock:
                closed_round = self.session.round_index
                self.session.apply(self.assemble())
                self.staged.clear()
            if self.session.status == "finetuning":
                job.advance(progress=0.3, message="fine-tuning")
                self.session.finetune()
            job.advance(progress=0.9, message="computing metrics")
            with self.lock:
                self.session.annotate_metrics()
                self._view = None
            done_msg = ("converged" if self.session.status == "converged"
                        else f"round {closed_round} complete")
            job.advance(state="done", progress=1.0, message=done_msg)
        except Exception as exc:  # surfaced to the client via job polling
            job.advance(state="failed", message=f"{type(exc).__name__}: {exc}")


def create_app(session: DebugSession) -> FastAPI:
    app = FastAPI(title="part-prototype debugger")
    # browser UI is served from a different local port during development
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    svc = _Service(session)
    app.state.service = svc

    def session_summary() -> dict:
        forbidden, valid = svc.counts()
        job = svc.active_job()
        return {
            "round_index": session.round_index,
            "status": session.status,
            "converged": session.status == "converged",
            "k": session.model.config.k,
            "v": session.model.config.v,
            "pool_size": len(session.pool),
            "forbidden_counts": forbidden,
            "valid_counts": valid,
            "staged": len(svc.staged),
            "n_feedback": len(session.feedback),
            "rounds_done": len(session.history),
            "config": session.config.to_dict(),
            "job": job.to_dict() if job else None,
        }

    @app.get("/api/session")
    def get_session() -> dict:
        with svc.lock:
            return session_summary()

    @app.get("/api/prototypes")
    def get_prototypes() -> dict:
        with svc.lock:
            cards: dict[int, dict] = {}
            for j, example, patch in svc.view():
                card = cards.setdefault(j, {
                    "prototype": j,
                    "class": session.model.class_of_prototype(j),
                    "images": [],
                })
                staged = svc.staged.get((j, example.id))
                card["images"].append({
                    "image_id": example.id,
                    "area": patch.area,
                    "overlay_url": f"/api/images/{example.id}/overlay/{j}",
                    "pixels_shape": list(patch.pixels.shape),
                    "pixels_b64": _packed_pixels(patch.pixels),
                    "verdict": staged.to_dict() if staged else None,
                })
            return {"round_index": session.round_index, "status": session.status,
                    "prototypes": [cards[j] for j in sorted(cards)]}

    @app.get("/api/images/{image_id}/overlay/{prototype}")
    def get_overlay(image_id: str, prototype: int) -> Response:
        with svc.lock:
            if not 0 <= prototype < session.model.config.k:
                raise HTTPException(404, f"unknown prototype {prototype}")
            entry = svc.view_entry(prototype, image_id)
            if entry is not None:
                _, patch = entry
                return Response(_png_bytes(patch.overlay), media_type="image/png")
            example = session.example(image_id)
            if example is None:
                raise HTTPException(404, f"unknown image {image_id!r}")
            amap = attribution(session.model, prototype, example)
            patches = display_patches(amap, example,
                                      min_area=session.config.min_display_area)
            if patches:
                rgb = max(patches, key=lambda p: p.area).overlay
            else:
                rgb = np.clip(example.pixels * 255, 0, 255).astype(np.uint8)
            return Response(_png_bytes(rgb), media_type="image/png")

    @app.post("/api/feedback")
    def post_feedback(body: FeedbackIn) -> dict:
        with svc.lock:
            if session.status == "converged":
                raise HTTPException(410, "session already converged")
            if svc.active_job() is not None:
                raise HTTPException(409, "fine-tuning in progress")
            if session.round_index >= session.config.max_rounds:
                raise HTTPException(409, "round cap reached")
            verdict = Verdict(prototype=body.prototype, image_id=body.image,
                              decision=body.decision, scope=body.scope)
            try:
                verdict.validate()
            except DebugError as exc:
                raise HTTPException(400, str(exc))
            if not 0 <= body.prototype < session.model.config.k:
                raise HTTPException(404, f"unknown prototype {body.prototype}")
            if session.example(body.image) is None:
                raise HTTPException(404, f"unknown image {body.image!r}")
            entry = svc.view_entry(body.prototype, body.image)
            if entry is None:
                raise HTTPException(404, "image is not in this round's inspection set")
            _, patch = entry
            if patch.area == 0 and body.decision != "skip":
                raise HTTPException(400, "forbid/keep verdicts need a displayable patch")
            svc.staged[(body.prototype, body.image)] = verdict
            forbidden, valid = svc.counts()
            return {"staged": len(svc.staged), "round_index": session.round_index,
                    "forbidden_counts": forbidden, "valid_counts": valid}

    @app.post("/api/rounds/finetune")
    def post_finetune() -> dict:
        with svc.lock:
            if session.status == "converged":
                raise HTTPException(410, "session already converged")
            if svc.active_job() is not None:
                raise HTTPException(409, "a job is already running")
            if session.round_index >= session.config.max_rounds:
                raise HTTPException(409, "round cap reached")
            svc.view()  # pin the inspection snapshot before the thread starts
            return svc.start_round_close().to_dict()

    @app.get("/api/jobs/{job_id}")
    def get_job(job_id: str) -> dict:
        job = svc.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return job.to_dict()

    @app.get("/api/metrics")
    def get_metrics() -> dict:
        # verdicts and prototype snapshots stay out: this is the chart feed
        with svc.lock:
            rounds = [
                {key: value for key, value in entry.items()
                 if key not in ("verdicts", "prototypes")}
                for entry in session.history
            ]
            return {"rounds": rounds, "converged": session.status == "converged"}

    return app
