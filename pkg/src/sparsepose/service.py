"""HTTP generation service: job queue, worker, introspection endpoints.

One daemon worker drains a FIFO queue, so generations run serially and
deterministically. Job status moves queued -> running -> done | failed,
transitions guarded by a lock; a job record is never deleted, so submitted
== pending + terminal at all times.
"""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import queue
import threading
import time
import uuid
from typing import Optional

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .backbone import SparsePoseModel, load_trained_model, schedule_from_config
from .config import FullConfig
from .pose import PoseError, parse_pose_document, skeleton_to_json
from .sampler import SampleRequest, sample
from .tensorio import to_png_bytes

_TRANSITIONS = {
    "queued": {"running"},
    "running": {"done", "failed"},
    "done": set(),
    "failed": set(),
}


class JobStoreError(RuntimeError):
    pass


@dataclasses.dataclass
class JobRecord:
    status: str = "queued"
    image_png_base64: Optional[str] = None
    attention: Optional[list] = None
    error: Optional[str] = None


class JobStore:
    """Thread-safe job records with monotone status transitions."""

    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict = {}

    def create(self) -> str:
        job_id = uuid.uuid4().hex
        with self._lock:
            self._jobs[job_id] = JobRecord()
        return job_id

    def get(self, job_id: str) -> Optional[JobRecord]:
        with self._lock:
            record = self._jobs.get(job_id)
            return dataclasses.replace(record) if record else None

    def transition(self, job_id: str, status: str, **updates) -> None:
        with self._lock:
            record = self._jobs[job_id]
            if status not in _TRANSITIONS[record.status]:
                raise JobStoreError(
                    f"illegal transition {record.status} -> {status}")
            record.status = status
            for key, value in updates.items():
                setattr(record, key, value)

    def counts(self) -> dict:
        with self._lock:
            out = {"queued": 0, "running": 0, "done": 0, "failed": 0}
            for record in self._jobs.values():
                out[record.status] += 1
            return out


class GenerationService:
    """Owns the model, the queue, and the single generation worker."""

    def __init__(self, model: SparsePoseModel, cfg: FullConfig,
                 checkpoint_hash: str):
        self.model = model
        self.cfg = cfg
        self.schedule = schedule_from_config(cfg.schedule)
        self.checkpoint_hash = checkpoint_hash
        self.store = JobStore()
        self.queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._drain, daemon=True)
        self._worker.start()

    # -- request parsing ------------------------------------------------

    def parse_request(self, body: dict) -> SampleRequest:
        if not isinstance(body, dict):
            raise ValueError("request body must be a JSON object")
        if "pose" not in body:
            raise ValueError("missing required field 'pose'")
        try:
            pose_set = parse_pose_document(body["pose"], self.model.spec)
        except PoseError as exc:
            raise ValueError(f"invalid pose document: {exc}") from exc
        defaults = self.cfg.sampling
        return SampleRequest(
            pose_set=pose_set,
            caption=str(body.get("caption", "")),
            seed=int(body.get("seed", 0)),
            steps=int(body.get("steps", defaults.steps)),
            cfg_scale=float(body.get("cfg_scale", defaults.cfg_scale)),
            cond_scale=float(body.get("cond_scale", defaults.cond_scale)),
            capture_attention=bool(body.get("capture_attention", False)),
        )

    # -- worker -----------------------------------------------------------

    def submit(self, req: SampleRequest,
               snapshot_t: Optional[int] = None) -> str:
        job_id = self.store.create()
        self.queue.put((job_id, req, snapshot_t))
        return job_id

    def _drain(self) -> None:
        while True:
            job_id, req, snapshot_t = self.queue.get()
            self.store.transition(job_id, "running")
            try:
                image, maps = sample(self.model, self.schedule, req,
                                     gating=self.cfg.gating,
                                     snapshot_t=snapshot_t)
                png = base64.b64encode(to_png_bytes(image)).decode("ascii")
                attention = None
                if maps is not None:
                    attention = [
                        {"keypoint": m.keypoint_name, "map": m.map.tolist()}
                        for m in maps
                    ]
                self.store.transition(job_id, "done",
                                      image_png_base64=png,
                                      attention=attention)
            except Exception as exc:
                self.store.transition(job_id, "failed", error=str(exc))
            finally:
                self.queue.task_done()

    def wait_idle(self, timeout: float = 30.0) -> bool:
        """Block until every submitted job reaches a terminal status."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            counts = self.counts()
            if counts["queued"] == 0 and counts["running"] == 0:
                return True
            time.sleep(0.01)
        return False

    def counts(self) -> dict:
        return self.store.counts()


def load_service(checkpoint_path: str) -> GenerationService:
    """Build a service around a training checkpoint file."""
    with open(checkpoint_path, "rb") as fh:
        checkpoint_hash = hashlib.sha256(fh.read()).hexdigest()
    model, cfg = load_trained_model(checkpoint_path)
    return GenerationService(model, cfg, checkpoint_hash)


def create_app(service: GenerationService) -> FastAPI:
    app = FastAPI(title="pose-conditioned generation service")
    app.state.service = service

    def bad_request(message: str) -> JSONResponse:
        return JSONResponse(status_code=400, content={"error": message})

    @app.post("/generate", status_code=202)
    async def generate(body: dict, snapshot_t: Optional[int] = None):
        try:
            req = service.parse_request(body)
        except (ValueError, TypeError) as exc:
            return bad_request(str(exc))
        return {"job_id": service.submit(req, snapshot_t=snapshot_t)}

    @app.get("/jobs/{job_id}")
    async def job_status(job_id: str):
        record = service.store.get(job_id)
        if record is None:
            return JSONResponse(status_code=404,
                                content={"error": f"unknown job {job_id!r}"})
        out: dict = {"status": record.status}
        if record.image_png_base64 is not None:
            out["image_png_base64"] = record.image_png_base64
        if record.attention is not None:
            out["attention"] = record.attention
        if record.error is not None:
            out["error"] = record.error
        return out

    @app.get("/skeleton")
    async def skeleton():
        doc = json.loads(skeleton_to_json(service.model.spec))
        doc["default_image_size"] = [service.cfg.model.image_size,
                                     service.cfg.model.image_size]
        return doc

    @app.get("/health")
    async def health():
        return {
            "checkpoint_hash": service.checkpoint_hash,
            "queue_depth": service.counts()["queued"],
        }

    return app


def serve(checkpoint_path: str, host: str = "127.0.0.1",
          port: int = 8701) -> None:
    import uvicorn

    app = create_app(load_service(checkpoint_path))
    uvicorn.run(app, host=host, port=port)
