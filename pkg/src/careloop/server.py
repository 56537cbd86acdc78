"""HTTP control and observation service around a live stream loop.

Read endpoints serve copy-on-write snapshots and never touch loop state;
every mutation (parameter changes, expert answers, pause/resume) goes through
the loop's ordered control channel and is applied at a step boundary. Step
records are pushed to clients over a server-sent-event stream.
"""

from __future__ import annotations

import dataclasses
import json
import time
from collections import deque

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import HTMLResponse, StreamingResponse

from . import online
from .online import HotParams, StreamLoop, TIER1, TIER2, TIER3, apply_hot_param
from .policy import N_ACTIONS


def classify_param(name: str) -> int:
    if name in TIER1:
        return 1
    if name in TIER2:
        return 2
    if name in TIER3:
        return 3
    raise KeyError(name)


def build_app(loop: StreamLoop, report_source=None, report_builder=None) -> FastAPI:
    """Wire the endpoint contract to one loop instance.

    report_source(patient_id) -> state vector; report_builder(state, loop)
    -> HTML. Both optional; /report 404s without them.
    """
    app = FastAPI(title="careloop control service")
    answered: set[int] = set()
    gateway_audit: list[dict] = []

    if not hasattr(loop, "recent"):
        loop.recent = deque(maxlen=4096)

    @app.get("/metrics")
    def metrics():
        snap = loop.metrics_snapshot()
        snap["ts"] = time.time()
        return snap

    @app.get("/state")
    def state():
        return {
            "mode": loop.mode,
            "paused": loop.paused,
            "halted": loop.halted,
            "step": loop.step_idx,
            "hot": dataclasses.asdict(loop.hot),
            "pending_queries": len(loop.expert.pending),
            "pool_size": len(loop.pool),
            "frozen_checksums": loop.frozen_checksums(),
        }

    @app.get("/events")
    def events(limit: int | None = None, idle_timeout: float | None = None):
        """Server-sent event feed of step/label/param records.

        `limit` ends the stream after that many events and `idle_timeout`
        after that many quiet seconds; both unset means stream until halt.
        """
        def gen():
            cursor = max(0, len(loop.recent) - 32)
            seq = 0
            last_emit = time.monotonic()
            while not loop.halted:
                items = list(loop.recent)
                while cursor < len(items):
                    payload = json.dumps(items[cursor])
                    yield f"id: {seq}\ndata: {payload}\n\n"
                    cursor += 1
                    seq += 1
                    last_emit = time.monotonic()
                    if limit is not None and seq >= limit:
                        return
                if idle_timeout is not None and \
                        time.monotonic() - last_emit > idle_timeout:
                    return
                time.sleep(0.05)
        return StreamingResponse(gen(), media_type="text/event-stream")

    @app.get("/queries")
    def queries():
        now = time.time()
        return {"pending": [{
            "qid": pq.qid,
            "state": [float(v) for v in pq.state],
            "proposed": pq.proposed,
            "u": pq.u,
            "origin_step": pq.origin_step,
            "expires_in_s": max(0.0, pq.deadline - now),
        } for pq in sorted(loop.expert.pending.values(),
                           key=lambda p: p.origin_step)]}

    @app.post("/queries/{qid}/answer")
    def answer(qid: int, body: dict):
        action = body.get("action")
        if not isinstance(action, int) or not 0 <= action < N_ACTIONS:
            raise HTTPException(422, f"action must be an int in [0, {N_ACTIONS})")
        if qid in answered:
            raise HTTPException(409, "duplicate answer: query already resolved")
        if qid not in loop.expert.pending:
            raise HTTPException(410, "query expired or unknown; fallback label stored")
        answered.add(qid)
        loop.submit_control("answer_query", {"qid": qid, "action": action})
        return {"ok": True, "qid": qid, "provenance": "human",
                "effective_at_step": loop.step_idx + 1}

    @app.post("/params")
    def params(body: dict):
        if not body:
            raise HTTPException(400, "empty parameter change")
        results = []
        status_reject = False
        for name, value in body.items():
            try:
                tier = classify_param(name)
            except KeyError:
                raise HTTPException(400, f"unknown hot parameter {name!r}")
            if tier == 3:
                entry = {"param": name, "tier": 3, "applied": False,
                         "message": "rejected: full retrain required"}
                gateway_audit.append(entry)
                results.append(entry)
                status_reject = True
                continue
            # dry-run bound check on a copy before enqueueing
            try:
                apply_hot_param(dataclasses.replace(loop.hot), name, value)
            except (ValueError, KeyError) as exc:
                raise HTTPException(422, str(exc))
            loop.submit_control("set_param", {"name": name, "value": value})
            results.append({
                "param": name, "tier": tier, "applied": True,
                "message": ("applied instantly; no weight change" if tier == 1 else
                            f"{loop.hot.focused_steps} focused gradient steps scheduled"),
                "focused_steps": loop.hot.focused_steps if tier == 2 else 0,
                "effective_at_step": loop.step_idx + 1,
            })
        if status_reject and all(not r["applied"] for r in results):
            raise HTTPException(409, detail=results[0]["message"])
        return {"results": results}

    @app.post("/pause")
    def pause():
        loop.submit_control("pause", {})
        return {"ok": True}

    @app.post("/resume")
    def resume():
        loop.submit_control("resume", {})
        return {"ok": True}

    @app.get("/report/{patient_id}", response_class=HTMLResponse)
    def report(patient_id: str):
        if report_source is None or report_builder is None:
            raise HTTPException(404, "report source not configured")
        state = report_source(patient_id)
        if state is None:
            raise HTTPException(404, f"unknown patient {patient_id!r}")
        return HTMLResponse(report_builder(np.asarray(state), patient_id))

    return app


def attach_event_feed(loop: StreamLoop):
    """Mirror every log record into the bounded ring the SSE feed reads."""
    loop.recent = deque(maxlen=4096)
    original = loop._write_log

    def write_and_feed(record: dict):
        original(record)
        loop.recent.append(record)

    loop._write_log = write_and_feed
    return loop


def serve(loop: StreamLoop, host: str = "127.0.0.1", port: int = 8400,
          report_source=None, report_builder=None):
    """Run the service in the current thread (blocking)."""
    import uvicorn
    attach_event_feed(loop)
    app = build_app(loop, report_source, report_builder)
    uvicorn.run(app, host=host, port=port, log_level="warning")
