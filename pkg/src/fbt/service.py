"""Online analysis sessions and a small HTTP front end.

Each session owns one Estimator.  Records are applied strictly in arrival
order under a per-session lock; every ``post_interval`` updates a snapshot is
taken from a copy of the posterior mean (gauge optimization, CPTP projection,
error-generator taxonomy), so post-processing never touches the Bayesian
state.  Reports are served from the latest snapshot without taking the lock.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .bayes import load_state
from .bootstrap import config_from_dict, bootstrap
from .estimator import Estimator, EstimatorConfig
from .gateset import NoisyGateSet, gateset_from_dict, ideal_two_qubit_gateset
from .linearize import gateset_from_residual
from .postproc import (
    BranchCutError,
    decompose_generator,
    entanglement_infidelity,
    error_generator,
    gauge_optimize,
    project_gateset,
)
from .records import ObservationRecord, parse_lines

log = logging.getLogger(__name__)

SCHEMA_REPORT = "fbt.report/v1"
SCHEMA_SESSION = "fbt.session/v1"
BIND_ENV = "FBT_BIND"
DEFAULT_BIND = "127.0.0.1:8750"


class SessionError(RuntimeError):
    pass


class UnknownSession(KeyError):
    pass


def snapshot(gs: NoisyGateSet, mean: np.ndarray, registry, update_count: int, w_g=1.0, w_s=1e-3) -> dict:
    """Post-processed view of a posterior mean (the mean array is copied first)."""
    est_gs = gateset_from_residual(gs, mean.copy(), registry)
    fit = gauge_optimize(est_gs, gs, w_g, w_s)
    physical = project_gateset(fit.gateset)
    gates = {}
    for g in gs.labels:
        ch = fit.gateset.noise[g]
        try:
            rows = decompose_generator(error_generator(ch)).rows()
        except BranchCutError as exc:
            rows = [{"error": str(exc)}]
        gates[g] = {
            "noise": ch.tolist(),
            "noise_cptp": physical.noise[g].tolist(),
            "noisy_gate": fit.gateset.noisy(g).tolist(),
            "eps_ent": entanglement_infidelity(ch),
            "taxonomy": rows,
        }
    return {
        "update_count": update_count,
        "time": time.time(),
        "gauge_objective": fit.objective,
        "gauge": fit.transform.s.tolist(),
        "gates": gates,
        "spam": {k: v.tolist() for k, v in fit.gateset.spam_noise.items()},
    }


def batch_infidelity(gs: NoisyGateSet, mean: np.ndarray, registry) -> dict[str, float]:
    fit = gauge_optimize(gateset_from_residual(gs, mean.copy(), registry), gs)
    return {g: entanglement_infidelity(fit.gateset.noise[g]) for g in gs.labels if g not in gs.frozen}


@dataclass
class Session:
    id: str
    gateset: NoisyGateSet
    post_interval: int = 100
    status: str = "booting"
    estimator: Estimator | None = None
    error: str | None = None
    snapshots: list = field(default_factory=list)
    batch_series: list = field(default_factory=list)  # [{"batch", "lab_time", "eps_ent", "final"}]
    latest_report: dict | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    boot_thread: threading.Thread | None = field(default=None, repr=False)
    _batch_times: list = field(default_factory=list, repr=False)
    _prior_snapshot: dict | None = field(default=None, repr=False)

    @property
    def update_count(self) -> int:
        return 0 if self.estimator is None else self.estimator.state.update_count

    # -- ingestion -------------------------------------------------------------------------

    def submit(self, records: Iterable[ObservationRecord]) -> list[dict]:
        records = list(records)
        with self.lock:
            if self.status != "live":
                raise SessionError(f"session {self.id} is {self.status}, not live")
            est = self.estimator
            out = []
            for rec in records:
                self._close_batch_if_needed(rec)
                summary = est.process(rec)
                self._batch_times.append(rec.timestamp)
                if est.state.update_count % self.post_interval == 0:
                    self.snapshots.append(snapshot(self.gateset, est.state.mean, est.state.registry, est.state.update_count))
                out.append(summary.to_dict())
            if records:
                self._refresh_open_batch()
            self._publish()
            return out

    def _current_batch(self):
        if not self.estimator or not self.estimator.history:
            return None
        return self.estimator.history[-1].batch_id

    def _close_batch_if_needed(self, rec: ObservationRecord) -> None:
        if not self.estimator.history:
            return
        prev = self._current_batch()
        if rec.batch_id != prev:
            self._finalize_batch(prev)
            self._batch_times = []

    def _finalize_batch(self, batch) -> None:
        st = self.estimator.state
        entry = {
            "batch": batch,
            "lab_time": float(np.mean(self._batch_times)) if self._batch_times else None,
            "eps_ent": batch_infidelity(self.gateset, st.mean, st.registry),
            "final": True,
        }
        if self.batch_series and not self.batch_series[-1]["final"]:
            self.batch_series[-1] = entry
        else:
            self.batch_series.append(entry)

    def _refresh_open_batch(self) -> None:
        self._finalize_batch(self._current_batch())
        self.batch_series[-1]["final"] = False

    def _publish(self) -> None:
        est = self.estimator
        hist = est.history
        resid = np.array([h.observed - h.predicted for h in hist]) if hist else np.zeros(0)
        base = self.snapshots[-1] if self.snapshots else self._prior_snapshot
        self.latest_report = {
            "schema": SCHEMA_REPORT,
            "session": self.id,
            "status": self.status,
            "snapshot": base,
            "n_snapshots": len(self.snapshots),
            "infidelity_series": [dict(e) for e in self.batch_series],
            "ingestion": {
                "update_count": est.state.update_count,
                "history_length": len(hist),
                "residual_mean": float(resid.mean()) if resid.size else 0.0,
                "residual_sd": float(resid.std(ddof=1)) if resid.size > 1 else 0.0,
                "approx_error_active": bool(est.monitor.active),
                "provenance": est.state.provenance,
            },
        }

    # -- boot / persistence ----------------------------------------------------------------

    def go_live(self, est: Estimator) -> None:
        with self.lock:
            self.estimator = est
            st = est.state
            self._prior_snapshot = snapshot(self.gateset, st.mean, st.registry, st.update_count)
            self.status = "live"
            self._publish()

    def report(self) -> dict:
        rep = self.latest_report
        if rep is None:
            return {"schema": SCHEMA_REPORT, "session": self.id, "status": self.status, "error": self.error}
        rep = dict(rep)
        rep["status"] = self.status
        return rep

    def checkpoint(self, path) -> str:
        with self.lock:
            if self.estimator is None:
                raise SessionError(f"session {self.id} has no state yet")
            arrs = self.estimator.to_arrays()
            meta = {
                "schema": SCHEMA_SESSION,
                "id": self.id,
                "post_interval": self.post_interval,
                "snapshots": self.snapshots,
                "batch_series": self.batch_series,
                "batch_times": self._batch_times,
            }
            arrs["session"] = np.array(json.dumps(meta))
            with open(path, "wb") as fh:
                np.savez(fh, **arrs)
        return str(path)

    @classmethod
    def restore(cls, path, new_id: str | None = None) -> "Session":
        with np.load(path, allow_pickle=False) as npz:
            arrs = {k: npz[k] for k in npz.files}
        est = Estimator.from_arrays(arrs)
        meta = json.loads(str(arrs["session"])) if "session" in arrs else {}
        if meta and meta.get("schema") != SCHEMA_SESSION:
            raise ValueError(f"unsupported session schema {meta.get('schema')!r}")
        s = cls(new_id or meta.get("id") or uuid.uuid4().hex, est.template, meta.get("post_interval", 100))
        s.snapshots = meta.get("snapshots", [])
        s.batch_series = meta.get("batch_series", [])
        s._batch_times = meta.get("batch_times", [])
        s.go_live(est)
        return s


class SessionManager:
    """Registry of concurrent sessions; one writer per session, none shared."""

    def __init__(self, checkpoint_dir: str | None = None):
        self.sessions: dict[str, Session] = {}
        self.checkpoint_dir = checkpoint_dir
        self._lock = threading.Lock()

    def get(self, sid: str) -> Session:
        try:
            return self.sessions[sid]
        except KeyError:
            raise UnknownSession(sid) from None

    def create(self, payload: Mapping | None = None, wait: bool = False) -> str:
        """Validate the payload, then boot (in the background for sampling strategies)."""
        payload = dict(payload or {})
        gs = gateset_from_dict(payload["gateset"]) if payload.get("gateset") else ideal_two_qubit_gateset()
        boot_doc = dict(payload.get("bootstrap", {"strategy": "blind_cold"}))
        prior = None
        if boot_doc.get("strategy") == "full_warm":
            ckpt = boot_doc.get("checkpoint")
            if not ckpt:
                raise ValueError("bootstrap.checkpoint: full_warm boot needs a checkpoint path")
            prior = load_state(self._resolve(ckpt))
        cfg = config_from_dict(boot_doc, prior_estimate=prior)
        est_cfg = EstimatorConfig(**payload.get("estimator", {}))
        interval = int(payload.get("post_interval", 100))
        if interval < 1:
            raise ValueError("post_interval must be >= 1")
        seed = payload.get("seed", 0)
        sid = payload.get("id") or uuid.uuid4().hex
        session = Session(sid, gs, interval)
        with self._lock:
            if sid in self.sessions:
                raise ValueError(f"session id {sid!r} already exists")
            self.sessions[sid] = session

        def boot():
            try:
                state = bootstrap(cfg, gs)
                session.go_live(Estimator(gs, state, est_cfg, seed=seed))
            except Exception as exc:  # reported through the session status
                log.exception("bootstrap failed for session %s", sid)
                session.error = f"{type(exc).__name__}: {exc}"
                session.status = "closed"

        if cfg.strategy in ("blind_cold", "full_warm") or wait:
            boot()
            if session.error:
                raise ValueError(session.error)
        else:
            session.boot_thread = threading.Thread(target=boot, daemon=True)
            session.boot_thread.start()
        return sid

    def _resolve(self, path: str) -> str:
        p = Path(path)
        if not p.is_absolute() and self.checkpoint_dir:
            p = Path(self.checkpoint_dir) / p
        return str(p)

    def submit(self, sid: str, records: Iterable[ObservationRecord]) -> list[dict]:
        return self.get(sid).submit(records)

    def report(self, sid: str) -> dict:
        return self.get(sid).report()

    def checkpoint(self, sid: str, path: str | None = None) -> str:
        if path is None:
            if not self.checkpoint_dir:
                raise ValueError("no checkpoint path given and no checkpoint directory configured")
            Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            path = str(Path(self.checkpoint_dir) / f"{sid}.npz")
        return self.get(sid).checkpoint(self._resolve(path))

    def restore(self, path: str, new_id: str | None = None) -> str:
        s = Session.restore(self._resolve(path), new_id)
        with self._lock:
            self.sessions[s.id] = s
        return s.id

    def close(self, sid: str) -> None:
        s = self.get(sid)
        with s.lock:
            s.status = "closed"


# --- HTTP -----------------------------------------------------------------------------------


def _handler(manager: SessionManager):
    class Handler(BaseHTTPRequestHandler):
        server_version = "fbt/1"

        def log_message(self, fmt, *args):
            log.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, code: int, body: dict) -> None:
            data = json.dumps(body).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> str:
            n = int(self.headers.get("Content-Length", 0))
            return self.rfile.read(n).decode() if n else ""

        def _parts(self) -> list[str]:
            return [p for p in self.path.split("?")[0].split("/") if p]

        def _dispatch(self, fn):
            try:
                code, body = fn()
            except UnknownSession as exc:
                code, body = HTTPStatus.NOT_FOUND, {"error": f"unknown session {exc.args[0]}"}
            except SessionError as exc:
                code, body = HTTPStatus.CONFLICT, {"error": str(exc)}
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                code, body = HTTPStatus.BAD_REQUEST, {"error": f"{type(exc).__name__}: {exc}"}
            self._send(int(code), body)

        def do_POST(self):
            parts = self._parts()

            def run():
                if parts == ["sessions"]:
                    raw = self._body()
                    sid = manager.create(json.loads(raw) if raw else {})
                    return HTTPStatus.CREATED, {"id": sid, "status": manager.get(sid).status}
                if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "records":
                    recs = list(parse_lines(self._body().splitlines()))
                    return HTTPStatus.OK, {"summaries": manager.submit(parts[1], recs)}
                if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "checkpoint":
                    raw = self._body()
                    path = json.loads(raw).get("path") if raw else None
                    return HTTPStatus.OK, {"path": manager.checkpoint(parts[1], path)}
                return HTTPStatus.NOT_FOUND, {"error": f"no route for POST {self.path}"}

            self._dispatch(run)

        def do_GET(self):
            parts = self._parts()

            def run():
                if len(parts) == 3 and parts[0] == "sessions" and parts[2] == "report":
                    return HTTPStatus.OK, manager.report(parts[1])
                if len(parts) == 2 and parts[0] == "sessions":
                    s = manager.get(parts[1])
                    return HTTPStatus.OK, {"id": s.id, "status": s.status, "update_count": s.update_count, "error": s.error}
                return HTTPStatus.NOT_FOUND, {"error": f"no route for GET {self.path}"}

            self._dispatch(run)

        def do_DELETE(self):
            parts = self._parts()

            def run():
                if len(parts) == 2 and parts[0] == "sessions":
                    manager.close(parts[1])
                    return HTTPStatus.OK, {"id": parts[1], "status": "closed"}
                return HTTPStatus.NOT_FOUND, {"error": f"no route for DELETE {self.path}"}

            self._dispatch(run)

    return Handler


def parse_bind(value: str | None = None) -> tuple[str, int]:
    value = value or os.environ.get(BIND_ENV, DEFAULT_BIND)
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


def make_server(bind: str | None = None, checkpoint_dir: str | None = None) -> ThreadingHTTPServer:
    manager = SessionManager(checkpoint_dir)
    server = ThreadingHTTPServer(parse_bind(bind), _handler(manager))
    server.manager = manager
    return server


def serve(bind: str | None = None, checkpoint_dir: str | None = None) -> None:
    server = make_server(bind, checkpoint_dir)
    host, port = server.server_address[:2]
    log.info("serving on %s:%d", host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()
