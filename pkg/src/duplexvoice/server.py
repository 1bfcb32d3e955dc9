"""Model-as-a-server layer: stateless workers, session registry, wire protocol.

Several interchangeable workers share one immutable model bundle; every piece
of per-user inference state lives in the session registry.  A dispatcher
hands any session's next audio chunk to any idle worker, so the wire
transcript of a session is independent of pool size and scheduling.

Wire protocol: one JSON object per line over a TCP stream (UTF-8).
Client -> server types: hello / audio / bye.  Server -> client types:
vad / state / text / pcm / interrupted / turn_end / error.  Audio payloads
are base64 s16le.  Every message carries the session id and a per-direction
monotone sequence number.
"""

from __future__ import annotations

import base64
import json
import logging
import queue
import socket
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .duplex import (
    EV_INTERRUPTED,
    EV_PCM,
    EV_STATE,
    EV_TEXT,
    EV_TURN_END,
    EV_VAD,
    SessionCaches,
    TurnEvent,
    drain_generation,
    new_session,
    on_audio_chunk,
)
from .errors import UnknownSessionError
from .models import ModelBundle

logger = logging.getLogger(__name__)

MAX_PENDING_PER_SESSION = 8

EVENT_TO_WIRE = {
    EV_VAD: "vad",
    EV_STATE: "state",
    EV_TEXT: "text",
    EV_PCM: "pcm",
    EV_INTERRUPTED: "interrupted",
    EV_TURN_END: "turn_end",
}


@dataclass
class WireMessage:
    type: str
    session: str
    seq: int
    payload: dict = field(default_factory=dict)

    def to_line(self) -> str:
        return json.dumps(
            {"type": self.type, "session": self.session, "seq": self.seq, **self.payload},
            sort_keys=True,
        )


def events_to_wire(session_id: str, events: list[TurnEvent], seq_start: int) -> list[WireMessage]:
    """Project internal events onto the wire; marker events stay internal."""
    messages = []
    seq = seq_start
    for ev in events:
        wire_type = EVENT_TO_WIRE.get(ev.kind)
        if wire_type is None:
            continue
        payload = {"t_ms": round(ev.t_ms, 3)}
        if ev.kind == EV_STATE:
            payload["state"] = ev.data["state"]
            payload["at_ms"] = ev.data["at_ms"]
        elif ev.kind == EV_TEXT:
            payload["text"] = ev.data["text"]
        elif ev.kind == EV_PCM:
            samples = np.asarray(ev.data["samples"], dtype="<i2")
            payload["pcm"] = base64.b64encode(samples.tobytes()).decode("ascii")
            payload["n"] = int(len(samples))
        elif ev.kind in (EV_TURN_END, EV_INTERRUPTED):
            payload.update(
                {k: v for k, v in ev.data.items() if isinstance(v, (int, float, str))}
            )
        messages.append(WireMessage(type=wire_type, session=session_id, seq=seq, payload=payload))
        seq += 1
    return messages


# ---------------------------------------------------------------------------
# Pool and registry
# ---------------------------------------------------------------------------

class Worker:
    """Stateless model holder: processes one chunk for whatever session arrives."""

    def __init__(self, index: int, models: ModelBundle):
        self.index = index
        self.models = models

    def process(self, session: SessionCaches, pcm: np.ndarray) -> list[TurnEvent]:
        events, _ = on_audio_chunk(pcm, session, self.models)
        if session.generation_pending:
            events.extend(drain_generation(session, self.models))
        return events


class WorkerPool:
    """N workers over one shared immutable bundle; same fingerprint everywhere."""

    def __init__(self, models: ModelBundle, n_workers: int):
        self.models = models
        self.workers = [Worker(i, models) for i in range(n_workers)]
        self._idle: "queue.Queue[Worker]" = queue.Queue()
        for w in self.workers:
            self._idle.put(w)

    def __len__(self) -> int:
        return len(self.workers)

    def fingerprints(self) -> list[str]:
        return [w.models.fingerprint() for w in self.workers]

    def acquire(self, timeout: float | None = None) -> Worker:
        return self._idle.get(timeout=timeout)

    def release(self, worker: Worker) -> None:
        self._idle.put(worker)


@dataclass
class SessionEntry:
    caches: SessionCaches
    out_seq: int = 0
    waiting: deque = field(default_factory=deque)   # queued (pcm, send) jobs
    in_flight: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionRegistry:
    """session id -> caches; exactly one in-flight job per session."""

    def __init__(self, models: ModelBundle):
        self.models = models
        self._entries: dict[str, SessionEntry] = {}
        self._lock = threading.Lock()

    def register(self, session_id: str, force_states: dict | None = None) -> SessionEntry:
        with self._lock:
            if session_id not in self._entries:
                self._entries[session_id] = SessionEntry(
                    caches=new_session(self.models, session_id, force_states)
                )
            return self._entries[session_id]

    def get(self, session_id: str) -> SessionEntry:
        with self._lock:
            if session_id not in self._entries:
                raise UnknownSessionError(session_id)
            return self._entries[session_id]

    def evict(self, session_id: str) -> None:
        with self._lock:
            self._entries.pop(session_id, None)

    def __contains__(self, session_id: str) -> bool:
        with self._lock:
            return session_id in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


def dispatch(
    session_id: str,
    pcm: np.ndarray,
    pool: WorkerPool,
    registry: SessionRegistry,
    worker_index: int | None = None,
) -> list[WireMessage]:
    """Route one chunk to an idle worker (or a forced one); check caches in/out.

    The session's caches are the only state the worker touches, so the
    resulting messages are identical no matter which worker served the chunk.
    """
    entry = registry.get(session_id)
    with entry.lock:  # per-session serialization: chunk i+1 after chunk i
        if worker_index is not None:
            worker = pool.workers[worker_index]
        else:
            worker = pool.acquire()
        try:
            events = worker.process(entry.caches, pcm)
        finally:
            if worker_index is None:
                pool.release(worker)
        messages = events_to_wire(session_id, events, entry.out_seq)
        entry.out_seq += len(messages)
        return messages


# ---------------------------------------------------------------------------
# TCP service
# ---------------------------------------------------------------------------

class Server:
    """Line-JSON TCP front end with a shared job queue feeding worker threads.

    Per-session ordering: a session has at most one job in flight; further
    chunks wait in its own bounded queue and requeue on completion.
    """

    def __init__(self, models: ModelBundle, n_workers: int, host: str = "127.0.0.1", port: int = 0):
        self.models = models
        self.registry = SessionRegistry(models)
        self.n_workers = n_workers
        self._workers = [Worker(i, models) for i in range(n_workers)]
        self._jobs: "queue.Queue[str | None]" = queue.Queue()
        self._sock = socket.create_server((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self) -> "Server":
        for worker in self._workers:
            t = threading.Thread(target=self._worker_loop, args=(worker,), daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        logger.info("serving on %s:%d with %d workers", self.host, self.port, self.n_workers)
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass
        for _ in self._workers:
            self._jobs.put(None)
        for t in self._threads:
            t.join(timeout=2.0)

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                self._stop.wait(0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    # -- worker side -----------------------------------------------------------

    def _worker_loop(self, worker: Worker) -> None:
        while True:
            session_id = self._jobs.get()
            if session_id is None:
                return
            try:
                entry = self.registry.get(session_id)
            except UnknownSessionError:
                continue  # evicted while queued
            with entry.lock:
                if not entry.waiting:
                    entry.in_flight = False
                    continue
                pcm, send = entry.waiting.popleft()
            try:
                events = worker.process(entry.caches, pcm)
                with entry.lock:  # seq assignment races only with error emission
                    messages = events_to_wire(session_id, events, entry.out_seq)
                    entry.out_seq += len(messages)
                for message in messages:
                    send(message)
            except Exception:
                logger.exception("job failed for session %s", session_id)
            finally:
                with entry.lock:
                    if entry.waiting:
                        self._jobs.put(session_id)
                    else:
                        entry.in_flight = False

    # -- client side -----------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._client_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _client_loop(self, conn: socket.socket) -> None:
        sessions_here: set[str] = set()
        write_lock = threading.Lock()
        sessionless_seq = [0]  # seq source for errors about unregistered ids

        def send(msg: WireMessage) -> None:
            with write_lock:
                try:
                    conn.sendall((msg.to_line() + "\n").encode())
                except OSError:
                    pass

        def send_error(session_id: str, text: str) -> None:
            try:
                entry = self.registry.get(session_id)
                with entry.lock:
                    seq = entry.out_seq
                    entry.out_seq += 1
            except UnknownSessionError:
                seq = sessionless_seq[0]
                sessionless_seq[0] += 1
            send(WireMessage(type="error", session=session_id, seq=seq, payload={"error": text}))

        try:
            reader = conn.makefile("r", encoding="utf-8")
            for line in reader:
                line = line.strip()
                if not line:
                    continue
                try:
                    msg = json.loads(line)
                except json.JSONDecodeError:
                    send_error("", "invalid-json")
                    continue
                mtype = msg.get("type")
                session_id = str(msg.get("session", ""))
                if mtype == "hello":
                    forces = {int(k): int(v) for k, v in (msg.get("force_states") or {}).items()}
                    self.registry.register(session_id, forces)
                    sessions_here.add(session_id)
                elif mtype == "audio":
                    self._enqueue_audio(session_id, msg, send, send_error)
                elif mtype == "bye":
                    self.registry.evict(session_id)
                    sessions_here.discard(session_id)
                else:
                    send_error(session_id, f"unknown-type:{mtype}")
        except OSError:
            pass
        finally:
            for session_id in sessions_here:
                self.registry.evict(session_id)
            try:
                conn.close()
            except OSError:
                pass

    def _enqueue_audio(self, session_id, msg, send, send_error) -> None:
        try:
            entry = self.registry.get(session_id)
        except UnknownSessionError:
            send_error(session_id, "unknown-session")
            return
        pcm = np.frombuffer(base64.b64decode(msg.get("pcm", "")), dtype="<i2")
        with entry.lock:
            if len(entry.waiting) >= MAX_PENDING_PER_SESSION:
                overloaded = True
            else:
                overloaded = False
                entry.waiting.append((pcm, send))
                if not entry.in_flight:
                    entry.in_flight = True
                    self._jobs.put(session_id)
        if overloaded:
            send_error(session_id, "overload")


def serve(models: ModelBundle, port: int, n_workers: int, host: str = "127.0.0.1") -> Server:
    """Create and start a server; caller owns its lifecycle."""
    return Server(models, n_workers, host=host, port=port).start()
