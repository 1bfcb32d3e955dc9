"""Per-session duplex state machine and the simulation-clock latency probe.

Audio chunks route through VAD gating, the streaming encoder, and backbone
prefill; each completed encoder chunk yields one dialogue-state decision:
0 keeps listening, 1 ends the turn and starts generation (interrupting any
response still in flight), 2 ends the turn silently.  All mutable state
(caches, FIFO, VAD, clocks, counters) lives in one ``SessionCaches`` value
so that any stateless worker can serve any chunk of any session.

Timestamps are simulation-clock milliseconds: the listening side advances on
audio time, the generation side on the configured cost model, which keeps
whole runs bit-reproducible.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator

import numpy as np

from .backbone import SentenceSplitter
from .encoder import EncoderCaches, chunk_duration_ms
from .errors import IncompleteTurnError, SessionCorruptError
from .frontend import HOP_SAMPLES, VadState, frame_count, frame_features, vad_reset, vad_step
from .models import ModelBundle, session_seed, turn_rng_seed
from .nnkit import KvCache, make_sampler
from .speechgen import TokenFifo, codec_decode

MS_PER_SAMPLE = 1000.0 / 16_000.0


class DialogueState(IntEnum):
    CONTINUE = 0
    INTERRUPT = 1
    END_NO_INTERRUPT = 2


class Phase:
    IDLE = "idle"
    LISTENING = "listening"
    GENERATING = "generating"


# Event kinds
EV_VAD = "vad_triggered"
EV_ENDPOINT = "speech_endpoint"          # driver-injected true end-of-speech marker
EV_STATE = "state_changed"
EV_TEXT = "text_chunk"
EV_PREFILLED = "decoder_prefilled"
EV_TOKENS = "speech_tokens"              # a full token chunk left the FIFO
EV_PCM = "speech_chunk"
EV_INTERRUPTED = "generation_interrupted"
EV_TURN_END = "turn_ended"


@dataclass
class TurnEvent:
    kind: str
    t_ms: float
    seq: int
    data: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        data = dict(self.data)
        samples = data.pop("samples", None)
        if samples is not None:
            data["n_samples"] = int(len(samples))
            data["sha256"] = hashlib.sha256(
                np.asarray(samples, dtype="<i2").tobytes()
            ).hexdigest()
        return {"seq": self.seq, "kind": self.kind, "t_ms": round(self.t_ms, 3), **data}


class _Interrupted(Exception):
    """Internal: a state-1 arrived while this generation was in flight."""


@dataclass
class SessionCaches:
    """Everything one dialogue session owns; the only state workers may touch."""

    session_id: str
    encoder: EncoderCaches
    backbone: KvCache
    decoder_prefix: KvCache | None
    fifo: TokenFifo
    vad: VadState
    phase: str = Phase.IDLE

    # stream plumbing
    sample_tail: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int16))
    codec_tail: np.ndarray | None = None
    clock_ms: float = 0.0
    seq: int = 0

    # per-turn bookkeeping
    turn_index: int = 0
    chunks_completed: int = 0
    prev_state: int = int(DialogueState.CONTINUE)
    turn_has_prefill: bool = False
    force_states: dict = field(default_factory=dict)

    # generation coordination
    interrupt_requested: bool = False
    generation_pending: bool = False
    generating: bool = False
    history_dirty: bool = False

    rng_base: int = 0

    def emit(self, kind: str, **data) -> TurnEvent:
        ev = TurnEvent(kind=kind, t_ms=self.clock_ms, seq=self.seq, data=data)
        self.seq += 1
        return ev

    def check_consistent(self, models: ModelBundle) -> None:
        if self.backbone.n_layers != models.backbone.cfg.n_layers:
            raise SessionCorruptError("backbone cache layer count mismatch")
        if self.encoder.attn.n_layers != models.encoder.cfg.n_layers:
            raise SessionCorruptError("encoder cache layer count mismatch")

    def snapshot(self) -> bytes:
        """Serialize every cache; only valid while no generation is in flight."""
        if self.generating or self.generation_pending:
            raise SessionCorruptError("cannot snapshot with a generation in flight")
        arrays: dict[str, np.ndarray] = {}
        arrays.update(self.backbone.to_arrays("backbone."))
        if self.decoder_prefix is not None:
            arrays.update(self.decoder_prefix.to_arrays("prefix."))
        arrays["sample_tail"] = self.sample_tail
        if self.codec_tail is not None:
            arrays["codec_tail"] = self.codec_tail
        arrays["fifo_tokens"] = np.array(list(self.fifo._tokens), dtype=np.int64)
        meta = {
            "session_id": self.session_id,
            "phase": self.phase,
            "fifo_chunk": self.fifo.chunk_size,
            "fifo_closed": int(self.fifo.closed),
            "vad": [int(self.vad.triggered), self.vad.consecutive_active,
                    self.vad.energy_threshold, self.vad.activation_frames],
            "clock_ms": self.clock_ms,
            "seq": self.seq,
            "turn_index": self.turn_index,
            "chunks_completed": self.chunks_completed,
            "prev_state": self.prev_state,
            "turn_has_prefill": int(self.turn_has_prefill),
            "force_states": sorted(self.force_states.items()),
            "rng_base": self.rng_base,
        }
        arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        arrays["encoder_blob"] = np.frombuffer(self.encoder.to_bytes(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def restore(cls, raw: bytes) -> "SessionCaches":
        with np.load(io.BytesIO(raw)) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays["meta_json"].tobytes().decode())
        fifo = TokenFifo(meta["fifo_chunk"])
        fifo._tokens = [int(t) for t in arrays["fifo_tokens"]]
        fifo.closed = bool(meta["fifo_closed"])
        vad_t, vad_c, vad_thr, vad_act = meta["vad"]
        session = cls(
            session_id=meta["session_id"],
            encoder=EncoderCaches.from_bytes(arrays["encoder_blob"].tobytes()),
            backbone=KvCache.from_arrays(arrays, "backbone."),
            decoder_prefix=(
                KvCache.from_arrays(arrays, "prefix.") if "prefix.n_layers" in arrays else None
            ),
            fifo=fifo,
            vad=VadState(bool(vad_t), int(vad_c), float(vad_thr), int(vad_act)),
            phase=meta["phase"],
            sample_tail=arrays["sample_tail"].astype(np.int16),
            codec_tail=arrays.get("codec_tail"),
            clock_ms=float(meta["clock_ms"]),
            seq=int(meta["seq"]),
            turn_index=int(meta["turn_index"]),
            chunks_completed=int(meta["chunks_completed"]),
            prev_state=int(meta["prev_state"]),
            turn_has_prefill=bool(meta["turn_has_prefill"]),
            force_states={int(k): int(v) for k, v in meta["force_states"]},
            rng_base=int(meta["rng_base"]),
        )
        return session


def new_session(models: ModelBundle, session_id: str, force_states: dict | None = None) -> SessionCaches:
    return SessionCaches(
        session_id=session_id,
        encoder=models.encoder.fresh_caches(),
        backbone=models.backbone.fresh_cache(),
        decoder_prefix=None,
        fifo=TokenFifo(models.config.speech_chunk),
        vad=VadState(energy_threshold=models.config.vad_threshold),
        force_states=dict(force_states or {}),
        rng_base=session_seed(models.config.seed, session_id),
    )


def mark_endpoint(session: SessionCaches, at_ms: float) -> TurnEvent:
    """Record the scripted true end of user speech (non-statistical anchor)."""
    ev = TurnEvent(kind=EV_ENDPOINT, t_ms=float(at_ms), seq=session.seq, data={})
    session.seq += 1
    return ev


# ---------------------------------------------------------------------------
# Listening path
# ---------------------------------------------------------------------------

def _emit_frames(session: SessionCaches, pcm: np.ndarray) -> np.ndarray:
    """Streaming framer: buffers samples so chunked framing equals full framing."""
    buf = np.concatenate([session.sample_tail, np.asarray(pcm, dtype=np.int16)])
    n = frame_count(len(buf))
    if n == 0:
        session.sample_tail = buf
        return np.zeros((0, 80), dtype=np.float32)
    feats = frame_features(buf)
    session.sample_tail = buf[n * HOP_SAMPLES:]
    return feats


def _stop_streaming(session: SessionCaches, models: ModelBundle) -> None:
    """Shared epilogue for states 1 and 2: silence the stream, reset the VAD."""
    session.vad = vad_reset(session.vad)
    session.encoder = models.encoder.fresh_caches()
    session.force_states.clear()


def on_audio_chunk(
    pcm: np.ndarray,
    session: SessionCaches,
    models: ModelBundle,
    at_ms: float | None = None,
) -> tuple[list[TurnEvent], SessionCaches]:
    """Advance the session by one chunk of 16 kHz PCM.

    Idle (or generating) sessions only run the VAD; once triggered, frames
    flow through the encoder into the backbone, one state decision per
    completed encoder chunk.  Scripted sessions may override the state head
    through ``session.force_states`` (chunk index -> state).
    """
    session.check_consistent(models)
    if at_ms is not None:
        session.clock_ms = max(session.clock_ms, float(at_ms))
    session.clock_ms += len(pcm) * MS_PER_SAMPLE

    events: list[TurnEvent] = []
    frames = _emit_frames(session, pcm)
    if frames.shape[0] == 0:
        return events, session

    if session.phase != Phase.LISTENING:
        session.vad, trigger = vad_step(frames, session.vad)
        if trigger is None:
            return events, session
        events.append(session.emit(EV_VAD))
        session.phase = Phase.LISTENING
        session.encoder = models.encoder.fresh_caches()
        session.chunks_completed = 0
        session.prev_state = int(DialogueState.CONTINUE)
        session.turn_has_prefill = False
        frames = frames[trigger.frame_index:]
        if frames.shape[0] == 0:
            return events, session

    emb_chunks, session.encoder = models.encoder.encode_chunk(frames, session.encoder)
    for emb in emb_chunks:
        if len(emb) == 0:
            continue
        pred = models.backbone.prefill_speech_chunk(
            emb, session.backbone, new_turn=not session.turn_has_prefill
        )
        session.turn_has_prefill = True
        if session.generating:
            session.history_dirty = True
        idx = session.chunks_completed
        session.chunks_completed += 1
        state = int(session.force_states.pop(idx, pred.state))

        if state != session.prev_state:
            events.append(
                session.emit(EV_STATE, state=state, at_ms=round(session.clock_ms, 3),
                             at_frame=pred.at_frame)
            )
        session.prev_state = state

        if state == DialogueState.INTERRUPT:
            _stop_streaming(session, models)
            if session.generating:
                session.interrupt_requested = True
            session.generation_pending = True
            session.phase = Phase.GENERATING
            break
        if state == DialogueState.END_NO_INTERRUPT:
            _stop_streaming(session, models)
            session.phase = Phase.GENERATING if session.generating else Phase.IDLE
            break

    return events, session


# ---------------------------------------------------------------------------
# Generation path
# ---------------------------------------------------------------------------

def run_generation(
    session: SessionCaches,
    models: ModelBundle,
    sampler=None,
) -> Iterator[TurnEvent]:
    """Generate one spoken response as a lazy stream of events.

    Text tokens are sentence-split; per chunk the backbone hidden states
    prefill the prefix decoder, the text tokens prefill the NAR decoder, and
    the AR decoder fills the FIFO, which drains through the codec in fixed
    token chunks.  A state-1 arriving between events aborts at the next
    checkpoint, flushes the FIFO and emits ``generation_interrupted``.

    The response runs against a copy of the backbone cache; it is adopted
    into the dialogue history only if no new listening started meanwhile.
    """
    if not session.generation_pending:
        raise SessionCorruptError("run_generation requires a pending generation")
    cfg = models.config
    cost = cfg.cost
    session.generation_pending = False
    session.generating = True
    session.interrupt_requested = False
    session.history_dirty = False
    turn = session.turn_index
    session.turn_index += 1

    if sampler is None:
        text_seed = int(turn_rng_seed(session.rng_base, turn, 0).generate_state(1)[0])
        sampler = make_sampler(cfg.text_topk, text_seed)

    gen_cache = session.backbone.copy()
    prefix = models.decoder.fresh_prefix_cache()
    session.decoder_prefix = prefix
    fifo = TokenFifo(cfg.speech_chunk)
    session.fifo = fifo
    session.codec_tail = None

    n_text = 0
    n_speech = 0
    n_pcm = 0

    def checkpoint():
        if session.interrupt_requested:
            raise _Interrupted

    def drain_fifo():
        nonlocal n_pcm
        while (chunk := fifo.pop_chunk()) is not None:
            yield session.emit(EV_TOKENS, n_tokens=len(chunk))
            session.clock_ms += cost.codec_token_ms * len(chunk)
            pcm, session.codec_tail = codec_decode(chunk, models.decoder.codec, session.codec_tail)
            n_pcm += len(pcm)
            yield session.emit(EV_PCM, samples=pcm.samples)
            checkpoint()

    def speak_chunk(chunk, hiddens):
        nonlocal n_speech
        yield session.emit(EV_TEXT, text=chunk.text, tokens=list(chunk.tokens))
        checkpoint()
        session.clock_ms += cost.prefix_pos_ms * len(hiddens)
        models.decoder.nar_prefix_prefill(np.stack(hiddens), prefix)
        session.clock_ms += cost.nar_pos_ms * len(chunk.tokens)
        ctx = models.decoder.nar_prefill(chunk.tokens, models.backbone.embed_tokens, prefix)
        yield session.emit(EV_PREFILLED, context=ctx.n_past)
        checkpoint()
        ar_seed = int(turn_rng_seed(session.rng_base, turn, 1000 + n_text).generate_state(1)[0])
        max_len = cfg.decoder_config().max_tokens_per_text_token * len(chunk.tokens)
        for token in models.decoder.ar_stream(ctx, cfg.topk, np.random.default_rng(ar_seed), max_len):
            checkpoint()
            session.clock_ms += cost.ar_token_ms
            fifo.push(token)
            n_speech += 1
            yield from drain_fifo()

    splitter = SentenceSplitter(models.backbone.cfg.vocab_text)
    hidden_buf: list[np.ndarray] = []
    try:
        for token, hidden in models.backbone.generate_text(gen_cache, cfg.max_text_tokens, sampler):
            checkpoint()
            session.clock_ms += cost.text_token_ms
            n_text += 1
            hidden_buf.append(hidden)
            chunk = splitter.push(token)
            if chunk is not None:
                yield from speak_chunk(chunk, hidden_buf)
                hidden_buf = []
        tail = splitter.flush()
        if tail is not None:
            yield from speak_chunk(tail, hidden_buf)
        fifo.close()
        yield from drain_fifo()
        yield session.emit(
            EV_TURN_END, n_text_tokens=n_text, n_speech_tokens=n_speech, n_samples=n_pcm
        )
        if not session.history_dirty:
            session.backbone = gen_cache  # response joins the dialogue history
    except _Interrupted:
        fifo.flush()
        fifo.close()
        yield session.emit(EV_INTERRUPTED, n_text_tokens=n_text, n_speech_tokens=n_speech)
    finally:
        session.generating = False
        if session.generation_pending:
            session.phase = Phase.GENERATING  # interrupting turn takes over
        elif session.phase == Phase.GENERATING:
            session.phase = Phase.IDLE  # barge-in listening, if any, keeps its phase


def drain_generation(session: SessionCaches, models: ModelBundle) -> list[TurnEvent]:
    """Run any pending generations to completion; used by non-interactive drivers."""
    events: list[TurnEvent] = []
    while session.generation_pending:
        events.extend(run_generation(session, models))
    return events


# ---------------------------------------------------------------------------
# Latency probe
# ---------------------------------------------------------------------------

SEGMENT_NAMES = (
    "interrupt_to_first_text",
    "first_text_to_decoder_prefill",
    "decoder_prefill_to_first_token_chunk",
    "first_token_chunk_to_first_pcm",
)


@dataclass
class TurnLatency:
    """Millisecond decomposition of one turn on the simulation clock."""

    segments: dict
    total: float
    detection_lag_ms: float | None

    def as_dict(self) -> dict:
        return {
            "segments": {k: round(v, 3) for k, v in self.segments.items()},
            "total": round(self.total, 3),
            "detection_lag_ms": None if self.detection_lag_ms is None
            else round(self.detection_lag_ms, 3),
        }


def measure_latency(events: list[TurnEvent], chunk_ms: float | None = None) -> TurnLatency:
    """Four-segment decomposition of one complete turn plus the detection lag.

    Segments: interrupt -> first text chunk -> decoder prefill done -> first
    speech-token chunk -> first PCM chunk.  The detection lag is the state-1
    timestamp minus the scripted speech endpoint, when the events carry one.
    """
    def first(kind, after=-np.inf, predicate=None):
        for ev in events:
            if ev.kind == kind and ev.t_ms >= after and (predicate is None or predicate(ev)):
                return ev
        raise IncompleteTurnError(f"no '{kind}' event in turn")

    t0 = first(EV_STATE, predicate=lambda e: e.data.get("state") == 1)
    t1 = first(EV_TEXT, after=t0.t_ms)
    t2 = first(EV_PREFILLED, after=t1.t_ms)
    t3 = first(EV_TOKENS, after=t2.t_ms)
    t4 = first(EV_PCM, after=t3.t_ms)

    detection = None
    endpoints = [e for e in events if e.kind == EV_ENDPOINT and e.t_ms <= t0.t_ms]
    if endpoints:
        detection = t0.t_ms - endpoints[-1].t_ms
        if chunk_ms is not None and not (chunk_ms <= detection <= 2 * chunk_ms):
            raise IncompleteTurnError(
                f"detection lag {detection:.1f} ms outside [{chunk_ms}, {2 * chunk_ms}] ms"
            )

    segments = {
        SEGMENT_NAMES[0]: t1.t_ms - t0.t_ms,
        SEGMENT_NAMES[1]: t2.t_ms - t1.t_ms,
        SEGMENT_NAMES[2]: t3.t_ms - t2.t_ms,
        SEGMENT_NAMES[3]: t4.t_ms - t3.t_ms,
    }
    return TurnLatency(
        segments=segments,
        total=t4.t_ms - t0.t_ms,
        detection_lag_ms=detection,
    )


def split_turns(events: list[TurnEvent]) -> list[list[TurnEvent]]:
    """Slice a transcript into complete turns (state-1 through turn_ended)."""
    turns: list[list[TurnEvent]] = []
    start = 0
    for i, ev in enumerate(events):
        if ev.kind == EV_TURN_END:
            turns.append(events[start:i + 1])
            start = i + 1
        elif ev.kind == EV_INTERRUPTED:
            start = i + 1  # interrupted turns are not measurable
    return [t for t in turns if any(
        e.kind == EV_STATE and e.data.get("state") == 1 for e in t
    )]


def expected_chunk_ms(models: ModelBundle) -> float:
    return float(chunk_duration_ms(models.encoder.cfg))
