"""Scenario files: scripted, reproducible drives of the full pipeline.

A scenario is JSON-lines.  The first line is a header fixing the run
configuration; every following line is one of:

    {"audio": {...}, "at_ms": T}        deliver one PCM chunk at time T
    {"force_state": 0|1|2, "at_chunk": K}   override the state head at chunk K
    {"endpoint": T}                     mark the true end of user speech
    {"expect": {"kind": ..., ...}}      assert on the next event of that kind
    {"expect_absent": {"kind": ...}}    assert no such event follows

Audio material may be a wav ``path``, base64 ``b64`` samples, a synthetic
``tone`` or ``silence``.  Forced states exist because the toy state head is
untrained; they override only the decision value, never the computation, so
scripted runs exercise the real pipeline end to end.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .duplex import (
    EV_PCM,
    SessionCaches,
    TurnEvent,
    expected_chunk_ms,
    mark_endpoint,
    measure_latency,
    new_session,
    on_audio_chunk,
    run_generation,
    split_turns,
)
from .errors import IncompleteTurnError, ScenarioError
from .frontend import read_wav, write_wav
from .models import CostModel, ModelBundle, PipelineConfig
from .speechgen import CODEC_SAMPLE_RATE

HEADER_KEYS = {
    "seed", "chunk_size", "speech_chunk", "topk", "text_topk",
    "max_text_tokens", "pre_network", "vad_threshold",
}

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_PARSE = 2


def synth_tone(dur_ms: float, freq: float = 440.0, amp: float = 0.3) -> np.ndarray:
    t = np.arange(int(16 * dur_ms)) / 16_000.0
    return (amp * 32767.0 * np.sin(2 * math.pi * freq * t)).astype(np.int16)


def synth_silence(dur_ms: float) -> np.ndarray:
    return np.zeros(int(16 * dur_ms), dtype=np.int16)


@dataclass
class Scenario:
    header: dict
    lines: list[dict]
    base_dir: Path = field(default_factory=Path)

    def pipeline_config(self, seed_override: int | None = None) -> PipelineConfig:
        h = dict(self.header)
        if seed_override is not None:
            h["seed"] = seed_override
        chunk = h.get("chunk_size", 4)
        return PipelineConfig(
            seed=int(h.get("seed", 0)),
            chunk_size=None if chunk in (None, 0, "inf") else int(chunk),
            speech_chunk=int(h.get("speech_chunk", 40)),
            topk=int(h.get("topk", 2)),
            text_topk=int(h.get("text_topk", 1)),
            max_text_tokens=int(h.get("max_text_tokens", 16)),
            pre_network=bool(h.get("pre_network", True)),
            vad_threshold=float(h.get("vad_threshold", -12.0)),
            cost=CostModel(),
        )


def parse_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw_lines = path.read_text().splitlines()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e}") from e
    records = []
    for lineno, line in enumerate(raw_lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            records.append((lineno, json.loads(line)))
        except json.JSONDecodeError as e:
            raise ScenarioError(f"{path}:{lineno}: invalid JSON: {e}") from e
    if not records:
        raise ScenarioError(f"{path}: empty scenario")

    header = records[0][1]
    if not isinstance(header, dict) or not set(header) <= HEADER_KEYS:
        raise ScenarioError(
            f"{path}:{records[0][0]}: header may only set {sorted(HEADER_KEYS)}"
        )
    lines = []
    last_at = -1.0
    for lineno, rec in records[1:]:
        if not isinstance(rec, dict):
            raise ScenarioError(f"{path}:{lineno}: event must be an object")
        keys = set(rec)
        if "audio" in keys:
            if "at_ms" not in keys:
                raise ScenarioError(f"{path}:{lineno}: audio event needs at_ms")
            at = float(rec["at_ms"])
            if at < last_at:
                raise ScenarioError(f"{path}:{lineno}: at_ms must be monotone")
            last_at = at
        elif "force_state" in keys:
            if rec["force_state"] not in (0, 1, 2):
                raise ScenarioError(f"{path}:{lineno}: force_state must be 0, 1 or 2")
            if "at_chunk" not in keys or int(rec["at_chunk"]) < 0:
                raise ScenarioError(f"{path}:{lineno}: force_state needs at_chunk >= 0")
        elif "endpoint" in keys:
            float(rec["endpoint"])
        elif "expect" in keys or "expect_absent" in keys:
            spec = rec.get("expect", rec.get("expect_absent"))
            if not isinstance(spec, dict) or "kind" not in spec:
                raise ScenarioError(f"{path}:{lineno}: expect needs a kind")
        else:
            raise ScenarioError(f"{path}:{lineno}: unknown event {sorted(keys)}")
        lines.append(rec)
    return Scenario(header=header, lines=lines, base_dir=path.parent)


def _audio_samples(spec: dict, base_dir: Path) -> np.ndarray:
    if "path" in spec:
        samples, rate = read_wav(base_dir / spec["path"])
        if rate != 16_000:
            raise ScenarioError(f"audio {spec['path']}: expected 16 kHz, got {rate}")
        return samples
    if "b64" in spec:
        return np.frombuffer(base64.b64decode(spec["b64"]), dtype="<i2")
    if "tone" in spec:
        t = spec["tone"]
        return synth_tone(t["dur_ms"], t.get("freq", 440.0), t.get("amp", 0.3))
    if "silence" in spec:
        return synth_silence(spec["silence"]["dur_ms"])
    raise ScenarioError(f"audio event needs path/b64/tone/silence, got {sorted(spec)}")


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    exit_code: int
    events: list[TurnEvent]
    failures: list[str]
    report: dict


class ScenarioRunner:
    """Single-session driver that interleaves scripted audio with generation."""

    def __init__(self, scenario: Scenario, models: ModelBundle):
        self.scenario = scenario
        self.models = models
        self.session: SessionCaches = new_session(models, "scenario")
        self.events: list[TurnEvent] = []
        self._gen = None

    def _step_generation_until(self, t_target: float | None) -> None:
        """Let any in-flight generation catch up to the audio timeline."""
        while True:
            if self._gen is None:
                if self.session.generation_pending:
                    self._gen = run_generation(self.session, self.models)
                    continue
                return
            if t_target is not None and self.session.clock_ms >= t_target:
                return
            try:
                self.events.append(next(self._gen))
            except StopIteration:
                self._gen = None

    def run(self) -> list[TurnEvent]:
        for rec in self.scenario.lines:
            if "audio" in rec:
                at = float(rec["at_ms"])
                self._step_generation_until(at)
                pcm = _audio_samples(rec["audio"], self.scenario.base_dir)
                evs, _ = on_audio_chunk(pcm, self.session, self.models, at_ms=at)
                self.events.extend(evs)
            elif "force_state" in rec:
                self.session.force_states[int(rec["at_chunk"])] = int(rec["force_state"])
            elif "endpoint" in rec:
                self.events.append(mark_endpoint(self.session, float(rec["endpoint"])))
        self._step_generation_until(None)
        return self.events

    def check_expectations(self) -> list[str]:
        failures: list[str] = []
        cursor = 0
        for rec in self.scenario.lines:
            if "expect" in rec:
                spec = rec["expect"]
                idx = self._find(spec, cursor)
                if idx is None:
                    failures.append(f"expected {spec} after event #{cursor}, not found")
                else:
                    cursor = idx + 1
            elif "expect_absent" in rec:
                spec = rec["expect_absent"]
                idx = self._find(spec, cursor)
                if idx is not None:
                    failures.append(
                        f"expected no {spec} after event #{cursor}, found seq {self.events[idx].seq}"
                    )
        return failures

    def _find(self, spec: dict, cursor: int) -> int | None:
        for i in range(cursor, len(self.events)):
            ev = self.events[i]
            if ev.kind != spec["kind"]:
                continue
            if all(ev.data.get(k) == v for k, v in spec.items() if k != "kind"):
                return i
        return None


def build_latency_report(events: list[TurnEvent], chunk_ms: float | None) -> dict:
    """Aggregate per-turn latency decompositions; see report.aggregate_report."""
    from .report import aggregate_report

    turns = []
    for turn_events in split_turns(events):
        try:
            turns.append(measure_latency(turn_events))
        except IncompleteTurnError:
            continue
    return aggregate_report(turns, chunk_ms)


def write_artifacts(out_dir, events: list[TurnEvent], report: dict) -> dict:
    """events.jsonl + out.wav + latency.json (+ latency.png when measurable)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    events_path = out_dir / "events.jsonl"
    with events_path.open("w") as f:
        for ev in events:
            f.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")

    pcm_parts = [ev.data["samples"] for ev in events if ev.kind == EV_PCM]
    wav = np.concatenate(pcm_parts) if pcm_parts else np.zeros(0, dtype=np.int16)
    write_wav(out_dir / "out.wav", wav, CODEC_SAMPLE_RATE)

    (out_dir / "latency.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    paths = {
        "events": events_path,
        "wav": out_dir / "out.wav",
        "latency": out_dir / "latency.json",
    }
    if report.get("turns", 0) > 0:
        from .report import render_latency_figure

        paths["figure"] = out_dir / "latency.png"
        render_latency_figure(report, paths["figure"])
    return paths


def run_scenario(path, out_dir, seed_override: int | None = None) -> ScenarioResult:
    """Execute a scenario file and write its artifacts; exit code as in the CLI."""
    scenario = parse_scenario(path)
    models = ModelBundle.build(scenario.pipeline_config(seed_override))
    runner = ScenarioRunner(scenario, models)
    events = runner.run()
    failures = runner.check_expectations()
    chunk_ms = None
    if models.encoder.cfg.chunk_size is not None:
        chunk_ms = expected_chunk_ms(models)
    report = build_latency_report(events, chunk_ms)
    write_artifacts(out_dir, events, report)
    return ScenarioResult(
        exit_code=EXIT_OK if not failures else EXIT_ASSERTION,
        events=events,
        failures=failures,
        report=report,
    )
