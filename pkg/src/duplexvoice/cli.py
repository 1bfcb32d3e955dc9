"""Command-line entry points: scenario runner, latency probe, server, trainplan.

    duplexvoice run --scenario F --out D [--seed S]
    duplexvoice latency --out D [--scenario F] [--repeats N] [--seed S]
    duplexvoice serve --port P --workers N [--seed S --chunk-size C ...]
    duplexvoice trainplan validate [--json]

The latency subcommand without a scenario synthesizes scripted turns: tone
bursts with known endpoints, the end-of-speech state forced onto the first
chunk boundary at least one chunk after the endpoint, so the detection lag
lands inside one to two encoder chunks by construction.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .duplex import new_session, on_audio_chunk
from .encoder import chunk_duration_ms
from .errors import PipelineError, ScenarioError
from .models import ModelBundle, PipelineConfig
from .scenario import (
    EXIT_ASSERTION,
    EXIT_OK,
    EXIT_PARSE,
    run_scenario,
    synth_silence,
    synth_tone,
)

logger = logging.getLogger(__name__)

PCM_CHUNK_MS = 40  # transport granularity used by synthesized scenarios
TURN_GAP_MS = 2000.0


def _config_from_args(args) -> PipelineConfig:
    chunk = getattr(args, "chunk_size", 4)
    return PipelineConfig(
        seed=args.seed,
        chunk_size=None if chunk in (0, None) else chunk,
        speech_chunk=getattr(args, "speech_chunk", 40),
        topk=getattr(args, "topk", 2),
    )


# ---------------------------------------------------------------------------
# latency scenario synthesis
# ---------------------------------------------------------------------------

def _dry_run_chunk_times(models: ModelBundle, wave: np.ndarray) -> list[float]:
    """Completion clock (ms from turn start) of every encoder chunk in ``wave``."""
    session = new_session(models, "dry", force_states={i: 0 for i in range(10_000)})
    t_fire: list[float] = []
    step = 16 * PCM_CHUNK_MS
    seen = 0
    for off in range(0, len(wave), step):
        on_audio_chunk(wave[off:off + step], session, models)
        while seen < session.chunks_completed:
            t_fire.append(session.clock_ms)
            seen += 1
    return t_fire


def synth_latency_scenario(config: PipelineConfig, turns: int, seed: int) -> list[dict]:
    """Scripted multi-turn scenario whose detection lag is in [1, 2] chunks.

    Per turn: leading silence, a tone with a known endpoint E, then silence
    until the first chunk boundary at or after E plus one chunk duration,
    where state 1 is forced.  Audio stops at that boundary so generation
    timing stays unpolluted by later deliveries.
    """
    models = ModelBundle.build(config)
    chunk_ms = chunk_duration_ms(models.encoder.cfg)
    rng = np.random.default_rng(seed)
    lines: list[dict] = [{
        "seed": config.seed,
        "chunk_size": config.chunk_size,
        "speech_chunk": config.speech_chunk,
        "topk": config.topk,
    }]
    base = 0.0
    for turn in range(turns):
        lead_ms = PCM_CHUNK_MS * int(rng.integers(5, 11))          # 200..400 ms
        speech_ms = int(rng.integers(400, 1200))
        freq = float(rng.integers(220, 880))
        wave = np.concatenate([
            synth_silence(lead_ms),
            synth_tone(speech_ms, freq=freq),
            synth_silence(1000),
        ])
        t_fire = _dry_run_chunk_times(models, wave)
        endpoint = float(lead_ms + speech_ms)
        target = endpoint + chunk_ms
        fire_at = next((m for m, t in enumerate(t_fire) if t >= target), None)
        if fire_at is None:
            raise PipelineError("synthesized turn too short to place the end state")

        for j in range(fire_at):
            lines.append({"force_state": 0, "at_chunk": j})
        lines.append({"force_state": 1, "at_chunk": fire_at})

        step = 16 * PCM_CHUNK_MS
        endpoint_written = False
        for off in range(0, len(wave), step):
            start_ms = off / 16.0
            end_ms = start_ms + PCM_CHUNK_MS
            if end_ms > t_fire[fire_at]:
                break
            if not endpoint_written and end_ms > endpoint:
                lines.append({"endpoint": base + endpoint})
                endpoint_written = True
            chunk = wave[off:off + step]
            lines.append({
                "audio": {"b64": _b64(chunk)},
                "at_ms": base + start_ms,
            })
        if not endpoint_written:
            lines.append({"endpoint": base + endpoint})
        lines.append({"expect": {"kind": "state_changed", "state": 1}})
        lines.append({"expect": {"kind": "turn_ended"}})
        base += t_fire[fire_at] + TURN_GAP_MS
    return lines


def _b64(samples: np.ndarray) -> str:
    import base64

    return base64.b64encode(np.asarray(samples, dtype="<i2").tobytes()).decode("ascii")


def write_scenario(lines: list[dict], path: Path) -> None:
    with path.open("w") as f:
        for line in lines:
            f.write(json.dumps(line, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    try:
        result = run_scenario(args.scenario, args.out, seed_override=args.seed)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_PARSE
    for failure in result.failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    print(f"{len(result.events)} events -> {args.out}")
    return result.exit_code


def cmd_latency(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario:
        scenario_path = Path(args.scenario)
    else:
        config = _config_from_args(args)
        lines = synth_latency_scenario(config, turns=args.repeats, seed=args.seed + 7)
        scenario_path = out / "scenario.jsonl"
        write_scenario(lines, scenario_path)
    try:
        result = run_scenario(scenario_path, out, seed_override=args.seed)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_PARSE
    report = result.report
    for failure in result.failures:
        print(f"FAIL: {failure}", file=sys.stderr)
    if report["turns"] == 0:
        print("no measurable turns", file=sys.stderr)
        return EXIT_ASSERTION
    print(f"turns: {report['turns']}   (simulation-clock ms)")
    width = max(len(n) for n in report["segments"])
    for name, stats in report["segments"].items():
        print(f"  {name:<{width}}  avg {stats['avg']:>8.2f}  p50 {stats['p50']:>8.2f}  p90 {stats['p90']:>8.2f}")
    total = report["total"]
    print(f"  {'total':<{width}}  avg {total['avg']:>8.2f}  p50 {total['p50']:>8.2f}  p90 {total['p90']:>8.2f}")
    lag = report.get("detection_lag_ms")
    if lag:
        print(f"  detection lag  avg {lag['avg']:.1f} ms  p50 {lag['p50']:.1f}  p90 {lag['p90']:.1f}")
    if report.get("detection_lag_within_expected") is False:
        print("detection lag outside [1, 2] chunk durations", file=sys.stderr)
        return EXIT_ASSERTION
    return result.exit_code


def cmd_serve(args) -> int:
    from .server import Server

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    models = ModelBundle.build(_config_from_args(args))
    server = Server(models, n_workers=args.workers, host=args.host, port=args.port)
    print(f"listening on {server.host}:{server.port} with {args.workers} workers", flush=True)
    server.serve_forever()
    return 0


def cmd_trainplan(args) -> int:
    from .trainplan import ParamRegistry, builtin_stages, stages_to_json, validate

    models = ModelBundle.build(PipelineConfig(seed=args.seed))
    registry = ParamRegistry.from_bundle(models)
    stages = builtin_stages()
    results = {s.stage_id: validate(s, registry) for s in stages}
    if args.json:
        doc = {
            "stages": stages_to_json(),
            "violations": results,
            "registry": {
                name: {"params": e.param_count} for name, e in sorted(registry.entries.items())
            },
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
    else:
        width = max(len(s.stage_id) for s in stages)
        for stage in stages:
            violations = results[stage.stage_id]
            status = "OK" if not violations else "FAIL " + "; ".join(violations)
            trainable = ", ".join(sorted(stage.trainable))
            print(f"{stage.stage_id:<{width}}  [{status}]  trainable: {trainable}")
    return 0 if all(not v for v in results.values()) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duplexvoice",
        description="Streaming full-duplex speech-to-speech pipeline (desk scale).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario file and write artifacts")
    p_run.add_argument("--scenario", required=True, help="scenario .jsonl path")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override header seed")
    p_run.set_defaults(func=cmd_run)

    p_lat = sub.add_parser("latency", help="measure the latency decomposition")
    p_lat.add_argument("--scenario", default=None, help="optional scenario to measure")
    p_lat.add_argument("--out", required=True, help="output directory")
    p_lat.add_argument("--repeats", type=int, default=20, help="turns to synthesize")
    p_lat.add_argument("--seed", type=int, default=0)
    p_lat.add_argument("--chunk-size", type=int, default=4, dest="chunk_size")
    p_lat.add_argument("--speech-chunk", type=int, default=40, dest="speech_chunk")
    p_lat.add_argument("--topk", type=int, default=2)
    p_lat.set_defaults(func=cmd_latency)

    p_srv = sub.add_parser("serve", help="start the model-pool server")
    p_srv.add_argument("--host", default="127.0.0.1")
    p_srv.add_argument("--port", type=int, default=0)
    p_srv.add_argument("--workers", type=int, default=2)
    p_srv.add_argument("--seed", type=int, default=0)
    p_srv.add_argument("--chunk-size", type=int, default=4, dest="chunk_size")
    p_srv.add_argument("--speech-chunk", type=int, default=40, dest="speech_chunk")
    p_srv.add_argument("--topk", type=int, default=2)
    p_srv.set_defaults(func=cmd_serve)

    p_tp = sub.add_parser("trainplan", help="training-plan tools")
    tp_sub = p_tp.add_subparsers(dest="trainplan_command", required=True)
    p_val = tp_sub.add_parser("validate", help="validate the six stages against the registry")
    p_val.add_argument("--json", action="store_true", help="emit machine-readable output")
    p_val.add_argument("--seed", type=int, default=0)
    p_val.set_defaults(func=cmd_trainplan)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
