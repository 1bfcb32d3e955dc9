"""Acceptance suite: one test per exit criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines.  Every tolerance is pinned here; nothing is deferred to calibration.
"""

import json
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from duplexvoice.backbone import Backbone, BackboneConfig
from duplexvoice.duplex import (
    drain_generation,
    new_session,
    on_audio_chunk,
    run_generation,
)
from duplexvoice.encoder import Encoder, EncoderConfig
from duplexvoice.frontend import frame_features
from duplexvoice.models import ModelBundle, PipelineConfig
from duplexvoice.nnkit import BlockConfig, block_forward, init_params, top_k_sample
from duplexvoice.scenario import run_scenario
from duplexvoice.server import SessionRegistry, WorkerPool, dispatch
from duplexvoice.speechgen import DecoderConfig, DecoderStack, codec_decode
from duplexvoice.trainplan import ParamRegistry, builtin_stages, validate

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def report(criterion: str, detail: str = ""):
    line = f"PASS  {criterion}"
    if detail:
        line += f"  [{detail}]"
    print(line, flush=True)


def tone(ms, amp=0.3, freq=440.0):
    t = np.arange(int(16 * ms)) / 16_000
    return (amp * 32767.0 * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def silence(ms):
    return np.zeros(int(16 * ms), dtype=np.int16)


@pytest.fixture(scope="module")
def models():
    return ModelBundle.build(PipelineConfig(seed=0, max_text_tokens=6))


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_rate_chain():
    """1 s of audio -> 98 frames -> 24 +/- 1 frames at 25 Hz -> 12 +/- 1 embeddings."""
    start = time.perf_counter()

    def windows(n, win, hop):
        count, pos = 0, 0
        while pos + win <= n:
            count += 1
            pos += hop
        return count

    def conv_chain_oracle(n, layers):
        # explicit walk of each stride-2 kernel-3 conv under the left-pad rule
        for kernel, stride in layers:
            padded = n + kernel - 1
            count, pos = 0, 0
            while pos + kernel <= padded:
                count += 1
                pos += stride
            n = count
        return n

    n_feats = windows(16_000, 400, 160)
    assert n_feats == 98

    feats = frame_features(tone(1000))
    assert feats.shape[0] == n_feats

    n25_oracle = conv_chain_oracle(98, [(3, 2), (3, 2)])
    nemb_oracle = conv_chain_oracle(98, [(3, 2), (3, 2), (3, 2)])
    assert abs(n25_oracle - 24) <= 1
    assert abs(nemb_oracle - 12) <= 1

    encoder = Encoder.build(EncoderConfig(chunk_size=None), seed=42)
    caches = encoder.fresh_caches()
    _, caches = encoder.encode_chunk(feats, caches)
    n25 = caches.pending.shape[0]
    chunks, _ = encoder.flush(caches)
    nemb = sum(len(c) for c in chunks)
    assert n25 == n25_oracle == 25      # exact, tolerance 0 under the pad rule
    assert nemb == nemb_oracle == 13

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report("criterion 1: rate chain 98 -> 25 -> 13", f"{elapsed:.2f}s")


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_streaming_equivalence():
    """Chunked encoder and backbone prefill match full forward within 1e-5, 50 inputs."""
    start = time.perf_counter()
    encoder = Encoder.build(EncoderConfig(chunk_size=None), seed=7)
    backbone = Backbone.build(BackboneConfig(), seed=9)
    rng = np.random.default_rng(0)

    worst = 0.0
    for trial in range(50):
        n = int(rng.integers(40, 140))
        feats = rng.normal(loc=-10.0, scale=4.0, size=(n, 80)).astype(np.float32)
        full = encoder.encode_all(feats)
        caches = encoder.fresh_caches()
        i = 0
        while i < n:
            step = int(rng.integers(1, 25))
            encoder.encode_chunk(feats[i:i + step], caches)
            i += step
        tail, _ = encoder.flush(caches)
        streamed = np.concatenate([c.vectors for c in tail], axis=0)
        worst = max(worst, float(np.max(np.abs(streamed - full))))

        seq = rng.normal(size=(int(rng.integers(6, 30)), 64)).astype(np.float32)
        full_cache = backbone.fresh_cache()
        block_forward(seq, backbone.blocks, full_cache, causal=True)
        chunk_cache = backbone.fresh_cache()
        j = 0
        while j < len(seq):
            step = int(rng.integers(1, 8))
            block_forward(seq[j:j + step], backbone.blocks, chunk_cache, causal=True)
            j += step
        for layer in range(chunk_cache.n_layers):
            worst = max(worst, float(np.max(np.abs(
                chunk_cache.keys[layer] - full_cache.keys[layer]
            ))))

    assert worst < 1e-5
    elapsed = time.perf_counter() - start
    assert elapsed < 10.0
    report("criterion 2: streaming equivalence on 50 inputs", f"max|d|={worst:.2e}, {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_duplex_conformance(tmp_path):
    """Every scripted conformance scenario passes: state 0/1/2 + interruption."""
    scenario_files = sorted(SCENARIO_DIR.glob("*.jsonl"))
    assert len(scenario_files) >= 4
    for path in scenario_files:
        result = run_scenario(path, tmp_path / path.stem)
        assert result.exit_code == 0, f"{path.name}: {result.failures}"
    report("criterion 3: duplex conformance", f"{len(scenario_files)}/{len(scenario_files)} scenarios")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_token_sample_conservation(models):
    """PCM samples == 600 x speech tokens; a 40-token chunk is exactly 24000 samples."""
    pcm, _ = codec_decode(list(range(40)), models.decoder.codec)
    assert len(pcm) == 24_000

    session = new_session(models, "conserve", force_states={0: 0, 1: 1})
    pcm_in = np.concatenate([silence(200), tone(900)])
    for i in range(0, len(pcm_in), 640):
        on_audio_chunk(pcm_in[i:i + 640], session, models)
        if session.generation_pending:
            break
    events = drain_generation(session, models)
    end = events[-1]
    assert end.kind == "turn_ended"
    total_pcm = sum(len(e.data["samples"]) for e in events if e.kind == "speech_chunk")
    assert total_pcm == 600 * end.data["n_speech_tokens"]

    # multi-sentence path via a scripted text sampler (needs more token budget)
    roomy = ModelBundle.build(PipelineConfig(seed=0, max_text_tokens=32))
    session = new_session(roomy, "conserve2", force_states={0: 1})
    for i in range(0, len(pcm_in), 640):
        on_audio_chunk(pcm_in[i:i + 640], session, roomy)
        if session.generation_pending:
            break
    script = iter(list("Hi there. Ok!".encode()) + [roomy.backbone.cfg.eos])
    events = list(run_generation(session, roomy, sampler=lambda _: next(script)))
    texts = [e for e in events if e.kind == "text_chunk"]
    assert [e.data["text"] for e in texts] == ["Hi there.", " Ok!"]
    total_pcm = sum(len(e.data["samples"]) for e in events if e.kind == "speech_chunk")
    assert total_pcm == 600 * events[-1].data["n_speech_tokens"]
    report("criterion 4: token/sample conservation", f"{total_pcm} samples")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_latency_decomposition(tmp_path):
    """latency.json has exactly the four segments + total; lag in [160, 320] ms, 20 turns."""
    from duplexvoice.cli import main

    out = tmp_path / "latency"
    assert main(["latency", "--out", str(out), "--repeats", "20", "--seed", "1"]) == 0
    doc = json.loads((out / "latency.json").read_text())

    assert doc["turns"] == 20
    expected_segments = {
        "interrupt_to_first_text",
        "first_text_to_decoder_prefill",
        "decoder_prefill_to_first_token_chunk",
        "first_token_chunk_to_first_pcm",
    }
    assert set(doc["segments"]) == expected_segments
    assert doc["total"] is not None
    assert doc["total"]["avg"] == pytest.approx(
        sum(s["avg"] for s in doc["segments"].values()), abs=1e-3
    )
    lags = []
    for turn in doc["per_turn"]:
        assert turn["total"] == pytest.approx(sum(turn["segments"].values()), abs=1e-3)
        assert 160.0 <= turn["detection_lag_ms"] <= 320.0
        lags.append(turn["detection_lag_ms"])
    assert doc["detection_lag_within_expected"] is True
    report("criterion 5: latency decomposition",
           f"lag range [{min(lags):.0f}, {max(lags):.0f}] ms over 20 turns")


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_server_invariance():
    """Transcripts identical across pool sizes and assignments; sessions isolated."""
    start = time.perf_counter()
    models = ModelBundle.build(PipelineConfig(seed=2, max_text_tokens=6))
    forces = {0: 0, 1: 0, 2: 1}
    pcm_in = np.concatenate([silence(200), tone(900)])
    chunks = [pcm_in[i:i + 640] for i in range(0, len(pcm_in), 640)]

    def run_one(pool, sid, assignments=None):
        registry = SessionRegistry(models)
        registry.register(sid, forces)
        lines = []
        for i, chunk in enumerate(chunks):
            w = None if assignments is None else assignments[i % len(assignments)]
            lines += [m.to_line() for m in dispatch(sid, chunk, pool, registry, worker_index=w)]
            if any('"type": "turn_end"' in l for l in lines):
                break
        return lines

    transcripts = [run_one(WorkerPool(models, n), "s") for n in (1, 2, 4)]
    assert transcripts[0] == transcripts[1] == transcripts[2]

    pool = WorkerPool(models, 4)
    forced = [run_one(pool, "s", a) for a in ([0], [1, 3], [2, 0, 1, 3])]
    assert forced[0] == forced[1] == forced[2] == transcripts[0]

    # three sessions, truly concurrent on one pool, each equal to its solo run
    solo = {sid: run_one(WorkerPool(models, 2), sid) for sid in ("a", "b", "c")}
    registry = SessionRegistry(models)
    shared_pool = WorkerPool(models, 2)
    results: dict[str, list] = {}

    def run_session_thread(sid):
        registry.register(sid, forces)
        lines = []
        for chunk in chunks:
            lines += [m.to_line() for m in dispatch(sid, chunk, shared_pool, registry)]
            if any('"type": "turn_end"' in l for l in lines):
                break
        results[sid] = lines

    threads = [threading.Thread(target=run_session_thread, args=(sid,)) for sid in ("a", "b", "c")]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=25)
    for sid in ("a", "b", "c"):
        assert results[sid] == solo[sid], f"session {sid} transcript diverged"

    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report("criterion 6: server invariance + isolation", f"{elapsed:.1f}s")


# -- 7 ------------------------------------------------------------------------

def test_criterion_7_frozenness():
    """Fingerprint constant over 100 turns / 4 sessions; stage masks hold."""
    models = ModelBundle.build(PipelineConfig(seed=3, max_text_tokens=4))
    before = models.backbone.fingerprint()
    bundle_before = models.fingerprint()

    turn_audio = np.concatenate([silence(160), tone(640)])
    turns = 0
    for s in range(4):
        session = new_session(models, f"s{s}", force_states={0: 1})
        for _ in range(25):
            for i in range(0, len(turn_audio), 1280):
                on_audio_chunk(turn_audio[i:i + 1280], session, models)
                if session.generation_pending:
                    break
            assert session.generation_pending, "turn failed to fire its end state"
            drain_generation(session, models)
            session.force_states.update({0: 1})
            turns += 1
    assert turns == 100
    assert models.backbone.fingerprint() == before
    assert models.fingerprint() == bundle_before

    registry = ParamRegistry.from_bundle(models)
    stages = builtin_stages()
    assert len(stages) == 6
    for stage in stages:
        assert validate(stage, registry) == [], stage.stage_id
        assert "llm" in stage.frozen
    output3 = next(s for s in stages if s.stage_id == "output-3")
    assert output3.trainable == {"nar_prefix"}
    report("criterion 7: frozenness", "100 turns / 4 sessions, 6 stages valid")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_pre_network_structure():
    """Enabling the pre-network adds exactly two decoder layers of parameters."""
    on = DecoderStack.build(DecoderConfig(pre_network=True), seed=5)
    off = DecoderStack.build(DecoderConfig(pre_network=False), seed=5)
    three = init_params(BlockConfig(3, 64, 4, final_norm=False), 0).param_count()
    two = init_params(BlockConfig(2, 64, 4, final_norm=False), 0).param_count()
    one_layer = three - two
    delta = on.param_count() - off.param_count()
    assert delta == 2 * one_layer

    backbone = Backbone.build(BackboneConfig(), seed=9)
    for stack in (on, off):
        ctx = stack.nar_prefill(list(b"check."), backbone.embed_tokens)
        tokens = stack.ar_generate(ctx, k=2, seed=0, max_len=50)
        assert all(0 <= t < 1024 for t in tokens)
    report("criterion 8: pre-network structure", f"delta={delta} params = 2 layers")


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_sampling_contract():
    """10,000 Monte-Carlo draws stay inside top-k; k=1 is lowest-index argmax."""
    logits = np.array([0.5, 0.3, 0.2, -9.0, -9.0, -9.0, 1.5, -2.0])
    k = 3
    top = set(np.argsort(-logits, kind="stable")[:k])
    rng = np.random.default_rng(0)
    drawn = {top_k_sample(logits, k, rng) for _ in range(10_000)}
    assert drawn <= top
    assert drawn == top  # all three appear over 10k draws

    assert top_k_sample(np.array([0.1, 0.9, 0.5]), 1, rng=0) == 1
    assert top_k_sample(np.array([0.9, 0.9, 0.1]), 1, rng=0) == 0
    rng2 = np.random.default_rng(1)
    for _ in range(200):
        v = rng2.normal(size=16)
        assert top_k_sample(v, 1, rng=rng2) == int(np.argmax(v))
    report("criterion 9: sampling contract", "10k draws in top-k; argmax ties -> lowest index")
