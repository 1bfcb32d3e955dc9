"""Latency report aggregation and figure rendering.

The report carries the four response-path segments plus their total, each as
avg/p50/p90 over turns on the simulation clock, and the endpoint-detection
lag measured against the scripted true end of speech.
"""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .duplex import SEGMENT_NAMES, TurnLatency  # noqa: E402

SEGMENT_LABELS = {
    "interrupt_to_first_text": "interrupt → first text chunk",
    "first_text_to_decoder_prefill": "first text chunk → decoder prefill",
    "decoder_prefill_to_first_token_chunk": "decoder prefill → first token chunk",
    "first_token_chunk_to_first_pcm": "first token chunk → first PCM",
}


def _stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "avg": round(float(arr.mean()), 3),
        "p50": round(float(np.percentile(arr, 50)), 3),
        "p90": round(float(np.percentile(arr, 90)), 3),
    }


def aggregate_report(turns: list[TurnLatency], chunk_ms: float | None) -> dict:
    """Fold per-turn decompositions into the latency.json document."""
    report: dict = {
        "turns": len(turns),
        "chunk_ms": chunk_ms,
        "segments": {},
        "total": None,
        "detection_lag_ms": None,
        "detection_lag_within_expected": None,
        "per_turn": [t.as_dict() for t in turns],
    }
    if not turns:
        return report
    for name in SEGMENT_NAMES:
        report["segments"][name] = _stats([t.segments[name] for t in turns])
    report["total"] = _stats([t.total for t in turns])
    lags = [t.detection_lag_ms for t in turns if t.detection_lag_ms is not None]
    if lags:
        report["detection_lag_ms"] = _stats(lags)
        if chunk_ms is not None:
            report["detection_lag_within_expected"] = bool(
                all(chunk_ms <= lag <= 2 * chunk_ms for lag in lags)
            )
    return report


def render_latency_figure(report: dict, path) -> None:
    """Horizontal bars of the per-segment averages with p50/p90 markers."""
    names = [n for n in SEGMENT_NAMES if n in report["segments"]]
    rows = [report["segments"][n] for n in names] + [report["total"]]
    labels = [SEGMENT_LABELS[n] for n in names] + ["total"]

    fig, ax = plt.subplots(figsize=(8.0, 0.7 * len(rows) + 1.6))
    y = np.arange(len(rows))[::-1]
    avgs = [r["avg"] for r in rows]
    ax.barh(y, avgs, height=0.55, color=["#4878a8"] * len(names) + ["#a85448"])
    for yi, row in zip(y, rows):
        ax.plot([row["p50"]], [yi], marker="|", color="black", markersize=14)
        ax.plot([row["p90"]], [yi], marker="|", color="gray", markersize=14)
        ax.annotate(
            f"{row['avg']:.1f} ms",
            xy=(row["avg"], yi),
            xytext=(4, 0),
            textcoords="offset points",
            va="center",
            fontsize=9,
        )
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=9)
    ax.set_xlabel("simulation-clock milliseconds (avg; | = p50, | = p90)")
    title = f"response latency over {report['turns']} turns"
    lag = report.get("detection_lag_ms")
    if lag:
        title += f"  (detection lag avg {lag['avg']:.0f} ms)"
    ax.set_title(title, fontsize=11)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
