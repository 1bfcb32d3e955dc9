"""Pipeline configuration and the immutable model bundle shared by workers.

One ``ModelBundle`` holds every parameter group in the system (encoder,
adapter, backbone pieces, speech decoders, codec).  Bundles are cheap to
build from a seed, hold no mutable inference state, and expose the named
parameter groups that the training-plan registry validates against.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from .backbone import Backbone, BackboneConfig
from .encoder import Encoder, EncoderConfig
from .frontend import VAD_THRESHOLD_DEFAULT
from .nnkit import ModelParams
from .speechgen import SPEECH_CHUNK_TOKENS, DecoderConfig, DecoderStack


@dataclass(frozen=True)
class CostModel:
    """Simulation-clock charge (ms) per unit of generation work.

    The listening side advances on audio time alone; these constants give the
    response side a deterministic, reproducible latency decomposition.
    """

    text_token_ms: float = 2.0
    prefix_pos_ms: float = 0.15
    nar_pos_ms: float = 0.15
    ar_token_ms: float = 0.5
    codec_token_ms: float = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    chunk_size: int | None = 4          # encoder chunk, 25 Hz frames
    speech_chunk: int = SPEECH_CHUNK_TOKENS
    topk: int = 2                       # AR speech-token sampling
    text_topk: int = 1                  # greedy text by default
    max_text_tokens: int = 16
    pre_network: bool = True
    vad_threshold: float = VAD_THRESHOLD_DEFAULT
    cost: CostModel = field(default_factory=CostModel)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(chunk_size=self.chunk_size)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig()

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(pre_network=self.pre_network)


class ModelBundle:
    """All immutable parameters of the pipeline; shareable across workers."""

    def __init__(self, config: PipelineConfig, encoder: Encoder, backbone: Backbone, decoder: DecoderStack):
        self.config = config
        self.encoder = encoder
        self.backbone = backbone
        self.decoder = decoder

    @classmethod
    def build(cls, config: PipelineConfig | None = None) -> "ModelBundle":
        config = config or PipelineConfig()
        base = config.seed
        return cls(
            config=config,
            encoder=Encoder.build(config.encoder_config(), seed=base + 1000),
            backbone=Backbone.build(config.backbone_config(), seed=base + 2000),
            decoder=DecoderStack.build(config.decoder_config(), seed=base + 3000),
        )

    def param_groups(self) -> dict[str, list[ModelParams]]:
        groups: dict[str, list[ModelParams]] = {}
        groups.update(self.encoder.param_groups())
        groups.update(self.backbone.param_groups())
        groups.update(self.decoder.param_groups())
        return groups

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        groups = self.param_groups()
        for name in sorted(groups):
            h.update(name.encode())
            for params in groups[name]:
                h.update(params.fingerprint().encode())
        return h.hexdigest()


def session_seed(global_seed: int, session_id: str) -> int:
    """Stable per-session sampling seed, independent of scheduling order."""
    return (global_seed * 1_000_003 + zlib.crc32(session_id.encode())) % (2**31)


def turn_rng_seed(base: int, turn_index: int, stream: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([base, turn_index, stream])
