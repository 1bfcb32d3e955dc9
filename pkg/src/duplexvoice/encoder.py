"""Chunk-wise streaming speech encoder plus adapter into backbone space.

100 Hz log-mel features pass through two stride-2 convolutions (4x down to
25 Hz), a small transformer with chunk-grouped attention, and a stride-2
adapter convolution (2x down to 12.5 Hz, backbone width).  All state lives
in an ``EncoderCaches`` value owned by the session: convolution tails, the
attention kv cache, and 25 Hz frames still waiting for a complete chunk.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import InfiniteChunkError, InvalidConfigError
from .frontend import N_MELS, validate_features
from .nnkit import (
    F32,
    BlockConfig,
    ConvCache,
    KvCache,
    ModelParams,
    block_forward,
    conv1d_chunk,
    conv_out_len,
    init_conv,
    init_params,
)

FRAME_MS_25HZ = 40  # one post-convolution frame

# Fixed affine applied to raw log-mel input before the first convolution so
# activations enter the network near unit scale.
INPUT_SHIFT = 10.0
INPUT_SCALE = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    backbone_dim: int = 64
    chunk_size: int | None = 4  # frames at 25 Hz; None means unbounded (non-streaming)
    encoder_downsample: int = 4
    adapter_downsample: int = 2

    def __post_init__(self):
        if self.encoder_downsample * self.adapter_downsample != 8:
            raise InvalidConfigError("downsampling chain must total 8x (100 Hz -> 12.5 Hz)")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise InvalidConfigError(f"chunk_size must be >= 1 or None, got {self.chunk_size}")


def chunk_duration_ms(cfg: EncoderConfig) -> int:
    """Audio span of one encoder chunk in milliseconds."""
    if cfg.chunk_size is None:
        raise InfiniteChunkError("chunk duration undefined for unbounded chunks")
    return cfg.chunk_size * FRAME_MS_25HZ


@dataclass
class EmbeddingChunk:
    """Backbone-space embeddings emitted for one completed encoder chunk."""

    vectors: np.ndarray       # (n, backbone_dim) at 12.5 Hz
    last_frame_index: int     # index of the final embedding within the turn

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


@dataclass
class EncoderCaches:
    """Everything the encoder remembers for one session, movable as a unit."""

    conv: list[ConvCache]
    attn: KvCache
    adapter_conv: ConvCache
    pending: np.ndarray       # 25 Hz frames not yet grouped into a chunk
    emitted: int = 0          # embeddings emitted this turn

    def to_bytes(self) -> bytes:
        arrays: dict[str, np.ndarray] = {}
        for i, c in enumerate(self.conv):
            arrays.update(c.to_arrays(f"conv{i}."))
        arrays.update(self.attn.to_arrays("attn."))
        arrays.update(self.adapter_conv.to_arrays("adapter."))
        arrays["pending"] = self.pending
        arrays["emitted"] = np.array(self.emitted)
        arrays["n_conv"] = np.array(len(self.conv))
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncoderCaches":
        with np.load(io.BytesIO(raw)) as z:
            arrays = {k: z[k] for k in z.files}
        n_conv = int(arrays["n_conv"])
        return cls(
            conv=[ConvCache.from_arrays(arrays, f"conv{i}.") for i in range(n_conv)],
            attn=KvCache.from_arrays(arrays, "attn."),
            adapter_conv=ConvCache.from_arrays(arrays, "adapter."),
            pending=arrays["pending"].astype(F32),
            emitted=int(arrays["emitted"]),
        )


class Encoder:
    """Immutable parameters; all mutable state is passed in as EncoderCaches."""

    def __init__(
        self,
        cfg: EncoderConfig,
        conv1: ModelParams,
        conv2: ModelParams,
        blocks: ModelParams,
        adapter: ModelParams,
    ):
        self.cfg = cfg
        self.conv1 = conv1
        self.conv2 = conv2
        self.blocks = blocks
        self.adapter = adapter

    @classmethod
    def build(cls, cfg: EncoderConfig, seed: int) -> "Encoder":
        block_cfg = BlockConfig(n_layers=cfg.n_layers, hidden=cfg.hidden, n_heads=cfg.n_heads)
        return cls(
            cfg=cfg,
            conv1=init_conv("encoder.conv1", seed, kernel=3, c_in=N_MELS, c_out=cfg.hidden, stride=2),
            conv2=init_conv("encoder.conv2", seed + 1, kernel=3, c_in=cfg.hidden, c_out=cfg.hidden, stride=2),
            blocks=init_params(block_cfg, seed + 2, name="encoder.blocks"),
            adapter=init_conv("adapter.conv", seed + 3, kernel=3, c_in=cfg.hidden, c_out=cfg.backbone_dim, stride=2),
        )

    def fresh_caches(self) -> EncoderCaches:
        return EncoderCaches(
            conv=[ConvCache.fresh(3, N_MELS), ConvCache.fresh(3, self.cfg.hidden)],
            attn=KvCache(self.cfg.n_layers),
            adapter_conv=ConvCache.fresh(3, self.cfg.hidden),
            pending=np.zeros((0, self.cfg.hidden), dtype=F32),
        )

    def param_groups(self) -> dict[str, list[ModelParams]]:
        return {"encoder": [self.conv1, self.conv2, self.blocks], "adapter": [self.adapter]}

    # -- streaming ---------------------------------------------------------

    def _downsample(self, feat: np.ndarray, caches: EncoderCaches) -> np.ndarray:
        x = ((feat.astype(F32) + F32(INPUT_SHIFT)) * F32(INPUT_SCALE))
        y, caches.conv[0] = conv1d_chunk(x, self.conv1, caches.conv[0])
        y = np.maximum(y, F32(0.0))
        y, caches.conv[1] = conv1d_chunk(y, self.conv2, caches.conv[1])
        return np.maximum(y, F32(0.0))

    def _process_group(self, frames: np.ndarray, caches: EncoderCaches) -> EmbeddingChunk:
        hidden, caches.attn = block_forward(
            frames, self.blocks, caches.attn, causal=False, chunk_mask=None
        )
        emb, caches.adapter_conv = conv1d_chunk(hidden, self.adapter, caches.adapter_conv)
        caches.emitted += emb.shape[0]
        return EmbeddingChunk(vectors=emb, last_frame_index=caches.emitted - 1)

    def encode_chunk(
        self, feat: np.ndarray, caches: EncoderCaches
    ) -> tuple[list[EmbeddingChunk], EncoderCaches]:
        """Feed 100 Hz features; returns one EmbeddingChunk per completed chunk.

        With a finite ``chunk_size`` c, frames accumulate until c frames at
        25 Hz are available, then the chunk attends to everything already
        cached plus itself.  With unbounded chunks nothing is emitted until
        ``flush``.
        """
        validate_features(feat)
        frames25 = self._downsample(feat, caches)
        caches.pending = np.concatenate([caches.pending, frames25], axis=0)
        out: list[EmbeddingChunk] = []
        c = self.cfg.chunk_size
        if c is not None:
            while caches.pending.shape[0] >= c:
                group, caches.pending = caches.pending[:c], caches.pending[c:]
                out.append(self._process_group(group, caches))
        return out, caches

    def flush(self, caches: EncoderCaches) -> tuple[list[EmbeddingChunk], EncoderCaches]:
        """Process whatever 25 Hz frames are still pending as a final chunk."""
        out: list[EmbeddingChunk] = []
        if caches.pending.shape[0] > 0:
            group, caches.pending = caches.pending, caches.pending[:0]
            out.append(self._process_group(group, caches))
        return out, caches

    def encode_all(self, feat: np.ndarray) -> np.ndarray:
        """Convenience: run a whole utterance through fresh caches, flushed."""
        caches = self.fresh_caches()
        chunks, caches = self.encode_chunk(feat, caches)
        tail, _ = self.flush(caches)
        parts = [c.vectors for c in chunks + tail]
        if not parts:
            return np.zeros((0, self.cfg.backbone_dim), dtype=F32)
        return np.concatenate(parts, axis=0)


def expected_embedding_count(n_feature_frames: int) -> int:
    """Exact embedding count for a flushed stream, from the conv arithmetic."""
    n25 = conv_out_len(conv_out_len(n_feature_frames, 3, 2), 3, 2)
    return conv_out_len(n25, 3, 2)
