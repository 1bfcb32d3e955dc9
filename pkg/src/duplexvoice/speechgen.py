"""Speech-output stack: two-stage token decoders, token FIFO, codec decoder.

A prefix decoder consumes backbone hidden states into a kv cache; the NAR
decoder lays text-token embeddings (optionally transformed by a small
pre-network) on top of that cache with full self-attention; the AR decoder,
sharing the NAR parameters, then emits 40 Hz speech tokens from a single
1024-entry codebook until an end-of-response class.  Tokens stream through a
fixed-size FIFO into the codec decoder, which upsamples each token to 600
samples of 24 kHz audio with a short crossfade across chunk boundaries.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import (
    DimMismatchError,
    InvalidConfigError,
    InvalidTokenIdError,
    PushAfterCloseError,
)
from .nnkit import (
    F32,
    BlockConfig,
    KvCache,
    ModelParams,
    block_forward,
    init_embedding,
    init_linear,
    init_params,
    top_k_sample,
    as_rng,
)

CODEBOOK_SIZE = 1024
END_OF_RESPONSE = CODEBOOK_SIZE          # extra AR head class, never enters the FIFO
TOKEN_RATE_HZ = 40
CODEC_SAMPLE_RATE = 24_000
SAMPLES_PER_TOKEN = CODEC_SAMPLE_RATE // TOKEN_RATE_HZ  # 600
SPEECH_CHUNK_TOKENS = 40
CROSSFADE_SAMPLES = 32


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    pre_network: bool = True
    pre_network_layers: int = 2
    max_tokens_per_text_token: int = 25

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise InvalidConfigError("n_heads must divide hidden")


# ---------------------------------------------------------------------------
# Token FIFO
# ---------------------------------------------------------------------------

class TokenFifo:
    """Order-preserving speech-token queue, safe for one producer + one consumer.

    ``pop_chunk`` yields exactly ``chunk_size`` tokens, or the residue only
    once the FIFO is closed.
    """

    def __init__(self, chunk_size: int = SPEECH_CHUNK_TOKENS):
        if chunk_size < 1:
            raise InvalidConfigError("chunk_size must be >= 1")
        self.chunk_size = chunk_size
        self.closed = False
        self._tokens: list[int] = []
        self._lock = threading.Lock()

    def __len__(self) -> int:
        with self._lock:
            return len(self._tokens)

    def push(self, token: int) -> None:
        if not (0 <= token < CODEBOOK_SIZE):
            raise InvalidTokenIdError(f"token {token} outside [0, {CODEBOOK_SIZE})")
        with self._lock:
            if self.closed:
                raise PushAfterCloseError("FIFO already closed")
            self._tokens.append(token)

    def push_many(self, tokens) -> None:
        for t in tokens:
            self.push(t)

    def close(self) -> None:
        with self._lock:
            self.closed = True

    def flush(self) -> list[int]:
        """Drop and return everything queued (interrupt disposal)."""
        with self._lock:
            dropped, self._tokens = self._tokens, []
            return dropped

    def pop_chunk(self) -> list[int] | None:
        with self._lock:
            if len(self._tokens) >= self.chunk_size:
                chunk, self._tokens = (
                    self._tokens[: self.chunk_size],
                    self._tokens[self.chunk_size:],
                )
                return chunk
            if self.closed and self._tokens:
                chunk, self._tokens = self._tokens, []
                return chunk
            return None


# ---------------------------------------------------------------------------
# Codec decoder
# ---------------------------------------------------------------------------

class CodecDecoder:
    """Embedding lookup plus two non-overlapping transposed convolutions.

    Each token expands 25x then 24x to exactly 600 samples; a fixed
    32-sample crossfade against the previous chunk's raw tail is the only
    inter-chunk state.
    """

    UP1, UP1_CH = 25, 32
    UP2 = 24

    def __init__(self, params: ModelParams):
        self.params = params
        self.hidden = params.meta["hidden"]

    @classmethod
    def build(cls, seed: int, hidden: int = 64) -> "CodecDecoder":
        rng = np.random.default_rng(seed)

        def u(*shape):
            return rng.uniform(-0.1, 0.1, size=shape).astype(F32)

        arrays = {
            "emb": u(CODEBOOK_SIZE, hidden),
            "up1.w": u(hidden, cls.UP1 * cls.UP1_CH),
            "up1.b": np.zeros(cls.UP1 * cls.UP1_CH, dtype=F32),
            "up2.w": u(cls.UP1_CH, cls.UP2),
            "up2.b": np.zeros(cls.UP2, dtype=F32),
        }
        return cls(ModelParams(name="codec", seed=seed, arrays=arrays, meta={"hidden": hidden}))

    def _decode_raw(self, tokens: np.ndarray) -> np.ndarray:
        x = self.params["emb"][tokens]                                  # (n, hidden)
        y = np.maximum(x @ self.params["up1.w"] + self.params["up1.b"], F32(0.0))
        y = y.reshape(-1, self.UP1_CH)                                  # (n*25, 32)
        y = np.tanh(y @ self.params["up2.w"] + self.params["up2.b"])    # (n*25, 24)
        return y.reshape(-1).astype(F32)                                # (n*600,)

    def decode_chunk(
        self, tokens: list[int], fade_tail: np.ndarray | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """Decode one token chunk; returns (float samples, next fade tail)."""
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= CODEBOOK_SIZE):
            raise InvalidTokenIdError("token id outside codebook")
        if ids.size == 0:
            return np.zeros(0, dtype=F32), (
                np.zeros(CROSSFADE_SAMPLES, dtype=F32) if fade_tail is None else fade_tail
            )
        raw = self._decode_raw(ids)
        out = raw.copy()
        tail = np.zeros(CROSSFADE_SAMPLES, dtype=F32) if fade_tail is None else fade_tail
        ramp = np.linspace(0.0, 1.0, CROSSFADE_SAMPLES, endpoint=False, dtype=F32)
        out[:CROSSFADE_SAMPLES] = ramp * raw[:CROSSFADE_SAMPLES] + (1.0 - ramp) * tail
        return out, raw[-CROSSFADE_SAMPLES:].copy()


@dataclass
class PcmChunk:
    """Decoded audio for one speech-token chunk: 24 kHz int16 mono."""

    samples: np.ndarray
    sample_rate: int = CODEC_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int16)

    def __len__(self) -> int:
        return int(self.samples.shape[0])


def codec_decode(
    tokens: list[int], codec: CodecDecoder, fade_tail: np.ndarray | None = None
) -> tuple[PcmChunk, np.ndarray]:
    """Decode a token chunk to a PcmChunk of exactly 600 samples per token."""
    samples, tail = codec.decode_chunk(tokens, fade_tail)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    return PcmChunk(samples=pcm), tail


# ---------------------------------------------------------------------------
# Decoder stack
# ---------------------------------------------------------------------------

class DecoderStack:
    """NAR-prefix, shared NAR/AR decoder, optional pre-network, AR head, codec.

    The prefix decoder keeps distinct parameters; NAR and AR run the same
    block stack.  The AR head has one class per codec entry plus the
    end-of-response class; its weight columns double as the AR input
    embedding (tied).
    """

    def __init__(
        self,
        cfg: DecoderConfig,
        nar_prefix: ModelParams,
        nar_ar: ModelParams,
        pre_network: ModelParams | None,
        ar_head: ModelParams,
        codec: CodecDecoder,
    ):
        self.cfg = cfg
        self.nar_prefix = nar_prefix
        self.nar_ar = nar_ar
        self.pre_network = pre_network
        self.ar_head = ar_head
        self.codec = codec

    @classmethod
    def build(cls, cfg: DecoderConfig, seed: int) -> "DecoderStack":
        block_cfg = BlockConfig(n_layers=cfg.n_layers, hidden=cfg.hidden, n_heads=cfg.n_heads)
        pre = None
        if cfg.pre_network:
            pre_cfg = BlockConfig(
                n_layers=cfg.pre_network_layers,
                hidden=cfg.hidden,
                n_heads=cfg.n_heads,
                final_norm=False,
            )
            pre = init_params(pre_cfg, seed + 2, name="pre_network")
        return cls(
            cfg=cfg,
            nar_prefix=init_params(block_cfg, seed, name="nar_prefix"),
            nar_ar=init_params(block_cfg, seed + 1, name="nar_ar_shared"),
            pre_network=pre,
            ar_head=init_linear("ar_head", seed + 3, cfg.hidden, CODEBOOK_SIZE + 1),
            codec=CodecDecoder.build(seed + 4, hidden=cfg.hidden),
        )

    def param_groups(self) -> dict[str, list[ModelParams]]:
        groups = {
            "nar_prefix": [self.nar_prefix],
            "nar_ar_shared": [self.nar_ar],
            "ar_head": [self.ar_head],
            "codec": [self.codec.params],
        }
        if self.pre_network is not None:
            groups["pre_network"] = [self.pre_network]
        return groups

    def param_count(self) -> int:
        return sum(p.param_count() for ps in self.param_groups().values() for p in ps)

    def fresh_prefix_cache(self) -> KvCache:
        return KvCache(self.cfg.n_layers)

    # -- prefill -------------------------------------------------------------

    def nar_prefix_prefill(self, hidden: np.ndarray, cache: KvCache) -> KvCache:
        """Extend the prefix cache with a chunk of backbone hidden states."""
        hidden = np.asarray(hidden, dtype=F32)
        if hidden.ndim != 2 or hidden.shape[0] == 0 or hidden.shape[1] != self.cfg.hidden:
            raise DimMismatchError(
                f"expected non-empty (*, {self.cfg.hidden}) hidden chunk, got {hidden.shape}"
            )
        block_forward(hidden, self.nar_prefix, cache, causal=True)
        return cache

    def nar_prefill(
        self,
        text_tokens: list[int],
        embed_fn: Callable[[list[int]], np.ndarray],
        prefix: KvCache | None = None,
    ) -> KvCache:
        """Lay a text chunk on top of the prefix cache with full self-attention.

        ``embed_fn`` must be the frozen backbone embedding lookup.  Passing
        ``prefix=None`` runs the prefix-free pathway.  The prefix cache is
        copied, never mutated; the returned cache is the AR context.
        """
        if not text_tokens:
            raise DimMismatchError("cannot prefill an empty text chunk")
        x = np.asarray(embed_fn(text_tokens), dtype=F32)
        if x.ndim != 2 or x.shape[1] != self.cfg.hidden:
            raise DimMismatchError(f"embeddings must be (*, {self.cfg.hidden}), got {x.shape}")
        if self.pre_network is not None:
            x, _ = block_forward(
                x, self.pre_network, KvCache(self.cfg.pre_network_layers), causal=False
            )
        ctx = prefix.copy() if prefix is not None else KvCache(self.cfg.n_layers)
        block_forward(x, self.nar_ar, ctx, causal=False)
        return ctx

    # -- AR generation ---------------------------------------------------------

    def _ar_embed(self, token: int) -> np.ndarray:
        return self.ar_head["w"][:, token][None, :]

    def ar_stream(
        self,
        context: KvCache,
        k: int,
        rng,
        max_len: int,
        trace: list | None = None,
    ) -> Iterator[int]:
        """Emit speech tokens one at a time until end-of-response or max_len."""
        rng = as_rng(rng)
        x = self._ar_embed(END_OF_RESPONSE)  # start-of-generation input
        for _ in range(max_len):
            h, _ = block_forward(x, self.nar_ar, context, causal=True)
            logits = h[-1] @ self.ar_head["w"] + self.ar_head["b"]
            token = top_k_sample(logits, k, rng)
            if trace is not None:
                top = np.argsort(-logits, kind="stable")[:k]
                trace.append((token, set(int(t) for t in top)))
            if token == END_OF_RESPONSE:
                return
            yield token
            x = self._ar_embed(token)

    def ar_generate(self, context: KvCache, k: int, seed, max_len: int) -> list[int]:
        """AR generation as a list; mutates ``context`` (pass a copy to keep it)."""
        return list(self.ar_stream(context, k, as_rng(seed), max_len))
