"""Frozen toy decoder-only language backbone.

Byte-level vocabulary (256 text tokens plus BOS/EOS/turn separators), learned
prompt vectors prepended to every user turn, chunked causal prefill over
speech embeddings with a 3-way dialogue-state head on each chunk's final
position, and autoregressive text generation that pairs every emitted token
with its final-layer hidden state for the speech decoder.

The backbone's parameters never change at inference time; ``fingerprint()``
plus ``assert_frozen`` make that an assertable property.
"""

from __future__ import annotations

import codecs
import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator

import numpy as np

from .encoder import EmbeddingChunk
from .errors import DimMismatchError, EmptyCacheError, FrozenViolatedError
from .nnkit import (
    F32,
    BlockConfig,
    KvCache,
    ModelParams,
    block_forward,
    init_embedding,
    init_linear,
    init_params,
)

N_STATES = 3
SENTENCE_TERMINATORS = set(".!?。！？;；")  # . ! ? 。 ！ ？ ; ；


@dataclass(frozen=True)
class BackboneConfig:
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_text: int = 256        # byte-level text tokens
    prompt_len: int = 8

    @property
    def bos(self) -> int:
        return self.vocab_text

    @property
    def eos(self) -> int:
        return self.vocab_text + 1

    @property
    def sep_user(self) -> int:
        return self.vocab_text + 2

    @property
    def sep_assistant(self) -> int:
        return self.vocab_text + 3

    @property
    def vocab(self) -> int:
        return self.vocab_text + 4


@dataclass
class StatePrediction:
    """Dialogue state read off the final position of one encoder chunk."""

    state: int                 # 0 keep listening, 1 interrupt, 2 end without interrupt
    logits: np.ndarray         # the 3 raw class scores
    at_frame: int              # last embedding index of the chunk within the turn


@dataclass
class TextTokenChunk:
    """One sentence-split group of generated text tokens."""

    tokens: list[int]
    text: str


class SentenceSplitter:
    """Incremental sentence-boundary detector over byte-level tokens."""

    def __init__(self, vocab_text: int = 256):
        self.vocab_text = vocab_text
        self._decoder = codecs.getincrementaldecoder("utf-8")("replace")
        self._tokens: list[int] = []
        self._text: list[str] = []

    def _take(self) -> TextTokenChunk:
        chunk = TextTokenChunk(tokens=self._tokens, text="".join(self._text))
        self._tokens, self._text = [], []
        return chunk

    def push(self, token: int) -> TextTokenChunk | None:
        """Feed one token; returns a finished chunk when a sentence ends."""
        self._tokens.append(token)
        if token < self.vocab_text:
            piece = self._decoder.decode(bytes([token]))
        else:
            piece = ""  # specials carry no text
        if piece:
            self._text.append(piece)
            if piece[-1] in SENTENCE_TERMINATORS:
                return self._take()
        return None

    def flush(self) -> TextTokenChunk | None:
        """Emit the trailing partial sentence, if any."""
        tail = self._decoder.decode(b"", True)
        if tail:
            self._text.append(tail)
        if self._tokens:
            return self._take()
        return None


def sentence_split(tokens: Iterable[int], vocab_text: int = 256) -> Iterator[TextTokenChunk]:
    """Split a token stream after sentence-final punctuation; lossless partition."""
    splitter = SentenceSplitter(vocab_text)
    for t in tokens:
        chunk = splitter.push(t)
        if chunk is not None:
            yield chunk
    tail = splitter.flush()
    if tail is not None:
        yield tail


class Backbone:
    """Toy frozen LLM; every mutable piece of inference state is the caller's KvCache."""

    def __init__(
        self,
        cfg: BackboneConfig,
        blocks: ModelParams,
        lm_head: ModelParams,
        embedding: ModelParams,
        prompt: ModelParams,
        special_tokens: ModelParams,
        state_head: ModelParams,
    ):
        self.cfg = cfg
        self.blocks = blocks
        self.lm_head = lm_head
        self.embedding = embedding
        self.prompt = prompt
        self.special_tokens = special_tokens
        self.state_head = state_head

    @classmethod
    def build(cls, cfg: BackboneConfig, seed: int) -> "Backbone":
        block_cfg = BlockConfig(n_layers=cfg.n_layers, hidden=cfg.hidden, n_heads=cfg.n_heads)
        return cls(
            cfg=cfg,
            blocks=init_params(block_cfg, seed, name="llm.blocks"),
            lm_head=init_linear("llm.head", seed + 1, cfg.hidden, cfg.vocab),
            embedding=init_embedding("llm_embedding", seed + 2, cfg.vocab, cfg.hidden),
            prompt=init_embedding("prompt_embedding", seed + 3, cfg.prompt_len, cfg.hidden),
            special_tokens=init_embedding("special_tokens", seed + 4, 4, cfg.hidden),
            state_head=init_linear("state_head", seed + 5, cfg.hidden, N_STATES),
        )

    def param_groups(self) -> dict[str, list[ModelParams]]:
        return {
            "llm": [self.blocks, self.lm_head],
            "llm_embedding": [self.embedding],
            "prompt_embedding": [self.prompt],
            "special_tokens": [self.special_tokens],
            "state_head": [self.state_head],
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        groups = self.param_groups()
        for group in sorted(groups):
            for params in groups[group]:
                h.update(params.fingerprint().encode())
        return h.hexdigest()

    def fresh_cache(self) -> KvCache:
        return KvCache(self.cfg.n_layers)

    def embed_tokens(self, tokens: Iterable[int]) -> np.ndarray:
        ids = np.asarray(list(tokens), dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab):
            raise DimMismatchError(f"token id outside vocab of {self.cfg.vocab}")
        return self.embedding["table"][ids]

    # -- prefill -------------------------------------------------------------

    def prefill_speech_chunk(
        self, emb: EmbeddingChunk, cache: KvCache, new_turn: bool = False
    ) -> StatePrediction:
        """Prefill one encoder chunk; prompt vectors are prepended on a new turn.

        The state head reads only the final position's last-layer hidden
        state, so exactly one prediction exists per encoder chunk.
        """
        vectors = emb.vectors
        if vectors.ndim != 2 or vectors.shape[1] != self.cfg.hidden:
            raise DimMismatchError(
                f"expected (*, {self.cfg.hidden}) embeddings, got {vectors.shape}"
            )
        x = vectors.astype(F32, copy=False)
        if new_turn:
            x = np.concatenate([self.prompt["table"], x], axis=0)
        if x.shape[0] == 0:
            raise DimMismatchError("cannot prefill an empty chunk")
        h, _ = block_forward(x, self.blocks, cache, causal=True)
        logits = h[-1] @ self.state_head["w"] + self.state_head["b"]
        return StatePrediction(
            state=int(np.argmax(logits)), logits=logits, at_frame=emb.last_frame_index
        )

    # -- generation ------------------------------------------------------------

    def generate_text(
        self,
        cache: KvCache,
        max_tokens: int,
        sampler: Callable[[np.ndarray], int],
    ) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (token, final-layer hidden) pairs until EOS or max_tokens."""
        if cache.n_past == 0:
            raise EmptyCacheError("generation requires a prefilled cache")
        if max_tokens <= 0:
            return
        x = self.embedding["table"][self.cfg.sep_assistant][None, :]
        for _ in range(max_tokens):
            h, _ = block_forward(x, self.blocks, cache, causal=True)
            hidden = h[-1]
            logits = hidden @ self.lm_head["w"] + self.lm_head["b"]
            token = sampler(logits)
            if token == self.cfg.eos:
                return
            yield token, hidden
            x = self.embedding["table"][token][None, :]


def assert_frozen(model, before: str) -> None:
    """Raise unless the model's fingerprint still equals ``before``."""
    now = model.fingerprint()
    if now != before:
        raise FrozenViolatedError(f"fingerprint changed: {before[:12]} -> {now[:12]}")
