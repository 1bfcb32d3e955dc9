"""Deterministic toy-scale neural primitives shared by the whole pipeline.

Everything is plain float32 numpy: decoder-style transformer stacks with
externally owned kv caches, streaming 1-d convolution with tail caches, and
seeded top-k sampling.  Parameters are immutable after construction;
``ModelParams.fingerprint()`` hashes the raw bytes so that freezing is a
checkable property rather than a convention.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatchError, InvalidConfigError, InvalidKError

F32 = np.float32

INIT_SCALE = 0.1  # seeded uniform init in [-INIT_SCALE, INIT_SCALE]
LN_EPS = 1e-5


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return ((x - mean) / np.sqrt(var + F32(LN_EPS))) * g + b


def sinusoidal_pe(offset: int, length: int, dim: int) -> np.ndarray:
    """Absolute sinusoidal position codes for positions [offset, offset+length)."""
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    pe = np.zeros((length, dim), dtype=F32)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockConfig:
    """Shape of one transformer stack."""

    n_layers: int
    hidden: int
    n_heads: int
    ff_mult: int = 4
    final_norm: bool = True

    def __post_init__(self):
        if self.n_layers < 1 or self.hidden < 1 or self.n_heads < 1:
            raise InvalidConfigError(f"all dims must be positive: {self}")
        if self.hidden % self.n_heads != 0:
            raise InvalidConfigError(
                f"n_heads={self.n_heads} does not divide hidden={self.hidden}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads


@dataclass
class ModelParams:
    """A named, immutable group of parameter arrays.

    The fingerprint covers array names, shapes and raw bytes, so any in-place
    mutation (accidental or deliberate) changes it.
    """

    name: str
    seed: int
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for key in sorted(self.arrays):
            a = self.arrays[key]
            h.update(key.encode())
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]


def _uniform(rng: np.random.Generator, *shape: int) -> np.ndarray:
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(F32)


def init_params(config: BlockConfig, seed: int, name: str = "blocks") -> ModelParams:
    """Seeded transformer-stack parameters; same (config, seed) -> same fingerprint."""
    rng = np.random.default_rng(seed)
    h, ff = config.hidden, config.hidden * config.ff_mult
    arrays: dict[str, np.ndarray] = {}
    for i in range(config.n_layers):
        p = f"l{i}."
        arrays[p + "ln1.g"] = np.ones(h, dtype=F32)
        arrays[p + "ln1.b"] = np.zeros(h, dtype=F32)
        for w in ("wq", "wk", "wv", "wo"):
            arrays[p + "attn." + w] = _uniform(rng, h, h)
        arrays[p + "ln2.g"] = np.ones(h, dtype=F32)
        arrays[p + "ln2.b"] = np.zeros(h, dtype=F32)
        arrays[p + "mlp.w1"] = _uniform(rng, h, ff)
        arrays[p + "mlp.b1"] = np.zeros(ff, dtype=F32)
        arrays[p + "mlp.w2"] = _uniform(rng, ff, h)
        arrays[p + "mlp.b2"] = np.zeros(h, dtype=F32)
    if config.final_norm:
        arrays["lnf.g"] = np.ones(h, dtype=F32)
        arrays["lnf.b"] = np.zeros(h, dtype=F32)
    meta = {
        "n_layers": config.n_layers,
        "hidden": config.hidden,
        "n_heads": config.n_heads,
        "final_norm": config.final_norm,
    }
    return ModelParams(name=name, seed=seed, arrays=arrays, meta=meta)


def init_linear(name: str, seed: int, d_in: int, d_out: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    arrays = {"w": _uniform(rng, d_in, d_out), "b": np.zeros(d_out, dtype=F32)}
    return ModelParams(name=name, seed=seed, arrays=arrays, meta={"d_in": d_in, "d_out": d_out})


def init_embedding(name: str, seed: int, n_rows: int, dim: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(
        name=name, seed=seed,
        arrays={"table": _uniform(rng, n_rows, dim)},
        meta={"n_rows": n_rows, "dim": dim},
    )


def init_conv(name: str, seed: int, kernel: int, c_in: int, c_out: int, stride: int) -> ModelParams:
    if stride < 1 or stride > kernel:
        raise InvalidConfigError(f"stride must satisfy 1 <= stride <= kernel, got {stride}/{kernel}")
    rng = np.random.default_rng(seed)
    arrays = {"w": _uniform(rng, kernel, c_in, c_out), "b": np.zeros(c_out, dtype=F32)}
    return ModelParams(
        name=name, seed=seed, arrays=arrays,
        meta={"kernel": kernel, "c_in": c_in, "c_out": c_out, "stride": stride},
    )


# ---------------------------------------------------------------------------
# Streaming convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvCache:
    """Tail of the last (kernel-1) input frames plus the stride phase.

    ``buf`` always holds exactly kernel-1 frames (zero-filled at stream
    start); ``phase`` marks where inside ``buf`` the next output window
    begins, which keeps chunked output bitwise equal to the full-sequence
    convolution for any chunking of the input.
    """

    buf: np.ndarray
    phase: int = 0

    @classmethod
    def fresh(cls, kernel: int, c_in: int) -> "ConvCache":
        return cls(buf=np.zeros((kernel - 1, c_in), dtype=F32), phase=0)

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {prefix + "buf": self.buf, prefix + "phase": np.array(self.phase)}

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str) -> "ConvCache":
        return cls(buf=arrays[prefix + "buf"].astype(F32), phase=int(arrays[prefix + "phase"]))


def conv1d_chunk(x: np.ndarray, params: ModelParams, cache: ConvCache) -> tuple[np.ndarray, ConvCache]:
    """One streaming step of a strided 1-d convolution over (frames, channels).

    Returns all newly completable output frames plus the updated cache.
    Short chunks may return zero frames and only update the cache.
    """
    w, b = params["w"], params["b"]
    kernel, stride = params.meta["kernel"], params.meta["stride"]
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimMismatchError(f"expected (*, {w.shape[1]}) input, got {x.shape}")
    x = x.astype(F32, copy=False)

    live = np.concatenate([cache.buf[cache.phase:], x], axis=0)
    n_live = live.shape[0]
    if n_live >= kernel:
        wins = np.lib.stride_tricks.sliding_window_view(live, kernel, axis=0)[::stride]
        y = np.einsum("nck,kco->no", wins, w) + b
        y = y.astype(F32, copy=False)
        n_out = wins.shape[0]
    else:
        y = np.zeros((0, w.shape[2]), dtype=F32)
        n_out = 0

    leftover = n_live - n_out * stride
    if kernel > 1:
        new_buf = np.concatenate([cache.buf, x], axis=0)[-(kernel - 1):]
    else:
        new_buf = cache.buf
    return y, ConvCache(buf=new_buf, phase=(kernel - 1) - leftover)


def conv1d_full(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Full-sequence convolution with the (kernel-1) left zero-pad convention."""
    y, _ = conv1d_chunk(x, params, ConvCache.fresh(params.meta["kernel"], params.meta["c_in"]))
    return y


def conv_out_len(n_in: int, kernel: int, stride: int) -> int:
    """Output frame count for n_in frames under the left zero-pad convention."""
    padded = n_in + kernel - 1
    if padded < kernel:
        return 0
    return (padded - kernel) // stride + 1


# ---------------------------------------------------------------------------
# Transformer stack with kv cache
# ---------------------------------------------------------------------------

class KvCache:
    """Per-layer attention key/value memory, owned by a session, not a model."""

    def __init__(self, n_layers: int):
        self.keys: list[np.ndarray | None] = [None] * n_layers
        self.vals: list[np.ndarray | None] = [None] * n_layers

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def n_past(self) -> int:
        return 0 if self.keys[0] is None else int(self.keys[0].shape[0])

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.keys[layer] is None:
            self.keys[layer], self.vals[layer] = k, v
        else:
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=0)
            self.vals[layer] = np.concatenate([self.vals[layer], v], axis=0)
        return self.keys[layer], self.vals[layer]

    def copy(self) -> "KvCache":
        c = KvCache(self.n_layers)
        c.keys = [None if k is None else k.copy() for k in self.keys]
        c.vals = [None if v is None else v.copy() for v in self.vals]
        return c

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {prefix + "n_layers": np.array(self.n_layers)}
        for i, (k, v) in enumerate(zip(self.keys, self.vals)):
            if k is not None:
                out[f"{prefix}k{i}"] = k
                out[f"{prefix}v{i}"] = v
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str = "") -> "KvCache":
        cache = cls(int(arrays[prefix + "n_layers"]))
        for i in range(cache.n_layers):
            if f"{prefix}k{i}" in arrays:
                cache.keys[i] = arrays[f"{prefix}k{i}"].astype(F32)
                cache.vals[i] = arrays[f"{prefix}v{i}"].astype(F32)
        return cache


def _attn_mask(past: int, length: int, causal: bool, chunk_mask: int | None) -> np.ndarray | None:
    """Additive (length, past+length) mask; None means fully visible."""
    if causal:
        q = np.arange(past, past + length)[:, None]
        k = np.arange(past + length)[None, :]
        allowed = k <= q
    elif chunk_mask is not None:
        q = np.arange(past, past + length)[:, None] // chunk_mask
        k = np.arange(past + length)[None, :] // chunk_mask
        allowed = k <= q
    else:
        return None
    mask = np.zeros(allowed.shape, dtype=F32)
    mask[~allowed] = -np.inf
    return mask


def block_forward(
    x: np.ndarray,
    params: ModelParams,
    cache: KvCache,
    *,
    causal: bool = True,
    chunk_mask: int | None = None,
) -> tuple[np.ndarray, KvCache]:
    """Run a chunk of positions through the stack, extending the kv cache.

    Attention sees all cached positions plus the current chunk under the mask:
    ``causal`` restricts to absolute position order, ``chunk_mask=c``
    restricts to fixed blocks of c absolute positions (later blocks invisible),
    and neither means full visibility.  Any partition of a prefill into chunks
    matches the full-sequence forward within float noise.
    """
    if causal and chunk_mask is not None:
        raise InvalidConfigError("causal and chunk_mask are mutually exclusive")
    n_layers = params.meta["n_layers"]
    hidden = params.meta["hidden"]
    n_heads = params.meta["n_heads"]
    head_dim = hidden // n_heads
    if x.ndim != 2 or x.shape[1] != hidden:
        raise DimMismatchError(f"expected (*, {hidden}) input, got {x.shape}")
    if cache.n_layers != n_layers:
        raise DimMismatchError(
            f"cache has {cache.n_layers} layers, params expect {n_layers}"
        )

    length = x.shape[0]
    past = cache.n_past
    h = x.astype(F32, copy=False) + sinusoidal_pe(past, length, hidden)
    mask = _attn_mask(past, length, causal, chunk_mask)
    scale = F32(1.0 / math.sqrt(head_dim))

    for i in range(n_layers):
        p = f"l{i}."
        a = layer_norm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        q = (a @ params[p + "attn.wq"]).reshape(length, n_heads, head_dim)
        k = (a @ params[p + "attn.wk"]).reshape(length, n_heads, head_dim)
        v = (a @ params[p + "attn.wv"]).reshape(length, n_heads, head_dim)
        k_all, v_all = cache.append(i, k, v)
        scores = np.einsum("lhd,mhd->hlm", q, k_all) * scale
        if mask is not None:
            scores = scores + mask[None, :, :]
        attn = softmax(scores, axis=-1)
        ctx = np.einsum("hlm,mhd->lhd", attn, v_all).reshape(length, hidden)
        h = h + ctx @ params[p + "attn.wo"]
        m = layer_norm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        m = np.maximum(m @ params[p + "mlp.w1"] + params[p + "mlp.b1"], F32(0.0))
        h = h + m @ params[p + "mlp.w2"] + params[p + "mlp.b2"]

    if params.meta["final_norm"]:
        h = layer_norm(h, params["lnf.g"], params["lnf.b"])
    return h.astype(F32, copy=False), cache


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def top_k_sample(logits: np.ndarray, k: int, rng) -> int:
    """Sample among the k largest logits; k=1 is argmax with lowest-index ties."""
    logits = np.asarray(logits).reshape(-1)
    if k < 1 or k > logits.size:
        raise InvalidKError(f"k={k} outside [1, {logits.size}]")
    top = np.argsort(-logits, kind="stable")[:k]
    if k == 1:
        return int(top[0])
    p = softmax(logits[top].astype(np.float64))
    return int(as_rng(rng).choice(top, p=p))


def make_sampler(k: int, seed: int):
    """Stateful sampler closure: logits -> token id, deterministic per seed."""
    rng = np.random.default_rng(seed)

    def sample(logits: np.ndarray) -> int:
        return top_k_sample(logits, k, rng)

    return sample
