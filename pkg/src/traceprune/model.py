"""Character-level decoder-only Transformer built on :mod:`traceprune.tensor`.

Block layout (post-norm, with residual connections)::

    x = LN1(x + Attention(x))
    x = LN2(x + FFN(x))

followed by a final layer norm and a linear head onto the vocabulary.
Attention scores are scaled by ``1/sqrt(embed_dim)``, not by the head size.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, EncodingError, SequenceLengthError
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 384
    n_heads: int = 6
    n_blocks: int = 6
    ffn_dim: int = 1536
    context_len: int = 256
    dropout: float = 0.0
    vocab_size: int = 65
    seed: int = 1337
    init_std: float = 0.02

    def validate(self) -> None:
        if self.embed_dim <= 0 or self.n_heads <= 0 or self.n_blocks <= 0 or self.ffn_dim <= 0:
            raise ConfigError(f"dimensions must be positive: {self}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.context_len < 1:
            raise ConfigError(f"context_len must be >= 1, got {self.context_len}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


TINY = dict(embed_dim=128, n_heads=4, n_blocks=4, ffn_dim=512, context_len=64)


class Vocab:
    """Sorted set of characters with a bijective char <-> id mapping."""

    def __init__(self, chars: Iterable[str]):
        self.chars: list[str] = sorted(set(chars))
        self.stoi = {c: i for i, c in enumerate(self.chars)}
        self.itos = dict(enumerate(self.chars))
        self._table = np.full(max(map(ord, self.chars), default=0) + 1, -1, dtype=np.int64)
        for c, i in self.stoi.items():
            self._table[ord(c)] = i

    def __len__(self) -> int:
        return len(self.chars)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.chars == other.chars

    def __repr__(self) -> str:
        return f"Vocab(size={len(self)})"

    def encode(self, text: str) -> np.ndarray:
        codes = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32).astype(np.int64)
        ids = np.full(codes.shape, -1, dtype=np.int64)
        inside = codes < self._table.size
        ids[inside] = self._table[codes[inside]]
        bad = np.flatnonzero(ids < 0)
        if bad.size:
            pos = int(bad[0])
            raise EncodingError(f"character {text[pos]!r} at offset {pos} is not in the vocabulary")
        return ids

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in np.asarray(ids).reshape(-1))


def build_vocab(corpus: str) -> Vocab:
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    return Vocab(corpus)


def encode(v: Vocab, text: str) -> np.ndarray:
    return v.encode(text)


def decode(v: Vocab, ids) -> str:
    return v.decode(ids)


class ParamStore:
    """Ordered name -> Tensor mapping holding every trainable parameter.

    Iteration order is insertion order and is identical for every build of
    the same config; the tracker and checkpoints rely on it.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self._params.items()}

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: t.shape for k, t in self._params.items()}

    def num_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def breakdown(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(k, t.shape, t.size) for k, t in self._params.items()]

    def prunable_names(self) -> list[str]:
        """Weight matrices and embeddings; every 1-D tensor (biases, norm params) is excluded."""
        return [k for k, t in self._params.items() if t.ndim == 2]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._params.items():
            out.add(k, t.data.copy())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            src = arrays[k]
            if src.shape != t.shape:
                raise ValueError(f"{k}: expected shape {t.shape}, got {src.shape}")
            t.data = np.array(src, dtype=t.data.dtype)


def build_model(cfg: ModelConfig) -> ParamStore:
    """Allocate and initialise all parameters for ``cfg``.

    Matrices and embeddings ~ N(0, init_std), biases 0, norm gains 1. Draws come
    from a PCG64 stream seeded with ``cfg.seed``, in store order.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    dtype = T.get_default_dtype()
    C, F, V = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size
    store = ParamStore()

    def normal(*shape):
        return (rng.standard_normal(shape) * cfg.init_std).astype(dtype)

    def zeros(n):
        return np.zeros(n, dtype=dtype)

    def ones(n):
        return np.ones(n, dtype=dtype)

    store.add("tok_emb", normal(V, C))
    store.add("pos_emb", normal(cfg.context_len, C))
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        store.add(p + "attn.query", normal(C, C))
        store.add(p + "attn.key", normal(C, C))
        store.add(p + "attn.value", normal(C, C))
        store.add(p + "attn.proj.weight", normal(C, C))
        store.add(p + "attn.proj.bias", zeros(C))
        store.add(p + "ln1.gain", ones(C))
        store.add(p + "ln1.bias", zeros(C))
        store.add(p + "ffn.fc1.weight", normal(C, F))
        store.add(p + "ffn.fc1.bias", zeros(F))
        store.add(p + "ffn.fc2.weight", normal(F, C))
        store.add(p + "ffn.fc2.bias", zeros(C))
        store.add(p + "ln2.gain", ones(C))
        store.add(p + "ln2.bias", zeros(C))
    store.add("ln_f.gain", ones(C))
    store.add("ln_f.bias", zeros(C))
    store.add("head.weight", normal(C, V))
    store.add("head.bias", zeros(V))
    return store


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg`` (matches ``build_model(cfg).num_params()``)."""
    C, F, V, L = cfg.embed_dim, cfg.ffn_dim, cfg.vocab_size, cfg.context_len
    block = 4 * C * C + C + 2 * C + (C * F + F) + (F * C + C) + 2 * C
    return V * C + L * C + cfg.n_blocks * block + 2 * C + C * V + V


def _attention(x: Tensor, params: ParamStore, prefix: str, cfg: ModelConfig,
               capture: Optional[list] = None) -> Tensor:
    B, Tn, C = x.shape
    H, hd = cfg.n_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, Tn, H, hd)), (0, 2, 1, 3))

    q = heads(T.matmul(x, params[prefix + "query"]))
    k = heads(T.matmul(x, params[prefix + "key"]))
    v = heads(T.matmul(x, params[prefix + "value"]))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(C))
    att = T.softmax(T.causal_mask(scores), axis=-1)
    if capture is not None:
        capture.append(att.data)
    out = T.matmul(att, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Tn, C))
    return T.add(T.matmul(out, params[prefix + "proj.weight"]), params[prefix + "proj.bias"])


def _ffn(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    h = T.relu(T.add(T.matmul(x, params[prefix + "fc1.weight"]), params[prefix + "fc1.bias"]))
    return T.add(T.matmul(h, params[prefix + "fc2.weight"]), params[prefix + "fc2.bias"])


def forward(
    params: ParamStore,
    cfg: ModelConfig,
    tokens,
    *,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    capture: Optional[list] = None,
) -> Tensor:
    """Logits ``[B, T, V]`` for an integer token matrix ``[B, T]``.

    If ``capture`` is a list, each block's attention probabilities
    ``[B, H, T, T]`` are appended to it.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be a [B, T] matrix, got shape {tokens.shape}")
    B, Tn = tokens.shape
    if Tn > cfg.context_len:
        raise SequenceLengthError(f"sequence length {Tn} exceeds context_len {cfg.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise IndexError(f"token ids must lie in [0, {cfg.vocab_size})")

    def drop(t: Tensor) -> Tensor:
        return T.dropout(t, cfg.dropout, rng=rng, training=training)

    x = T.add(T.embedding(params["tok_emb"], tokens), T.embedding(params["pos_emb"], np.arange(Tn)))
    x = drop(x)
    for i in range(cfg.n_blocks):
        p = f"blocks.{i}."
        x = T.layer_norm(T.add(x, drop(_attention(x, params, p + "attn.", cfg, capture))),
                         params[p + "ln1.gain"], params[p + "ln1.bias"])
        x = T.layer_norm(T.add(x, drop(_ffn(x, params, p + "ffn."))),
                         params[p + "ln2.gain"], params[p + "ln2.bias"])
    x = T.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    return T.add(T.matmul(x, params["head.weight"]), params["head.bias"])


def loss(params: ParamStore, cfg: ModelConfig, x, y, **kw) -> Tensor:
    return T.softmax_cross_entropy(forward(params, cfg, x, **kw), y)


def generate(params: ParamStore, cfg: ModelConfig, prompt_ids, n_new: int) -> np.ndarray:
    """Greedy continuation of a 1-D id sequence (smoke-test sampler)."""
    ids = list(np.asarray(prompt_ids).reshape(-1))
    with T.no_grad():
        for _ in range(n_new):
            window = np.asarray(ids[-cfg.context_len:])[None, :]
            logits = forward(params, cfg, window).data[0, -1]
            ids.append(int(np.argmax(logits)))
    return np.asarray(ids, dtype=np.int64)
