"""Meta-information encoders, non-linear embedding and the mask schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError, ValidationError
from .nn import Mlp, Module, Parameter, trunc_normal
from .tensor import Tensor

MAX_SENTENCE_LEN = 32
CHANNEL_KINDS = ("geo", "datetime", "attribute", "text")


@dataclass(frozen=True)
class MetaChannel:
    kind: str
    dim: int = 0  # attribute vector length
    vocab: int = 0  # text vocabulary size (excluding the UNK row)
    max_len: int = MAX_SENTENCE_LEN
    word_dim: int = 32

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ConfigError(f"unknown meta channel kind {self.kind!r}; expected one of {CHANNEL_KINDS}")
        if self.kind == "attribute" and self.dim <= 0:
            raise ConfigError("attribute channel needs dim > 0")
        if self.kind == "text":
            if self.vocab <= 0:
                raise ConfigError("text channel needs vocab > 0")
            if not 1 <= self.max_len <= MAX_SENTENCE_LEN:
                raise ConfigError(f"text max_len must be in [1, {MAX_SENTENCE_LEN}], got {self.max_len}")

    @property
    def num_tokens(self) -> int:
        return self.max_len if self.kind == "text" else 1

    @property
    def feature_dim(self) -> int:
        return {"geo": 3, "datetime": 4, "attribute": self.dim, "text": self.word_dim}[self.kind]

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "attribute":
            d["dim"] = self.dim
        if self.kind == "text":
            d.update(vocab=self.vocab, max_len=self.max_len, word_dim=self.word_dim)
        return d


@dataclass(frozen=True)
class MetaSchema:
    channels: Tuple[MetaChannel, ...] = ()

    def __post_init__(self):
        kinds = [c.kind for c in self.channels]
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"duplicate meta channels: {kinds}")

    @classmethod
    def from_kinds(cls, *specs) -> "MetaSchema":
        """Build from kinds or ``(kind, kwargs)`` pairs, e.g. ``("geo", "datetime")``."""
        chans = []
        for s in specs:
            if isinstance(s, MetaChannel):
                chans.append(s)
            elif isinstance(s, str):
                chans.append(MetaChannel(s))
            else:
                kind, kw = s
                chans.append(MetaChannel(kind, **kw))
        return cls(tuple(chans))

    @classmethod
    def from_dicts(cls, items: Sequence[dict]) -> "MetaSchema":
        return cls(tuple(MetaChannel(**d) for d in items))

    def to_dicts(self) -> List[dict]:
        return [c.to_dict() for c in self.channels]

    @property
    def num_tokens(self) -> int:
        return sum(c.num_tokens for c in self.channels)

    def has(self, kind: str) -> bool:
        return any(c.kind == kind for c in self.channels)

    def channel(self, kind: str) -> MetaChannel:
        for c in self.channels:
            if c.kind == kind:
                return c
        raise KeyError(kind)

    def token_slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for c in self.channels:
            out[c.kind] = slice(start, start + c.num_tokens)
            start += c.num_tokens
        return out

    def __bool__(self) -> bool:
        return bool(self.channels)


@dataclass
class MetaRecord:
    """Raw meta-information of one sample; absent fields are ``None``."""

    geo: Optional[Tuple[float, float]] = None  # (lat, lon) degrees
    datetime: Optional[Tuple[float, float]] = None  # (month in [1, 12], hour in [0, 24))
    attributes: Optional[np.ndarray] = None
    text: Optional[List[List[int]]] = None


# -- raw encoders -----------------------------------------------------------
def encode_geo(lat, lon) -> np.ndarray:
    """Degrees -> unit vector ``[cos(lat)cos(lon), cos(lat)sin(lon), sin(lat)]``."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if np.any(~np.isfinite(lat)) or np.any(np.abs(lat) > 90):
        raise ValidationError("lat", f"must be within [-90, 90] degrees, got {lat}")
    if np.any(~np.isfinite(lon)) or np.any(np.abs(lon) > 180):
        raise ValidationError("lon", f"must be within [-180, 180] degrees, got {lon}")
    la, lo = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1)


def encode_datetime(month, hour) -> np.ndarray:
    """``[sin(2pi m/12), cos(2pi m/12), sin(2pi h/24), cos(2pi h/24)]``."""
    month = np.asarray(month, dtype=np.float64)
    hour = np.asarray(hour, dtype=np.float64)
    if np.any(~np.isfinite(month)) or np.any(month < 1) or np.any(month > 12):
        raise ValidationError("month", f"must be within [1, 12], got {month}")
    if np.any(~np.isfinite(hour)) or np.any(hour < 0) or np.any(hour >= 24):
        raise ValidationError("hour", f"must be within [0, 24), got {hour}")
    return _datetime_features(month, hour)


def _datetime_features(month, hour) -> np.ndarray:
    m = 2.0 * np.pi * np.asarray(month, dtype=np.float64) / 12.0
    h = 2.0 * np.pi * np.asarray(hour, dtype=np.float64) / 24.0
    return np.stack([np.sin(m), np.cos(m), np.sin(h), np.cos(h)], axis=-1)


def encode_attributes(vec, dim: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.size != dim:
        raise ValidationError("attributes", f"expected length {dim}, got {vec.size}")
    return vec


def encode_text(sentences: Sequence[Sequence[int]], training: bool, rng: Optional[np.random.Generator] = None,
                max_len: int = MAX_SENTENCE_LEN, vocab: Optional[int] = None) -> np.ndarray:
    """Pick one sentence (uniformly when training, the first otherwise) and truncate.

    Ids outside ``[0, vocab)`` become the UNK id ``vocab``.
    """
    if not sentences:
        raise ValidationError("text", "needs at least one sentence")
    if training:
        if rng is None:
            raise ConfigError("training-time sentence sampling needs an rng")
        k = int(rng.integers(len(sentences))) if len(sentences) > 1 else 0
    else:
        k = 0
    ids = np.asarray(list(sentences[k])[:max_len], dtype=np.int64)
    if vocab is not None:
        ids = np.where((ids < 0) | (ids >= vocab), vocab, ids)
    return ids


def load_embedding_file(path) -> Tuple[List[str], np.ndarray]:
    """Read ``vocab_size dim`` then ``token v1 .. vdim`` per line (UTF-8)."""
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValidationError("embedding_file", f"{path}: first line must be 'vocab_size dim'")
        n, dim = int(header[0]), int(header[1])
        tokens, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ValidationError("embedding_file", f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            tokens.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(tokens) != n:
        raise ValidationError("embedding_file", f"{path}: header declares {n} tokens, found {len(tokens)}")
    return tokens, np.asarray(rows, dtype=np.float64).reshape(n, dim)


def save_embedding_file(path, tokens: Sequence[str], vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors)
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{len(tokens)} {vectors.shape[1]}\n")
        for tok, row in zip(tokens, vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in row) + "\n")


# -- batching ---------------------------------------------------------------
@dataclass
class MetaBatch:
    """Encoded meta features for a batch.

    ``features[kind]`` is ``[B, f]`` (text: int ids ``[B, max_len]``);
    ``present[kind]`` is a ``[B]`` bool array; ``text_len`` holds sentence lengths.
    """

    features: Dict[str, np.ndarray] = field(default_factory=dict)
    present: Dict[str, np.ndarray] = field(default_factory=dict)
    text_len: Optional[np.ndarray] = None

    @property
    def batch_size(self) -> int:
        for v in self.present.values():
            return len(v)
        return 0


def collate_meta(records: Sequence[Optional[MetaRecord]], schema: MetaSchema, training: bool = False,
                 rng: Optional[np.random.Generator] = None) -> MetaBatch:
    batch = MetaBatch()
    n = len(records)
    for ch in schema.channels:
        present = np.zeros(n, dtype=bool)
        if ch.kind == "text":
            feats = np.full((n, ch.max_len), ch.vocab, dtype=np.int64)
            lengths = np.zeros(n, dtype=np.int64)
        else:
            feats = np.zeros((n, ch.feature_dim), dtype=np.float64)
        for i, rec in enumerate(records):
            if rec is None:
                continue
            if ch.kind == "geo" and rec.geo is not None:
                feats[i] = encode_geo(*rec.geo)
            elif ch.kind == "datetime" and rec.datetime is not None:
                feats[i] = encode_datetime(*rec.datetime)
            elif ch.kind == "attribute" and rec.attributes is not None:
                feats[i] = encode_attributes(rec.attributes, ch.dim)
            elif ch.kind == "text" and rec.text is not None:
                ids = encode_text(rec.text, training, rng, ch.max_len, ch.vocab)
                feats[i, :ids.size] = ids
                lengths[i] = ids.size
            else:
                continue
            present[i] = True
        batch.features[ch.kind] = feats
        batch.present[ch.kind] = present
        if ch.kind == "text":
            batch.text_len = lengths
    return batch


# -- mask schedule ----------------------------------------------------------
@dataclass
class MaskSchedule:
    """Training-time meta mask ratio ``r(t) = r0 * (1 - t / total_steps)`` clamped to [0, 1]."""

    r0: float = 1.0
    total_steps: int = 1
    per_sample: bool = False

    def __post_init__(self):
        if not 0.0 <= self.r0 <= 1.0:
            raise ConfigError(f"mask r0 must be in [0, 1], got {self.r0}")
        if self.total_steps <= 0:
            raise ConfigError(f"mask total_steps must be positive, got {self.total_steps}")

    def ratio(self, step: int) -> float:
        r = self.r0 * (1.0 - step / self.total_steps)
        return min(max(r, 0.0), 1.0)


def sample_mask(batch_size: int, num_tokens: int, step: int, schedule: MaskSchedule,
                rng: np.random.Generator, training: bool = True) -> np.ndarray:
    """Boolean ``[B, num_tokens]``; True marks a token to replace by its null embedding."""
    if not training:
        return np.zeros((batch_size, num_tokens), dtype=bool)
    r = schedule.ratio(step)
    if schedule.per_sample:
        drop = rng.random((batch_size, 1)) < r
        return np.broadcast_to(drop, (batch_size, num_tokens)).copy()
    return rng.random((batch_size, num_tokens)) < r


def apply_mask(tokens: Tensor, null: Tensor, step: int, schedule: MaskSchedule, rng: np.random.Generator,
               training: bool = True) -> Tensor:
    """Replace meta tokens ``[B, n, D]`` by ``null`` ``[n, D]`` with probability ``r(step)``."""
    B, n, _ = tokens.shape
    mask = sample_mask(B, n, step, schedule, rng, training)
    return T.where(~mask[..., None], tokens, null)


# -- learned embedding --------------------------------------------------------
class MetaEmbedding(Module):
    """Per-channel two-layer MLPs (hidden = 4 * dim, gelu) mapping meta features to tokens.

    Text ids pass through a word table (with a trailing UNK row) before the
    per-word MLP.  Each channel owns one learned null token used for masked,
    missing and padding positions.
    """

    def __init__(self, schema: MetaSchema, dim: int, rng: np.random.Generator, hidden_ratio: int = 4):
        self.schema = schema
        self.dim = dim
        self.mlps = [Mlp(ch.feature_dim, hidden_ratio * dim, rng, out_dim=dim) for ch in schema.channels]
        self.null = Parameter(trunc_normal(rng, (len(schema.channels), dim)))
        self.word_table = None
        if schema.has("text"):
            ch = schema.channel("text")
            self.word_table = Parameter(trunc_normal(rng, (ch.vocab + 1, ch.word_dim), std=1.0))

    @property
    def num_tokens(self) -> int:
        return self.schema.num_tokens

    def load_word_vectors(self, vectors: np.ndarray) -> None:
        ch = self.schema.channel("text")
        vectors = np.asarray(vectors)
        if vectors.shape != (ch.vocab, ch.word_dim):
            raise ShapeError(f"word vectors {vectors.shape} do not match vocab {ch.vocab} x dim {ch.word_dim}")
        self.word_table.data[:ch.vocab] = vectors

    def null_tokens(self) -> Tensor:
        """``[num_tokens, D]``: each channel's null token repeated over its slots."""
        idx = np.concatenate([np.full(ch.num_tokens, i) for i, ch in enumerate(self.schema.channels)])
        return T.getitem(self.null, idx)

    def forward(self, meta: Optional[MetaBatch], batch_size: int, mask: Optional[np.ndarray] = None) -> Tensor:
        n = self.num_tokens
        null = self.null_tokens()
        if meta is None:
            return T.broadcast_to(null, (batch_size, n, self.dim))
        if meta.batch_size != batch_size:
            raise ShapeError(f"meta batch of {meta.batch_size} does not match image batch of {batch_size}")
        keep = np.ones((batch_size, n), dtype=bool)
        parts = []
        slices = self.schema.token_slices()
        dtype = self.null.dtype
        for ch, mlp in zip(self.schema.channels, self.mlps):
            sl = slices[ch.kind]
            keep[:, sl] &= meta.present[ch.kind][:, None]
            if ch.kind == "text":
                ids = meta.features["text"]
                words = T.getitem(self.word_table, ids)  # [B, L, word_dim]
                parts.append(mlp(words))
                keep[:, sl] &= np.arange(ch.max_len)[None, :] < meta.text_len[:, None]
            else:
                feats = Tensor(meta.features[ch.kind].astype(dtype), dtype=dtype)
                parts.append(T.reshape(mlp(feats), (batch_size, 1, self.dim)))
        tokens = T.concat(parts, axis=1)
        if mask is not None:
            if mask.shape != (batch_size, n):
                raise ShapeError(f"meta mask {mask.shape} does not match ({batch_size}, {n})")
            keep &= ~mask
        return T.where(keep[..., None], tokens, null)
