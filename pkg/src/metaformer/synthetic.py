"""Synthetic fine-grained world: confusable classes separated only by meta information.

Each class owns a visual pattern (colour and oriented stripes), a geographic
cluster, a seasonal window, an attribute vector and a small vocabulary.
Classes in a confusable pair share the visual pattern exactly, so an
image-only classifier cannot do better than chance within a pair, while the
pair members live in disjoint places and seasons.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ValidationError
from .meta import MetaChannel, MetaRecord, MetaSchema

MFDS_MAGIC = b"MFDS"
MFDS_VERSION = 1
# tangent-plane radius (in units of sigma) enclosing 95% of an isotropic 2-d Gaussian
RADIUS_95 = math.sqrt(-2.0 * math.log(0.05))


@dataclass(frozen=True)
class SyntheticWorldSpec:
    num_classes: int = 8
    num_pairs: int = 4  # confusable pairs (classes 2k and 2k+1 share a pattern)
    widespread: int = 0  # trailing classes with uniform geography (may be pair members)
    image_size: int = 64
    channels: int = 3
    noise: float = 0.25
    geo_sigma: float = 4.0  # degrees
    widespread_weight: float = 1.0  # relative sampling frequency of widespread classes
    min_separation: float = 30.0  # degrees between cluster centres
    season_width: int = 1  # months either side of the class's peak month
    attribute_dim: int = 8
    attribute_flip: float = 0.1
    vocab_per_class: int = 4
    shared_vocab: int = 8
    sentence_len: int = 6
    sentences_per_sample: int = 2
    num_train: int = 2000
    num_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if 2 * self.num_pairs > self.num_classes:
            raise ConfigError(f"{self.num_pairs} pairs need at least {2 * self.num_pairs} classes")
        if not 0 <= self.widespread < self.num_classes:
            raise ConfigError("widespread must be in [0, num_classes)")
        for c in range(self.num_classes - self.widespread, self.num_classes):
            partner = c ^ 1 if c < 2 * self.num_pairs else None
            if partner is not None and partner >= self.num_classes - self.widespread and self.season_width >= 3:
                raise ConfigError(f"classes {partner} and {c} are both widespread and share seasons")
        if self.image_size < 4 or self.channels < 1:
            raise ConfigError("image_size must be >= 4 and channels >= 1")
        if self.widespread_weight <= 0:
            raise ConfigError("widespread_weight must be > 0")
        if self.geo_sigma <= 0 or self.noise < 0:
            raise ConfigError("geo_sigma must be > 0 and noise >= 0")
        if not 0 <= self.season_width < 3:
            raise ConfigError("season_width must be in [0, 3) so paired seasons stay disjoint")
        if self.sentence_len > 32:
            raise ConfigError("sentence_len must be <= 32")

    @property
    def vocab(self) -> int:
        return self.shared_vocab + self.num_classes * self.vocab_per_class

    def schema(self, kinds: Sequence[str] = ("geo", "datetime")) -> MetaSchema:
        chans = []
        for k in kinds:
            if k == "attribute":
                chans.append(MetaChannel("attribute", dim=self.attribute_dim))
            elif k == "text":
                chans.append(MetaChannel("text", vocab=self.vocab, max_len=self.sentence_len, word_dim=16))
            else:
                chans.append(MetaChannel(k))
        return MetaSchema(tuple(chans))


@dataclass
class ClassProfile:
    colour: np.ndarray
    angle: float
    frequency: float
    lat: float
    lon: float
    widespread: bool
    peak_month: int
    peak_hour: int
    attributes: np.ndarray
    words: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    records: List[MetaRecord]
    num_classes: int
    schema: MetaSchema = field(default_factory=MetaSchema)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], [self.records[i] for i in idx], self.num_classes,
                       self.schema)


def pair_of(spec: SyntheticWorldSpec, label: int) -> Optional[int]:
    """The confusable partner of ``label``, or None."""
    if label < 2 * spec.num_pairs:
        return label ^ 1
    return None


def _angular_distance(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    c = np.sin(p1) * np.sin(p2) + np.cos(p1) * np.cos(p2) * np.cos(dl)
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def _wrap_lon(lon):
    return (np.asarray(lon) + 180.0) % 360.0 - 180.0


class SyntheticWorld:
    def __init__(self, spec: SyntheticWorldSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 0])
        n_patterns = spec.num_classes - spec.num_pairs
        colours = rng.uniform(0.2, 1.0, size=(n_patterns, spec.channels))
        angles = np.linspace(0.0, np.pi, n_patterns, endpoint=False) + rng.uniform(0, np.pi / (4 * n_patterns))
        freqs = rng.uniform(2.0, 5.0, size=n_patterns)
        centres = self._place_clusters(rng, spec.num_classes, spec.min_separation)
        vocab_words = np.arange(spec.shared_vocab, spec.vocab).reshape(spec.num_classes, spec.vocab_per_class)
        self.classes: List[ClassProfile] = []
        for c in range(spec.num_classes):
            pat = c // 2 if c < 2 * spec.num_pairs else c - spec.num_pairs
            partner = pair_of(spec, c)
            if partner is not None and c % 2 == 1:
                month = (self.classes[partner].peak_month - 1 + 6) % 12 + 1
                hour = (self.classes[partner].peak_hour + 12) % 24
            else:
                month = int(rng.integers(1, 13))
                hour = int(rng.integers(0, 24))
            attrs = (rng.random(spec.attribute_dim) < 0.5).astype(np.float64)
            if partner is not None and c % 2 == 1 and spec.attribute_dim:
                attrs = 1.0 - self.classes[partner].attributes
            self.classes.append(ClassProfile(
                colour=colours[pat], angle=float(angles[pat]), frequency=float(freqs[pat]),
                lat=float(centres[c, 0]), lon=float(centres[c, 1]),
                widespread=c >= spec.num_classes - spec.widespread,
                peak_month=month, peak_hour=hour, attributes=attrs, words=vocab_words[c]))

    @staticmethod
    def _place_clusters(rng, n: int, min_sep: float) -> np.ndarray:
        out = []
        for _ in range(n):
            for attempt in range(10000):
                lat = float(rng.uniform(-60.0, 60.0))
                lon = float(rng.uniform(-180.0, 180.0))
                if all(_angular_distance(lat, lon, a, b) >= min_sep for a, b in out):
                    break
            else:
                raise ConfigError(f"could not place {n} clusters {min_sep} degrees apart")
            out.append((lat, lon))
        return np.array(out)

    # -- sampling ---------------------------------------------------------
    def sample_image(self, label: int, rng: np.random.Generator) -> np.ndarray:
        s = self.spec
        p = self.classes[label]
        coords = (np.arange(s.image_size) + 0.5) / s.image_size
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        angle = p.angle + rng.normal(0.0, 0.05)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * p.frequency * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
        img = p.colour[:, None, None] * (0.5 + 0.5 * wave)[None]
        img = img + rng.normal(0.0, s.noise, size=img.shape)
        return img.astype(np.float32)

    def sample_location(self, label: int, rng: np.random.Generator) -> Tuple[float, float]:
        p = self.classes[label]
        if p.widespread:
            lat = float(np.degrees(np.arcsin(rng.uniform(-1.0, 1.0))))
            return lat, float(rng.uniform(-180.0, 180.0))
        dx, dy = rng.normal(0.0, self.spec.geo_sigma, size=2)
        lat = float(np.clip(p.lat + dy, -90.0, 90.0))
        lon = float(_wrap_lon(p.lon + dx / max(math.cos(math.radians(p.lat)), 1e-3)))
        return lat, lon

    def sample_record(self, label: int, rng: np.random.Generator) -> MetaRecord:
        s = self.spec
        p = self.classes[label]
        geo = self.sample_location(label, rng)
        month = (p.peak_month - 1 + int(rng.integers(-s.season_width, s.season_width + 1))) % 12 + 1
        hour = float((p.peak_hour + rng.normal(0.0, 2.0)) % 24.0)
        attrs = p.attributes.copy()
        if s.attribute_dim:
            flip = rng.random(s.attribute_dim) < s.attribute_flip
            attrs[flip] = 1.0 - attrs[flip]
        text = []
        for _ in range(s.sentences_per_sample):
            own = rng.choice(p.words, size=max(1, s.sentence_len // 2))
            shared = rng.integers(0, s.shared_vocab, size=s.sentence_len - own.size)
            words = np.concatenate([own, shared])
            rng.shuffle(words)
            text.append([int(w) for w in words])
        return MetaRecord(geo=geo, datetime=(float(month), min(hour, 23.999)), attributes=attrs, text=text)

    def sample(self, n: int, rng: np.random.Generator, schema: Optional[MetaSchema] = None) -> Dataset:
        s = self.spec
        weights = np.array([s.widespread_weight if p.widespread else 1.0 for p in self.classes])
        # deterministic class counts proportional to the weights, then shuffled
        counts = np.floor(n * weights / weights.sum()).astype(int)
        counts[np.argsort(-(n * weights / weights.sum() - counts), kind="stable")[:n - counts.sum()]] += 1
        labels = np.repeat(np.arange(s.num_classes), counts)
        rng.shuffle(labels)
        images = np.empty((n, self.spec.channels, self.spec.image_size, self.spec.image_size), dtype=np.float32)
        records = []
        for i, y in enumerate(labels):
            images[i] = self.sample_image(int(y), rng)
            records.append(self.sample_record(int(y), rng))
        return Dataset(images, labels.astype(np.int64), records, self.spec.num_classes,
                       schema if schema is not None else MetaSchema())

    def class_mean_image(self, dataset: Dataset, label: int) -> np.ndarray:
        sel = dataset.labels == label
        if not sel.any():
            raise ValidationError("category", f"no samples of class {label}")
        return dataset.images[sel].mean(axis=0)

    def in_cluster_95(self, label: int, lat: float, lon: float) -> bool:
        """True if ``(lat, lon)`` lies inside the class cluster's 95% mass region."""
        p = self.classes[label]
        if p.widespread:
            return True
        return bool(_angular_distance(p.lat, p.lon, lat, lon) <= RADIUS_95 * self.spec.geo_sigma)


def generate_synthetic(spec: SyntheticWorldSpec, schema: Optional[MetaSchema] = None
                       ) -> Tuple[SyntheticWorld, Dataset, Dataset]:
    """Deterministic ``(world, train, test)`` for ``spec``."""
    world = SyntheticWorld(spec)
    schema = schema if schema is not None else spec.schema()
    train = world.sample(spec.num_train, np.random.default_rng([spec.seed, 1]), schema)
    test = world.sample(spec.num_test, np.random.default_rng([spec.seed, 2]), schema)
    return world, train, test


def nearest_cluster_predict(world: SyntheticWorld, records: Sequence[MetaRecord]) -> np.ndarray:
    """Geo-only oracle: label of the nearest (non-widespread) cluster centre."""
    cands = [(i, p) for i, p in enumerate(world.classes) if not p.widespread]
    out = np.empty(len(records), dtype=np.int64)
    for k, rec in enumerate(records):
        d = [_angular_distance(p.lat, p.lon, rec.geo[0], rec.geo[1]) for _, p in cands]
        out[k] = cands[int(np.argmin(d))][0]
    return out


# -- MFDS file format -------------------------------------------------------
def _pack_record(rec: MetaRecord, schema: MetaSchema) -> bytes:
    out = []
    for ch in schema.channels:
        if ch.kind == "geo":
            val = rec.geo
            payload = struct.pack("<2d", *val) if val is not None else b""
        elif ch.kind == "datetime":
            val = rec.datetime
            payload = struct.pack("<2d", *val) if val is not None else b""
        elif ch.kind == "attribute":
            val = rec.attributes
            payload = np.asarray(val, dtype="<f8").tobytes() if val is not None else b""
        else:
            val = rec.text
            payload = b""
            if val is not None:
                payload = struct.pack("<I", len(val)) + b"".join(
                    struct.pack("<I", len(s)) + np.asarray(s, dtype="<u4").tobytes() for s in val)
        out.append(struct.pack("<B", val is not None) + payload)
    return b"".join(out)


def write_mfds(path, dataset: Dataset) -> None:
    """Serialise a dataset as MFDS (little-endian).

    ``MFDS | u32 version | u32 N, H, W, C, num_classes | u32 len | schema JSON``
    then per record ``u32 label | f32 CHW image | meta payload per channel``,
    where each channel payload starts with a u8 presence flag.
    """
    n, c, h, w = dataset.images.shape
    schema_blob = json.dumps(dataset.schema.to_dicts(), sort_keys=True).encode()
    parts = [MFDS_MAGIC, struct.pack("<6I", MFDS_VERSION, n, h, w, c, dataset.num_classes),
             struct.pack("<I", len(schema_blob)), schema_blob]
    for i in range(n):
        parts.append(struct.pack("<I", int(dataset.labels[i])))
        parts.append(np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes())
        parts.append(_pack_record(dataset.records[i], dataset.schema))
    Path(path).write_bytes(b"".join(parts))


def read_mfds(path) -> Dataset:
    buf = Path(path).read_bytes()
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(buf):
            raise ValidationError("dataset", f"{path}: truncated MFDS file at offset {pos}")
        chunk = buf[pos:pos + k]
        pos += k
        return chunk

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    if take(4) != MFDS_MAGIC:
        raise ValidationError("dataset", f"{path}: not an MFDS file")
    version, n, h, w, c, num_classes = struct.unpack("<6I", take(24))
    if version != MFDS_VERSION:
        raise ValidationError("dataset", f"{path}: unsupported MFDS version {version}")
    schema = MetaSchema.from_dicts(json.loads(take(u32()).decode()))
    images = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    records = []
    for i in range(n):
        labels[i] = u32()
        images[i] = np.frombuffer(take(4 * c * h * w), dtype="<f4").reshape(c, h, w)
        rec = MetaRecord()
        for ch in schema.channels:
            if not take(1)[0]:
                continue
            if ch.kind == "geo":
                rec.geo = struct.unpack("<2d", take(16))
            elif ch.kind == "datetime":
                rec.datetime = struct.unpack("<2d", take(16))
            elif ch.kind == "attribute":
                rec.attributes = np.frombuffer(take(8 * ch.dim), dtype="<f8").copy()
            else:
                sentences = []
                for _ in range(u32()):
                    length = u32()
                    sentences.append(np.frombuffer(take(4 * length), dtype="<u4").astype(int).tolist())
                rec.text = sentences
        records.append(rec)
    if pos != len(buf):
        raise ValidationError("dataset", f"{path}: {len(buf) - pos} trailing bytes")
    if labels.size and labels.max() >= num_classes:
        raise ValidationError("dataset", f"{path}: label {labels.max()} >= num_classes {num_classes}")
    return Dataset(images, labels, records, num_classes, schema)
