"""Analysis exports: spatial prediction grids and class-token similarity reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError, ValidationError
from .meta import MetaBatch, MetaRecord, collate_meta, encode_datetime, encode_geo
from .model import MetaFormer

log = logging.getLogger(__name__)

IMAGE_MODES = ("mean", "blank", "zero-vision")


def grid_coordinates(grid_h: int, grid_w: int):
    """Cell-centre latitudes (north to south) and longitudes (west to east), in degrees."""
    if grid_h < 1 or grid_w < 1:
        raise ValidationError("grid", f"grid must be at least 1x1, got {grid_h}x{grid_w}")
    lats = 90.0 - (np.arange(grid_h) + 0.5) * 180.0 / grid_h
    lons = -180.0 + (np.arange(grid_w) + 0.5) * 360.0 / grid_w
    return lats, lons


def _model_dtype(model: MetaFormer):
    return model.head.weight.data.dtype


def spatial_prediction_grid(model: MetaFormer, category: int, grid_h: int = 50, grid_w: int = 100,
                            month: Optional[float] = None, hour: Optional[float] = None,
                            image: Optional[np.ndarray] = None, image_mode: str = "mean",
                            chunk: int = 256) -> np.ndarray:
    """Probability of ``category`` at every cell of a lat/lon lattice.

    ``image`` is the fixed visual input (for ``mean`` mode, the caller passes
    the category's mean training image).  ``blank`` uses a zero image and
    ``zero-vision`` zeroes the vision tokens so only meta tokens remain.
    When ``month``/``hour`` are omitted the datetime token is the null token.
    """
    c = model.config
    if not c.meta.has("geo"):
        raise ContractError("spatial prediction needs a model with a geo meta channel")
    if not 0 <= category < c.num_classes:
        raise ValidationError("category", f"must be in [0, {c.num_classes}), got {category}")
    if image_mode not in IMAGE_MODES:
        raise ValidationError("image_mode", f"must be one of {IMAGE_MODES}, got {image_mode!r}")
    shape = (c.in_channels, c.image_size, c.image_size)
    if image is None or image_mode != "mean":
        image = np.zeros(shape)
    image = np.asarray(image)
    if image.shape != shape:
        raise ShapeError(f"image must be {shape}, got {image.shape}")
    lats, lons = grid_coordinates(grid_h, grid_w)
    lat_grid, lon_grid = np.meshgrid(lats, lons, indexing="ij")
    geo = encode_geo(lat_grid.ravel(), lon_grid.ravel())
    dt = None
    if c.meta.has("datetime") and month is not None and hour is not None:
        dt = encode_datetime(month, hour)

    dtype = _model_dtype(model)
    was_training = model.training
    model.eval()
    probs = np.empty(geo.shape[0])
    try:
        with T.no_grad(), T.default_dtype(dtype):
            feats = model.conv_features(image[None].astype(dtype))
            for start in range(0, geo.shape[0], chunk):
                stop = min(start + chunk, geo.shape[0])
                b = stop - start
                batch = MetaBatch()
                for ch in c.meta.channels:
                    if ch.kind == "text":
                        batch.features["text"] = np.full((b, ch.max_len), ch.vocab, dtype=np.int64)
                        batch.text_len = np.zeros(b, dtype=np.int64)
                    else:
                        batch.features[ch.kind] = np.zeros((b, ch.feature_dim))
                    batch.present[ch.kind] = np.zeros(b, dtype=bool)
                batch.features["geo"] = geo[start:stop]
                batch.present["geo"][:] = True
                if dt is not None:
                    batch.features["datetime"] = np.broadcast_to(dt, (b, 4)).copy()
                    batch.present["datetime"][:] = True
                f = T.Tensor(np.broadcast_to(feats.data, (b,) + feats.shape[1:]).copy())
                logits = model.forward_state(None, batch, features=f, zero_vision=image_mode == "zero-vision").logits
                probs[start:stop] = T.softmax(logits, axis=-1).data[:, category]
    finally:
        model.train(was_training)
    return probs.reshape(grid_h, grid_w)


@dataclass
class SimilarityReport:
    vision_indices: List[int]
    vision_scores: List[float]
    word_indices: List[int] = field(default_factory=list)  # position within the sentence
    word_ids: List[int] = field(default_factory=list)
    word_scores: List[float] = field(default_factory=list)
    word_attention: Optional[np.ndarray] = None  # [n_words, M, M], head-averaged
    grid: int = 0


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b)
    return (a @ b) / np.maximum(na * nb, 1e-12)


def _clamp(k: int, available: int, what: str) -> int:
    if k > available:
        log.warning("k_%s=%d exceeds the %d available tokens; clamping", what, k, available)
        return available
    if k < 0:
        raise ValidationError(f"k_{what}", f"must be >= 0, got {k}")
    return k


def token_similarity_report(model: MetaFormer, image: np.ndarray, meta: Optional[MetaRecord] = None,
                            k_vision: int = 5, k_word: int = 3, stage: int = 4) -> SimilarityReport:
    """Top-k cosine similarity of vision and word tokens against the final class token.

    Rankings use the token states at the output of ``stage`` (3 or 4); the
    word attention maps come from the last block of that stage.
    """
    c = model.config
    if not c.has_class_token:
        raise ContractError("similarity report needs a class token (gap mode has none)")
    if stage not in (3, 4):
        raise ValidationError("stage", f"must be 3 or 4, got {stage}")
    if meta is not None and not c.meta:
        raise ContractError("meta supplied but the model has no meta channels")
    dtype = _model_dtype(model)
    blocks = model.stage3 if stage == 3 else model.stage4
    last = blocks[-1].attn
    was_training = model.training
    model.eval()
    last.record = True
    try:
        with T.no_grad(), T.default_dtype(dtype):
            batch = collate_meta([meta], c.meta) if (meta is not None and c.meta) else None
            st = model.forward_state(np.asarray(image, dtype=dtype)[None], batch)
        attn = last.last_attention[0].mean(axis=0)  # [N, N]
    finally:
        last.record = False
        last.last_attention = None
        model.train(was_training)
    tokens = (st.s3_tokens if stage == 3 else st.s4_tokens).data[0]
    n_extra = st.n_extra
    # the final class token always sits in slot 0 of the final stage
    cls = st.s4_tokens.data[0, 0]
    if stage == 3:
        cls = st.s3_tokens.data[0, 0]
    vision = tokens[n_extra:]
    m = int(round(np.sqrt(vision.shape[0])))
    vs = _cosine(vision, cls)
    kv = _clamp(k_vision, vision.shape[0], "vision")
    order = np.argsort(-vs, kind="stable")[:kv]
    report = SimilarityReport(order.tolist(), vs[order].tolist(), grid=m)

    if c.meta.has("text") and batch is not None and batch.present["text"][0]:
        sl = c.meta.token_slices()["text"]
        offset = 1  # class token precedes the meta tokens
        length = int(batch.text_len[0])
        rows = np.arange(sl.start, sl.start + length) + offset
        ws = _cosine(tokens[rows], cls)
        kw = _clamp(k_word, length, "word")
        worder = np.argsort(-ws, kind="stable")[:kw]
        ids = batch.features["text"][0]
        report.word_indices = worder.tolist()
        report.word_ids = [int(ids[i]) for i in worder]
        report.word_scores = ws[worder].tolist()
        report.word_attention = attn[rows][:, n_extra:].reshape(length, m, m)
    return report


# -- file writers -------------------------------------------------------------
def write_csv_matrix(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def write_pgm(path, matrix: np.ndarray, vmin: Optional[float] = None, vmax: Optional[float] = None) -> None:
    """Binary 8-bit PGM (P5), linearly scaled to [vmin, vmax] (default: data range)."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"PGM needs a 2-d matrix, got {a.shape}")
    lo = float(a.min()) if vmin is None else vmin
    hi = float(a.max()) if vmax is None else vmax
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pix = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValidationError("pgm", f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValidationError("pgm", f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def report_rows(report: SimilarityReport) -> List[Dict[str, object]]:
    rows = [{"kind": "vision", "rank": r, "index": i, "score": s}
            for r, (i, s) in enumerate(zip(report.vision_indices, report.vision_scores))]
    rows += [{"kind": "word", "rank": r, "index": i, "score": s}
             for r, (i, s) in enumerate(zip(report.word_indices, report.word_scores))]
    return rows
