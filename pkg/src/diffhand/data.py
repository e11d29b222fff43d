"""Handwriting records: parsing, preprocessing, vocabulary and batching.

Line format (UTF-8, one JSON object per line)::

    {"id": "a01-000-01", "text": "hello", "writer": "w17",
     "points": [[dx, dy, lift], ...], "style_image": "styles/w17.png"}

``lift = 1`` means the pen leaves the paper after drawing that offset.
``style_image`` is resolved relative to the records file and may be null.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

STYLE_SHAPE = (64, 512)
DEFAULT_ANGLE_TOL = math.radians(5.0)


class DataError(ValueError):
    """A record or dataset violates the input contract."""


class DegenerateRecordError(DataError):
    pass


@dataclass
class StrokeSequence:
    offsets: np.ndarray  # (N, 2) float64
    pen_lift: np.ndarray  # (N,) int8 in {0, 1}

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 2)
        self.pen_lift = np.asarray(self.pen_lift).astype(np.int8).reshape(-1)
        if len(self.offsets) != len(self.pen_lift):
            raise DataError(f"offsets ({len(self.offsets)}) and pen_lift ({len(self.pen_lift)}) differ in length")
        if not np.all(np.isfinite(self.offsets)):
            raise DataError("non-finite offset")
        if not np.all((self.pen_lift == 0) | (self.pen_lift == 1)):
            raise DataError("pen_lift must be 0 or 1")

    def __len__(self):
        return len(self.offsets)

    @classmethod
    def from_points(cls, points) -> "StrokeSequence":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts[:, :2], pts[:, 2])

    def to_points(self) -> list[list[float]]:
        return [[float(x), float(y), int(d)] for (x, y), d in zip(self.offsets, self.pen_lift)]


@dataclass
class DatasetRecord:
    strokes: StrokeSequence
    text: str
    writer_id: str = ""
    style_image: np.ndarray | None = None
    style_path: str | None = None
    record_id: str = ""
    scale: float = 1.0  # divisor applied by normalize

    def __post_init__(self):
        if not self.text:
            raise DataError(f"record {self.record_id!r}: empty text")


# ---------------------------------------------------------------- I/O


def load_style_image(path: str | Path, shape: tuple[int, int] = STYLE_SHAPE) -> np.ndarray:
    """Grayscale, ink-high intensities in [0, 1], cropped/zero-padded to ``shape``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return fit_style_image(1.0 - arr, shape)


def fit_style_image(img: np.ndarray, shape: tuple[int, int] = STYLE_SHAPE) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"style image must be 2-d, got shape {img.shape}")
    lo, hi = img.min(initial=0.0), img.max(initial=0.0)
    if hi > lo and (lo < 0 or hi > 1):
        img = (img - lo) / (hi - lo)
    out = np.zeros(shape, dtype=np.float64)
    h, w = min(shape[0], img.shape[0]), min(shape[1], img.shape[1])
    out[:h, :w] = img[:h, :w]
    return out


def parse_record(obj: dict, base_dir: Path | None = None, style_shape=STYLE_SHAPE, load_images: bool = True) -> DatasetRecord:
    try:
        strokes = StrokeSequence.from_points(obj["points"])
        text = obj["text"]
    except KeyError as exc:
        raise DataError(f"record missing field {exc}") from None
    style_path = obj.get("style_image")
    image = None
    if style_path and load_images:
        p = Path(style_path)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        image = load_style_image(p, style_shape)
    return DatasetRecord(
        strokes=strokes,
        text=text,
        writer_id=str(obj.get("writer", "")),
        style_image=image,
        style_path=style_path,
        record_id=str(obj.get("id", "")),
        scale=float(obj.get("scale", 1.0)),
    )


def read_records(path: str | Path, style_shape=STYLE_SHAPE, load_images: bool = True) -> list[DatasetRecord]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rec = parse_record(obj, path.parent, style_shape, load_images)
            if not rec.record_id:
                rec.record_id = f"{path.stem}:{lineno}"
            records.append(rec)
    return records


def record_to_json(rec: DatasetRecord) -> dict:
    obj = {"id": rec.record_id, "text": rec.text, "writer": rec.writer_id, "points": rec.strokes.to_points()}
    obj["style_image"] = rec.style_path
    if rec.scale != 1.0:
        obj["scale"] = rec.scale
    return obj


def write_records(records: Iterable[DatasetRecord], path: str | Path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), ensure_ascii=False) + "\n")


def parse_iam_strokes(xml_path: str | Path) -> StrokeSequence:
    """Read an IAM-OnDB ``strokesz.xml`` file into offsets with lifts at stroke ends."""
    root = ET.parse(xml_path).getroot()
    points, lifts = [], []
    for stroke in root.iter("Stroke"):
        pts = [(float(p.get("x")), float(p.get("y"))) for p in stroke.iter("Point")]
        if not pts:
            continue
        points.extend(pts)
        lifts.extend([0] * (len(pts) - 1) + [1])
    if len(points) < 2:
        raise DataError(f"{xml_path}: fewer than 2 points")
    # offset i moves the pen onto point i + 1 and inherits that point's lift flag
    return StrokeSequence(np.diff(np.array(points), axis=0), lifts[1:])


# ---------------------------------------------------------------- preprocessing


def pooled_std(offsets: np.ndarray) -> float:
    return float(np.std(np.asarray(offsets, dtype=np.float64)))


def normalize(record: DatasetRecord, scale: float | None = None) -> DatasetRecord:
    """Divide all offsets by one scalar: the pooled std of the record's x and y components.

    Pass ``scale`` to use a corpus-wide value instead.
    """
    offsets = record.strokes.offsets
    if len(offsets) < 2:
        raise DegenerateRecordError(f"record {record.record_id!r}: fewer than 2 points")
    if scale is None:
        scale = pooled_std(offsets)
    if not scale > 0 or not math.isfinite(scale):
        raise DegenerateRecordError(f"record {record.record_id!r}: zero variance in offsets")
    strokes = StrokeSequence(offsets / scale, record.strokes.pen_lift.copy())
    return replace(record, strokes=strokes, scale=record.scale * scale)


def corpus_scale(records: Sequence[DatasetRecord]) -> float:
    return pooled_std(np.concatenate([r.strokes.offsets for r in records]))


@dataclass
class DropReport:
    threshold: float
    mean: float
    std: float
    dropped: list[tuple[str, str]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"# offset magnitude mean={self.mean:.6g} std={self.std:.6g} threshold={self.threshold:.6g}",
            f"# dropped {len(self.dropped)}",
        ]
        lines += [f"{rid}\t{reason}" for rid, reason in self.dropped]
        return "\n".join(lines) + "\n"


def filter_outliers(records: Sequence[DatasetRecord], k: float = 15.0) -> tuple[list[DatasetRecord], DropReport]:
    """Drop records holding any offset longer than ``mean + k * std`` of all offset magnitudes."""
    if not records:
        raise DataError("empty dataset")
    mags = np.concatenate([np.hypot(*r.strokes.offsets.T) for r in records])
    mean, std = float(mags.mean()), float(mags.std())
    threshold = mean + k * std if std > 0 else mean
    if math.isinf(k):
        threshold = math.inf
    report = DropReport(threshold, mean, std)
    kept = []
    for rec in records:
        longest = float(np.hypot(*rec.strokes.offsets.T).max(initial=0.0))
        if longest > threshold:
            report.dropped.append((rec.record_id, f"offset magnitude {longest:.6g} > {threshold:.6g}"))
        else:
            kept.append(rec)
    return kept, report


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = math.hypot(*a), math.hypot(*b)
    if na == 0 or nb == 0:
        return 0.0
    c = (a[0] * b[0] + a[1] * b[1]) / (na * nb)
    return math.acos(max(-1.0, min(1.0, c)))


def _merge_pass(offsets: np.ndarray, lifts: np.ndarray, tol: float):
    out_o, out_l = [], []
    acc, acc_lift = offsets[0].copy(), int(lifts[0])
    for o, lift in zip(offsets[1:], lifts[1:]):
        if acc_lift == 0 and _angle(acc, o) <= tol:
            acc = acc + o
            acc_lift = int(lift)
        else:
            out_o.append(acc)
            out_l.append(acc_lift)
            acc, acc_lift = o.copy(), int(lift)
    out_o.append(acc)
    out_l.append(acc_lift)
    return np.array(out_o), np.array(out_l, dtype=np.int8)


def merge_collinear(strokes: StrokeSequence, angle_tol: float = DEFAULT_ANGLE_TOL) -> StrokeSequence:
    """Sum runs of pen-down offsets whose directions agree within ``angle_tol`` radians.

    Passes repeat until nothing merges, so the result is a fixed point and the
    function is idempotent. Merging never crosses a pen lift.
    """
    if angle_tol < 0:
        raise DataError("angle_tol must be non-negative")
    offsets, lifts = strokes.offsets, strokes.pen_lift
    if len(offsets) < 2:
        return StrokeSequence(offsets.copy(), lifts.copy())
    while True:
        new_o, new_l = _merge_pass(offsets, lifts, angle_tol)
        if len(new_o) == len(offsets):
            return StrokeSequence(new_o, new_l)
        offsets, lifts = new_o, new_l


def merge_record(record: DatasetRecord, angle_tol: float = DEFAULT_ANGLE_TOL) -> DatasetRecord:
    return replace(record, strokes=merge_collinear(record.strokes, angle_tol))


def run_endpoints(strokes: StrokeSequence) -> np.ndarray:
    """Absolute pen position at the end of every pen-down run."""
    pos = np.cumsum(strokes.offsets, axis=0)
    ends = np.flatnonzero(strokes.pen_lift == 1)
    if len(strokes) and (len(ends) == 0 or ends[-1] != len(strokes) - 1):
        ends = np.append(ends, len(strokes) - 1)
    return pos[ends]


@dataclass
class PrepareResult:
    records: list[DatasetRecord]
    report: DropReport
    rejected: list[tuple[str, str]]
    points_before: int
    points_after: int


def preprocess(
    records: Sequence[DatasetRecord],
    angle_tol: float = DEFAULT_ANGLE_TOL,
    outlier_k: float = 15.0,
    corpus_norm: bool = False,
) -> PrepareResult:
    """normalize -> filter_outliers -> merge_collinear."""
    rejected = []
    normed = []
    scale = corpus_scale(records) if corpus_norm and records else None
    for rec in records:
        try:
            normed.append(normalize(rec, scale))
        except DegenerateRecordError as exc:
            rejected.append((rec.record_id, str(exc)))
    if not normed:
        raise DataError("no records survived normalization")
    kept, report = filter_outliers(normed, outlier_k)
    merged = [merge_record(r, angle_tol) for r in kept]
    return PrepareResult(
        records=merged,
        report=report,
        rejected=rejected,
        points_before=sum(len(r.strokes) for r in records),
        points_after=sum(len(r.strokes) for r in merged),
    )


# ---------------------------------------------------------------- vocabulary


PAD, UNK = 0, 1


class Vocab:
    """Character vocabulary; ids 0 and 1 are reserved for padding and unknown."""

    def __init__(self, chars: Iterable[str]):
        self.chars = list(dict.fromkeys(chars))
        for c in self.chars:
            if len(c) != 1 or c == "\n":
                raise DataError(f"invalid vocabulary entry {c!r}")
        self.index = {c: i + 2 for i, c in enumerate(self.chars)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        return cls(sorted(set("".join(texts))))

    def __len__(self):
        return len(self.chars) + 2

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.chars == other.chars

    def tokenize(self, text: str, counter: Counter | None = None) -> list[int]:
        if not text:
            raise DataError("cannot tokenize empty text")
        ids = [self.index.get(c, UNK) for c in text]
        if counter is not None:
            counter.update(c for c in text if c not in self.index)
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == PAD:
                continue
            out.append("�" if i == UNK else self.chars[i - 2])
        return "".join(out)

    def unknown_fraction(self, text: str) -> float:
        return sum(c not in self.index for c in text) / max(1, len(text))

    def to_text(self) -> str:
        return "".join(c + "\n" for c in self.chars)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(line for line in text.split("\n")[:-1])

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.tokenize(text)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    y0: np.ndarray  # (B, N, 2)
    d0: np.ndarray  # (B, N)
    stroke_mask: np.ndarray  # (B, N)
    tokens: np.ndarray  # (B, L) int64
    token_mask: np.ndarray  # (B, L)
    style_images: np.ndarray  # (B, H, W)
    record_ids: list[str]

    def __len__(self):
        return len(self.record_ids)


def collate(records: Sequence[DatasetRecord], vocab: Vocab, style_shape=STYLE_SHAPE) -> Batch:
    B = len(records)
    n_max = max(len(r.strokes) for r in records)
    toks = [vocab.tokenize(r.text) for r in records]
    l_max = max(len(t) for t in toks)
    y0 = np.zeros((B, n_max, 2))
    d0 = np.zeros((B, n_max))
    smask = np.zeros((B, n_max))
    tokens = np.full((B, l_max), PAD, dtype=np.int64)
    tmask = np.zeros((B, l_max))
    images = np.zeros((B,) + tuple(style_shape))
    for i, (rec, tk) in enumerate(zip(records, toks)):
        n = len(rec.strokes)
        y0[i, :n] = rec.strokes.offsets
        d0[i, :n] = rec.strokes.pen_lift
        smask[i, :n] = 1
        tokens[i, : len(tk)] = tk
        tmask[i, : len(tk)] = 1
        if rec.style_image is not None:
            images[i] = fit_style_image(rec.style_image, style_shape)
    return Batch(y0, d0, smask, tokens, tmask, images, [r.record_id for r in records])


def make_batches(
    records: Sequence[DatasetRecord],
    batch_size: int,
    rng: np.random.Generator,
    vocab: Vocab,
    style_shape=STYLE_SHAPE,
) -> Iterator[Batch]:
    """One epoch of length-bucketed batches in a seed-determined order."""
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    if not records:
        return
    lengths = np.array([len(r.strokes) for r in records])
    # random tie-break, then sort by length so each chunk has similar lengths
    order = np.lexsort((rng.permutation(len(records)), lengths))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    for j in rng.permutation(len(chunks)):
        yield collate([records[i] for i in chunks[j]], vocab, style_shape)


def points_per_char(records: Sequence[DatasetRecord]) -> float:
    return sum(len(r.strokes) for r in records) / max(1, sum(len(r.text) for r in records))
