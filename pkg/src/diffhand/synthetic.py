"""Deterministic toy handwriting corpora for tests, demos and overfit runs."""

from __future__ import annotations

import zlib

import numpy as np

from .data import DatasetRecord, StrokeSequence, preprocess

OVERFIT_TEXTS = ("hello", "world", "diffuse", "ink")


def glyph(char: str, points: int = 6) -> np.ndarray:
    """Fixed pseudo-random pen path for ``char``: rows of (dx, dy, lift)."""
    rng = np.random.default_rng(zlib.crc32(char.encode("utf-8")))
    if char == " ":
        return np.array([[1.5, 0.0, 1.0]])
    angles = np.cumsum(rng.uniform(-1.6, 1.6, points))
    steps = rng.uniform(0.4, 1.0, points)
    out = np.zeros((points + 1, 3))
    out[:points, 0] = steps * np.cos(angles)
    out[:points, 1] = steps * np.sin(angles)
    out[points - 1, 2] = 1.0
    # advance to the next character cell
    out[points] = [0.8, 0.0, 0.0]
    return out


def text_strokes(text: str, points_per_char: int = 6, jitter: float = 0.0, rng=None) -> StrokeSequence:
    rows = np.vstack([glyph(c, points_per_char) for c in text])
    if jitter:
        rows[:, :2] += jitter * (rng or np.random.default_rng(0)).standard_normal(rows[:, :2].shape)
    rows[-1, 2] = 1.0
    return StrokeSequence(rows[:, :2], rows[:, 2])


def style_image(writer: int, shape=(64, 512)) -> np.ndarray:
    """Striped pattern whose frequency and slant depend on the writer id."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    slant = 0.15 * (writer % 5)
    period = 6 + 3 * (writer % 4)
    img = 0.5 + 0.5 * np.sin(2 * np.pi * (xx + slant * yy) / period)
    img[: h // 8] = 0
    img[-h // 8 :] = 0
    return img


def handwriting_corpus(texts, points_per_char: int = 4, jitter: float = 0.0, seed: int = 0, style_shape=(64, 512)):
    rng = np.random.default_rng(seed)
    records = []
    for i, text in enumerate(texts):
        strokes = text_strokes(text, points_per_char, jitter, rng)
        records.append(
            DatasetRecord(
                strokes=strokes,
                text=text,
                writer_id=f"w{i}",
                style_image=style_image(i, style_shape),
                record_id=f"syn-{i}",
            )
        )
    return records


def overfit_corpus(style_shape=(32, 128), texts=OVERFIT_TEXTS) -> list[DatasetRecord]:
    """The fixed four-record corpus used for overfit checks, normalized and unmerged."""
    return preprocess(handwriting_corpus(texts, points_per_char=4, style_shape=style_shape), angle_tol=0.0).records


def straight_word_corpus(n: int, seed: int = 0, segments: tuple[int, int] = (3, 12), words: tuple[int, int] = (1, 4)):
    """Words drawn as straight pen-down lines split into collinear pieces."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        rows = []
        for _ in range(rng.integers(*words, endpoint=True)):
            theta = rng.uniform(-np.pi, np.pi)
            length = rng.uniform(2, 20)
            k = int(rng.integers(*segments, endpoint=True))
            cuts = np.sort(rng.uniform(0, 1, k - 1))
            pieces = np.diff(np.concatenate([[0.0], cuts, [1.0]])) * length
            for p in pieces:
                rows.append([p * np.cos(theta), p * np.sin(theta), 0])
            rows[-1][2] = 1
            # gap to the next word
            rows.append([rng.uniform(1, 4), rng.uniform(-1, 1), 1])
        arr = np.array(rows, dtype=np.float64)
        records.append(
            DatasetRecord(StrokeSequence(arr[:, :2], arr[:, 2]), text=f"word{i}", writer_id=f"w{i % 7}", record_id=f"line-{i}")
        )
    return records


def random_strokes(rng: np.random.Generator, n: int, lift_p: float = 0.15) -> StrokeSequence:
    """Random walk; directions are sometimes repeated so merging has work to do."""
    angles = rng.uniform(-np.pi, np.pi, n)
    repeat = rng.random(n) < 0.4
    for i in range(1, n):
        if repeat[i]:
            angles[i] = angles[i - 1] + rng.normal(0, 0.02)
    lengths = rng.uniform(0.1, 3, n)
    offsets = np.stack([lengths * np.cos(angles), lengths * np.sin(angles)], 1)
    lifts = (rng.random(n) < lift_p).astype(np.int8)
    return StrokeSequence(offsets, lifts)
