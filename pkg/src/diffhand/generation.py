"""Sampling, style interpolation, attention-alignment diagnostics and the sampler ablation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DataError, DatasetRecord, StrokeSequence, Vocab, fit_style_image
from .diffusion import NoiseSchedule, NumericError, reverse_step_modified, reverse_step_original
from .network import Denoiser

SAMPLERS = ("modified", "original")

# (y_t [N, 2] float64, level) -> (eps_hat [N, 2], pen_prob [N])
DenoiseFn = Callable[[np.ndarray, float], tuple[np.ndarray, np.ndarray]]


class ModelDenoiser:
    """Binds a trained denoiser to one text and one style for repeated evaluation.

    Style features are extracted once; pass ``style_feats`` to condition on a
    precomputed (for example interpolated) feature map instead of an image.
    """

    def __init__(self, model: Denoiser, tokens: Sequence[int], style_image=None, style_feats=None):
        self.model = model.eval()
        self.dtype = next(model.parameters()).dtype
        self.tokens = torch.as_tensor([list(tokens)], dtype=torch.long)
        if style_feats is None:
            if style_image is None:
                style_image = np.zeros(model.cfg.style_shape)
            img = torch.as_tensor(fit_style_image(style_image, model.cfg.style_shape)[None], dtype=self.dtype)
            with torch.no_grad():
                style_feats = model.extract_style(img)
        self.style_feats = torch.as_tensor(style_feats, dtype=self.dtype)
        if self.style_feats.dim() == 2:
            self.style_feats = self.style_feats[None]
        self.last_attention = None

    def __call__(self, y_t: np.ndarray, level: float):
        with torch.no_grad():
            out = self.model(
                torch.as_tensor(y_t[None], dtype=self.dtype),
                self.tokens,
                torch.tensor([level], dtype=self.dtype),
                style_feats=self.style_feats,
            )
        self.last_attention = [w[0].mean(0).double().numpy() for w in out.attention]
        return out.eps_hat[0].double().numpy(), out.pen_prob[0].double().numpy()


def step_subset(T: int, num_steps: int | None) -> np.ndarray:
    """Evenly spaced schedule steps, always including the noisiest step T.

    A single step jumps straight from level T to clean data.
    """
    if num_steps is None or num_steps == T:
        return np.arange(1, T + 1)
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in 1..{T}")
    if num_steps == 1:
        return np.array([T])
    return np.unique(np.round(np.linspace(1, T, num_steps)).astype(int))


def respaced(schedule: NoiseSchedule, steps: np.ndarray) -> NoiseSchedule:
    """Schedule whose k-th step jumps between consecutive entries of ``steps``."""
    if len(steps) == schedule.T:
        return schedule
    ab = schedule.alpha_bar[steps - 1]
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(1.0 - ab / prev)


@dataclass
class GenerationResult:
    strokes: StrokeSequence  # denormalized
    y0: np.ndarray  # normalized offsets
    pen_prob: np.ndarray
    seed: int
    sampler: str
    trajectory: list = field(default_factory=list)


def sample(
    denoise: DenoiseFn,
    schedule: NoiseSchedule,
    length: int,
    seed: int,
    sampler: str = "modified",
    num_steps: int | None = None,
    zero_noise: bool = False,
    keep_trajectory: bool = False,
):
    """Reverse process from Gaussian noise; returns ``(y0, pen_prob, trajectory)``.

    Both samplers consume identical random draws for a given seed, and ``z`` is
    skipped at the final step.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")
    if length < 1:
        raise ValueError("output length must be >= 1")
    sched = respaced(schedule, step_subset(schedule.T, num_steps))
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((length, 2))
    trajectory = [y.copy()] if keep_trajectory else []
    pen = None
    for t in range(sched.T, 0, -1):
        z = rng.standard_normal(y.shape)
        if t == 1 or zero_noise:
            z = np.zeros_like(y)
        level = math.sqrt(sched.alpha_bar_at(t))
        eps_hat, pen = denoise(y, level)
        if sampler == "modified":
            y = reverse_step_modified(y, eps_hat, z, sched, t)
        else:
            y = reverse_step_original(y, eps_hat, z, sched, t)
        if not np.all(np.isfinite(y)):
            raise NumericError(f"non-finite sample at step {t}", {"step": t, "seed": seed})
        if keep_trajectory:
            trajectory.append(y.copy())
    return y, pen, trajectory


def default_length(text: str, points_per_char: float) -> int:
    return max(1, math.ceil(points_per_char * len(text)))


def generate(
    model: Denoiser | DenoiseFn,
    schedule: NoiseSchedule,
    vocab: Vocab,
    text: str,
    style_image=None,
    style_feats=None,
    length: int | None = None,
    sampler: str = "modified",
    num_steps: int | None = None,
    seed: int = 0,
    points_per_char: float = 5.0,
    data_scale: float = 1.0,
    max_unknown: float = 0.5,
    zero_noise: bool = False,
) -> GenerationResult:
    """Write ``text`` in the given style.

    ``model`` may also be a bare ``(y_t, level) -> (eps_hat, pen_prob)`` callable,
    in which case text and style are ignored by the denoiser.
    """
    if vocab.unknown_fraction(text) > max_unknown:
        raise DataError(f"more than {max_unknown:.0%} of {text!r} is outside the vocabulary")
    length = length or default_length(text, points_per_char)
    if isinstance(model, Denoiser):
        denoise = ModelDenoiser(model, vocab.tokenize(text), style_image, style_feats)
    else:
        denoise = model
    y0, pen, _ = sample(denoise, schedule, length, seed, sampler, num_steps, zero_noise)
    strokes = StrokeSequence(y0 * data_scale, (pen > 0.5).astype(np.int8))
    return GenerationResult(strokes, y0, pen, seed, sampler)


def interpolate_styles(s0: torch.Tensor, s1: torch.Tensor, lam: float) -> torch.Tensor:
    """``lam * s0 + (1 - lam) * s1`` on extracted style features."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if s0.shape != s1.shape:
        raise ValueError(f"feature map shapes differ: {tuple(s0.shape)} vs {tuple(s1.shape)}")
    if lam == 1.0:
        return s0.clone()
    if lam == 0.0:
        return s1.clone()
    return lam * s0 + (1.0 - lam) * s1


def interpolate_style_images(model: Denoiser, img0, img1, lam: float) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    imgs = torch.as_tensor(
        np.stack([fit_style_image(img0, model.cfg.style_shape), fit_style_image(img1, model.cfg.style_shape)]), dtype=dtype
    )
    with torch.no_grad():
        feats = model.extract_style(imgs)
    return interpolate_styles(feats[0:1], feats[1:2], lam)


# ---------------------------------------------------------------- attention alignment


@dataclass
class AlignmentReport:
    weights: np.ndarray  # [strokes, text]
    argmax: np.ndarray
    monotonicity: float
    deviation: float

    def summary(self) -> dict:
        return {
            "strokes": int(self.weights.shape[0]),
            "text": int(self.weights.shape[1]),
            "monotonicity": self.monotonicity,
            "deviation": self.deviation,
        }


def ideal_diagonal(n_strokes: int, n_text: int) -> np.ndarray:
    return (np.arange(n_strokes) * n_text) // n_strokes


def alignment_from_weights(weights) -> AlignmentReport:
    """Score a stroke-by-text attention matrix against the length-normalized diagonal.

    monotonicity: fraction of consecutive stroke positions whose argmax text
    index does not decrease. deviation: expected distance, in units of the
    text length, between the attended index and the diagonal index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or min(w.shape) < 1:
        raise ValueError("weights must be a non-empty [strokes, text] matrix")
    n_s, n_t = w.shape
    argmax = w.argmax(1)
    steps = np.diff(argmax)
    mono = float(np.mean(steps >= 0)) if len(steps) else 1.0
    dist = np.abs(np.arange(n_t)[None, :] - ideal_diagonal(n_s, n_t)[:, None]) / n_t
    deviation = float(np.mean((w * dist).sum(1)))
    return AlignmentReport(w, argmax, mono, deviation)


def attention_alignment(model: Denoiser, y_t, tokens, style_image=None, level: float = 1.0, block: int = -1, style_feats=None):
    """Cross-attention of one attentional block (averaged over heads) and its alignment scores."""
    denoise = ModelDenoiser(model, tokens, style_image, style_feats)
    denoise(np.asarray(y_t, dtype=np.float64), level)
    return alignment_from_weights(denoise.last_attention[block])


# ---------------------------------------------------------------- ablation


def stroke_stats(strokes: StrokeSequence) -> dict:
    lifts = strokes.pen_lift
    runs = np.diff(np.concatenate([[-1], np.flatnonzero(lifts == 1)]))
    tail = len(lifts) - 1 - (np.flatnonzero(lifts == 1)[-1] if lifts.any() else -1)
    run_lengths = list(runs) + ([tail] if tail > 0 else [])
    return {
        "offset_std": float(np.std(strokes.offsets)),
        "mean_run_length": float(np.mean(run_lengths)) if run_lengths else 0.0,
        "pen_lift_rate": float(lifts.mean()) if len(lifts) else 0.0,
    }


def ablation_run(
    records: Sequence[DatasetRecord],
    model: Denoiser,
    schedule: NoiseSchedule,
    vocab: Vocab,
    base_seed: int = 0,
    num_steps: int | None = None,
    data_scale: float = 1.0,
) -> list[dict]:
    """Generate every record's text with both samplers at one shared per-record seed."""
    seeds = np.random.SeedSequence(base_seed).generate_state(len(records)) if records else []
    report = []
    for rec, seed in zip(records, seeds):
        seed = int(seed)
        entry = {"record_id": rec.record_id, "text": rec.text, "seed": seed}
        for sampler in SAMPLERS:
            res = generate(
                model, schedule, vocab, rec.text, style_image=rec.style_image, length=len(rec.strokes),
                sampler=sampler, num_steps=num_steps, seed=seed, data_scale=data_scale,
            )
            entry[sampler] = res.strokes
            entry[f"{sampler}_stats"] = stroke_stats(res.strokes)
        report.append(entry)
    return report
