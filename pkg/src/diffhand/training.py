"""Training loop: noise a record at a random continuous level and regress the noise,
with a level-weighted pen-lift cross-entropy."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .data import Batch, DatasetRecord, Vocab, make_batches, points_per_char
from .diffusion import NoiseSchedule, NumericError, make_schedule, sample_noise_level
from .network import PROB_EPS, Denoiser, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # diffusion
    T: int = 60
    beta_base: float = 0.02
    beta_lo: float = 1e-5
    beta_hi: float = 0.4
    # optimisation
    batch_size: int = 16
    total_steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_steps: int = 1000
    lr_d_model: int = 256
    lr_scale: float = 1.0
    grad_clip_norm: float = 100.0
    seed: int = 0
    # model
    d_model: int = 128
    heads: int = 4
    ff_mult: int = 2
    down_levels: int = 3
    attn_levels: int = 2
    style_height: int = 64
    style_width: int = 512
    style_channels: tuple[int, ...] = (16, 32, 64, 64)
    dtype: str = "float32"
    log_every: int = 50

    def __post_init__(self):
        for name in ("T", "batch_size", "total_steps", "warmup_steps", "lr_d_model", "d_model"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.grad_clip_norm <= 0 or self.lr_scale < 0:
            raise ValueError("grad_clip_norm must be positive and lr_scale non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.style_channels = tuple(self.style_channels)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_base, self.beta_lo, self.beta_hi)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            heads=self.heads,
            ff_mult=self.ff_mult,
            down_levels=self.down_levels,
            attn_levels=self.attn_levels,
            style_shape=(self.style_height, self.style_width),
            style_channels=self.style_channels,
        )

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def lr_at(step: int, d_model: int, warmup: int) -> float:
    """Inverse square root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean over valid positions of each record, then over records."""
    if mask is None:
        mask = torch.ones_like(values)
    mask = mask.to(values.dtype)
    counts = mask.sum(-1)
    if bool((counts == 0).any()):
        raise ValueError("empty mask")
    per_record = (values * mask).sum(-1) / counts
    return per_record.mean() if per_record.dim() else per_record


def stroke_loss(eps: torch.Tensor, eps_hat: torch.Tensor, mask: torch.Tensor | None = None, per_record: bool = False):
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    sq = ((eps - eps_hat) ** 2).sum(-1)
    if per_record:
        mask = torch.ones_like(sq) if mask is None else mask.to(sq.dtype)
        return (sq * mask).sum(-1) / mask.sum(-1)
    return _masked_mean(sq, mask)


def pen_loss(d0: torch.Tensor, pen_prob: torch.Tensor, mask: torch.Tensor | None = None, per_record: bool = False):
    p = pen_prob.clamp(PROB_EPS, 1 - PROB_EPS)
    d0 = d0.to(p.dtype)
    bce = -d0 * torch.log(p) - (1 - d0) * torch.log1p(-p)
    if per_record:
        mask = torch.ones_like(bce) if mask is None else mask.to(bce.dtype)
        return (bce * mask).sum(-1) / mask.sum(-1)
    return _masked_mean(bce, mask)


def clip_gradients(parameters, max_norm: float) -> float:
    """Scale gradients in place to global norm ``max_norm``; returns the norm before clipping."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


def batch_tensors(batch: Batch, dtype=torch.float32) -> dict:
    return {
        "y0": torch.as_tensor(batch.y0, dtype=dtype),
        "d0": torch.as_tensor(batch.d0, dtype=dtype),
        "stroke_mask": torch.as_tensor(batch.stroke_mask, dtype=dtype),
        "tokens": torch.as_tensor(batch.tokens),
        "token_mask": torch.as_tensor(batch.token_mask, dtype=dtype),
        "style_images": torch.as_tensor(batch.style_images, dtype=dtype),
    }


def noise_batch(y0: np.ndarray, mask: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator):
    """Per record: step t, continuous level, Gaussian noise and the noised strokes."""
    B = y0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    level = np.array([sample_noise_level(schedule, int(ti), rng) for ti in t])
    eps = rng.standard_normal(y0.shape) * mask[..., None]
    a = level[:, None, None]
    y_t = a * y0 + np.sqrt(1.0 - a**2) * eps
    return t, level, eps, y_t


def combined_loss(model: Denoiser, bt: dict, level: np.ndarray, eps: np.ndarray, y_t: np.ndarray):
    dtype = bt["y0"].dtype
    out = model(
        torch.as_tensor(y_t, dtype=dtype),
        bt["tokens"],
        torch.as_tensor(level, dtype=dtype),
        style_images=bt["style_images"],
        stroke_mask=bt["stroke_mask"],
        token_mask=bt["token_mask"],
    )
    eps_t = torch.as_tensor(eps, dtype=dtype)
    ls = stroke_loss(eps_t, out.eps_hat, bt["stroke_mask"], per_record=True)
    lp = pen_loss(bt["d0"], out.pen_prob, bt["stroke_mask"], per_record=True)
    weight = torch.as_tensor(level**2, dtype=dtype)  # alpha_bar
    total = (ls + weight * lp).mean()
    return total, ls.mean(), lp.mean(), out


class Trainer:
    """Owns model parameters, optimizer state and the training random stream."""

    def __init__(self, cfg: TrainConfig, vocab: Vocab, model: Denoiser | None = None, extra: dict | None = None):
        self.cfg = cfg
        self.vocab = vocab
        self.schedule = cfg.schedule()
        if model is None:
            torch.manual_seed(cfg.seed)
            model = Denoiser(cfg.model_config(len(vocab)))
        self.model = model.to(cfg.torch_dtype)
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.extra = dict(extra or {})
        self.history: list[dict] = []

    def lr(self, step: int) -> float:
        return self.cfg.lr_scale * lr_at(step, self.cfg.lr_d_model, self.cfg.warmup_steps)

    def train_step(self, batch: Batch) -> dict:
        cfg = self.cfg
        self.model.train()
        bt = batch_tensors(batch, cfg.torch_dtype)
        t, level, eps, y_t = noise_batch(batch.y0, batch.stroke_mask, self.schedule, self.rng)
        weight = level**2
        assert np.all((weight > 0) & (weight <= 1))
        total, ls, lp, _ = combined_loss(self.model, bt, level, eps, y_t)
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss at step {self.step + 1}",
                {"step": self.step + 1, "t": t.tolist(), "level": level.tolist(), "records": batch.record_ids},
            )
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        grad_norm = clip_gradients(self.model.parameters(), cfg.grad_clip_norm)
        if not math.isfinite(grad_norm):
            raise NumericError(f"non-finite gradient norm at step {self.step + 1}", {"step": self.step + 1})
        self.step += 1
        lr = self.lr(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        metrics = {
            "step": self.step,
            "loss": float(total.detach()),
            "loss_stroke": float(ls.detach()),
            "loss_pen": float(lp.detach()),
            "level": float(level.mean()),
            "grad_norm": grad_norm,
            "lr": lr,
        }
        self.history.append(metrics)
        return metrics

    def batches(self, records: Sequence[DatasetRecord]):
        """Endless batch stream resuming at ``self.step``.

        Epoch ``e`` is ordered by its own generator seeded from ``(seed, e)`` so the
        stream position depends only on the step count.
        """
        shape = (self.cfg.style_height, self.cfg.style_width)
        per_epoch = math.ceil(len(records) / self.cfg.batch_size)
        epoch, skip = divmod(self.step, per_epoch)
        while True:
            rng = np.random.default_rng([self.cfg.seed, epoch])
            for i, batch in enumerate(make_batches(records, self.cfg.batch_size, rng, self.vocab, shape)):
                if i >= skip:
                    yield batch
            epoch, skip = epoch + 1, 0

    def fit(self, records: Sequence[DatasetRecord], steps: int | None = None, metrics_path: str | Path | None = None):
        steps = self.cfg.total_steps - self.step if steps is None else steps
        self.extra.setdefault("points_per_char", points_per_char(records))
        self.extra.setdefault("data_scale", float(np.mean([r.scale for r in records])))
        writer = MetricsWriter(metrics_path) if metrics_path else None
        stream = self.batches(records)
        try:
            for _ in range(steps):
                m = self.train_step(next(stream))
                if writer:
                    writer.write(m)
                if self.cfg.log_every and m["step"] % self.cfg.log_every == 0:
                    log.info("step %d loss %.4f stroke %.4f pen %.4f", m["step"], m["loss"], m["loss_stroke"], m["loss_pen"])
        finally:
            if writer:
                writer.close()
        return self.history

    # ------------------------------------------------------------ persistence

    def to_checkpoint(self) -> checkpoint.Checkpoint:
        extra = dict(self.extra)
        extra["rng_state"] = self.rng.bit_generator.state
        return checkpoint.Checkpoint(
            params={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            model_config=self.model.cfg.to_dict(),
            train_config=asdict(self.cfg),
            vocab=self.vocab,
            step=self.step,
            optimizer=self.optimizer.state_dict(),
            extra=extra,
        )

    def save(self, directory):
        checkpoint.save(self.to_checkpoint(), directory)

    @classmethod
    def from_checkpoint(cls, ckpt: checkpoint.Checkpoint) -> "Trainer":
        known = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in ckpt.train_config.items() if k in known})
        model = model_from_checkpoint(ckpt, cfg.torch_dtype)
        extra = {k: v for k, v in ckpt.extra.items() if k != "rng_state"}
        trainer = cls(cfg, ckpt.vocab, model, extra)
        trainer.step = ckpt.step
        if ckpt.optimizer is not None:
            trainer.optimizer.load_state_dict(ckpt.optimizer)
        if "rng_state" in ckpt.extra:
            trainer.rng.bit_generator.state = ckpt.extra["rng_state"]
        return trainer

    @classmethod
    def load(cls, directory) -> "Trainer":
        return cls.from_checkpoint(checkpoint.load(directory))


def model_from_checkpoint(ckpt: checkpoint.Checkpoint, dtype=None) -> Denoiser:
    model = Denoiser(ModelConfig(**ckpt.model_config))
    if dtype is not None:
        model = model.to(dtype)
    model.load_state_dict(ckpt.params)
    return model


METRIC_FIELDS = ["step", "loss_stroke", "loss_pen", "level", "grad_norm", "lr"]


class MetricsWriter:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        self.fh = path.open("a", newline="", encoding="utf-8")
        self.writer = csv.DictWriter(self.fh, METRIC_FIELDS, extrasaction="ignore")
        if new:
            self.writer.writeheader()

    def write(self, m: dict):
        self.writer.writerow(m)
        self.fh.flush()

    def close(self):
        self.fh.close()
