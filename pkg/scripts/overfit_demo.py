"""Overfit the four-record synthetic corpus and check that generation reproduces it.

    python3 scripts/overfit_demo.py --out runs/overfit
"""

import argparse
import logging
from pathlib import Path

import numpy as np
import torch

from diffhand import config
from diffhand.data import Vocab
from diffhand.generation import generate
from diffhand.render import emit_svg, to_polylines
from diffhand.synthetic import OVERFIT_TEXTS, overfit_corpus
from diffhand.training import TrainConfig, Trainer

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=ROOT / "configs" / "overfit.cfg")
    ap.add_argument("--out", default="runs/overfit")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(args.threads)

    cfg = config.load(TrainConfig, args.config)
    records = overfit_corpus((cfg.style_height, cfg.style_width))
    trainer = Trainer(cfg, Vocab.build(OVERFIT_TEXTS))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer.fit(records, metrics_path=out / "metrics.csv")
    trainer.save(out / "ckpt")

    for rec in records:
        for sampler in ("modified", "original"):
            res = generate(trainer.model, trainer.schedule, trainer.vocab, rec.text, style_image=rec.style_image,
                           length=len(rec.strokes), sampler=sampler, seed=0)
            err = np.linalg.norm(res.y0 - rec.strokes.offsets, axis=1).mean()
            pen = np.mean(res.strokes.pen_lift == rec.strokes.pen_lift)
            print(f"{rec.text:>8} {sampler:>8}  mean point error {err:.4f}  pen agreement {pen:.2f}")
            emit_svg(to_polylines(res.strokes), out / f"{rec.text}_{sampler}.svg", stroke_width=0.3)
        emit_svg(to_polylines(rec.strokes), out / f"{rec.text}_target.svg", stroke_width=0.3)


if __name__ == "__main__":
    main()
