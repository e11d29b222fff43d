"""Command line entry point.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure, 5 I/O error.
Failures print a single line ``diffhand: error[<category>]: <message>`` to stderr.

Environment:
    DIFFHAND_OUT_DIR   base directory for relative output paths
    DIFFHAND_THREADS   cap on torch intra-op threads
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import platform
import re
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError
from .data import DataError
from .diffusion import NumericError

log = logging.getLogger("diffhand")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
ENV_OUT = "DIFFHAND_OUT_DIR"
ENV_THREADS = "DIFFHAND_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def out_path(p: str | Path) -> Path:
    """Relative output paths are placed under ``$DIFFHAND_OUT_DIR`` when it is set."""
    p = Path(p)
    base = os.environ.get(ENV_OUT)
    return Path(base) / p if base and not p.is_absolute() else p


def _threads():
    import torch

    cap = os.environ.get(ENV_THREADS)
    if cap:
        try:
            n = int(cap)
        except ValueError:
            raise UsageError(f"{ENV_THREADS} must be an integer, got {cap!r}") from None
        if n < 1:
            raise UsageError(f"{ENV_THREADS} must be >= 1")
        torch.set_num_threads(n)
    return torch.get_num_threads()


def _kv_pairs(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _safe_name(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", s).strip("_") or "record"


@dataclasses.dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict
    outputs: dict
    version: str = __version__
    python: str = platform.python_version()
    threads: int | None = None
    started: str = ""
    finished: str = ""
    elapsed_s: float = 0.0

    def write(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, default=str) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_model(ckpt_dir):
    from .checkpoint import load
    from .training import TrainConfig, model_from_checkpoint

    ck = load(ckpt_dir)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in ck.train_config.items() if k in known})
    model = model_from_checkpoint(ck, cfg.torch_dtype).eval()
    return ck, cfg, model


def _style(path, shape):
    from .data import load_style_image

    if path is None:
        log.warning("no style image given; conditioning on a blank page")
        return np.zeros(shape)
    return load_style_image(path, shape)


def _emit(strokes, fmt, stem: Path, height, width, stroke_width):
    from .render import emit_svg, rasterize, to_polylines, write_pgm

    lines = to_polylines(strokes)
    if fmt == "svg":
        p = stem.with_suffix(".svg")
        emit_svg(lines, p, stroke_width)
    elif fmt == "pgm":
        p = stem.with_suffix(".pgm")
        write_pgm(rasterize(lines, height, width), p)
    else:
        return None
    return str(p)


# ---------------------------------------------------------------- commands


def cmd_schedule_info(args, manifest):
    from .diffusion import make_schedule

    sched = make_schedule(args.T, args.base, args.lo, args.hi)
    manifest.config = {"T": args.T, "base": args.base, "lo": args.lo, "hi": args.hi}
    if args.json:
        print(sched.to_json())
        return
    cols = ["t", "beta", "alpha", "alpha_bar", "sigma", "l"]
    print("\t".join(cols))
    for row in sched.table():
        print("\t".join(str(row["t"]) if c == "t" else ("-" if row[c] is None else f"{row[c]:.12g}") for c in cols))


def cmd_params_count(args, manifest):
    from . import config
    from .network import FULL_SCALE, Denoiser, count_parameters
    from .training import TrainConfig

    cfg = config.load(TrainConfig, args.config, _kv_pairs(args.set))
    if args.full_scale:
        cfg = dataclasses.replace(cfg, d_model=FULL_SCALE["d_model"], heads=FULL_SCALE["heads"],
                                  style_channels=FULL_SCALE["style_channels"])
    mcfg = cfg.model_config(args.vocab_size)
    model = Denoiser(mcfg)
    manifest.config = mcfg.to_dict()
    total = count_parameters(model)
    for name, child in model.named_children():
        print(f"{name}\t{count_parameters(child)}")
    print(f"total\t{total}")


def cmd_prepare(args, manifest):
    from .data import Vocab, preprocess, read_records, write_records

    src = Path(args.inp)
    out = out_path(args.out)
    records = read_records(src, load_images=False)
    if not records:
        raise DataError(f"{src}: no records")
    res = preprocess(records, math.radians(args.angle_tol), args.outlier_k, args.corpus_norm)
    out.mkdir(parents=True, exist_ok=True)
    for r in res.records:
        if r.style_path and not Path(r.style_path).is_absolute():
            r.style_path = os.path.relpath((src.parent / r.style_path).resolve(), out.resolve())
    write_records(res.records, out / "records.jsonl")
    report = res.report.to_text() + "".join(f"{rid}\trejected: {why}\n" for rid, why in res.rejected)
    (out / "drop_report.txt").write_text(report, encoding="utf-8")
    Vocab.build(r.text for r in res.records).save(out / "vocab.txt")
    manifest.config = {"angle_tol_deg": args.angle_tol, "outlier_k": args.outlier_k, "corpus_norm": args.corpus_norm}
    manifest.inputs = {"records": str(src)}
    manifest.outputs = {k: str(out / f) for k, f in
                        (("records", "records.jsonl"), ("drop_report", "drop_report.txt"), ("vocab", "vocab.txt"))}
    print(f"read {len(records)} kept {len(res.records)} dropped {len(res.report.dropped)} "
          f"rejected {len(res.rejected)} points {res.points_before} -> {res.points_after}")


def cmd_train(args, manifest):
    from . import config
    from .data import Vocab, read_records
    from .training import NumericError, TrainConfig, Trainer

    threads = _threads()
    out = out_path(args.out)
    overrides = _kv_pairs(args.set)
    if args.steps is not None:
        overrides["total_steps"] = str(args.steps)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.resume and (out / "manifest.json").exists():
        trainer = Trainer.load(out)
        cfg = config.apply(TrainConfig, overrides, base=trainer.cfg)
        trainer.cfg = cfg
    else:
        cfg = config.load(TrainConfig, args.config, overrides)
        trainer = None
    records = read_records(args.data, (cfg.style_height, cfg.style_width))
    if not records:
        raise DataError(f"{args.data}: no records")
    if trainer is None:
        vocab = Vocab.load(args.vocab) if args.vocab else Vocab.build(r.text for r in records)
        trainer = Trainer(cfg, vocab)
    out.mkdir(parents=True, exist_ok=True)
    manifest.config, manifest.seed, manifest.threads = dataclasses.asdict(cfg), cfg.seed, threads
    manifest.inputs = {"config": args.config, "data": args.data, "vocab": args.vocab}
    manifest.outputs = {"checkpoint": str(out), "metrics": str(out / "metrics.csv")}
    remaining = cfg.total_steps - trainer.step
    try:
        while remaining > 0:
            chunk = min(remaining, args.save_every or remaining)
            trainer.fit(records, chunk, metrics_path=out / "metrics.csv")
            trainer.save(out)
            remaining -= chunk
    except NumericError as exc:
        (out / "numeric_dump.json").write_text(json.dumps(exc.dump, indent=1, default=str), encoding="utf-8")
        raise
    trainer.save(out)
    last = trainer.history[-1] if trainer.history else {}
    print(f"step {trainer.step} loss {last.get('loss', float('nan')):.6g}")


def _length(args, ck, text):
    from .generation import default_length

    if args.length:
        return args.length
    return default_length(text, args.points_per_char or ck.extra.get("points_per_char", 5.0))


def _write_samples(results, out, fmt, args):
    from .data import DatasetRecord, write_records

    recs, files = [], []
    for name, text, res in results:
        recs.append(DatasetRecord(res.strokes, text, record_id=name))
        f = _emit(res.strokes, fmt, out / _safe_name(name), args.height, args.width, args.stroke_width)
        if f:
            files.append(f)
    write_records(recs, out / "samples.jsonl")
    return {"samples": str(out / "samples.jsonl"), "rendered": files}


def cmd_sample(args, manifest):
    from .generation import generate

    threads = _threads()
    ck, cfg, model = _load_model(args.ckpt)
    out = out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img = _style(args.style, model.cfg.style_shape)
    res = generate(model, cfg.schedule(), ck.vocab, args.text, style_image=img, length=_length(args, ck, args.text),
                   sampler=args.sampler, num_steps=args.steps, seed=args.seed,
                   data_scale=ck.extra.get("data_scale", 1.0))
    name = f"{args.sampler}-seed{args.seed}"
    manifest.seed, manifest.threads = args.seed, threads
    manifest.config = {"sampler": args.sampler, "steps": args.steps, "length": len(res.strokes), "text": args.text}
    manifest.inputs = {"ckpt": args.ckpt, "style": args.style}
    manifest.outputs = _write_samples([(name, args.text, res)], out, args.format, args)
    print(f"wrote {len(res.strokes)} points to {out / 'samples.jsonl'}")


def cmd_interpolate(args, manifest):
    from .generation import generate, interpolate_style_images

    threads = _threads()
    try:
        lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}") from None
    if not lambdas or any(not 0 <= lam <= 1 for lam in lambdas):
        raise UsageError("every lambda must lie in [0, 1]")
    ck, cfg, model = _load_model(args.ckpt)
    out = out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shape = model.cfg.style_shape
    img0, img1 = _style(args.style0, shape), _style(args.style1, shape)
    length = _length(args, ck, args.text)
    results = []
    for lam in lambdas:
        feats = interpolate_style_images(model, img0, img1, lam)
        res = generate(model, cfg.schedule(), ck.vocab, args.text, style_feats=feats, length=length,
                       sampler=args.sampler, num_steps=args.steps, seed=args.seed,
                       data_scale=ck.extra.get("data_scale", 1.0))
        results.append((f"lambda{lam:.3f}", args.text, res))
    manifest.seed, manifest.threads = args.seed, threads
    manifest.config = {"lambdas": lambdas, "sampler": args.sampler, "steps": args.steps, "length": length}
    manifest.inputs = {"ckpt": args.ckpt, "style0": args.style0, "style1": args.style1}
    manifest.outputs = _write_samples(results, out, args.format, args)
    print(f"wrote {len(results)} interpolated samples to {out / 'samples.jsonl'}")


def cmd_render(args, manifest):
    from .data import read_records

    out = out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_records(args.inp, load_images=False)
    files = []
    for i, rec in enumerate(records):
        stem = out / f"{i:04d}_{_safe_name(rec.record_id)}"
        files.append(_emit(rec.strokes, args.format, stem, args.height, args.width, args.stroke_width))
    manifest.config = {"format": args.format, "height": args.height, "width": args.width, "stroke_width": args.stroke_width}
    manifest.inputs = {"records": args.inp}
    manifest.outputs = {"rendered": files}
    print(f"rendered {len(files)} records to {out}")


def cmd_diagnose_attention(args, manifest):
    from .data import parse_record
    from .diffusion import forward_diffuse
    from .generation import attention_alignment

    threads = _threads()
    ck, cfg, model = _load_model(args.ckpt)
    try:
        obj = json.loads(args.record)
    except json.JSONDecodeError as exc:
        raise DataError(f"--record is not a JSON record line: {exc}") from None
    rec = parse_record(obj, Path.cwd(), model.cfg.style_shape)
    rng = np.random.default_rng(args.seed)
    y0 = rec.strokes.offsets
    y_t = forward_diffuse(y0, args.level**2, rng.standard_normal(y0.shape))
    rep = attention_alignment(model, y_t, ck.vocab.tokenize(rec.text), rec.style_image, args.level, args.block)
    out = out_path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "attention.csv", rep.weights, delimiter=",", fmt="%.8g")
    summary = {**rep.summary(), "argmax": rep.argmax.tolist(), "level": args.level, "block": args.block}
    (out / "alignment.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
    manifest.seed, manifest.threads = args.seed, threads
    manifest.config = {"level": args.level, "block": args.block}
    manifest.inputs = {"ckpt": args.ckpt, "record": rec.record_id}
    manifest.outputs = {"weights": str(out / "attention.csv"), "report": str(out / "alignment.json")}
    print(f"monotonicity {rep.monotonicity:.4f} deviation {rep.deviation:.4f}")


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"diffhand: error[usage]: {message}\n")


def _add_render_flags(p, default_format="svg"):
    p.add_argument("--format", choices=("svg", "pgm", "none"), default=default_format, help="rendered output format")
    p.add_argument("--height", type=int, default=64, help="raster height in pixels")
    p.add_argument("--width", type=int, default=512, help="raster width in pixels")
    p.add_argument("--stroke-width", type=float, default=1.0, help="SVG stroke width in drawing units")


def _add_gen_flags(p):
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--text", required=True, help="text to write")
    p.add_argument("--sampler", choices=("modified", "original"), default="modified", help="reverse-step rule")
    p.add_argument("--steps", type=int, default=None, help="number of reverse steps (default: all T)")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--length", type=int, default=None, help="output points (default: points-per-char x text length)")
    p.add_argument("--points-per-char", type=float, default=None, help="length heuristic ratio (default: from checkpoint)")
    p.add_argument("--out-dir", required=True, help="output directory")
    _add_render_flags(p)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="diffhand", description="Diffusion handwriting toolkit.", formatter_class=fmt, allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"diffhand {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--manifest", default=None, help="run manifest path (default: <output dir>/run_manifest.json)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("schedule-info", cmd_schedule_info, "print the noise schedule table")
    p.add_argument("--T", type=int, default=60, help="number of diffusion steps")
    p.add_argument("--base", type=float, default=0.02, help="constant added to every beta")
    p.add_argument("--lo", type=float, default=1e-5, help="first term of the geometric part")
    p.add_argument("--hi", type=float, default=0.4, help="last term of the geometric part")
    p.add_argument("--json", action="store_true", help="emit JSON instead of a tab-separated table")

    p = add("params-count", cmd_params_count, "count denoiser parameters for a configuration")
    p.add_argument("--config", default=None, help="training config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--vocab-size", type=int, default=80, help="vocabulary size including reserved ids")
    p.add_argument("--full-scale", action="store_true", help="use the full-size model width")

    p = add("prepare", cmd_prepare, "normalize, filter and merge a record file")
    p.add_argument("--in", dest="inp", required=True, help="input record file (JSON lines)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--angle-tol", type=float, default=5.0, help="collinearity tolerance in degrees")
    p.add_argument("--outlier-k", type=float, default=15.0, help="outlier threshold in standard deviations")
    p.add_argument("--corpus-norm", action="store_true", help="one corpus-wide scale instead of per-record scales")

    p = add("train", cmd_train, "train a denoiser")
    p.add_argument("--config", default=None, help="training config file (key = value lines)")
    p.add_argument("--data", required=True, help="prepared record file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--vocab", default=None, help="vocabulary file (default: built from the data)")
    p.add_argument("--steps", type=int, default=None, help="override total_steps")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--save-every", type=int, default=0, help="checkpoint interval in steps (0: only at the end)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    p = add("sample", cmd_sample, "generate handwriting for a text")
    _add_gen_flags(p)
    p.add_argument("--style", default=None, help="style image (default: blank)")

    p = add("interpolate", cmd_interpolate, "blend two writing styles")
    _add_gen_flags(p)
    p.add_argument("--style0", required=True, help="style image weighted by lambda")
    p.add_argument("--style1", required=True, help="style image weighted by 1 - lambda")
    p.add_argument("--lambdas", default="1.0,0.8,0.6,0.4,0.2,0.0", help="comma-separated blend weights")

    p = add("render", cmd_render, "render record files to SVG or PGM")
    p.add_argument("--in", dest="inp", required=True, help="record file (JSON lines)")
    p.add_argument("--out-dir", required=True, help="output directory")
    _add_render_flags(p)

    p = add("diagnose-attention", cmd_diagnose_attention, "cross-attention alignment for one record")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--record", required=True, help="one record as a JSON line")
    p.add_argument("--level", type=float, default=0.9, help="noise level sqrt(alpha_bar) in (0, 1]")
    p.add_argument("--block", type=int, default=-1, help="index of the attentional block")
    p.add_argument("--seed", type=int, default=0, help="seed for the noise added to the record")
    p.add_argument("--out-dir", required=True, help="output directory")
    return parser


def _manifest_path(args) -> Path | None:
    if args.manifest:
        return out_path(args.manifest)
    target = getattr(args, "out", None) or getattr(args, "out_dir", None)
    return out_path(target) / "run_manifest.json" if target else None


def _categorize(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, (UsageError, ConfigError)):
        return "usage", EXIT_USAGE
    if isinstance(exc, DataError):
        return "data", EXIT_DATA
    if isinstance(exc, (NumericError, FloatingPointError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, OSError):
        return "io", EXIT_IO
    if isinstance(exc, ValueError):
        return "data", EXIT_DATA
    raise exc


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(command=args.command, argv=argv, config={}, seed=getattr(args, "seed", None), inputs={}, outputs={})
    manifest.started = _now()
    t0 = time.perf_counter()
    try:
        args.func(args, manifest)
        manifest.finished = _now()
        manifest.elapsed_s = round(time.perf_counter() - t0, 3)
        path = _manifest_path(args)
        if path is not None:
            manifest.write(path)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        category, code = _categorize(exc)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"diffhand: error[{category}]: {msg}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
