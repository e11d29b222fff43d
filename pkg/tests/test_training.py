import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from diffhand import config
from diffhand.checkpoint import load as load_ckpt
from diffhand.data import Vocab, collate, preprocess
from diffhand.synthetic import handwriting_corpus
from diffhand.training import (
    MetricsWriter,
    NumericError,
    TrainConfig,
    Trainer,
    clip_gradients,
    lr_at,
    noise_batch,
    pen_loss,
    stroke_loss,
)

TINY = dict(
    batch_size=2,
    d_model=32,
    heads=2,
    down_levels=2,
    style_height=16,
    style_width=64,
    style_channels=(4, 8, 8, 8),
    warmup_steps=50,
    log_every=0,
)


@pytest.fixture(scope="module")
def corpus():
    texts = ["ab", "bca", "cab"]
    recs = preprocess(handwriting_corpus(texts, points_per_char=3, style_shape=(16, 64)), angle_tol=0).records
    return recs, Vocab.build(texts)


def tiny_trainer(vocab, **kw):
    torch.set_num_threads(1)
    return Trainer(TrainConfig(**{**TINY, **kw}), vocab)


# ---------------------------------------------------------------- losses


def test_stroke_loss_examples():
    e = torch.tensor([[[1.0, 0.0]]])
    assert float(stroke_loss(e, e)) == 0.0
    assert float(stroke_loss(e, torch.zeros_like(e))) == pytest.approx(1.0)


def test_stroke_loss_ignores_masked_padding():
    rng = np.random.default_rng(0)
    eps, hat = torch.tensor(rng.normal(size=(1, 5, 2))), torch.tensor(rng.normal(size=(1, 5, 2)))
    base = stroke_loss(eps, hat)
    pad_eps = torch.cat([eps, torch.tensor(rng.normal(size=(1, 3, 2)))], 1)
    pad_hat = torch.cat([hat, torch.tensor(rng.normal(size=(1, 3, 2)))], 1)
    mask = torch.tensor([[1.0] * 5 + [0.0] * 3])
    assert float(stroke_loss(pad_eps, pad_hat, mask)) == pytest.approx(float(base), rel=1e-12)


def test_losses_reject_bad_input():
    with pytest.raises(ValueError):
        stroke_loss(torch.zeros(1, 3, 2), torch.zeros(1, 4, 2))
    with pytest.raises(ValueError):
        stroke_loss(torch.zeros(1, 3, 2), torch.zeros(1, 3, 2), torch.zeros(1, 3))


def test_pen_loss_examples():
    d = torch.ones(1, 4, dtype=torch.float64)
    assert float(pen_loss(d, torch.full_like(d, 0.5))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(pen_loss(d, torch.full_like(d, 1 - 1e-7))) == pytest.approx(1e-7, rel=1e-3)
    # Exact 0 and 1 are clamped rather than producing infinities.
    assert math.isfinite(float(pen_loss(d, torch.zeros_like(d))))


@given(st.lists(st.tuples(st.integers(0, 1), st.floats(1e-3, 1 - 1e-3)), min_size=1, max_size=20))
def test_pen_loss_symmetry_and_oracle(rows):
    d = torch.tensor([[r[0] for r in rows]], dtype=torch.float64)
    p = torch.tensor([[r[1] for r in rows]], dtype=torch.float64)
    a = float(pen_loss(d, p))
    assert a == pytest.approx(float(pen_loss(1 - d, 1 - p)), rel=1e-12)
    ref = np.mean([-(math.log(q) if k else math.log(1 - q)) for k, q in rows])
    assert a == pytest.approx(ref, rel=1e-10)
    assert a >= 0


# ---------------------------------------------------------------- lr schedule


def test_lr_examples():
    assert lr_at(10000, 256, 10000) == pytest.approx(6.25e-4, rel=1e-12)
    assert lr_at(400, 64, 400) == pytest.approx(64**-0.5 * 400**-0.5)
    with pytest.raises(ValueError):
        lr_at(0, 256, 100)


def test_lr_monotone_around_peak():
    vals = [lr_at(s, 256, 100) for s in range(1, 400)]
    assert np.all(np.diff(vals[:100]) > 0)
    assert np.all(np.diff(vals[99:]) < 0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- steps


def test_clip_planted_gradient():
    w = torch.nn.Parameter(torch.zeros(3, 4, dtype=torch.float64))
    g = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    w.grad = g / g.norm() * 200
    before = clip_gradients([w], 100)
    assert before == pytest.approx(200, abs=1e-9)
    assert float(w.grad.norm()) == pytest.approx(100, abs=1e-6)


def test_noise_batch_level_in_band():
    tr = tiny_trainer(Vocab.build(["a"]))
    s = tr.schedule
    rng = np.random.default_rng(1)
    y0 = np.ones((500, 3, 2))
    t, level, eps, y_t = noise_batch(y0, np.ones((500, 3)), s, rng)
    assert np.all((level > s.levels[t]) & (level <= s.levels[t - 1]))
    np.testing.assert_allclose(y_t, level[:, None, None] * y0 + np.sqrt(1 - level[:, None, None] ** 2) * eps)


def test_zero_lr_leaves_params_bitwise(corpus):
    recs, vocab = corpus
    tr = tiny_trainer(vocab, lr_scale=0.0)
    before = {k: v.clone() for k, v in tr.model.state_dict().items()}
    tr.fit(recs, 3)
    for k, v in tr.model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_metrics_fields(corpus, tmp_path):
    recs, vocab = corpus
    tr = tiny_trainer(vocab)
    tr.fit(recs, 4, metrics_path=tmp_path / "m.csv")
    m = tr.history[-1]
    assert m["loss"] >= 0 and 0 < m["level"] <= 1 and m["lr"] > 0 and math.isfinite(m["grad_norm"])
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,loss_stroke,loss_pen,level,grad_norm,lr"
    assert len(lines) == 5
    tr.fit(recs, 2, metrics_path=tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 7  # appended, single header


def test_training_is_reproducible(corpus):
    recs, vocab = corpus
    a = tiny_trainer(vocab).fit(recs, 6)
    b = tiny_trainer(vocab).fit(recs, 6)
    assert a == b


def test_checkpoint_resume_is_bit_exact(corpus, tmp_path):
    recs, vocab = corpus
    full = tiny_trainer(vocab)
    full.fit(recs, 5)

    part = tiny_trainer(vocab)
    part.fit(recs, 3)
    part.save(tmp_path / "ck")
    resumed = Trainer.load(tmp_path / "ck")
    resumed.fit(recs, 2)

    assert resumed.step == full.step == 5
    assert resumed.history == full.history[3:]
    for (k, v), w in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(v, w), k


def test_checkpoint_round_trip_contents(corpus, tmp_path):
    recs, vocab = corpus
    tr = tiny_trainer(vocab, dtype="float64")
    tr.fit(recs, 1)
    tr.save(tmp_path / "ck")
    ck = load_ckpt(tmp_path / "ck")
    assert ck.step == 1 and ck.vocab.to_text() == vocab.to_text()
    assert ck.extra["data_scale"] == pytest.approx(np.mean([r.scale for r in recs]))
    for k, v in tr.model.state_dict().items():
        assert ck.params[k].dtype == v.dtype and torch.equal(ck.params[k], v)


def test_checkpoint_detects_vocab_tampering(corpus, tmp_path):
    recs, vocab = corpus
    tr = tiny_trainer(vocab)
    tr.save(tmp_path / "ck")
    (tmp_path / "ck" / "vocab.txt").write_text("z\n", encoding="utf-8")
    with pytest.raises(ValueError, match="hash"):
        load_ckpt(tmp_path / "ck")


def test_nonfinite_loss_raises_with_dump(corpus):
    recs, vocab = corpus
    tr = tiny_trainer(vocab)
    with torch.no_grad():
        next(tr.model.parameters()).fill_(float("nan"))
    batch = collate(recs[:2], vocab, (16, 64))
    with pytest.raises(NumericError) as info:
        tr.train_step(batch)
    assert info.value.dump["step"] == 1 and "records" in info.value.dump


@pytest.mark.slow
def test_single_batch_overfit(corpus):
    """A single short batch driven for 500 steps loses at least 90% of its loss."""
    recs, vocab = corpus
    tr = tiny_trainer(vocab, d_model=64, heads=4, warmup_steps=100, batch_size=2)
    batch = collate(recs[:2], vocab, (16, 64))

    def eval_loss():
        from diffhand.training import batch_tensors, combined_loss

        rng = np.random.default_rng(7)
        bt = batch_tensors(batch)
        with torch.no_grad():
            return np.mean(
                [float(combined_loss(tr.model, bt, *noise_batch(batch.y0, batch.stroke_mask, tr.schedule, rng)[1:])[0]) for _ in range(16)]
            )

    start = eval_loss()
    for _ in range(500):
        tr.train_step(batch)
    assert eval_loss() <= 0.1 * start


# ---------------------------------------------------------------- config files


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(batch_size=4, style_channels=(2, 4, 8, 8), dtype="float64")
    path = tmp_path / "train.cfg"
    path.write_text("# comment\n" + config.dump(cfg), encoding="utf-8")
    back = config.load(TrainConfig, path)
    assert back == cfg


def test_config_overrides_and_errors(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("batch_size = 8\nseed = 3  # trailing comment\n", encoding="utf-8")
    cfg = config.load(TrainConfig, path, {"seed": "5"})
    assert cfg.batch_size == 8 and cfg.seed == 5
    with pytest.raises(config.ConfigError, match="unknown"):
        config.apply(TrainConfig, {"batchsize": "3"})
    with pytest.raises(config.ConfigError):
        config.apply(TrainConfig, {"batch_size": "2.5"})
    with pytest.raises(config.ConfigError):
        config.parse_kv("no equals sign here")
