import math

import numpy as np
import pytest

from conftest import TINY_CORPUS, tiny_config
from leafkd.encoder import init_encoder
from leafkd.errors import CompatibilityError, ConfigError, FitError, NumericError
from leafkd.numerics import Parameter
from leafkd.teacher import build_cache, synthetic_teacher
from leafkd.trainer import (
    Checkpoint,
    RobustnessPoint,
    TrainConfig,
    ablation_batch_size,
    ablation_lr,
    ablation_pooling,
    adamw_step,
    fit_robustness_margin,
    history_csv,
    lr_at,
    train,
)

TEXTS = [f"{a} {b}" for a in TINY_CORPUS for b in ("cat", "a dog", "the mat sat")] + list(TINY_CORPUS)


@pytest.fixture(scope="module")
def setup(tiny_vocab):
    teacher = synthetic_teacher(tiny_config(vocab_size=len(tiny_vocab), hidden=16, out=8, seed=3), tiny_vocab)
    cache = build_cache(teacher, TEXTS, val_holdout=4, seed=1)
    scfg = tiny_config(vocab_size=len(tiny_vocab), out=8)
    return teacher, cache, scfg


def quick(**kw):
    base = dict(batch_size=4, lr_start=1e-2, lr_end=1e-3, cycles=1, epochs_per_cycle=3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# schedules


def test_default_config_matches_recipe():
    c = TrainConfig()
    assert (c.batch_size, c.lr_start, c.lr_end, c.cycles, c.epochs_per_cycle) == (32, 1e-4, 1e-5, 3, 10)
    assert (c.beta1, c.beta2, c.weight_decay, c.schedule) == (0.9, 0.999, 0.01, "linear")


def test_linear_schedule_endpoints_and_reset():
    c = TrainConfig()
    assert lr_at(c, 0) == pytest.approx(1e-4)
    assert lr_at(c, 9) == pytest.approx(1e-5)
    assert lr_at(c, 10) == pytest.approx(1e-4)
    assert lr_at(c, 5) == pytest.approx(1e-4 + (1e-5 - 1e-4) * 5 / 9)
    with pytest.raises(ConfigError):
        lr_at(c, 30)


def test_linear_schedule_has_one_reset_per_cycle():
    c = TrainConfig()
    lrs = [lr_at(c, e) for e in range(c.total_epochs)]
    resets = sum(1 for a, b in zip(lrs, lrs[1:]) if b > a)
    assert resets == c.cycles - 1
    assert max(lrs) == pytest.approx(c.lr_start) and min(lrs) == pytest.approx(c.lr_end)


def test_constant_and_cosine_schedules():
    c = TrainConfig(schedule="constant")
    assert all(lr_at(c, e) == c.lr_start for e in range(c.total_epochs))
    k = TrainConfig(schedule="cosine", cycles=1, epochs_per_cycle=2)
    assert lr_at(k, 0, 0, 5) == pytest.approx(1e-4)
    assert lr_at(k, 1, 4, 5) == pytest.approx(1e-5)
    assert 1e-5 < lr_at(k, 1, 0, 5) < 1e-4


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=1e-5, lr_end=1e-4)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(schedule="step")


# ---------------------------------------------------------------------------
# adamw


def test_adamw_fixed_point_and_decoupled_decay():
    p = Parameter("w", np.array([1.0, -2.0], np.float32))
    adamw_step([p], lr=0.1, step=1, weight_decay=0.0)
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    adamw_step([p], lr=0.1, step=2, weight_decay=0.01)
    np.testing.assert_allclose(p.value, np.array([1.0, -2.0]) * (1 - 0.001), rtol=1e-7)


def test_adamw_two_hand_steps():
    lr, b1, b2, wd, eps = 0.1, 0.9, 0.999, 0.01, 1e-8
    p = Parameter("w", np.array([0.5], np.float32))
    w, m, v = 0.5, 0.0, 0.0
    for t, g in ((1, 0.2), (2, -0.4)):
        p.grad[...] = g
        adamw_step([p], lr, t, b1, b2, wd, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert float(p.value[0]) == pytest.approx(w, abs=1e-7)


def test_adamw_aborts_on_non_finite_grad():
    p = Parameter("layers.0.wq", np.zeros(3, np.float32))
    p.grad[1] = np.nan
    with pytest.raises(NumericError, match="layers.0.wq"):
        adamw_step([p], 0.1, 1)


# ---------------------------------------------------------------------------
# training


def test_smoke_history_and_val(setup, tiny_vocab):
    _, cache, scfg = setup
    res = train(init_encoder(scfg), cache, quick(epochs_per_cycle=1), tiny_vocab)
    n_train = len(cache.rows("train"))
    assert len(res.history) == math.ceil(n_train / 4)
    assert math.isfinite(res.final_val_loss) and 0 <= res.final_val_loss <= 2
    assert res.history[-1].val_loss == res.final_val_loss
    assert history_csv(res.history).splitlines()[0] == "epoch,step,lr,train_loss,val_loss"


def test_training_reduces_val_loss(setup, tiny_vocab):
    _, cache, scfg = setup
    res = train(init_encoder(scfg), cache, quick(epochs_per_cycle=6, schedule="constant"), tiny_vocab)
    assert res.final_val_loss < res.initial_val_loss


def test_same_seed_same_weights(setup, tiny_vocab):
    _, cache, scfg = setup
    a = train(init_encoder(scfg), cache, quick(), tiny_vocab).state
    b = train(init_encoder(scfg), cache, quick(), tiny_vocab).state
    assert a.to_bytes() == b.to_bytes()


def test_resume_matches_straight_run(setup, tiny_vocab, tmp_path):
    _, cache, scfg = setup
    cfg = quick(epochs_per_cycle=4)
    straight = train(init_encoder(scfg), cache, cfg, tiny_vocab)
    first = train(init_encoder(scfg), cache, cfg, tiny_vocab, epochs=2, checkpoint_dir=tmp_path)
    ck = Checkpoint.load(tmp_path / "epoch_001.left")
    resumed = train(init_encoder(scfg), cache, cfg, tiny_vocab, resume=ck)
    assert first.checkpoints[-1].epoch == 1
    assert resumed.state.to_bytes() == straight.state.to_bytes()
    assert resumed.checkpoints[-1].to_bytes() == straight.checkpoints[-1].to_bytes()


def test_checkpoint_round_trip_byte_exact(setup, tiny_vocab, tmp_path):
    teacher, cache, scfg = setup
    cfg = quick(epochs_per_cycle=1, loss={"kind": "leaf+distilbert"})
    s = init_encoder(tiny_config(vocab_size=len(tiny_vocab), out=8, hidden=8))
    res = train(s, cache, cfg, tiny_vocab, teacher=teacher)
    ck = res.checkpoints[-1]
    assert ck.proj is not None
    ck.save(tmp_path / "a.left")
    again = Checkpoint.load(tmp_path / "a.left")
    again.save(tmp_path / "b.left")
    assert (tmp_path / "a.left").read_bytes() == (tmp_path / "b.left").read_bytes()
    assert again.config == cfg and again.epoch == 0 and again.val_loss == ck.val_loss
    assert (tmp_path / "a.left").read_bytes()[:4] == b"LEFT"


def test_checkpoint_every(setup, tiny_vocab):
    _, cache, scfg = setup
    res = train(init_encoder(scfg), cache, quick(epochs_per_cycle=5, checkpoint_every=2), tiny_vocab)
    assert [c.epoch for c in res.checkpoints] == [1, 3, 4]


def test_aux_loss_needs_teacher_and_matching_heads(setup, tiny_vocab):
    teacher, cache, _ = setup
    with pytest.raises(CompatibilityError):
        train(init_encoder(tiny_config(vocab_size=len(tiny_vocab), out=8)), cache, quick(loss={"kind": "leaf+minilm"}), tiny_vocab)
    s = init_encoder(tiny_config(vocab_size=len(tiny_vocab), out=8, heads=4))
    with pytest.raises(CompatibilityError):
        train(s, cache, quick(loss={"kind": "leaf+minilm"}), tiny_vocab, teacher=teacher)


def test_cache_dim_must_match_student(setup, tiny_vocab):
    _, cache, _ = setup
    with pytest.raises(ConfigError):
        train(init_encoder(tiny_config(vocab_size=len(tiny_vocab), out=4)), cache, quick(), tiny_vocab)


# ---------------------------------------------------------------------------
# robustness margin


def _line(a, b, xs, first=()):
    return [RobustnessPoint(x, a * x + b, i in first, i) for i, x in enumerate(xs)]


def test_margin_intercept_case():
    fit = fit_robustness_margin(_line(-1.0, 0.7, [0.1, 0.2, 0.3, 0.5]), 0.7)
    assert abs(fit.margin) <= 1e-9
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)


def test_margin_closed_form_intersection():
    fit = fit_robustness_margin(_line(-0.5, 0.75, [0.2, 0.4, 0.6, 0.9]), 0.70)
    assert fit.margin == pytest.approx(0.10, abs=1e-9)


def test_margin_excludes_cycle_first_points():
    pts = _line(-0.5, 0.75, [0.2, 0.4, 0.6, 0.9, 1.1], first={0, 3})
    assert fit_robustness_margin(pts, 0.7).n_points == 3
    assert fit_robustness_margin(pts, 0.7, exclude_cycle_first=False).n_points == 5


def test_margin_degenerate_inputs():
    with pytest.raises(FitError):
        fit_robustness_margin(_line(-1.0, 0.5, [0.3, 0.3, 0.3]), 0.5)
    with pytest.raises(FitError):
        fit_robustness_margin(_line(0.0, 0.5, [0.1, 0.2, 0.3]), 0.6)
    with pytest.raises(FitError):
        fit_robustness_margin(_line(-1.0, 0.5, [0.1, 0.2], first={0}), 0.5)


# ---------------------------------------------------------------------------
# ablations


def test_batch_size_ablation_shape(setup, tiny_vocab):
    _, cache, scfg = setup
    rows = ablation_batch_size(cache, scfg, tiny_vocab, [16, 4], 16, quick())
    assert [r.batch_size for r in rows] == [16, 4]
    assert rows[1].batch_count / rows[0].batch_count == 4
    assert all(math.isfinite(r.final_val_loss) and r.wall_time_s >= 0 for r in rows)
    with pytest.raises(ConfigError):
        ablation_batch_size(cache, scfg, tiny_vocab, [16, 5], 16, quick())


def test_pooling_ablation_returns_both(setup, tiny_vocab):
    _, cache, scfg = setup
    out = ablation_pooling(cache, scfg, tiny_vocab, quick())
    assert set(out) == {"mean_final_val", "cls_final_val"}
    assert all(math.isfinite(v) for v in out.values())
    assert out["mean_final_val"] != out["cls_final_val"]


def test_lr_ablation_grid(setup, tiny_vocab):
    _, cache, scfg = setup
    rows = ablation_lr(cache, scfg, tiny_vocab, [8, 16], ["linear", "constant"], quick(), epochs=2)
    assert [(r.budget, r.schedule) for r in rows] == [(8, "linear"), (8, "constant"), (16, "linear"), (16, "constant")]
    assert rows[0].batches_per_epoch == 2
