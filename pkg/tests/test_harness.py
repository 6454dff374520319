import json
import math

import numpy as np
import pytest

import vmfprobe.harness as H
from oracles import reference_numbers
from vmfprobe import checkpoint
from vmfprobe.data import CORRUPTIONS, CorruptionSpec, full_manifest, generate_dataset
from vmfprobe.evaluation import InsufficientGroup
from vmfprobe.losses import LossBreakdown
from vmfprobe.model import EncoderConfig, embed, init

TINY = dict(epochs=3, classes=3, n_per_class=8, batch_size=8, trunk_widths=[16], embed_dim=4, head_width=4)


def tiny(**kw) -> H.TrainConfig:
    return H.TrainConfig(**{**TINY, **kw})


def test_config_defaults_match_reference_values():
    (lam_r,) = reference_numbers(r"kappa_reg_strength = ([\d.]+)")
    (lam_a,) = reference_numbers(r"align_strength = ([\d.]+)")
    (tau,) = reference_numbers(r"temperature=([\d.]+)")
    c = H.TrainConfig()
    assert (c.lambda_align, c.lambda_reg, c.temperature) == (lam_a, lam_r, tau) == (0.05, 0.005, 0.5)
    assert (c.optimizer, c.learning_rate, c.batch_size, c.epochs) == ("adam", 1e-3, 128, 200)
    assert c.classes * c.n_per_class == 2000


@pytest.mark.parametrize(
    "bad",
    [
        {"batch_size": 1},
        {"epochs": 0},
        {"method": "bayes"},
        {"optimizer": "rmsprop"},
        {"learning_rate": 0.0},
        {"lambda_reg": -1.0},
        {"temperature": 0.0},
        {"version": 2},
        {"augment": {"nope": 1}},
    ],
)
def test_config_validation(bad):
    with pytest.raises(H.ConfigError):
        H.TrainConfig(**bad)


def test_config_from_dict(tmp_path):
    with pytest.raises(H.ConfigError, match="version"):
        H.TrainConfig.from_dict({"epochs": 3})
    with pytest.raises(H.ConfigError, match="unknown"):
        H.TrainConfig.from_dict({"version": 1, "epoch": 3})
    c = tiny(seed=4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(c.to_dict()))
    assert H.TrainConfig.from_json(path) == c
    path.write_text("{not json")
    with pytest.raises(H.ConfigError):
        H.TrainConfig.from_json(path)


def test_training_is_deterministic(tmp_path):
    a = H.train(tiny(), tmp_path / "a")
    b = H.train(tiny(), tmp_path / "b")
    assert [p.total for p in a.losses] == [p.total for p in b.losses]
    assert (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.run_id == b.run_id != H.train(tiny(seed=1)).run_id
    assert all(math.isfinite(p.total) for p in a.losses)
    assert all(abs(p.total - (p.align + p.reg + p.contrastive)) < 1e-12 for p in a.losses)


def test_checkpoints_at_interval(tmp_path):
    rec = H.train(tiny(epochs=4, checkpoint_every=2), tmp_path)
    names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert names == ["epoch_0002.ckpt", "epoch_0004.ckpt", "final.ckpt", "last_good.ckpt"]
    assert np.array_equal(checkpoint.load(rec.checkpoint).flat(), rec.encoder.flat())
    assert (tmp_path / "losses.csv").read_text().count("\n") == 5


def test_other_methods_train(tmp_path):
    mc = H.train(tiny(method="mc_infonce", mc_samples=2, epochs=2))
    assert mc.losses[-1].align == 0.0 and mc.losses[-1].reg > 0
    det = H.train(tiny(method="deterministic", epochs=2))
    assert det.losses[-1].align == det.losses[-1].reg == 0.0
    sgd = H.train(tiny(optimizer="sgd", epochs=2))
    assert math.isfinite(sgd.losses[-1].total)


def test_deterministic_method_never_touches_kappa_head():
    rec = H.train(tiny(method="deterministic", epochs=2))
    fresh = init(rec.encoder.config)
    names = rec.encoder.names
    for i, name in enumerate(names):
        same = np.array_equal(rec.encoder.params[i], fresh.params[i])
        assert same == name.startswith("kappa_head"), name


def test_nan_aborts_and_keeps_last_good(tmp_path, monkeypatch):
    real = H.step_loss
    calls = {"n": 0}

    def flaky(encoder, config, x1, x2, rng):
        loss, parts, leaves, tape = real(encoder, config, x1, x2, rng)
        calls["n"] += 1
        if calls["n"] > 9:  # 3 steps per epoch: fails in epoch 4
            parts = LossBreakdown(math.nan, parts.reg, parts.contrastive, math.nan, parts.hyper)
        return loss, parts, leaves, tape

    monkeypatch.setattr(H, "step_loss", flaky)
    with pytest.raises(H.NumericalAbort) as info:
        H.train(tiny(epochs=6, checkpoint_every=3), tmp_path)
    last = info.value.last_good
    assert last is not None and last.name == "epoch_0003.ckpt"
    assert checkpoint.load(last).config.embed_dim == 4
    assert (tmp_path / "checkpoints" / "last_good.ckpt").exists()
    assert not (tmp_path / "checkpoints" / "final.ckpt").exists()


def test_corruption_report_on_untrained_encoder():
    enc = init(EncoderConfig(16 * 16 * 3, trunk_widths=(32,), embed_dim=8, head_width=8))
    test = generate_dataset(4, 3, 1)
    rep = H.evaluate_corruption_correlation(enc, test, full_manifest(), seed=0)
    assert set(rep.spearman_by_corruption) == set(CORRUPTIONS)
    assert all(math.isfinite(v) for v in rep.mean_kappa_by_severity.values())
    clean = float(np.mean(embed(enc, test.images.astype(np.float64))[1]))
    for kind in CORRUPTIONS:
        assert rep.mean_kappa_by_severity[(kind, 0)] == clean
    assert rep.meta["severity_levels"].startswith("0..5")


def test_baseline_reports():
    enc = init(EncoderConfig(16 * 16 * 3, trunk_widths=(32,), embed_dim=8, head_width=8, dropout=0.1))
    test = generate_dataset(3, 3, 1)
    manifest = [CorruptionSpec("contrast", s) for s in range(6)]
    rep = H.evaluate_corruption_baseline(
        lambda x: H.mc_dropout_uncertainty(enc, x, passes=4), test, manifest, "mc_dropout"
    )
    assert set(rep.spearman_by_corruption) == {"contrast"} and rep.meta["score"] == "mc_dropout"
    ens = [init(EncoderConfig(768, trunk_widths=(32,), embed_dim=8, head_width=8, seed=s)) for s in range(3)]
    rep = H.evaluate_corruption_baseline(lambda x: H.ensemble_uncertainty(ens, x), test, manifest, "ensemble")
    assert all(v >= 0 for v in rep.mean_kappa_by_severity.values())
    with pytest.raises(H.ConfigError):
        H.mc_dropout_uncertainty(ens[0], test.images)


def test_ood_null_report_shape():
    enc = init(EncoderConfig(768, trunk_widths=(32,), embed_dim=8, head_width=8))
    rep = H.evaluate_ood(enc, generate_dataset(10, 3, 1), generate_dataset(5, 3, 2, domain="out"))
    assert set(rep.auroc) == {"features", "kappa", "features+kappa"}
    assert rep.summary["n_in"] == 15 and rep.summary["n_out"] == 15


def test_failure_analysis_skips_perfect_probe(monkeypatch):
    enc = init(EncoderConfig(768, trunk_widths=(32,), embed_dim=8, head_width=8))
    labeled = generate_dataset(10, 3, 1)
    monkeypatch.setattr(H.E, "knn_predict", lambda fp, labels, ft, k: labeled.labels[1::2])
    rep = H.evaluate_failure_analysis(enc, labeled)
    assert rep.meta["status"] == "skipped: empty misclassified group"
    assert rep.summary["n_wrong"] == 0 and rep.summary["n_correct"] == 15
    assert rep.mw_p_values == []


def test_failure_analysis_small_group_error():
    enc = init(EncoderConfig(768, trunk_widths=(32,), embed_dim=8, head_width=8))
    with pytest.raises(InsufficientGroup, match="lower draw"):
        H.evaluate_failure_analysis(enc, generate_dataset(10, 3, 1, difficulty=1.0))


def test_gradient_report_small():
    rep = H.gradient_report(trials=5)
    assert max(rep["finite_difference_max_rel_error"].values()) <= 1e-4
    assert max(rep["closed_form_max_rel_error"].values()) <= 1e-9


@pytest.mark.slow
def test_default_training_reduces_loss(trained_default):
    first, last = trained_default.losses[0], trained_default.losses[-1]
    assert len(trained_default.losses) == 200
    assert last.total < first.total


@pytest.mark.slow
def test_report_from_early_checkpoint(trained_default):
    early = checkpoint.load(trained_default.checkpoint.parent / "epoch_0050.ckpt")
    rep = H.evaluate_corruption_correlation(early, generate_dataset(5, 10, 1, difficulty=0.5), full_manifest())
    assert len(rep.spearman_by_corruption) == 6
