import csv
import json

import numpy as np
import pytest

from dfnlab import harness
from dfnlab.cli import main
from dfnlab.config import ExperimentConfig, dump_config
from dfnlab.fdmp import write_fdmp
from dfnlab.metrics import cka

TINY = ExperimentConfig(seeds=(0,), pretrain_steps=5, source_epochs=2, episodes_per_epoch=16, pool_per_class=6,
                        finetune_iters=2, finetune_pool=4, eval_episodes=2, population=16, noise_trials=3)


def test_adapter_presets():
    assert harness.adapter_preset("baseline") == []
    assert len(harness.adapter_preset("dfn")) == 3
    assert harness.adapter_preset("lora+res")[0].design == "lora"
    with pytest.raises(ValueError):
        harness.adapter_preset("everything")


def test_source_training_report():
    model, rep = harness.run_source_training(TINY, 0, "dfn")
    assert len(rep.losses["source"]) == 2
    assert 0.0 <= rep.summary["source_miou"] <= 1.0
    assert rep.summary["freeze_audit"] == "passed"
    back = harness.RunReport.from_json(rep.to_json())
    assert back.without_timing() == rep.without_timing()


def test_divergence_aborts(monkeypatch):
    class Exploding:
        def __init__(self):
            self.n = 0

        def step(self, loss_fn):
            self.n += 1
            return 1.0 if self.n == 1 else 100.0

    monkeypatch.setattr(harness, "make_optimizer", lambda *a, **k: Exploding())
    with pytest.raises(harness.TrainingDiverged):
        harness.run_source_training(TINY.with_overrides(source_epochs=4, episodes_per_epoch=8), 0, "dfn")


def test_finetune_modes_and_freeze_audit():
    model, _ = harness.trained_model(TINY, 0, "dfn")
    for mode in harness.USAGE_MODES + ("zero-shot",):
        tuned, rep = harness.run_target_finetune(model, "target-a", TINY, 0, mode=mode)
        assert set(rep.summary["changed"]) <= set(tuned.parameters("navigator"))
        assert len(rep.summary["episode_miou"]) == TINY.eval_episodes
    removed, _ = harness.run_target_finetune(model, "target-a", TINY, 0, mode="remove-in-target")
    assert all(not nav.alpha.data.any() for nav in removed.navigators.values())
    with pytest.raises(ValueError):
        harness.run_target_finetune(model, "target-a", TINY, 0, mode="distill")


def test_freeze_violation_detected(monkeypatch):
    model, _ = harness.trained_model(TINY, 0, "dfn")
    real = harness.make_optimizer

    def leaky(m, lr, cfg, group="all"):
        opt = real(m, lr, cfg, group)
        m.head["dec2.b"].data = m.head["dec2.b"].data + 1.0
        return opt

    monkeypatch.setattr(harness, "make_optimizer", leaky)
    with pytest.raises(harness.FreezeViolation):
        harness.run_target_finetune(model, "target-a", TINY, 0)


def test_trained_model_returns_independent_clones():
    a, _ = harness.trained_model(TINY, 0, "dfn")
    a.navigators["nav.deep2"].alpha.data[:] = 0.0
    b, _ = harness.trained_model(TINY, 0, "dfn")
    assert b.navigators["nav.deep2"].alpha.data.any()


def test_model_checkpoint_roundtrip(tmp_path):
    model, _ = harness.trained_model(TINY, 0, "lora+res")
    harness.save_model(model, tmp_path / "m.ckpt")
    back = harness.load_model(tmp_path / "m.ckpt")
    assert back.specs == model.specs
    sd, sd2 = model.state_dict(), back.state_dict()
    assert all(np.array_equal(sd[k], sd2[k]) for k in sd)


def test_between_position_leaves_backbone_cka_unchanged():
    models = {v: harness.trained_model(TINY, 0, v)[0] for v in ("baseline", "between-enc-dec")}
    rep = harness.decouple_probe(models, TINY, 0)
    for t in TINY.targets:
        assert harness._cka(rep, "between-enc-dec", "backbone", t) == harness._cka(rep, "baseline", "backbone", t)
    assert all(e["value"] >= 0 for e in rep.get(metric="mmd"))


def test_gradient_separation_and_sharpness_run():
    model, _ = harness.trained_model(TINY, 0, "dfn")
    res = harness.gradient_separation(model, TINY, 0, n_episodes=4)
    # the ratio is unbounded above: g(P_inv F) can be larger than g(F)
    assert np.isfinite(res["influence"]) and res["influence"] >= 0.0
    assert harness.noise_fluctuation(model, TINY, 0) > 0


def test_usage_ablation_emits_tables(tmp_path):
    rep = harness.ablate("usage", TINY)
    paths = harness.emit_report(rep, tmp_path)
    assert {p.suffix for p in paths} == {".json", ".csv", ".md"}
    with open(tmp_path / "ablate-usage.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(harness.USAGE_MODES) * len(TINY.targets)
    assert "| remove-in-target |" in (tmp_path / "ablate-usage.md").read_text()


def test_cli_measure(tmp_path, capsys):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((12, 4, 2, 2))
    write_fdmp(tmp_path / "a.fdmp", a)
    write_fdmp(tmp_path / "b.fdmp", 2.0 * a)
    assert main(["measure", "--from-dumps", str(tmp_path / "a.fdmp"), str(tmp_path / "b.fdmp"),
                 "--metric", "cka"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == pytest.approx(1.0) and out["n"] == 12
    assert cka(a.mean(axis=(2, 3)), a.mean(axis=(2, 3))) == pytest.approx(1.0)


def test_cli_export_and_config(tmp_path, capsys):
    assert main(["synthbench", "export", "--domain", "target-c", "--n", "2", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "manifest.json").exists()
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(dump_config(TINY))
    assert main(["train-source", "--config", str(cfg), "--adapters", "deep", "--out", str(tmp_path / "r")]) == 0
    ckpt = tmp_path / "r" / "model-s0.ckpt"
    assert ckpt.exists()
    assert main(["finetune", "--config", str(cfg), "--checkpoint", str(ckpt), "--target", "target-b",
                 "--out", str(tmp_path / "f")]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{")]
    assert lines[-1]["target"] == "target-b" and lines[-1]["freeze_audit"] == "passed"
    assert main(["report", "--in", str(tmp_path / "f"), "--out", str(tmp_path / "g")]) == 0


def test_cli_rejects_unknown_kind():
    with pytest.raises(SystemExit):
        main(["ablate", "--kind", "everything"])


def test_position_grid_covers_every_cell():
    cfg = TINY.with_overrides(seeds=(0, 1))
    rep = harness.ablate("position", cfg)
    cells = {(r["variant"], r["domain"], r["seed"]) for r in rep.records}
    assert cells == {(v, t, s) for v in harness.POSITION_GRID for t in cfg.targets for s in cfg.seeds}
    assert all(r["seeds"] == [0, 1] for r in rep.rows)


# full-size runs below reuse the models memoised by the acceptance tests in the same session
FULL = ExperimentConfig()


@pytest.mark.slow
def test_source_loss_falls_over_the_first_epochs():
    curves = np.array([harness.trained_model(FULL, s, "backbone-deep")[1].losses["source"][:5] for s in FULL.seeds])
    assert np.all(np.diff(np.median(curves, axis=0)) < 0)


@pytest.mark.slow
def test_finetuning_does_not_lose_to_zero_shot():
    for t in FULL.targets:
        tuned, zero = [], []
        for s in FULL.seeds:
            model, _ = harness.trained_model(FULL, s, "dfn", FULL.sam_target)
            tuned.append(harness.run_target_finetune(model, t, FULL, s)[1].summary["miou"])
            zero.append(harness.run_target_finetune(model, t, FULL, s, mode="zero-shot")[1].summary["miou"])
        assert np.median(tuned) >= np.median(zero), t


@pytest.mark.slow
def test_probe_reports_four_values_per_domain_and_model():
    models = {v: harness.trained_model(FULL, 0, v)[0] for v in ("baseline", "backbone-deep")}
    rep = harness.decouple_probe(models, FULL, 0)
    for v in models:
        for t in FULL.targets:
            hits = [e for e in rep.entries if e["model"] == v and tuple(e["domains"]) == (FULL.source_domain, t)]
            assert sorted((e["tap"], e["metric"]) for e in hits) == [
                ("backbone", "cka"), ("backbone", "mmd"), ("encoder", "cka"), ("encoder", "mmd")]
