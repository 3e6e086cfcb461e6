"""Experiment orchestration: source training, target finetuning, probes, ablations, reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .fdmp import read_sections, write_sections
from .metrics import SimilarityReport, cka, mmd_rbf, noise_probe, performance_spread, relative_cka
from .model import (CHANNELS, AdapterSpec, Backbone, CDFSSModel, dfn_specs, pretrain_backbone)
from .optim import SamConfig, make_optimizer
from .synthbench import (NEUTRAL, SHAPES, SamplePool, apply_style, episode_batch, get_domain, mean_miou,
                         paired_batches, render_geometry)
from .tensor import Tensor, matmul, no_grad, transpose

ABLATIONS = ("position", "structure", "sam-target", "usage", "fluc-by-adapter")
USAGE_MODES = ("remove-in-target", "scratch-kaiming", "scratch-xavier", "scratch-gaussian",
               "finetune-from-source")


class TrainingDiverged(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


# ---------------------------------------------------------------- adapters

def adapter_preset(name: str, init: str = "gaussian") -> list[AdapterSpec]:
    """Named adapter sets used by configs and ablation grids."""
    deep = AdapterSpec(init=init, position="backbone-deep")
    presets = {
        "none": [],
        "baseline": [],
        "dfn": dfn_specs(init),
        "deep": [deep],
        "backbone-deep": [deep],
        "conventional+res": [deep],
        "backbone-shallow": [AdapterSpec(init=init, position="backbone-shallow")],
        "between-enc-dec": [AdapterSpec(init=init, position="between-enc-dec")],
        "lora+res": [AdapterSpec(design="lora", init=init, position="backbone-deep")],
        "conventional+ser": [AdapterSpec(connection="serial", init=init, position="backbone-deep")],
    }
    if name not in presets:
        raise ValueError(f"unknown adapter preset {name!r}; known: {sorted(presets)}")
    return presets[name]


# ---------------------------------------------------------------- backbone cache

_BACKBONES: dict[tuple[int, int], Backbone] = {}


def _cache_dir() -> Path | None:
    d = os.environ.get("DFNLAB_CACHE")
    return Path(d) if d else None


def save_backbone(bb: Backbone, path) -> None:
    sections = {f"backbone.{k}": v for k, v in bb.weights.items()}
    sections["meta.pretext_accuracy"] = np.array([bb.pretext_accuracy if bb.pretext_accuracy is not None else -1.0])
    write_sections(path, sections)


def load_backbone(path) -> Backbone:
    sec = read_sections(path)
    bb = Backbone({k.split(".", 1)[1]: v for k, v in sec.items() if k.startswith("backbone.")})
    acc = float(sec.get("meta.pretext_accuracy", np.array([-1.0]))[0])
    bb.pretext_accuracy = None if acc < 0 else acc
    return bb


def get_backbone(seed: int, steps: int = 1000) -> Backbone:
    """Pretrained frozen backbone, memoised in-process and (optionally) on disk.

    Set ``DFNLAB_CACHE`` to a directory to keep pretrained weights across runs;
    pretraining is deterministic, so a cached copy is bit-identical.
    """
    key = (seed, steps)
    if key in _BACKBONES:
        return _BACKBONES[key]
    cache = _cache_dir()
    path = cache / f"backbone-s{seed}-n{steps}.ckpt" if cache else None
    if path is not None and path.exists():
        bb = load_backbone(path)
    else:
        bb = pretrain_backbone(seed, steps=steps)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_backbone(bb, path)
    _BACKBONES[key] = bb
    return bb


# ---------------------------------------------------------------- checkpoints

def save_model(model: CDFSSModel, path) -> None:
    sections = dict(model.state_dict())
    meta = json.dumps({"hidden": model.hidden, "adapters": [dataclasses.asdict(s) for s in model.specs]})
    sections["meta.json"] = np.frombuffer(meta.encode(), dtype=np.uint8).astype(np.float64)
    write_sections(path, sections)


def load_model(path) -> CDFSSModel:
    sec = read_sections(path)
    meta = json.loads(bytes(sec.pop("meta.json").astype(np.uint8)).decode())
    bb = Backbone({k.split(".", 1)[1]: v for k, v in sec.items() if k.startswith("backbone.")})
    specs = [AdapterSpec(**d) for d in meta["adapters"]]
    model = CDFSSModel(bb, specs, hidden=meta["hidden"])
    model.load_state_dict(sec)
    return model


# ---------------------------------------------------------------- reports

@dataclass
class RunReport:
    kind: str
    config: dict
    config_hash: str
    seeds: list[int]
    rows: list[dict] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    losses: dict[str, list[float]] = field(default_factory=dict)
    similarity: dict = field(default_factory=lambda: {"entries": []})
    summary: dict = field(default_factory=dict)
    wall_clock: dict = field(default_factory=dict)

    TIMING_FIELDS = ("wall_clock",)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls.from_dict(json.loads(text))

    def without_timing(self) -> dict:
        d = self.to_dict()
        for k in self.TIMING_FIELDS:
            d.pop(k, None)
        return d


def _new_report(kind: str, cfg: ExperimentConfig, seeds) -> RunReport:
    return RunReport(kind=kind, config=cfg.to_dict(), config_hash=cfg.config_hash(), seeds=[int(s) for s in seeds])


def _f(x) -> float:
    return float(np.round(float(x), 12))


# ---------------------------------------------------------------- source training

def _backbone_audit(bb: Backbone, expected: str, phase: str) -> None:
    bb._key = None
    if bb.checksum() != expected:
        raise FreezeViolation(f"backbone weights changed during {phase}")


def run_source_training(cfg: ExperimentConfig, seed: int, adapters: str | list | None = None,
                        sam_target: str | None = None, init_seed: int | None = None,
                        checkpoint=None) -> tuple[CDFSSModel, RunReport]:
    """Train head + navigators on source episodes; the backbone stays frozen.

    Data order and the sample pool depend only on ``seed``; parameter
    initialisation on ``init_seed`` (defaults to ``seed``).
    """
    t0 = time.perf_counter()
    bb = get_backbone(seed, cfg.pretrain_steps)
    specs = adapter_preset(adapters, cfg.init) if isinstance(adapters, str) else (
        adapter_preset(cfg.adapters, cfg.init) if adapters is None else list(adapters))
    target = cfg.sam_target if sam_target is None else sam_target
    model = CDFSSModel(bb, specs, seed=seed if init_seed is None else init_seed)
    key = bb.checksum()
    pool = SamplePool(get_domain(cfg.source_domain), cfg.pool_per_class, seed).attach(bb)
    opt = make_optimizer(model, cfg.source_lr, SamConfig(cfg.rho, target))
    rng = np.random.default_rng([seed, 9])
    epoch_losses: list[float] = []
    initial = None
    bad = 0
    for epoch in range(cfg.source_epochs):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = pool.episodes(cfg.batch_size, cfg.shots, rng)
            try:
                loss = opt.step(lambda: model.loss(batch))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite values in epoch {epoch}: {exc}") from exc
            if initial is None:
                initial = loss
            losses.append(loss)
        epoch_losses.append(float(np.mean(losses)))
        bad = bad + 1 if epoch_losses[-1] > cfg.divergence_factor * initial else 0
        if bad >= 3:
            raise TrainingDiverged(
                f"loss {epoch_losses[-1]:.4g} above {cfg.divergence_factor}x the initial {initial:.4g} "
                f"for 3 consecutive epochs (epoch {epoch})")
    _backbone_audit(bb, key, "source training")
    ev = model.attach_features(episode_batch(get_domain(cfg.source_domain), cfg.eval_episodes, cfg.shots,
                                             seed + 200))
    src_miou = mean_miou(model.predict(ev), ev.query_masks)
    if checkpoint is not None:
        save_model(model, checkpoint)
    rep = _new_report("train-source", cfg, [seed])
    rep.losses["source"] = [_f(x) for x in epoch_losses]
    rep.summary = {"source_miou": _f(src_miou), "adapters": [s.name for s in specs], "sam_target": target,
                   "init_seed": int(seed if init_seed is None else init_seed),
                   "backbone_checksum": key, "pretext_accuracy": bb.pretext_accuracy,
                   "freeze_audit": "passed"}
    rep.wall_clock = {"seconds": time.perf_counter() - t0}
    return model, rep


_MODELS: dict[tuple, tuple[CDFSSModel, RunReport]] = {}


def trained_model(cfg: ExperimentConfig, seed: int, variant: str, sam_target: str = "none",
                  init_seed: int | None = None) -> tuple[CDFSSModel, RunReport]:
    """Memoised run_source_training keyed by everything that determines the result."""
    key = (cfg.config_hash(), seed, variant, sam_target, init_seed)
    if key not in _MODELS:
        _MODELS[key] = run_source_training(cfg, seed, variant, sam_target, init_seed)
    model, rep = _MODELS[key]
    return model.clone(), rep


# ---------------------------------------------------------------- target finetune

def _snapshot(model: CDFSSModel) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def run_target_finetune(model: CDFSSModel, target: str, cfg: ExperimentConfig, seed: int,
                        k_shot: int | None = None, mode: str = "finetune-from-source",
                        iters: int | None = None) -> tuple[CDFSSModel, RunReport]:
    """Adapt only the navigators on a small labelled target pool, then evaluate.

    ``mode``: ``finetune-from-source`` (default), ``remove-in-target`` (residual
    navigators zeroed, no finetuning), ``zero-shot`` (source navigators, no
    finetuning) or ``scratch-<init>`` (navigators re-initialised, then finetuned).
    """
    t0 = time.perf_counter()
    k_shot = cfg.shots if k_shot is None else k_shot
    iters = cfg.finetune_iters if iters is None else iters
    spec = get_domain(target)
    model = model.clone()
    nav_keys = set(model.parameters("navigator"))
    before = _snapshot(model)
    rng = np.random.default_rng([seed, spec.key, 31])
    if mode == "remove-in-target":
        for nav in model.navigators.values():
            if nav.spec.connection != "residual":
                raise ValueError("remove-in-target needs residual navigators")
            for p in nav.params.values():
                p.data = np.zeros_like(p.data)
        iters = 0
    elif mode == "zero-shot":
        iters = 0
    elif mode.startswith("scratch-"):
        scheme = mode.split("-", 1)[1]
        for nav in model.navigators.values():
            nav.reinit(scheme, rng)
    elif mode != "finetune-from-source":
        raise ValueError(f"unknown finetune mode {mode!r}")
    start = _snapshot(model)

    losses = []
    if iters and nav_keys:
        ft_target = {"none": "none", "svn": "svn"}.get(cfg.sam_target, "dfn-only")
        if ft_target == "svn" and any(n.spec.design != "conventional" for n in model.navigators.values()):
            ft_target = "dfn-only"
        opt = make_optimizer(model, cfg.lr_for(target), SamConfig(cfg.rho, ft_target), group="navigator")
        pool = SamplePool(spec, cfg.finetune_pool, seed + 1000).attach(model.backbone)
        for _ in range(iters):
            batch = pool.episodes(cfg.batch_size, k_shot, rng)
            losses.append(opt.step(lambda: model.loss(batch)))

    after = _snapshot(model)
    changed = sorted(k for k in after if not np.array_equal(after[k], start[k]))
    illegal = [k for k in changed if k not in nav_keys]
    if illegal:
        raise FreezeViolation(f"non-navigator parameters changed during finetune: {illegal}")
    ev = model.attach_features(episode_batch(spec, cfg.eval_episodes, k_shot, seed + 2000))
    scores = [mean_miou(p[None], t[None]) for p, t in zip(model.predict(ev), ev.query_masks)]
    rep = _new_report("finetune", cfg, [seed])
    rep.losses["finetune"] = [_f(x) for x in losses]
    rep.summary = {"target": target, "shots": k_shot, "mode": mode, "iterations": iters,
                   "miou": _f(np.mean(scores)), "episode_miou": [_f(s) for s in scores],
                   "changed": changed, "nav_delta": _f(sum(np.abs(after[k] - before[k]).sum() for k in nav_keys)),
                   "freeze_audit": "passed"}
    rep.wall_clock = {"seconds": time.perf_counter() - t0}
    return model, rep


# ---------------------------------------------------------------- decoupling probe

def probe_populations(cfg: ExperimentConfig, seed: int, targets=None):
    """Paired source/target episode populations (same geometry, different style)."""
    targets = list(cfg.targets if targets is None else targets)
    src = get_domain(cfg.source_domain)
    renoised = dataclasses.replace(src, domain_id=src.domain_id + "~")
    specs = [src, renoised] + [get_domain(t) for t in targets]
    batches = paired_batches(specs, cfg.population, cfg.shots, seed + 100, classes=SHAPES)
    return batches[0], batches[1], dict(zip(targets, batches[2:]))


def decouple_probe(models: dict[str, CDFSSModel], cfg: ExperimentConfig, seed: int,
                   targets=None) -> SimilarityReport:
    """CKA at the deep backbone tap and the encoder tap, source vs each target, per model."""
    if cfg.population < 16:
        raise ValueError("population too small for a similarity probe (need >= 16)")
    src, src2, tgts = probe_populations(cfg, seed, targets)
    rep = SimilarityReport()
    for name, model in models.items():
        ts = model.taps(model.attach_features(src))
        ref = model.taps(model.attach_features(src2))
        for tap in ("backbone", "encoder"):
            rep.add(tap, "cka-self", cka(ts[tap], ref[tap]), (cfg.source_domain, cfg.source_domain + "~"),
                    seed, model=name)
        for tname, tb in tgts.items():
            tt = model.taps(model.attach_features(tb))
            for tap in ("backbone", "encoder"):
                value = cka(ts[tap], tt[tap])
                self_sim = rep.get(tap=tap, metric="cka-self", model=name)[0]["value"]
                rep.add(tap, "cka", value, (cfg.source_domain, tname), seed, model=name,
                        relative=_f(relative_cka(value, self_sim)))
                rep.add(tap, "mmd", max(mmd_rbf(ts[tap], tt[tap], unbiased=False), 0.0),
                        (cfg.source_domain, tname), seed, model=name)
    for e in rep.entries:
        e["value"] = _f(e["value"])
    return rep


def _cka(rep: SimilarityReport, model: str, tap: str, target: str) -> float:
    hits = [e for e in rep.entries if e["model"] == model and e["tap"] == tap and e["metric"] == "cka"
            and e["domains"][1] == target]
    return hits[0]["value"]


# ---------------------------------------------------------------- gradient separation

def domain_subspaces(backbone: Backbone, cfg: ExperimentConfig, seed: int, n: int = 48,
                     energy: float = 0.9) -> list[np.ndarray]:
    """Per-level projector onto the channel subspace spanned by the domain-specific feature part.

    The part is F(styled image) - F(unstyled base) over source renders; the
    projector keeps the leading principal directions holding ``energy`` of it.
    """
    spec = get_domain(cfg.source_domain)
    rng = np.random.default_rng([seed, 61])
    styled, plain = [], []
    for i in range(n):
        cls = spec.classes[i % len(spec.classes)]
        s = int(rng.integers(2 ** 31 - 1))
        base, mask = render_geometry(cls, s, spec)
        styled.append(apply_style(spec, base, s, mask))
        plain.append(apply_style(NEUTRAL, base, s))
    fs = backbone.tap_arrays(np.stack(styled))
    fp = backbone.tap_arrays(np.stack(plain))
    projs = []
    for a, b in zip(fs, fp):
        d = (a - b).transpose(0, 2, 3, 1).reshape(-1, a.shape[1])
        evals, evecs = np.linalg.eigh(d.T @ d)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        k = int(np.searchsorted(np.cumsum(evals) / max(evals.sum(), 1e-300), energy) + 1)
        basis = evecs[:, :k]
        projs.append(basis @ basis.T)
    return projs


def _encoder_grad(model: CDFSSModel, batch, tap_transform=None) -> np.ndarray:
    params = {k: p for k, p in model.head.items() if k.startswith("enc")}
    for p in model.parameters().values():
        p.grad = None
    model.loss(batch, tap_transform=tap_transform).backward()
    return np.concatenate([params[k].grad.ravel() for k in sorted(params)])


def gradient_separation(model: CDFSSModel, cfg: ExperimentConfig, seed: int, n_episodes: int = 32) -> dict:
    """Share of the encoder-parameter gradient driven by the domain-specific feature subspace.

    influence = |g(F) - g(P_inv F)| / |g(F)|, where g is the gradient of the
    source loss w.r.t. encoder parameters and P_inv removes the
    domain-specific channel subspace from every raw backbone tap.
    """
    projs = domain_subspaces(model.backbone, cfg, seed)
    batch = model.attach_features(episode_batch(get_domain(cfg.source_domain), n_episodes, cfg.shots, seed + 300))

    def remove_specific(level, feats):
        keep = Tensor(np.eye(CHANNELS[level]) - projs[level])
        x = transpose(feats, (0, 2, 3, 1))
        return transpose(matmul(x, keep), (0, 3, 1, 2))

    g_full = _encoder_grad(model, batch)
    g_inv = _encoder_grad(model, batch, remove_specific)
    for p in model.parameters().values():
        p.grad = None
    return {"influence": _f(np.linalg.norm(g_full - g_inv) / max(np.linalg.norm(g_full), 1e-300)),
            "subspace_dims": [int(round(np.trace(p))) for p in projs]}


# ---------------------------------------------------------------- sharpness

def _source_eval(model: CDFSSModel, cfg: ExperimentConfig, seed: int):
    return model.attach_features(episode_batch(get_domain(cfg.source_domain), cfg.eval_episodes, cfg.shots,
                                               seed + 400))


def noise_fluctuation(model: CDFSSModel, cfg: ExperimentConfig, seed: int) -> float:
    return noise_probe(model, _source_eval(model, cfg, seed), cfg.noise_trials, cfg.noise_sigma, seed)[0]


def reinit_spread(cfg: ExperimentConfig, group: int, sam_target: str, variant: str = "dfn",
                  targets=None) -> dict:
    """Best-minus-worst target mIoU over re-initialised source trainings.

    Data (pool, episode order, finetune and evaluation sets) is fixed by
    ``group``; trials differ only in the parameter-initialisation seed.
    """
    targets = list(cfg.targets if targets is None else targets)
    scores: dict[str, list[float]] = {t: [] for t in targets}
    for trial in range(cfg.reinit_trials):
        model, _ = trained_model(cfg, group, variant, sam_target, init_seed=10_000 + 100 * group + trial)
        for t in targets:
            _, rep = run_target_finetune(model, t, cfg, group)
            scores[t].append(rep.summary["miou"])
    spreads = {t: _f(performance_spread(v)) for t, v in scores.items()}
    return {"spread": spreads, "mean_spread": _f(np.mean(list(spreads.values()))),
            "scores": {t: [_f(x) for x in v] for t, v in scores.items()}}


# ---------------------------------------------------------------- ablations

POSITION_GRID = ("baseline", "backbone-shallow", "backbone-deep", "between-enc-dec")
STRUCTURE_GRID = ("baseline", "conventional+res", "lora+res", "conventional+ser")
SAM_GRID = (("dfn", "none"), ("enc+dec+dfn", "whole-model"), ("dfn-only", "dfn-only"), ("svn", "svn"))


def _signature_rows(kind: str, grid, cfg: ExperimentConfig, rep: RunReport) -> None:
    sim = SimilarityReport()
    for seed in cfg.seeds:
        models = {v: trained_model(cfg, seed, v)[0] for v in grid}
        for v in grid:
            rep.losses[f"{v}/seed{seed}"] = trained_model(cfg, seed, v)[1].losses["source"]
        probe = decouple_probe(models, cfg, seed)
        sim.entries.extend(probe.entries)
        for t in cfg.targets:
            b0, e0 = _cka(probe, "baseline", "backbone", t), _cka(probe, "baseline", "encoder", t)
            for v in grid:
                b, e = _cka(probe, v, "backbone", t), _cka(probe, v, "encoder", t)
                rep.records.append({"variant": v, "domain": t, "seed": seed, "cka_backbone": b, "cka_encoder": e,
                                    "delta_backbone": _f(b - b0), "delta_encoder": _f(e - e0),
                                    "backbone_down": bool(b < b0), "encoder_up": bool(e > e0)})
    rep.similarity = sim.to_dict()
    for v in grid:
        for t in cfg.targets:
            rs = [r for r in rep.records if r["variant"] == v and r["domain"] == t]
            rep.rows.append({
                "variant": v, "domain": t, "seeds": [r["seed"] for r in rs],
                "cka_backbone": _f(np.mean([r["cka_backbone"] for r in rs])),
                "cka_encoder": _f(np.mean([r["cka_encoder"] for r in rs])),
                "backbone_down": sum(r["backbone_down"] for r in rs),
                "encoder_up": sum(r["encoder_up"] for r in rs),
                "signature": sum(r["backbone_down"] and r["encoder_up"] for r in rs)})


def ablate(kind: str, cfg: ExperimentConfig) -> RunReport:
    if kind not in ABLATIONS:
        raise ValueError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")
    t0 = time.perf_counter()
    rep = _new_report(f"ablate-{kind}", cfg, cfg.seeds)
    if kind == "position":
        _signature_rows(kind, POSITION_GRID, cfg, rep)
    elif kind == "structure":
        _signature_rows(kind, STRUCTURE_GRID, cfg, rep)
    elif kind == "sam-target":
        for label, target in SAM_GRID:
            for seed in cfg.seeds:
                model, src = trained_model(cfg, seed, "dfn", target)
                rep.losses[f"{label}/seed{seed}"] = src.losses["source"]
                for t in cfg.targets:
                    _, ft = run_target_finetune(model, t, cfg, seed)
                    rep.records.append({"variant": label, "domain": t, "seed": seed, "miou": ft.summary["miou"]})
        _aggregate(rep, [l for l, _ in SAM_GRID], "miou")
    elif kind == "usage":
        for seed in cfg.seeds:
            model, src = trained_model(cfg, seed, "dfn", cfg.sam_target)
            rep.losses[f"dfn/seed{seed}"] = src.losses["source"]
            for mode in USAGE_MODES:
                for t in cfg.targets:
                    _, ft = run_target_finetune(model, t, cfg, seed, mode=mode)
                    rep.records.append({"variant": mode, "domain": t, "seed": seed, "miou": ft.summary["miou"]})
        _aggregate(rep, list(USAGE_MODES), "miou")
    else:  # fluc-by-adapter
        grid = list(dict.fromkeys(POSITION_GRID + STRUCTURE_GRID + ("dfn",)))
        for seed in cfg.seeds:
            for v in grid:
                model, src = trained_model(cfg, seed, v)
                rep.records.append({"variant": v, "domain": cfg.source_domain, "seed": seed,
                                    "loss_fluctuation": _f(noise_fluctuation(model, cfg, seed))})
        _aggregate(rep, grid, "loss_fluctuation", domains=[cfg.source_domain])
    rep.wall_clock = {"seconds": time.perf_counter() - t0}
    return rep


def _aggregate(rep: RunReport, variants, metric: str, domains=None) -> None:
    domains = list(rep.config["targets"]) if domains is None else domains
    for v in variants:
        for d in domains:
            vals = [r[metric] for r in rep.records if r["variant"] == v and r["domain"] == d]
            rep.rows.append({"variant": v, "domain": d, "seeds": [r["seed"] for r in rep.records
                                                                 if r["variant"] == v and r["domain"] == d],
                             metric: _f(np.mean(vals)), f"{metric}_median": _f(np.median(vals))})


# ---------------------------------------------------------------- emission

def _markdown(rep: RunReport) -> str:
    if not rep.rows:
        return f"## {rep.kind}\n\n" + "\n".join(f"- {k}: {v}" for k, v in rep.summary.items()) + "\n"
    variants = list(dict.fromkeys(r["variant"] for r in rep.rows))
    domains = list(dict.fromkeys(r["domain"] for r in rep.rows))
    metrics = [k for k in rep.rows[0] if k not in ("variant", "domain", "seeds") and isinstance(rep.rows[0][k], float)]
    lines = [f"## {rep.kind} (seeds {','.join(map(str, rep.seeds))}, config {rep.config_hash})", ""]
    for metric in metrics:
        lines += [f"### {metric}", "", "| variant | " + " | ".join(domains) + " | mean |",
                  "|---" * (len(domains) + 2) + "|"]
        for v in variants:
            vals = [next(r[metric] for r in rep.rows if r["variant"] == v and r["domain"] == d) for d in domains]
            lines.append(f"| {v} | " + " | ".join(f"{x:.4f}" for x in vals) + f" | {np.mean(vals):.4f} |")
        lines.append("")
    return "\n".join(lines)


def emit_report(reports, out_dir, formats=("json", "csv", "markdown")) -> list[Path]:
    """Write each report as <kind>.json / <kind>.csv / <kind>.md under out_dir."""
    if isinstance(reports, RunReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in reports:
        stem = out / rep.kind
        if "json" in formats:
            p = stem.with_suffix(".json")
            p.write_text(rep.to_json())
            written.append(p)
        if "csv" in formats:
            p = stem.with_suffix(".csv")
            rows = rep.rows or [dict(variant=rep.kind, domain="", **{k: v for k, v in rep.summary.items()
                                                                     if not isinstance(v, (list, dict))})]
            keys = list(dict.fromkeys(k for r in rows for k in r))
            with open(p, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                for r in rows:
                    w.writerow({k: (";".join(map(str, v)) if isinstance(v, list) else v) for k, v in r.items()})
            written.append(p)
        if "markdown" in formats:
            p = stem.with_suffix(".md")
            p.write_text(_markdown(rep))
            written.append(p)
    return written
