"""Seeded two-domain few-shot segmentation benchmark.

Images are a single foreground shape on a flat background, then passed through a
domain style: ``scale * (base + texture + tint * mask) + shift + noise``.  The style is the
whole domain-specific component and it is additive in image space, so the same
geometry can be rendered under any domain.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
SHAPES = ("disk", "rectangle", "triangle", "annulus", "cross")


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    classes: tuple[str, ...]
    channel_scale: tuple[float, float, float] = (1.0, 1.0, 1.0)
    channel_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    texture_amp: float = 0.0
    texture_freq: tuple[float, float] = (1.0, 1.0)
    texture_phase: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise_std: float = 0.02
    foreground_tint: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius_range: tuple[float, float] = (5.0, 9.0)
    center_range: tuple[float, float] = (10.0, 22.0)
    pixel_range: tuple[int, int] = (20, 320)

    def __post_init__(self):
        if any(abs(s) < 0.1 for s in self.channel_scale):
            raise ValueError("channel scales must stay away from zero")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shape classes {sorted(unknown)}")

    @property
    def key(self) -> int:
        return zlib.crc32(self.domain_id.encode())

    def texture(self) -> np.ndarray:
        """The fixed low-frequency additive field, shape (3, 32, 32)."""
        yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] / IMAGE_SIZE
        fx, fy = self.texture_freq
        base = 2 * np.pi * (fx * xx + fy * yy)
        return self.texture_amp * np.stack([np.sin(base + ph) for ph in self.texture_phase])


NEUTRAL = DomainSpec("neutral", SHAPES, noise_std=0.02)

DOMAINS: dict[str, DomainSpec] = {
    "neutral": NEUTRAL,
    "source": DomainSpec(
        "source", ("disk", "rectangle", "triangle"),
        channel_scale=(1.0, 0.85, 0.7), channel_shift=(0.05, 0.0, -0.05),
        texture_amp=0.3, texture_freq=(2.0, 1.0), texture_phase=(0.0, 1.0, 2.0),
        noise_std=0.03),
    "target-a": DomainSpec(
        "target-a", ("annulus", "cross"),
        channel_scale=(0.7, 0.9, 1.1), channel_shift=(0.1, 0.0, 0.0),
        texture_amp=0.35, texture_freq=(0.0, 5.0), texture_phase=(0.5, 0.5, 0.5),
        noise_std=0.05),
    "target-b": DomainSpec(
        "target-b", ("annulus", "cross"),
        channel_scale=(0.6, 0.6, 0.6), channel_shift=(0.25, 0.25, 0.25),
        texture_amp=0.2, texture_freq=(1.0, 3.0), texture_phase=(0.0, 0.0, 0.0),
        noise_std=0.08),
    "target-c": DomainSpec(
        "target-c", ("annulus", "cross"),
        channel_scale=(1.2, 0.8, 0.8), channel_shift=(-0.1, 0.05, 0.05),
        texture_amp=0.25, texture_freq=(4.0, 4.0), texture_phase=(0.0, 2.0, 4.0),
        noise_std=0.04),
}
TARGETS = ("target-a", "target-b", "target-c")


def get_domain(name: str) -> DomainSpec:
    try:
        return DOMAINS[name]
    except KeyError:
        raise ValueError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}") from None


# ---------------------------------------------------------------- geometry

def _raster(shape: str, cx: float, cy: float, r: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        m = dx ** 2 + dy ** 2 <= r ** 2
    elif shape == "annulus":
        d2 = dx ** 2 + dy ** 2
        m = (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    elif shape == "rectangle":
        hw, hh = r, r * rng.uniform(0.5, 1.0)
        if rng.random() < 0.5:
            hw, hh = hh, hw
        m = (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
    elif shape == "triangle":
        theta = rng.uniform(0, 2 * np.pi)
        verts = [(cx + r * np.cos(theta + k * 2 * np.pi / 3), cy + r * np.sin(theta + k * 2 * np.pi / 3))
                 for k in range(3)]
        m = np.ones_like(xx, dtype=bool)
        for k in range(3):
            (x0, y0), (x1, y1) = verts[k], verts[(k + 1) % 3]
            m &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    elif shape == "cross":
        w = r / 2.6
        m = ((np.abs(dx) <= r) & (np.abs(dy) <= w)) | ((np.abs(dy) <= r) & (np.abs(dx) <= w))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float64)


def render_geometry(shape: str, seed: int, spec: DomainSpec = NEUTRAL) -> tuple[np.ndarray, np.ndarray]:
    """Unstyled base image (3, 32, 32) and mask (32, 32) for one shape instance.

    Only the geometry ranges of ``spec`` are used, so any domain can restyle it.
    """
    rng = np.random.default_rng([seed, zlib.crc32(shape.encode())])
    lo, hi = spec.pixel_range
    for _ in range(200):
        cx, cy = rng.uniform(*spec.center_range, size=2)
        r = rng.uniform(*spec.radius_range)
        mask = _raster(shape, cx, cy, r, rng)
        if lo <= mask.sum() <= hi:
            break
    else:
        raise RuntimeError("could not place a shape inside the pixel range")
    fg = rng.uniform(0.65, 1.0, size=3)
    base = np.where(mask[None] > 0, fg[:, None, None], 0.3)
    return base, mask


def _tint(spec: DomainSpec, mask) -> np.ndarray:
    if mask is None:
        return 0.0
    return np.asarray(spec.foreground_tint)[:, None, None] * np.asarray(mask)[None]


def apply_style(spec: DomainSpec, base: np.ndarray, seed: int, mask=None) -> np.ndarray:
    rng = np.random.default_rng([seed, spec.key])
    scale = np.asarray(spec.channel_scale)[:, None, None]
    shift = np.asarray(spec.channel_shift)[:, None, None]
    noise = spec.noise_std * rng.standard_normal(base.shape)
    return scale * (base + spec.texture() + _tint(spec, mask)) + shift + noise


def domain_component(spec: DomainSpec, base: np.ndarray, mask=None) -> np.ndarray:
    """The exact additive domain-specific part of a styled image (noise excluded)."""
    scale = np.asarray(spec.channel_scale)[:, None, None]
    shift = np.asarray(spec.channel_shift)[:, None, None]
    return (scale - 1.0) * base + scale * (spec.texture() + _tint(spec, mask)) + shift


def render_sample(spec: DomainSpec, class_id: str, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Styled image (3, 32, 32) and binary mask (32, 32)."""
    if class_id not in spec.classes:
        raise ValueError(f"class {class_id!r} not in domain {spec.domain_id!r}")
    base, mask = render_geometry(class_id, seed, spec)
    return apply_style(spec, base, seed, mask), mask


# ---------------------------------------------------------------- episodes

@dataclass
class Episode:
    support_images: np.ndarray   # (K, 3, H, W)
    support_masks: np.ndarray    # (K, H, W)
    query_image: np.ndarray      # (3, H, W)
    query_mask: np.ndarray       # (H, W)
    domain_id: str
    class_id: str
    seeds: tuple[int, ...] = field(default=())

    def __post_init__(self):
        k = self.support_images.shape[0]
        if not 1 <= k <= 5:
            raise ValueError(f"episodes carry 1..5 supports, got {k}")
        for m in (self.support_masks, self.query_mask):
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("masks must be binary")

    @property
    def shots(self) -> int:
        return self.support_images.shape[0]

    @property
    def support(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.support_images, self.support_masks))


def sample_episode(spec: DomainSpec, k_shot: int, seed: int, class_id: str | None = None) -> Episode:
    if k_shot not in (1, 5):
        raise ValueError("k_shot must be 1 or 5")
    rng = np.random.default_rng([seed, spec.key, 7])
    cls = class_id if class_id is not None else spec.classes[rng.integers(len(spec.classes))]
    seeds = rng.choice(2 ** 31 - 1, size=k_shot + 1, replace=False)
    renders = [render_sample(spec, cls, int(s)) for s in seeds]
    imgs = np.stack([r[0] for r in renders])
    masks = np.stack([r[1] for r in renders])
    return Episode(imgs[:k_shot], masks[:k_shot], imgs[k_shot], masks[k_shot],
                   spec.domain_id, cls, tuple(int(s) for s in seeds))


@dataclass
class EpisodeBatch:
    support_images: np.ndarray   # (B, K, 3, H, W)
    support_masks: np.ndarray    # (B, K, H, W)
    query_images: np.ndarray     # (B, 3, H, W)
    query_masks: np.ndarray      # (B, H, W)
    # optional cached backbone taps: (backbone checksum, [(support, query) per level])
    features: tuple | None = None

    @classmethod
    def from_episodes(cls, episodes) -> "EpisodeBatch":
        return cls(np.stack([e.support_images for e in episodes]),
                   np.stack([e.support_masks for e in episodes]),
                   np.stack([e.query_image for e in episodes]),
                   np.stack([e.query_mask for e in episodes]))

    def __len__(self) -> int:
        return self.query_images.shape[0]

    def subset(self, idx) -> "EpisodeBatch":
        feats = None
        if self.features is not None:
            key, levels = self.features
            feats = (key, [(fs[idx], fq[idx]) for fs, fq in levels])
        return EpisodeBatch(self.support_images[idx], self.support_masks[idx],
                            self.query_images[idx], self.query_masks[idx], feats)


class SamplePool:
    """A finite labelled set of renders for one domain, grouped by class."""

    def __init__(self, spec: DomainSpec, per_class: int, seed: int):
        self.spec = spec
        self.images: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        rng = np.random.default_rng([seed, spec.key, 11])
        for cls in spec.classes:
            seeds = rng.choice(2 ** 31 - 1, size=per_class, replace=False)
            rs = [render_sample(spec, cls, int(s)) for s in seeds]
            self.images[cls] = np.stack([r[0] for r in rs])
            self.masks[cls] = np.stack([r[1] for r in rs])
        self.feature_key: str | None = None
        self.feats: dict[str, list[np.ndarray]] = {}

    def attach(self, backbone) -> "SamplePool":
        """Precompute frozen backbone taps so sampled batches carry them."""
        key = backbone.checksum()
        if key != self.feature_key:
            self.feats = {cls: backbone.tap_arrays(imgs) for cls, imgs in self.images.items()}
            self.feature_key = key
        return self

    def episodes(self, n: int, k_shot: int, rng: np.random.Generator) -> EpisodeBatch:
        classes = self.spec.classes
        si, sm, qi, qm, picks = [], [], [], [], []
        for _ in range(n):
            cls = classes[rng.integers(len(classes))]
            pick = rng.choice(len(self.images[cls]), size=k_shot + 1, replace=False)
            picks.append((cls, pick))
            si.append(self.images[cls][pick[:k_shot]])
            sm.append(self.masks[cls][pick[:k_shot]])
            qi.append(self.images[cls][pick[k_shot]])
            qm.append(self.masks[cls][pick[k_shot]])
        feats = None
        if self.feature_key is not None:
            levels = []
            for l in range(len(next(iter(self.feats.values())))):
                fs = np.stack([self.feats[c][l][p[:k_shot]] for c, p in picks])
                fq = np.stack([self.feats[c][l][p[k_shot]] for c, p in picks])
                levels.append((fs, fq))
            feats = (self.feature_key, levels)
        return EpisodeBatch(np.stack(si), np.stack(sm), np.stack(qi), np.stack(qm), feats)


def episode_batch(spec: DomainSpec, n: int, k_shot: int, seed: int) -> EpisodeBatch:
    """``n`` fresh episodes (seeds derived from ``seed``) stacked into a batch."""
    seeds = np.random.default_rng([seed, spec.key, 3]).choice(2 ** 31 - 1, size=n, replace=False)
    return EpisodeBatch.from_episodes([sample_episode(spec, k_shot, int(s)) for s in seeds])


def paired_batches(specs: list[DomainSpec], n: int, k_shot: int, seed: int,
                   classes: tuple[str, ...] = SHAPES) -> list[EpisodeBatch]:
    """The same episode geometry rendered under each domain style, row for row."""
    rng = np.random.default_rng([seed, 5])
    out: list[dict[str, list]] = [dict(si=[], sm=[], qi=[], qm=[]) for _ in specs]
    for _ in range(n):
        cls = classes[rng.integers(len(classes))]
        seeds = rng.choice(2 ** 31 - 1, size=k_shot + 1, replace=False)
        geoms = [render_geometry(cls, int(s)) for s in seeds]
        for spec, acc in zip(specs, out):
            imgs = np.stack([apply_style(spec, b, int(s), m) for (b, m), s in zip(geoms, seeds)])
            masks = np.stack([m for _, m in geoms])
            acc["si"].append(imgs[:k_shot])
            acc["sm"].append(masks[:k_shot])
            acc["qi"].append(imgs[k_shot])
            acc["qm"].append(masks[k_shot])
    return [EpisodeBatch(*(np.stack(acc[k]) for k in ("si", "sm", "qi", "qm"))) for acc in out]


# ---------------------------------------------------------------- metrics

def miou(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Binary mIoU: mean of foreground and background IoU; an empty union scores 1."""
    p = np.asarray(pred_mask).astype(bool)
    t = np.asarray(true_mask).astype(bool)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    ious = []
    for a, b in ((p, t), (~p, ~t)):
        union = np.logical_or(a, b).sum()
        ious.append(1.0 if union == 0 else np.logical_and(a, b).sum() / union)
    return float(np.mean(ious))


def mean_miou(preds: np.ndarray, trues: np.ndarray) -> float:
    return float(np.mean([miou(p, t) for p, t in zip(preds, trues)]))


# ---------------------------------------------------------------- export

def export(spec: DomainSpec, n: int, out_dir, seed: int = 0) -> Path:
    """Write n image/mask pairs as FDMP files plus a JSON manifest."""
    from .fdmp import write_fdmp

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, spec.key, 13])
    items = []
    for i in range(n):
        cls = spec.classes[rng.integers(len(spec.classes))]
        s = int(rng.integers(2 ** 31 - 1))
        img, mask = render_sample(spec, cls, s)
        write_fdmp(out / f"{i:05d}_image.fdmp", img)
        write_fdmp(out / f"{i:05d}_mask.fdmp", mask)
        items.append({"index": i, "class_id": cls, "seed": s,
                      "image": f"{i:05d}_image.fdmp", "mask": f"{i:05d}_mask.fdmp"})
    manifest = {"domain": asdict(spec), "seed": seed, "items": items}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
