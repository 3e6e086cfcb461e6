"""Few-shot segmentation model with pluggable adapters.

Pipeline for one episode: frozen backbone features at three tap levels, support
masking, navigated features (adapter), ReLU'd cosine correlation between every
query and support position, a small encoder over the correlation pyramid and a
2D decoder producing query-resolution logits.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .synthbench import IMAGE_SIZE, NEUTRAL, SHAPES, EpisodeBatch, Episode, render_sample
from .tensor import Tensor, no_grad

CHANNELS = (8, 16, 32)
HIDDEN = 16
DESIGNS = ("conventional", "lora")
CONNECTIONS = ("residual", "serial")
POSITIONS = ("backbone-shallow", "backbone-deep", "between-enc-dec")
INITS = ("gaussian", "zero", "kaiming", "xavier")


@dataclass(frozen=True)
class AdapterSpec:
    design: str = "conventional"
    connection: str = "residual"
    position: str = "backbone-deep"
    init: str = "gaussian"
    rank: int = 4
    level: int | None = None  # tap level for backbone-deep; None means the deepest

    def __post_init__(self):
        for value, allowed in ((self.design, DESIGNS), (self.connection, CONNECTIONS),
                               (self.position, POSITIONS), (self.init, INITS)):
            if value not in allowed:
                raise ValueError(f"{value!r} not one of {allowed}")

    @property
    def tap(self) -> int:
        if self.position == "backbone-shallow":
            return 0
        return len(CHANNELS) - 1 if self.level is None else self.level

    @property
    def name(self) -> str:
        if self.position == "backbone-shallow":
            return "nav.shallow"
        if self.position == "between-enc-dec":
            return "nav.encdec"
        return f"nav.deep{self.tap}"


def dfn_specs(init: str = "gaussian") -> list[AdapterSpec]:
    """Residual 1x1 navigators on every tap level (the full method)."""
    return [AdapterSpec(level=l, init=init) for l in range(len(CHANNELS))]


def _init_weight(shape, scheme: str, rng: np.random.Generator) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    fan_out = shape[0] * int(np.prod(shape[2:]))
    if scheme == "zero":
        return np.zeros(shape)
    if scheme == "gaussian":
        return 1e-2 * rng.standard_normal(shape)
    if scheme == "kaiming":
        return np.sqrt(2.0 / fan_in) * rng.standard_normal(shape)
    if scheme == "xavier":
        return np.sqrt(2.0 / (fan_in + fan_out)) * rng.standard_normal(shape)
    raise ValueError(f"unknown init {scheme!r}")


class Navigator:
    """A 1x1 adapter N(F); residual connection gives F + N(F), serial gives N(F)."""

    def __init__(self, spec: AdapterSpec, channels: int, rng: np.random.Generator):
        self.spec = spec
        self.channels = channels
        self.params: dict[str, Tensor] = {}
        self.reinit(spec.init, rng)

    def reinit(self, scheme: str, rng: np.random.Generator) -> None:
        c = self.channels
        if self.spec.design == "conventional":
            self.params = {"alpha": Tensor(_init_weight((c, c, 1, 1), scheme, rng), requires_grad=True)}
        else:
            r = self.spec.rank
            if not 0 < r < c:
                raise ValueError(f"LoRA rank {r} must be in (0, {c})")
            self.params = {"down": Tensor(_init_weight((r, c, 1, 1), scheme, rng), requires_grad=True),
                           "up": Tensor(_init_weight((c, r, 1, 1), scheme, rng), requires_grad=True)}

    @property
    def alpha(self) -> Tensor:
        if self.spec.design != "conventional":
            raise AttributeError("only conventional navigators carry a single alpha")
        return self.params["alpha"]

    def effective_weight(self) -> np.ndarray:
        if self.spec.design == "conventional":
            return self.params["alpha"].data
        up = self.params["up"].data[:, :, 0, 0]
        down = self.params["down"].data[:, :, 0, 0]
        return (up @ down)[:, :, None, None]

    def __call__(self, feats: Tensor) -> Tensor:
        if self.spec.design == "conventional":
            out = T.conv1x1(feats, self.params["alpha"])
        else:
            out = T.conv1x1(T.conv1x1(feats, self.params["down"]), self.params["up"])
        return feats + out if self.spec.connection == "residual" else out


def navigate(feats: Tensor, nav: Navigator) -> Tensor:
    if feats.shape[-3] != nav.channels:
        raise ValueError(f"feature channels {feats.shape[-3]} != navigator channels {nav.channels}")
    return nav(feats)


# ---------------------------------------------------------------- backbone

class Backbone:
    """Three conv3x3 + ReLU + 2x2 avg-pool stages; frozen after pretraining."""

    def __init__(self, weights: dict[str, np.ndarray]):
        self.weights = {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
        self.pretext_accuracy: float | None = None
        self._key: str | None = None

    @classmethod
    def random(cls, seed: int) -> "Backbone":
        rng = np.random.default_rng([seed, 101])
        w, cin = {}, 3
        for i, c in enumerate(CHANNELS):
            w[f"w{i}"] = np.sqrt(2.0 / (cin * 9)) * rng.standard_normal((c, cin, 3, 3))
            w[f"b{i}"] = np.zeros(c)
            cin = c
        return cls(w)

    def stage(self, i: int, x, params: dict[str, Tensor] | None = None) -> Tensor:
        src = params if params is not None else {k: Tensor(v) for k, v in self.weights.items()}
        x = T.conv2d(x, src[f"w{i}"], src[f"b{i}"])
        return T.avg_pool2(T.relu(x))

    def features(self, images) -> list[Tensor]:
        """Tap features of a (N, 3, H, W) image stack, one per stage."""
        out, x = [], T._as_tensor(images)
        for i in range(len(CHANNELS)):
            x = self.stage(i, x)
            out.append(x)
        return out

    def tap_arrays(self, images, chunk: int = 256) -> list[np.ndarray]:
        """Gradient-free tap features as plain arrays, computed in chunks."""
        images = np.asarray(images, dtype=np.float64)
        parts: list[list[np.ndarray]] = [[] for _ in CHANNELS]
        with no_grad():
            for start in range(0, images.shape[0], chunk):
                for l, f in enumerate(self.features(images[start:start + chunk])):
                    parts[l].append(f.data)
        return [np.concatenate(p) for p in parts]

    def checksum(self) -> str:
        if self._key is None:
            h = hashlib.sha256()
            for k in sorted(self.weights):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self.weights[k]).tobytes())
            self._key = h.hexdigest()
        return self._key


def pretrain_backbone(seed: int, steps: int = 1000, batch: int = 32, lr: float = 3e-3,
                      eval_n: int = 200) -> Backbone:
    """Train the backbone on neutral-style shape classification, then freeze it.

    The pretext accuracy on held-out renders is stored on the result.
    """
    from .optim import Adam

    bb = Backbone.random(seed)
    params = {k: Tensor(v, requires_grad=True) for k, v in bb.weights.items()}
    rng = np.random.default_rng([seed, 202])
    params["cls_w"] = Tensor(0.1 * rng.standard_normal((CHANNELS[-1], len(SHAPES))), requires_grad=True)
    params["cls_b"] = Tensor(np.zeros(len(SHAPES)), requires_grad=True)
    opt = Adam(lr=lr)

    def logits_of(images, p):
        x = T._as_tensor(images)
        for i in range(len(CHANNELS)):
            x = bb.stage(i, x, p)
        return T.matmul(x.mean(axis=(2, 3)), p["cls_w"]) + p["cls_b"]

    def draw(n, r):
        labels = r.integers(len(SHAPES), size=n)
        imgs = np.stack([render_sample(NEUTRAL, SHAPES[c], int(r.integers(2 ** 31 - 1)))[0] for c in labels])
        return imgs, labels

    for _ in range(steps):
        imgs, labels = draw(batch, rng)
        onehot = np.eye(len(SHAPES))[labels]
        # multi-class logistic loss written with available primitives
        z = logits_of(imgs, params)
        zmax = z.data.max(axis=1, keepdims=True)
        ez = _exp(z - Tensor(zmax))
        lse = _log(ez.sum(axis=1)) + Tensor(zmax[:, 0])
        loss = (lse - (z * onehot).sum(axis=1)).mean()
        for p in params.values():
            p.grad = None
        loss.backward()
        opt.step(params)

    eval_rng = np.random.default_rng([seed, 303])
    imgs, labels = draw(eval_n, eval_rng)
    with no_grad():
        pred = np.argmax(logits_of(imgs, params).data, axis=1)
    bb.weights = {k: params[k].data.copy() for k in bb.weights}
    bb._key = None
    bb.pretext_accuracy = float(np.mean(pred == labels))
    return bb


def _exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return T._make(e, (a,), lambda g: (g * e,), "exp")


def _log(a: Tensor) -> Tensor:
    d = a.data
    return T._make(np.log(d), (a,), lambda g: (g / d,), "log")


# ---------------------------------------------------------------- episode ops

def resize_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) masks, binarised at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    if (m.shape[-2], m.shape[-1]) != (h, w):
        m = T.resize_matrix(m.shape[-2], h) @ m @ T.resize_matrix(m.shape[-1], w).T
    return (m >= 0.5).astype(np.float64)


def mask_support(feats, mask) -> Tensor:
    """F * zeta(M): resize the mask to the feature grid, copy it over channels, multiply."""
    feats = T._as_tensor(feats)
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("support mask must be binary")
    h, w = feats.shape[-2:]
    m = resize_mask(mask, h, w)
    return feats * Tensor(np.expand_dims(m, -3))


def correlation(q: Tensor, s: Tensor) -> Tensor:
    """ReLU'd cosine similarity between all query and support positions.

    ``q`` is (..., C, H, W) and ``s`` has the same shape; the result is
    (..., H*W, H*W) indexed [query position, support position].
    """
    if q.shape != s.shape:
        raise ValueError(f"correlation needs equal shapes, got {q.shape} and {s.shape}")
    *lead, c, h, w = q.shape
    qn = T.normalize(q.reshape(*lead, c, h * w), axis=-2)
    sn = T.normalize(s.reshape(*lead, c, h * w), axis=-2)
    return T.relu(T.matmul(qn.transpose(*range(len(lead)), len(lead) + 1, len(lead)), sn))


def correlation4d(nf_q, nf_s) -> Tensor:
    """Single-pair form: (C, H, W) x (C, H, W) -> (H, W, H, W)."""
    nf_q, nf_s = T._as_tensor(nf_q), T._as_tensor(nf_s)
    _, h, w = nf_q.shape
    return correlation(nf_q, nf_s).reshape(h, w, h, w)


# ---------------------------------------------------------------- model

class CDFSSModel:
    def __init__(self, backbone: Backbone, adapters=(), hidden: int = HIDDEN, seed: int = 0):
        self.backbone = backbone
        self.hidden = hidden
        self.specs = list(adapters)
        rng = np.random.default_rng([seed, 404])
        self.head: dict[str, Tensor] = {}

        def conv(name, co, ci, k=3):
            self.head[f"{name}.w"] = Tensor(np.sqrt(2.0 / (ci * k * k)) * rng.standard_normal((co, ci, k, k)),
                                            requires_grad=True)
            self.head[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True)

        for l in range(len(CHANNELS)):
            conv(f"enc1.{l}", hidden, 2)
        conv("enc2", hidden, hidden)
        conv("dec1", hidden, hidden)
        conv("dec2", 1, hidden)

        nav_rng = np.random.default_rng([seed, 505])
        self.navigators: dict[str, Navigator] = {}
        for spec in self.specs:
            ch = hidden if spec.position == "between-enc-dec" else CHANNELS[spec.tap]
            if spec.name in self.navigators:
                raise ValueError(f"two adapters at {spec.name}")
            self.navigators[spec.name] = Navigator(spec, ch, nav_rng)

    # parameters ---------------------------------------------------------

    def parameters(self, group: str = "all") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if group in ("all", "head"):
            out.update(self.head)
        if group in ("all", "navigator"):
            for name, nav in self.navigators.items():
                for k, p in nav.params.items():
                    out[f"{name}.{k}"] = p
        if group not in ("all", "head", "navigator"):
            raise ValueError(f"unknown parameter group {group!r}")
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        sd = {f"backbone.{k}": v.copy() for k, v in self.backbone.weights.items()}
        sd.update({k: p.data.copy() for k, p in self.parameters().items()})
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if k not in sd:
                raise KeyError(f"missing parameter {k}")
            if sd[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {sd[k].shape} vs {p.shape}")
            p.data = np.array(sd[k], dtype=np.float64)
        for k in self.backbone.weights:
            self.backbone.weights[k] = np.array(sd[f"backbone.{k}"], dtype=np.float64)
        self.backbone._key = None

    def clone(self) -> "CDFSSModel":
        other = CDFSSModel(self.backbone, self.specs, self.hidden)
        other.load_state_dict(self.state_dict())
        return other

    def with_adapters(self, adapters, seed: int = 0) -> "CDFSSModel":
        """Copy of this model's head with a different adapter set (fresh adapters)."""
        other = CDFSSModel(self.backbone, adapters, self.hidden, seed)
        for k, p in self.head.items():
            other.head[k].data = p.data.copy()
        return other

    # forward ------------------------------------------------------------

    def pyramid(self, batch: EpisodeBatch, tap_transform=None) -> tuple[list[Tensor], list[Tensor]]:
        """Navigated (query, masked support) tap features; support is (B, K, C, H, W).

        ``tap_transform(level, feats)`` optionally rewrites each raw backbone tap
        (all images stacked) before any navigator sees it.
        """
        b, k = batch.support_masks.shape[:2]
        shallow = self.navigators.get("nav.shallow")
        hook = tap_transform or (lambda level, f: f)
        cached = batch.features is not None and batch.features[0] == self.backbone.checksum()
        if cached:
            raw = [np.concatenate([fs.reshape(b * k, *fs.shape[2:]), fq]) for fs, fq in batch.features[1]]
        taps = []
        x = None
        for i in range(len(CHANNELS)):
            if cached and (i == 0 or shallow is None):
                x = hook(i, Tensor(raw[i]))
            else:
                if x is None:
                    x = Tensor(np.concatenate([batch.support_images.reshape(b * k, *batch.support_images.shape[2:]),
                                               batch.query_images]))
                x = hook(i, self.backbone.stage(i, x))
            if i == 0 and shallow is not None:
                x = navigate(x, shallow)
            taps.append(x)
        queries, supports = [], []
        for l, f in enumerate(taps):
            c, h, w = f.shape[1:]
            fs = f[: b * k].reshape(b, k, c, h, w)
            fq = f[b * k:]
            fs = mask_support(fs, batch.support_masks)
            nav = self.navigators.get(f"nav.deep{l}")
            if nav is not None:
                fs, fq = navigate(fs, nav), navigate(fq, nav)
            queries.append(fq)
            supports.append(fs)
        return queries, supports

    def encode(self, corrs: list[Tensor], sizes: list[tuple[int, int]]) -> Tensor:
        if len(corrs) != len(CHANNELS):
            raise ValueError(f"expected {len(CHANNELS)} correlation levels, got {len(corrs)}")
        out_h, out_w = sizes[0]
        z = None
        for l, (corr, (h, w)) in enumerate(zip(corrs, sizes)):
            b = corr.shape[0]
            stats = T.stack([corr.mean(axis=-1), T.amax(corr, axis=-1)], axis=1).reshape(b, 2, h, w)
            e = T.relu(T.conv2d(stats, self.head[f"enc1.{l}.w"], self.head[f"enc1.{l}.b"], "edge"))
            e = T.bilinear_resize(e, out_h, out_w)
            z = e if z is None else z + e
        return T.relu(T.conv2d(z, self.head["enc2.w"], self.head["enc2.b"], "edge"))

    def decode(self, enc: Tensor) -> Tensor:
        d = T.relu(T.conv2d(enc, self.head["dec1.w"], self.head["dec1.b"], "edge"))
        d = T.conv2d(d, self.head["dec2.w"], self.head["dec2.b"], "edge")
        b, _, h, w = d.shape
        return T.bilinear_resize(d.reshape(b, h, w), IMAGE_SIZE, IMAGE_SIZE)

    def encode_decode(self, corrs: list[Tensor], sizes: list[tuple[int, int]]) -> Tensor:
        enc = self.encode(corrs, sizes)
        nav = self.navigators.get("nav.encdec")
        if nav is not None:
            enc = navigate(enc, nav)
        return self.decode(enc)

    def forward(self, batch: EpisodeBatch, return_taps: bool = False, tap_transform=None):
        queries, supports = self.pyramid(batch, tap_transform)
        corrs, sizes = [], []
        for fq, fs in zip(queries, supports):
            k = fs.shape[1]
            qk = T.stack([fq] * k, axis=1) if k > 1 else fq.reshape(fq.shape[0], 1, *fq.shape[1:])
            corr = correlation(qk, fs).mean(axis=1)  # average over shots
            corrs.append(corr)
            sizes.append(fq.shape[-2:])
        enc = self.encode(corrs, sizes)
        nav = self.navigators.get("nav.encdec")
        logits = self.decode(navigate(enc, nav) if nav is not None else enc)
        if not return_taps:
            return logits
        taps = {"backbone": queries[-1].data.mean(axis=(-2, -1)),
                "encoder": enc.data.mean(axis=(-2, -1))}
        return logits, taps

    def attach_features(self, batch: EpisodeBatch) -> EpisodeBatch:
        """The same batch carrying cached backbone taps (skips recomputation later)."""
        if batch.features is not None and batch.features[0] == self.backbone.checksum():
            return batch
        b, k = batch.support_masks.shape[:2]
        images = np.concatenate([batch.support_images.reshape(b * k, *batch.support_images.shape[2:]),
                                 batch.query_images])
        levels = []
        for f in self.backbone.tap_arrays(images):
            levels.append((f[: b * k].reshape(b, k, *f.shape[1:]), f[b * k:]))
        return EpisodeBatch(batch.support_images, batch.support_masks, batch.query_images,
                            batch.query_masks, (self.backbone.checksum(), levels))

    def loss(self, batch: EpisodeBatch, tap_transform=None) -> Tensor:
        return T.bce_loss(self.forward(batch, tap_transform=tap_transform), batch.query_masks)

    def predict(self, batch: EpisodeBatch) -> np.ndarray:
        with no_grad():
            return (self.forward(batch).data > 0).astype(np.float64)

    def taps(self, batch: EpisodeBatch, chunk: int = 64) -> dict[str, np.ndarray]:
        """Spatially pooled deep-backbone and encoder features, one row per episode."""
        rows: dict[str, list] = {"backbone": [], "encoder": []}
        with no_grad():
            for start in range(0, len(batch), chunk):
                _, t = self.forward(batch.subset(slice(start, start + chunk)), return_taps=True)
                for key in rows:
                    rows[key].append(t[key])
        return {k: np.concatenate(v) for k, v in rows.items()}


def forward_episode(e: Episode, model: CDFSSModel) -> tuple[Tensor, Tensor]:
    """Logits (H, W) and BCE loss for a single episode."""
    batch = EpisodeBatch.from_episodes([e])
    logits = model.forward(batch)
    loss = T.bce_loss(logits, batch.query_masks)
    return logits.reshape(logits.shape[1:]), loss


def adapter_variant(spec: AdapterSpec, **changes) -> AdapterSpec:
    return replace(spec, **changes)
