"""Representation similarity (linear CKA, HSIC, RBF MMD) and sharpness probes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import centering_matrix

CONSTANT_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Raised when a statistic is undefined (constant population, zero bandwidth)."""


@dataclass
class FeaturePopulation:
    rows: np.ndarray
    tap_name: str = ""
    domain_id: str = ""

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        if self.rows.ndim != 2 or self.rows.shape[0] < 2:
            raise ValueError(f"population needs n >= 2 rows, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("population has non-finite entries")

    @property
    def n(self) -> int:
        return self.rows.shape[0]


@dataclass
class SimilarityReport:
    entries: list[dict] = field(default_factory=list)

    def add(self, tap: str, metric: str, value: float, domains: tuple[str, str], seed: int, **extra) -> None:
        if metric == "cka" and not -1e-9 <= value <= 1 + 1e-9:
            raise ValueError(f"cka out of range: {value}")
        if metric == "mmd" and value < -1e-9:
            raise ValueError(f"negative mmd in a report: {value} (report the biased estimate)")
        self.entries.append(dict(tap=tap, metric=metric, value=float(value),
                                 domains=list(domains), seed=int(seed), **extra))

    def get(self, **match) -> list[dict]:
        return [e for e in self.entries if all(e.get(k) == v for k, v in match.items())]

    def to_dict(self) -> dict:
        return {"entries": [dict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityReport":
        return cls([dict(e) for e in d["entries"]])


def _rows(x) -> np.ndarray:
    if isinstance(x, FeaturePopulation):
        return x.rows
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def gram_linear(x) -> np.ndarray:
    x = _rows(x)
    if x.shape[0] < 2:
        raise ValueError("gram matrix needs at least two samples")
    return x @ x.T


def hsic(k: np.ndarray, l: np.ndarray) -> float:
    """Empirical HSIC, tr(K H L H) / (n - 1)^2."""
    k = np.asarray(k, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"hsic needs equal square grams, got {k.shape} and {l.shape}")
    n = k.shape[0]
    h = centering_matrix(n)
    kc = h @ k @ h
    lc = h @ l @ h
    # tr(HKH HLH) = tr(KHLH) since H is idempotent; the elementwise sum is symmetric in (K, L)
    return float(np.sum(kc * lc) / (n - 1) ** 2)


def cka(x, y) -> float:
    """Linear CKA between two populations with the same number of rows."""
    x, y = _rows(x), _rows(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"populations differ in size: {x.shape[0]} vs {y.shape[0]}")
    kx, ky = gram_linear(x), gram_linear(y)
    hxx, hyy = hsic(kx, kx), hsic(ky, ky)
    scale_x = np.sum(x * x) + 1e-300
    scale_y = np.sum(y * y) + 1e-300
    if hxx <= CONSTANT_TOL * scale_x ** 2 or hyy <= CONSTANT_TOL * scale_y ** 2:
        raise DegenerateInputError("cka undefined for a constant population")
    val = hsic(kx, ky) / np.sqrt(hxx * hyy)
    return float(np.clip(val, 0.0, 1.0))


def cka_feature_form(x, y) -> float:
    """Same quantity via centred features: ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)."""
    x, y = _rows(x), _rows(y)
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    den = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    if den <= CONSTANT_TOL * (np.sum(x * x) * np.sum(y * y) + 1e-300):
        raise DegenerateInputError("cka undefined for a constant population")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / den)


def relative_cka(value: float, reference: float) -> float:
    """CKA divided by the source self-similarity reference."""
    if reference <= 0:
        raise DegenerateInputError("reference similarity must be positive")
    return float(value / reference)


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(x, y) -> float:
    z = np.vstack([_rows(x), _rows(y)])
    d = _sq_dists(z, z)
    off = d[np.triu_indices(z.shape[0], 1)]
    med = float(np.median(off))
    if med <= 0:
        # fall back to the positive distances before giving up
        pos = off[off > 0]
        if pos.size == 0:
            raise DegenerateInputError("all pairwise distances are zero; bandwidth undefined")
        med = float(np.median(pos))
    return med


def mmd_rbf(x, y, bandwidth: float | None = None, unbiased: bool = True) -> float:
    """Squared MMD with k(a, b) = exp(-|a - b|^2 / bw), bw = median squared distance."""
    x, y = _rows(x), _rows(y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ValueError("mmd needs at least two samples per side")
    if x.shape[1] != y.shape[1]:
        raise ValueError("feature dimensions differ")
    bw = median_bandwidth(x, y) if bandwidth is None else float(bandwidth)
    if bw <= 0:
        raise DegenerateInputError("bandwidth must be positive")
    kxx = np.exp(-_sq_dists(x, x) / bw)
    kyy = np.exp(-_sq_dists(y, y) / bw)
    kxy = np.exp(-_sq_dists(x, y) / bw)
    if unbiased:
        sxx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
        syy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    else:
        sxx = kxx.mean()
        syy = kyy.mean()
    return float(sxx + syy - 2.0 * kxy.mean())


def mmd_permutation_null(x, y, n_perm: int = 200, seed: int = 0) -> np.ndarray:
    """MMD values with the pooled samples randomly re-split (bandwidth held fixed)."""
    x, y = _rows(x), _rows(y)
    bw = median_bandwidth(x, y)
    z = np.vstack([x, y])
    n = x.shape[0]
    rng = np.random.default_rng(seed)
    out = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(z.shape[0])
        out[i] = mmd_rbf(z[p[:n]], z[p[n:]], bandwidth=bw)
    return out


# ---------------------------------------------------------------- sharpness

def loss_fluctuation(losses) -> float:
    """Standard deviation of per-trial losses."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 3:
        raise ValueError("need at least 3 trials")
    return float(np.std(losses))


def performance_spread(scores) -> float:
    """Best minus worst score across re-initialised runs."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 3:
        raise ValueError("need at least 3 trials")
    return float(scores.max() - scores.min())


def noise_probe(model, batch, n_trials: int = 10, sigma: float = 0.05, seed: int = 0,
                group: str = "all", per_tensor: bool = False) -> tuple[float, list[float]]:
    """Loss std when N(0, sigma * rms(theta)) noise is added to the trainable parameters.

    rms is taken over the whole probed parameter set, or per tensor when
    ``per_tensor``.  Each trial starts from the unperturbed parameters; the
    model is restored afterwards.
    """
    if n_trials < 3:
        raise ValueError("need at least 3 trials")
    from .tensor import no_grad

    params = model.parameters(group)
    originals = {k: p.data for k, p in params.items()}
    flat = np.concatenate([v.ravel() for v in originals.values()])
    global_rms = float(np.sqrt(np.mean(flat * flat)))
    losses = []
    try:
        for t in range(n_trials):
            rng = np.random.default_rng([seed, t, 77])
            for k in sorted(params):
                base = originals[k]
                rms = float(np.sqrt(np.mean(base * base))) if per_tensor else global_rms
                params[k].data = base + sigma * rms * rng.standard_normal(base.shape)
            with no_grad():
                losses.append(float(model.loss(batch).data))
    finally:
        for k, p in params.items():
            p.data = originals[k]
    return loss_fluctuation(losses), losses


def sharpness_probe(model=None, eval_set=None, mode: str = "gaussian-noise", n_trials: int = 10,
                    sigma: float = 0.05, seed: int = 0, retrain=None) -> float:
    """Loss-fluctuation sharpness figure.

    ``gaussian-noise``: std of eval loss under parameter noise (see noise_probe).
    ``re-init``: ``retrain(trial_seed) -> score`` is called per trial and the
    best-minus-worst spread of the scores is returned.
    """
    if n_trials < 3:
        raise ValueError("need at least 3 trials")
    if mode == "gaussian-noise":
        return noise_probe(model, eval_set, n_trials, sigma, seed)[0]
    if mode == "re-init":
        if retrain is None:
            raise ValueError("re-init mode needs a retrain callable")
        return performance_spread([retrain(seed + t) for t in range(n_trials)])
    raise ValueError(f"unknown sharpness mode {mode!r}")
