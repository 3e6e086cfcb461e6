"""Adam and sharpness-aware wrappers (whole model, navigators, singular values)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import fold_weight, reconstruct, singular_value_grad, svd, unfold_weight
from .tensor import Tensor

SAM_TARGETS = ("none", "whole-model", "dfn-only", "svn")
SKIP_NORM = 1e-12


class Adam:
    """Bias-corrected Adam over a dict of named parameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            missing = [k for k, p in params.items() if p.grad is None]
            if missing:
                raise ValueError(f"no gradient for {missing}")
            grads = {k: p.grad for k, p in params.items()}
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p.data)
                self.v[k] = np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def adam_step(params: dict[str, Tensor], state: Adam) -> None:
    state.step(params)


def sam_perturb(grad_vec: np.ndarray, rho: float) -> np.ndarray:
    """rho * g / ||g||_2, or zeros when the gradient has vanished."""
    g = np.asarray(grad_vec, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm < SKIP_NORM:
        return np.zeros_like(g)
    return rho * g / norm


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.5
    target: str = "svn"

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if self.target not in SAM_TARGETS:
            raise ValueError(f"unknown SAM target {self.target!r}")


class SAM:
    """Two-pass sharpness-aware step wrapped around Adam.

    ``navigators`` maps names to objects with an ``alpha`` Tensor (conventional
    1x1 adapters).  For target ``svn`` each alpha is folded, decomposed and only
    its singular values are pushed along their normalised gradient; the second
    pass gradients then update the unperturbed parameters.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, config: SamConfig = SamConfig(),
                 navigators: dict | None = None, nav_param_names: tuple[str, ...] = ()):
        self.params = params
        self.config = config
        self.base = Adam(lr=lr)
        self.navigators = navigators or {}
        self.nav_param_names = tuple(nav_param_names)
        self.skipped = 0
        self.steps = 0
        self.last_grads: dict[str, np.ndarray] = {}
        self.last_eps: dict[str, np.ndarray] = {}
        self._warm: dict[str, object] = {}  # previous factors, used only to seed Jacobi
        if config.target == "svn":
            if not self.navigators:
                raise ValueError("SAM on singular values needs at least one navigator")
            for name, nav in self.navigators.items():
                if nav.spec.design != "conventional":
                    raise ValueError(f"navigator {name} has no single alpha to decompose")
        if config.target == "dfn-only" and not self.nav_param_names:
            raise ValueError("SAM on the navigator needs navigator parameters")

    def _zero(self) -> None:
        for p in self.params.values():
            p.grad = None
        for nav in self.navigators.values():
            for p in nav.params.values():
                p.grad = None

    def _grads(self, loss_fn: Callable[[], Tensor]) -> float:
        self._zero()
        loss = loss_fn()
        loss.backward()
        return float(loss.data)

    def step(self, loss_fn: Callable[[], Tensor]) -> float:
        """One update; returns the loss at the unperturbed point."""
        target = self.config.target
        loss = self._grads(loss_fn)
        self.steps += 1
        if target == "none":
            self.last_grads = {k: p.grad.copy() for k, p in self.params.items()}
            self.base.step(self.params)
            return loss

        saved: dict[str, tuple[Tensor, np.ndarray]] = {}
        self.last_eps = {}
        if target in ("whole-model", "dfn-only"):
            names = list(self.params) if target == "whole-model" else list(self.nav_param_names)
            missing = [k for k in names if self.params[k].grad is None]
            if missing:
                raise ValueError(f"no gradient for {missing}")
            flat = np.concatenate([self.params[k].grad.ravel() for k in names])
            eps = sam_perturb(flat, self.config.rho)
            if not np.any(eps):
                self.skipped += 1
            offset = 0
            for k in names:
                p = self.params[k]
                e = eps[offset:offset + p.data.size].reshape(p.shape)
                offset += p.data.size
                saved[k] = (p, p.data)
                p.data = p.data + e
                self.last_eps[k] = e
        else:
            for name, nav in self.navigators.items():
                alpha = nav.alpha
                if alpha.grad is None:
                    raise ValueError(f"no gradient for navigator {name}")
                factors = svd(fold_weight(alpha.data), warm=self._warm.get(name))
                self._warm[name] = factors
                g_s = singular_value_grad(factors, fold_weight(alpha.grad))
                eps = sam_perturb(g_s, self.config.rho)
                if not np.any(eps):
                    self.skipped += 1
                perturbed = reconstruct(factors.U, factors.S + eps, factors.Vt)
                saved[name] = (alpha, alpha.data)
                alpha.data = unfold_weight(perturbed, alpha.shape)
                self.last_eps[name] = eps

        self._grads(loss_fn)
        for p, original in saved.values():
            p.data = original
        self.last_grads = {k: p.grad.copy() for k, p in self.params.items()}
        self.base.step(self.params, self.last_grads)
        return loss


def make_optimizer(model, lr: float, config: SamConfig, group: str = "all") -> SAM:
    """SAM wrapper over ``model.parameters(group)`` with navigator bookkeeping."""
    params = model.parameters(group)
    navs = {n: nav for n, nav in model.navigators.items() if nav.spec.design == "conventional"}
    nav_names = tuple(k for k in model.parameters("navigator") if k in params)
    return SAM(params, lr, config, navigators=navs if config.target == "svn" else None,
               nav_param_names=nav_names)


def sam_svn_step(model, batch, opt: SAM) -> float:
    if opt.config.target != "svn":
        raise ValueError("optimizer is not configured for singular-value SAM")
    return opt.step(lambda: model.loss(batch))


def sam_full_step(model, batch, opt: SAM) -> float:
    if opt.config.target not in ("whole-model", "dfn-only"):
        raise ValueError("optimizer is not configured for parameter-space SAM")
    return opt.step(lambda: model.loss(batch))
