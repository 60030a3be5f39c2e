"""Orthogonalized-momentum updates for matrix parameters, Adam for the rest,
and the post-step smoothing of the percentile-bin output rows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass
class OptimConfig:
    lr: float = 0.0037
    muon_momentum: float = 0.95
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    ns_iters: int = 14
    polish_iters: int = 3
    bin_smooth_beta: float = 1.0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.muon_momentum < 1:
            raise ValueError("muon_momentum must lie in [0, 1)")
        if self.bin_smooth_beta < 0:
            raise ValueError("bin_smooth_beta must be nonnegative")
        if self.smoothing_alpha > 1:
            raise ValueError(f"lr * bin_smooth_beta = {self.smoothing_alpha} exceeds 1")

    @property
    def smoothing_alpha(self) -> float:
        return self.lr * self.bin_smooth_beta


@dataclass
class ParamPartition:
    muon_params: set = field(default_factory=set)
    adam_params: set = field(default_factory=set)


def partition(model: torch.nn.Module) -> ParamPartition:
    part = ParamPartition()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (part.muon_params if p.ndim >= 2 else part.adam_params).add(name)
    return part


def orthogonalize(M, ns_iters: int = 14, polish_iters: int = 3, eps: float = 1e-7):
    """Approximate the orthogonal polar factor ``U V^T`` of a 2-D matrix.

    Runs ``ns_iters`` quintic Newton-Schulz steps (fast growth of small
    singular values) then ``polish_iters`` cubic steps (convergence towards 1).
    Accepts numpy arrays or tensors and returns the same kind.
    """
    as_numpy = isinstance(M, np.ndarray)
    X = torch.as_tensor(M)
    if X.ndim != 2:
        raise ValueError(f"orthogonalize expects a 2-D matrix, got shape {tuple(X.shape)}")
    if not torch.isfinite(X).all():
        raise ValueError("orthogonalize: non-finite input")
    if not X.is_floating_point():
        X = X.double()
    transposed = X.shape[0] > X.shape[1]
    if transposed:
        X = X.T
    X = X / (X.norm() + eps)
    a, b, c = NS_COEFFS
    for _ in range(ns_iters):
        A = X @ X.T
        X = a * X + (b * A + c * A @ A) @ X
    for _ in range(polish_iters):
        X = 1.5 * X - 0.5 * (X @ X.T) @ X
    if transposed:
        X = X.T
    return X.numpy() if as_numpy else X


def muon_scale(shape) -> float:
    rows, cols = shape[0], int(np.prod(shape[1:]))
    return max(1.0, rows / cols) ** 0.5


class Muon(torch.optim.Optimizer):
    """Heavy-ball momentum ``m <- mu*m + g``; update ``-lr * orth(m) * sqrt(max(1, rows/cols))``.

    Tensors with more than two dimensions are flattened to ``[out, rest]``.
    """

    def __init__(self, params, lr=0.0037, momentum=0.95, ns_iters=14, polish_iters=3):
        super().__init__(params, dict(lr=lr, momentum=momentum, ns_iters=ns_iters, polish_iters=polish_iters))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if g.shape != p.shape:
                    raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.zeros_like(p)
                buf = state["momentum_buffer"]
                buf.mul_(group["momentum"]).add_(g)
                update = orthogonalize(buf.reshape(p.shape[0], -1), group["ns_iters"], group["polish_iters"])
                p.add_(update.view_as(p), alpha=-group["lr"] * muon_scale(p.shape))
        return loss


class HybridOptimizer:
    """Muon on parameters with ``ndim >= 2``, Adam on the others, one shared learning rate."""

    def __init__(self, model: torch.nn.Module, cfg: OptimConfig):
        self.cfg = cfg
        self.partition = partition(model)
        named = dict(model.named_parameters())
        muon = [named[n] for n in sorted(self.partition.muon_params)]
        adam = [named[n] for n in sorted(self.partition.adam_params)]
        self.muon = Muon(muon, lr=cfg.lr, momentum=cfg.muon_momentum,
                         ns_iters=cfg.ns_iters, polish_iters=cfg.polish_iters) if muon else None
        self.adam = torch.optim.Adam(adam, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps) if adam else None

    @property
    def optimizers(self):
        return [o for o in (self.muon, self.adam) if o is not None]

    def zero_grad(self):
        for o in self.optimizers:
            o.zero_grad(set_to_none=True)

    def step(self):
        for o in self.optimizers:
            o.step()

    def state_dict(self) -> dict:
        return {
            "muon": self.muon.state_dict() if self.muon else None,
            "adam": self.adam.state_dict() if self.adam else None,
        }

    def load_state_dict(self, state: dict) -> None:
        if self.muon and state.get("muon"):
            self.muon.load_state_dict(state["muon"])
        if self.adam and state.get("adam"):
            self.adam.load_state_dict(state["adam"])


def smoothing_matrix(B: int, alpha: float) -> np.ndarray:
    """Symmetric tridiagonal ``S`` with diagonal (1-a/2, 1-a, ..., 1-a, 1-a/2) and off-diagonals a/2."""
    S = np.zeros((B, B))
    idx = np.arange(B)
    S[idx, idx] = 1 - alpha
    S[0, 0] = S[-1, -1] = 1 - alpha / 2
    S[idx[:-1], idx[:-1] + 1] = alpha / 2
    S[idx[1:], idx[1:] - 1] = alpha / 2
    return S


def smooth_bins(W, alpha: float, B: int, T: int):
    """Blend each bin row with its neighbours inside every block of ``B`` rows, in place.

    All reads use the pre-update rows. ``W`` is a ``[(B*T), F]`` tensor or array.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if W.shape[0] != B * T:
        raise ValueError(f"expected {B * T} rows, got {W.shape[0]}")
    if B < 2 or alpha == 0:
        return W
    is_array = isinstance(W, np.ndarray)
    old = W.reshape(T, B, -1) if is_array else W.detach().reshape(T, B, -1)
    new = old.copy() if is_array else old.clone()
    half = alpha / 2
    new[:, 1:-1] = (1 - alpha) * old[:, 1:-1] + half * (old[:, :-2] + old[:, 2:])
    new[:, 0] = (1 - half) * old[:, 0] + half * old[:, 1]
    new[:, -1] = (1 - half) * old[:, -1] + half * old[:, -2]
    if is_array:
        W[...] = new.reshape(W.shape)
    else:
        with torch.no_grad():
            W.copy_(new.reshape(W.shape))
    return W
