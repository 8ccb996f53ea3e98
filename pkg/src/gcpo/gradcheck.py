"""Finite-difference checks of the objectives' autograd gradients in float64."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from . import rng
from .config import TrainConfig
from .gcpo import compute_causal_inputs, gcpo_objective
from .grpo import SurrogateConfig, grpo_objective
from .policy import flat_params, init_policy, set_flat_params, snapshot
from .rollout import sample_groups
from .tasks import TaskSpec, gen_query

REL_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "coords": self.coords,
                "tol": self.tol, "passed": self.passed}


def rel_error(a: float, b: float, floor: float = REL_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(model, objective_fn, coords: int = 24, step: float = 1e-4, seed: int = 0, tol: float = 1e-4,
             name: str = "objective") -> GradcheckResult:
    """Compare d objective / d theta against central differences on ``coords`` random coordinates."""
    base = flat_params(model).detach().clone()
    obj = objective_fn(model)
    params = list(model.parameters())
    grads = torch.autograd.grad(obj, params, allow_unused=True)
    g = torch.cat([(torch.zeros_like(p) if gr is None else gr).reshape(-1) for p, gr in zip(params, grads)])
    picker = np.random.default_rng(rng.derive_seed(seed, "gradcheck"))
    idx = sorted(int(k) for k in picker.choice(base.numel(), size=min(coords, base.numel()), replace=False))
    worst = 0.0
    with torch.no_grad():
        for k in idx:
            plus = base.clone()
            plus[k] += step
            set_flat_params(model, plus)
            f_plus = float(objective_fn(model))
            minus = base.clone()
            minus[k] -= step
            set_flat_params(model, minus)
            f_minus = float(objective_fn(model))
            fd = (f_plus - f_minus) / (2 * step)
            worst = max(worst, rel_error(float(g[k]), fd))
        set_flat_params(model, base)
    return GradcheckResult(name, worst, len(idx), tol)


def _fixture(seed: int, algorithm: str):
    cfg = TrainConfig(algorithm=algorithm, d=16, L=1, n_heads=2, max_context=64, n=3, m=1, max_len=4,
                      batch_queries=2, seed=seed)
    task = TaskSpec("modadd", 1)
    model = init_policy(cfg.d, cfg.L, task.vocab, seed, cfg.max_context, cfg.n_heads, dtype=torch.float64)
    # a non-zero head so the objective is not flat at initialisation
    g = torch.Generator().manual_seed(rng.derive_seed(seed, "head") % 2**63)
    with torch.no_grad():
        model.head.normal_(0.0, 0.3, generator=g)
    old = snapshot(model, version=1)
    queries = [gen_query(task, s).q for s in (seed, seed + 1)]
    groups = sample_groups(old, queries, cfg.n, [rng.derive_seed(seed, "g", b) for b in range(2)], cfg.max_len)
    stream = rng.PhiloxStream(rng.derive_seed(seed, "rewards"))
    for grp in groups:
        grp.rewards = [float(v) for v in stream.random(grp.n)]
    causal = None
    if algorithm == "gcpo":
        causal = compute_causal_inputs(old, groups, [rng.derive_seed(seed, "c", b) for b in range(2)], cfg)
    # move away from the snapshot so ratios differ from one (small enough to stay inside the clip band)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.01)
    return cfg, model, old, groups, causal


def run_gradchecks(seed: int = 0, coords: int = 24, tol: float = 1e-4) -> list[GradcheckResult]:
    out = []
    for algorithm in ("grpo", "gcpo"):
        cfg, model, old, groups, causal = _fixture(seed, algorithm)
        surr = SurrogateConfig(cfg.eps, cfg.beta)
        if algorithm == "grpo":
            def fn(mdl, groups=groups, old=old, surr=surr):
                return grpo_objective(groups, mdl, old, old, surr)[0]
        else:
            def fn(mdl, groups=groups, old=old, surr=surr, causal=causal, kappa=cfg.kappa):
                return gcpo_objective(groups, mdl, old, old, surr, kappa, causal)[0]
        out.append(fd_check(model, fn, coords, seed=seed, tol=tol, name=algorithm))
    return out


def float64_copy(model):
    return copy.deepcopy(model).double()
