"""Training loop: snapshot, roll out, score, build the objective, ascend.

Each step freezes the live policy into one snapshot that serves as both the
sampling policy and the KL reference.  Every rollout, representation and
cached log-probability of the step is computed from that snapshot.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__, rng
from .config import ConfigError, TrainConfig, dumps_config
from .gcpo import causal_diagnostics, compute_causal_inputs, gcpo_objective
from .grpo import SurrogateConfig, grpo_objective
from .policy import PolicyParams, PolicySnapshot, init_policy, save_checkpoint, snapshot
from .rollout import append_rollouts, expected_generations, rollout_record, sample_groups
from .tasks import evaluate_policy, gen_query, reward

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``dump`` holds the diagnostic record."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(params, grads, state: AdamState, lr_t: float, weight_decay: float = 0.01,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """AdamW: p <- p * (1 - lr wd) - lr * m_hat / (sqrt(v_hat) + eps).

    Returns new parameter tensors and the advanced state; inputs are not modified.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes do not match")
    if not state.m:
        state = AdamState(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = (m / c1) / (torch.sqrt(v / c2) + eps)
        new_p.append(p * (1.0 - lr_t * weight_decay) - lr_t * step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


def lr_at(cfg: TrainConfig, step: int) -> float:
    warm = int(round(cfg.warmup_ratio * cfg.steps))
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    if cfg.schedule == "cosine":
        span = max(cfg.steps - warm, 1)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))
    return cfg.lr


def train_query_seed(cfg: TrainConfig, step: int, b: int) -> int:
    return cfg.train_seed_start + rng.derive_seed(cfg.seed, "query", step, b) % cfg.train_seed_span


def check_seed_ranges(cfg: TrainConfig) -> None:
    lo, hi = cfg.train_seed_start, cfg.train_seed_start + cfg.train_seed_span
    elo, ehi = cfg.eval_seed_start, cfg.eval_seed_start + cfg.n_eval
    if elo < hi and lo < ehi:
        raise ConfigError(f"eval seed range [{elo}, {ehi}) overlaps training range [{lo}, {hi})")


def evaluate(snap: PolicySnapshot, cfg: TrainConfig) -> dict:
    check_seed_ranges(cfg)
    p1, mean_r = evaluate_policy(snap, cfg.task_spec(), cfg.n_eval, cfg.eval_seed_start, cfg.max_len)
    return {"pass_at_1": p1, "mean_reward": mean_r}


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[dict]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, cfg: TrainConfig, command: str = "train") -> dict:
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_text": dumps_config(cfg),
        "seed": cfg.seed,
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "artifact_version": __version__,
        "torch_version": torch.__version__,
        "python": platform.python_version(),
        "layout": {"metrics": "metrics.jsonl", "checkpoints": "checkpoints/", "reports": "reports/"},
    }
    _write_json(out / "run.json", manifest)
    return manifest


def train(cfg: TrainConfig, out_dir=None, initial: PolicyParams | None = None) -> TrainResult:
    """Run ``cfg.steps`` optimisation steps; writes metrics/checkpoints under ``out_dir`` if given."""
    cfg.validate()
    check_seed_ranges(cfg)
    task = cfg.task_spec()
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        (out / "reports").mkdir(exist_ok=True)
        write_manifest(out, cfg)
        metrics_fh = open(out / "metrics.jsonl", "w", encoding="utf-8")

    policy = initial if initial is not None else init_policy(cfg.d, cfg.L, task.vocab, cfg.seed, cfg.max_context,
                                                             cfg.n_heads)
    surr = SurrogateConfig(cfg.eps, cfg.beta)
    state = AdamState()
    records: list[dict] = []
    try:
        for step in range(cfg.steps):
            rec = _train_step(cfg, task, policy, surr, state, step, out)
            state = rec.pop("_state")
            records.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(policy, out / "checkpoints" / f"step_{step + 1}.ckpt")
        if out is not None:
            save_checkpoint(policy, out / "checkpoints" / f"step_{cfg.steps}.ckpt")
            _write_json(out / "reports" / "final.json", {
                "end_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                "steps": cfg.steps,
                "final": records[-1] if records else None,
            })
    except TrainingAborted as exc:
        if out is not None:
            _write_json(out / "reports" / f"abort_step_{exc.dump['step']}.json", exc.dump)
        raise
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(policy, records)


def _train_step(cfg: TrainConfig, task, policy: PolicyParams, surr: SurrogateConfig, state: AdamState,
                step: int, out: Path | None) -> dict:
    old = snapshot(policy, version=step + 1)
    ref = old
    step_seed = rng.derive_seed(cfg.seed, "step", step)
    qseeds = [train_query_seed(cfg, step, b) for b in range(cfg.batch_queries)]
    queries = [gen_query(task, s) for s in qseeds]
    gseeds = [rng.derive_seed(step_seed, "group", b) for b in range(cfg.batch_queries)]
    groups = sample_groups(old, [qi.q for qi in queries], cfg.n, gseeds, cfg.max_len, cfg.temperature)
    for g, qi in zip(groups, queries):
        g.rewards = [reward(task, qi, y).total for y in g.responses]

    causal = None
    if cfg.algorithm == "gcpo":
        cseeds = [rng.derive_seed(step_seed, "causal", b) for b in range(cfg.batch_queries)]
        causal = compute_causal_inputs(old, groups, cseeds, cfg)
        generated = sum(c.generations.total for c in causal)
        want = cfg.batch_queries * expected_generations(cfg.n, cfg.m)
        if generated != want:
            raise RuntimeError(f"generation count {generated} != closed form {want}")
    if any(g.version != old.version for g in groups):
        raise RuntimeError("group sampled from a stale snapshot")

    params = list(policy.parameters())
    if cfg.algorithm == "gcpo":
        objective, stats = gcpo_objective(groups, policy, old, ref, surr, cfg.kappa, causal)
    else:
        objective, stats = grpo_objective(groups, policy, old, ref, surr)
    loss = -objective
    if cfg.nan_step is not None and step == cfg.nan_step:
        loss = loss * float("nan")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    grad_norm = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if not math.isfinite(float(loss.detach())) or not math.isfinite(grad_norm):
        dump = {
            "step": step,
            "loss": float(loss.detach()),
            "grad_norm": grad_norm,
            "stats": stats,
            "rewards": [g.rewards for g in groups],
            "responses": [[list(y.ids) for y in g.responses] for g in groups],
            "config": cfg.to_dict(),
        }
        raise TrainingAborted(f"non-finite loss/gradient at step {step}", dump)

    lr_t = lr_at(cfg, step)
    new_params, state = optimizer_step([p.detach() for p in params], grads, state, lr_t, cfg.weight_decay,
                                       cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    with torch.no_grad():
        for p, q in zip(params, new_params):
            p.copy_(q)

    rewards = [r for g in groups for r in g.rewards]
    rec = {
        "step": step,
        "version": old.version,
        "objective": float(objective.detach()),
        "grad_norm": grad_norm,
        "mean_reward": sum(rewards) / len(rewards),
        "pass_at_1": None,
        "eval_mean_reward": None,
        "mean_kl_ref": stats["mean_kl_ref"],
        "mean_kl_causal": stats.get("mean_kl_causal"),
        "clip_fraction": stats["clip_fraction"],
        "mean_abs_advantage": stats["mean_abs_advantage"],
        "lr": lr_t,
    }
    if causal is not None:
        rec.update(causal_diagnostics(causal))
        rec["generations"] = sum(c.generations.total for c in causal)
    else:
        rec.update({k: None for k in ("upsilon_mean", "upsilon_min", "upsilon_max", "upsilon_neg_frac",
                                      "upsilon_degenerate", "clamp_count", "raw_ref_min", "raw_ref_max")})
        rec["generations"] = 0
    last = step == cfg.steps - 1
    if cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
        ev = evaluate(snapshot(policy, version=step + 2), cfg)
        rec["pass_at_1"] = ev["pass_at_1"]
        rec["eval_mean_reward"] = ev["mean_reward"]
    if cfg.dump_rollouts and out is not None:
        colls = [c.collider for c in causal] if causal is not None else [None] * len(groups)
        append_rollouts(out / "reports" / "rollouts.jsonl",
                        [dict(rollout_record(g, c, s), step=step) for g, c, s in zip(groups, colls, qseeds)])
    log.debug("step %d objective %.4f reward %.3f", step, rec["objective"], rec["mean_reward"])
    rec["_state"] = state
    return rec
