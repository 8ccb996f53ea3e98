import json
import math

import pytest
import torch

from gcpo.config import ConfigError, TrainConfig
from gcpo.policy import init_policy, snapshot
from gcpo.tasks import TaskSpec, parse_modadd
from gcpo.trainer import AdamState, TrainingAborted, evaluate, lr_at, optimizer_step, train

SMALL = dict(d=16, L=1, n_heads=2, max_context=64, batch_queries=2, n=3, m=1, max_len=4, eval_every=0)


def _params():
    g = torch.Generator().manual_seed(0)
    return [torch.randn(3, 2, generator=g, dtype=torch.float64), torch.randn(4, generator=g, dtype=torch.float64)]


def test_zero_gradient_no_decay_is_identity():
    ps = _params()
    new, st = optimizer_step(ps, [torch.zeros_like(p) for p in ps], AdamState(), 0.1, weight_decay=0.0)
    assert all(torch.equal(a, b) for a, b in zip(ps, new)) and st.t == 1


def test_zero_gradient_applies_exact_decay_factor():
    ps = _params()
    for lr in (0.0, 0.05):
        new, _ = optimizer_step(ps, [torch.zeros_like(p) for p in ps], AdamState(), lr, weight_decay=0.01)
        assert all(torch.equal(b, a * (1 - lr * 0.01)) for a, b in zip(ps, new))


def test_update_matches_reference_adamw():
    ps = _params()
    gs = [torch.full_like(p, 0.3) for p in ps]
    ours, st = optimizer_step(ps, gs, AdamState(), 1e-2, weight_decay=0.01)
    ours, _ = optimizer_step(ours, gs, st, 1e-2, weight_decay=0.01)
    ref = [p.clone().requires_grad_(True) for p in ps]
    opt = torch.optim.AdamW(ref, lr=1e-2, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(2):
        for p, g in zip(ref, gs):
            p.grad = g.clone()
        opt.step()
    assert all(torch.allclose(a, b.detach(), atol=1e-14, rtol=0) for a, b in zip(ours, ref))


def test_optimizer_deterministic():
    ps = _params()
    gs = [p * 0.1 for p in ps]
    a, _ = optimizer_step(ps, gs, AdamState(), 1e-3)
    b, _ = optimizer_step(ps, gs, AdamState(), 1e-3)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_schedules():
    cfg = TrainConfig(steps=10, lr=1.0, schedule="cosine", warmup_ratio=0.2)
    assert lr_at(cfg, 0) == pytest.approx(0.5) and lr_at(cfg, 1) == pytest.approx(1.0)
    assert lr_at(cfg, 2) == pytest.approx(1.0) and lr_at(cfg, 9) < 0.05
    assert lr_at(TrainConfig(lr=0.3), 123) == 0.3


def test_single_step_replay(tmp_path):
    cfg = TrainConfig(steps=1, **SMALL)
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert len(a.metrics) == 1 and a.metrics[0]["objective"] == b.metrics[0]["objective"]
    assert (tmp_path / "a" / "metrics.jsonl").read_text() == (tmp_path / "b" / "metrics.jsonl").read_text()
    manifest = json.loads((tmp_path / "a" / "run.json").read_text())
    assert manifest["config"]["seed"] == 0 and (tmp_path / "a" / "checkpoints" / "step_1.ckpt").exists()


def test_reduction_law_short_run():
    base = dict(steps=3, **SMALL)
    g = train(TrainConfig(algorithm="grpo", **base))
    c = train(TrainConfig(algorithm="gcpo", kappa=0.0, force_upsilon=1.0, **base))
    assert [r["objective"] for r in g.metrics] == [r["objective"] for r in c.metrics]


def test_gcpo_logs_diagnostics():
    res = train(TrainConfig(algorithm="gcpo", steps=2, **SMALL))
    for r in res.metrics:
        assert r["generations"] == 2 * (3 + 3 + 9)
        assert r["clamp_count"] is not None and abs(r["upsilon_max"]) <= 2.0
        assert r["mean_kl_causal"] >= 0 and math.isfinite(r["grad_norm"])


def test_nan_hook_aborts_with_dump(tmp_path):
    with pytest.raises(TrainingAborted):
        train(TrainConfig(steps=3, nan_step=1, **SMALL), tmp_path)
    dump = json.loads((tmp_path / "reports" / "abort_step_1.json").read_text())
    assert dump["step"] == 1 and len(dump["rewards"]) == 2
    assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 1


class Oracle:
    def __init__(self, task):
        self.task = task
        self.vocab = task.vocab

    def greedy_responses(self, contexts, max_len):
        from gcpo.policy import TokenSeq
        out = []
        for q in contexts:
            a, b = parse_modadd(self.task, q)
            out.append(TokenSeq(self.vocab.encode(["#", str((a + b) % 10)]) + [self.vocab.eos]))
        return out


def test_evaluate_oracle_and_replay():
    cfg = TrainConfig(n_eval=40)
    assert evaluate(Oracle(TaskSpec()), cfg)["pass_at_1"] == 1.0
    snap = snapshot(init_policy(16, 1, TaskSpec().vocab, 0, 64, 2), 0)
    assert evaluate(snap, cfg) == evaluate(snap, cfg)


def test_evaluate_rejects_overlapping_seeds():
    with pytest.raises(ConfigError):
        evaluate(Oracle(TaskSpec()), TrainConfig(eval_seed_start=500, train_seed_span=1000))
