"""Pretraining, on-policy RL over the four regimes, evaluation and checkpoint selection.

Run directory layout::

    config.json               resolved experiment config
    metrics.csv               step,train_reward,entropy,mean_len,val_pass1,tv_oracle
    train_steps.csv           per-step training statistics
    checkpoints/step_{N}.json policy + optimizer moments at every evaluated step
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import DecodeConfig, Sample, decode_batch, sample_rollouts
from .errors import ConfigError, InputError, TrainingError
from .model import LengthMode, Policy, batch_logprob, batch_logprob_grad, policy_from_dict, policy_to_dict
from .objective import RegimeConfig, entropy_metric, estimate_gradient, make_group
from .oracle import (
    SPACE_GUARD,
    ResponseSpace,
    dist_distance,
    enumerate_space,
    exact_metrics,
    exact_policy_dist,
    exact_target_dist,
    pass_at_k,
    space_size,
    task_rewards,
)
from .seeding import derive_seed, rng_for
from .tasks import Corpus, Instance, TaskSpec, extract_answer, verify

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "train_reward", "entropy", "mean_len", "val_pass1", "tv_oracle"]
STEPS_HEADER = ["step", "train_reward", "task_reward", "entropy", "mean_len"]

# stream tags kept apart from prompt indices
_BATCH_TAG = 1 << 40
_PRETRAIN_TAG = 1 << 41
_VAL_TAG = 1 << 42


@dataclass
class OptimConfig:
    learning_rate: float = 1e-2
    warmup_steps: int = 50
    warmup_init_lr: float | None = None
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    batch_prompts: int = 32
    group_size: int = 8
    eval_every: int = 50
    global_seed: int = 0

    def __post_init__(self):
        if self.warmup_init_lr is None:
            self.warmup_init_lr = self.learning_rate / 10
        if not self.learning_rate > 0 or not self.warmup_init_lr > 0:
            raise ConfigError("learning rates must be > 0", "optim.learning_rate")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ConfigError("adam betas must lie in (0, 1)", "optim.adam_beta1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "optim.weight_decay")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be >= 0", "optim.steps")
        if self.batch_prompts < 1:
            raise ConfigError("batch_prompts must be >= 1", "optim.batch_prompts")
        if self.eval_every < 1 or (self.steps and self.steps % self.eval_every):
            raise ConfigError("eval_every must be >= 1 and divide steps", "optim.eval_every")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.warmup_init_lr + (self.learning_rate - self.warmup_init_lr) * step / self.warmup_steps
        return self.learning_rate


class AdamW:
    """Adam with decoupled weight decay; state is (m, v, t)."""

    def __init__(self, cfg: OptimConfig, n: int):
        self.cfg = cfg
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.adam_beta1 * self.m + (1 - c.adam_beta1) * grad
        self.v = c.adam_beta2 * self.v + (1 - c.adam_beta2) * grad * grad
        mhat = self.m / (1 - c.adam_beta1**self.t)
        vhat = self.v / (1 - c.adam_beta2**self.t)
        return params - lr * (mhat / (np.sqrt(vhat) + c.adam_eps) + c.weight_decay * params)

    def state(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    def load(self, state: dict) -> None:
        self.m = np.array(state["m"], dtype=np.float64)
        self.v = np.array(state["v"], dtype=np.float64)
        self.t = int(state["t"])


# -- pretraining ---------------------------------------------------------------


def pretrain_mle(
    policy: Policy,
    corpus: Corpus | Sequence,
    optim: OptimConfig,
    length: LengthMode | None = None,
    history: list | None = None,
) -> Policy:
    """Fit demonstrations by minimizing mean variable-mode negative log-likelihood.

    Each step uses ``optim.batch_prompts`` pairs drawn with replacement.
    """
    pairs = corpus.pairs if isinstance(corpus, Corpus) else list(corpus)
    if not pairs:
        raise InputError("empty corpus")
    if length is None:
        length = LengthMode("variable", max(len(r) for _, r in pairs))
    opt = AdamW(optim, policy.params.size)
    params = policy.params.copy()
    B = optim.batch_prompts
    for step in range(optim.steps):
        idx = rng_for(optim.global_seed, step, _PRETRAIN_TAG).integers(0, len(pairs), size=B)
        prompts = [pairs[i][0] for i in idx]
        responses = [pairs[i][1] for i in idx]
        cur = policy.with_params(params)
        grad, logp = batch_logprob_grad(cur, prompts, responses, length, np.full(B, 1.0 / B))
        loss = -float(logp.mean())
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"pretraining diverged at step {step} (loss={loss})")
        if history is not None:
            history.append(loss)
        params = opt.step(params, -grad, optim.lr_at(step))
    return policy.with_params(params)


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalMetrics:
    pass1: float
    pass_k: float
    maj_k: float
    mean_len: float
    k: int


def _space_for(spec: TaskSpec, length: LengthMode) -> ResponseSpace | None:
    if space_size(len(spec.vocab), length.l_max, length.mode) > SPACE_GUARD:
        return None
    return enumerate_space(spec.vocab, length.l_max, length.mode)


def _dedupe(instances: Sequence[Instance]) -> tuple[list[Instance], np.ndarray]:
    seen: dict = {}
    for inst in instances:
        key = inst.prompt.ids
        if key in seen:
            seen[key][1] += 1
        else:
            seen[key] = [inst, 1]
    uniq = [v[0] for v in seen.values()]
    weights = np.array([v[1] for v in seen.values()], dtype=np.float64)
    return uniq, weights / weights.sum()


def evaluate(
    policy: Policy,
    instances: Sequence[Instance],
    decode: DecodeConfig,
    k: int,
    spec: TaskSpec,
    exact: bool = False,
    space: ResponseSpace | None = None,
) -> EvalMetrics:
    """pass@1, pass@k, maj@k and mean (EOS-truncated) response length.

    With ``exact=True`` and ancestral decoding the metrics come from the
    enumerated variable-length distribution instead of samples.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    if not instances:
        raise InputError("no instances to evaluate")
    eval_len = LengthMode("variable", decode.length.l_max)
    if exact and decode.method == "ancestral":
        space = space or _space_for(spec, eval_len)
        if space is None:
            raise ConfigError("response space too large for exact evaluation", "eval.exact")
        uniq, w = _dedupe(instances)
        rows = []
        for inst in uniq:
            d = exact_policy_dist(policy, inst.prompt, space, decode.temperature)
            m = exact_metrics(d, inst, spec, (1, k), seed=decode.seed)
            rows.append((m.expected_reward, m.pass_at[k], m.maj_at[k], m.mean_length))
        p1, pk, mk, ml = (float(np.dot(w, col)) for col in zip(*rows))
        return EvalMetrics(p1, pk, mk, ml, k)
    prompts = [inst.prompt for inst in instances]
    outs = decode_batch(policy, prompts, decode, k)
    eos = spec.vocab.eos_id
    p1, pk, mk, ml = [], [], [], []
    for inst, resp in zip(instances, outs):
        correct = [verify(r, inst, spec) for r in resp]
        p1.append(np.mean(correct))
        pk.append(float(any(correct)))
        votes: dict = {}
        for r in resp:
            a = extract_answer(r, spec)
            if a is not None:
                votes[a] = votes.get(a, 0) + 1
        if votes:
            top = max(votes.values())
            winner = min(a for a, c in votes.items() if c == top)
            mk.append(float(winner == tuple(inst.gold)))
        else:
            mk.append(0.0)
        ml.append(np.mean([r.index(eos) + 1 if eos in r else len(r) for r in resp]))
    return EvalMetrics(float(np.mean(p1)), float(np.mean(pk)), float(np.mean(mk)), float(np.mean(ml)), k)


# -- run records and checkpoints -----------------------------------------------


@dataclass
class EvalRow:
    step: int
    train_reward: float
    entropy: float
    mean_len: float
    val_pass1: float
    tv_oracle: float | None = None

    def as_list(self) -> list:
        return [self.step, self.train_reward, self.entropy, self.mean_len, self.val_pass1,
                "" if self.tv_oracle is None else self.tv_oracle]


@dataclass
class Checkpoint:
    step: int
    policy: Policy
    optimizer: dict


@dataclass
class RunRecord:
    rows: list[EvalRow]
    checkpoints: dict[int, Path]
    regime: RegimeConfig
    optim: OptimConfig
    seed: int
    run_dir: Path
    train_steps: list[dict] = field(default_factory=list)

    def row(self, step: int) -> EvalRow:
        return next(r for r in self.rows if r.step == step)


def save_checkpoint(path: Path, step: int, policy: Policy, opt: AdamW) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump({"step": step, "policy": policy_to_dict(policy), "optimizer": opt.state()}, f)


def load_checkpoint(path) -> Checkpoint:
    with open(path) as f:
        d = json.load(f)
    return Checkpoint(int(d["step"]), policy_from_dict(d["policy"]), d["optimizer"])


def _parse_float(s: str):
    return None if s == "" else float(s)


def read_metrics(path) -> list[EvalRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return [
            EvalRow(int(r["step"]), float(r["train_reward"]), float(r["entropy"]), float(r["mean_len"]),
                    float(r["val_pass1"]), _parse_float(r["tv_oracle"]))
            for r in reader
        ]


def load_run(run_dir) -> RunRecord:
    """Rebuild a RunRecord from a finished run directory."""
    from .config import regime_from_dict, optim_from_dict

    run_dir = Path(run_dir)
    cfg = json.loads((run_dir / "config.json").read_text())
    rows = read_metrics(run_dir / "metrics.csv")
    ckpts = {r.step: run_dir / "checkpoints" / f"step_{r.step}.json" for r in rows}
    missing = [str(p) for p in ckpts.values() if not p.exists()]
    if missing:
        raise InputError(f"missing checkpoints: {missing}")
    length = LengthMode(cfg["length"]["mode"], int(cfg["length"]["l_max"]))
    regime = regime_from_dict(cfg["regime"], length)
    optim = optim_from_dict(cfg.get("optim", {}), regime.group_size, cfg.get("global_seed"))
    return RunRecord(rows, ckpts, regime, optim, optim.global_seed, run_dir)


def select_checkpoint(record: RunRecord, criterion: str = "last") -> Checkpoint:
    """``last``: highest step. ``best_validation``: max val_pass1, earliest on ties."""
    if not record.rows:
        raise InputError("run record has no rows")
    if criterion == "last":
        row = max(record.rows, key=lambda r: r.step)
    elif criterion == "best_validation":
        row = min(record.rows, key=lambda r: (-r.val_pass1, r.step))
    else:
        raise InputError(f"unknown criterion {criterion!r}")
    return load_checkpoint(record.checkpoints[row.step])


# -- regime training -------------------------------------------------------------


class _Oracle:
    """Caches exact base distributions for the tv_oracle column."""

    def __init__(self, base: Policy, regime: RegimeConfig, spec: TaskSpec, instances: Sequence[Instance]):
        self.regime = regime
        self.space = _space_for(spec, regime.length)
        self.items = []
        if self.space is None or regime.beta == 0:
            return
        for inst in _dedupe(instances)[0]:
            bd = exact_policy_dist(base, inst.prompt, self.space)
            target = exact_target_dist(bd, regime, task_rewards(self.space, inst, spec))
            self.items.append((inst, target))

    def tv(self, policy: Policy) -> float | None:
        if not self.items:
            return None
        return float(np.mean([
            dist_distance(exact_policy_dist(policy, inst.prompt, self.space), target)
            for inst, target in self.items
        ]))


def _rollout_step(policy, base, regime, spec, data, optim, step):
    B, k = optim.batch_prompts, regime.group_size
    picks = rng_for(optim.global_seed, step, _BATCH_TAG).integers(0, len(data), size=B)
    insts = [data[i] for i in picks]
    prompts = [inst.prompt for inst in insts for _ in range(k)]
    seeds = [derive_seed(optim.global_seed, step, i, j) for i in range(B) for j in range(k)]
    ro = sample_rollouts(policy, prompts, seeds, regime.length)
    responses = ro.responses()
    lt = ro.logp
    lb = batch_logprob(base, prompts, responses, regime.length)[0] if regime.uses_base else None
    eos = spec.vocab.eos_id
    groups = []
    for i, inst in enumerate(insts):
        sl = slice(i * k, (i + 1) * k)
        samples = [
            Sample(responses[j], float(lt[j]), None if lb is None else float(lb[j]))
            for j in range(sl.start, sl.stop)
        ]
        rewards = [verify(s.response, inst, spec) for s in samples]
        groups.append(make_group(policy, inst, samples, rewards, regime))
    tlen = [r.index(eos) + 1 if eos in r else len(r) for r in responses]
    stats = {
        "step": step,
        "train_reward": float(np.mean([g.surrogate.mean() for g in groups])),
        "task_reward": float(np.mean([g.task_rewards.mean() for g in groups])),
        "entropy": entropy_metric(groups, ro.lengths),
        "mean_len": float(np.mean(tlen)),
    }
    return groups, stats


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train_regime(
    base: Policy,
    regime: RegimeConfig,
    data: Sequence[Instance],
    optim: OptimConfig,
    run_dir,
    spec: TaskSpec,
    validation: Sequence[Instance] = (),
    exact_eval: bool = True,
    eval_k: int = 16,
    resume: Checkpoint | None = None,
    config: dict | None = None,
) -> RunRecord:
    """On-policy RL from ``base`` under ``regime``; fully deterministic per global seed.

    Every ``eval_every`` steps (and at step 0 and the final step) a row of
    metrics is recorded for the current policy and a checkpoint written.
    """
    if not data:
        raise InputError("no training instances")
    if regime.group_size != optim.group_size:
        raise ConfigError("regime.group_size and optim.group_size differ", "regime.group_size")
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if config is None:
        config = {"regime": regime.to_dict(), "optim": asdict(optim),
                  "length": {"mode": regime.length.mode, "l_max": regime.length.l_max},
                  "task": spec.to_dict()}
    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    opt = AdamW(optim, base.params.size)
    policy = base
    start = 0
    rows: list[EvalRow] = []
    steps_log: list[dict] = []
    if resume is not None:
        start = resume.step
        policy = resume.policy
        opt.load(resume.optimizer)
        if (run_dir / "metrics.csv").exists():
            rows = [r for r in read_metrics(run_dir / "metrics.csv") if r.step < start]
        if (run_dir / "train_steps.csv").exists():
            with open(run_dir / "train_steps.csv", newline="") as f:
                steps_log = [
                    {key: (int(v) if key == "step" else float(v)) for key, v in r.items()}
                    for r in csv.DictReader(f) if int(r["step"]) < start
                ]

    oracle = _Oracle(base, regime, spec, data)
    eval_decode = DecodeConfig("ancestral", length=LengthMode("variable", regime.length.l_max),
                               seed=derive_seed(optim.global_seed, 0, _VAL_TAG, 0))
    eval_space = _space_for(spec, eval_decode.length) if exact_eval else None
    ckpts: dict[int, Path] = {r.step: run_dir / "checkpoints" / f"step_{r.step}.json" for r in rows}

    for step in range(start, optim.steps + 1):
        groups, stats = _rollout_step(policy, base, regime, spec, data, optim, step)
        steps_log.append(stats)
        if step % optim.eval_every == 0 or step == optim.steps:
            if validation:
                val = evaluate(policy, validation, eval_decode, 1, spec, exact=eval_space is not None,
                               space=eval_space).pass1
            else:
                val = float("nan")
            rows.append(EvalRow(step, stats["train_reward"], stats["entropy"], stats["mean_len"], val,
                                oracle.tv(policy)))
            path = run_dir / "checkpoints" / f"step_{step}.json"
            save_checkpoint(path, step, policy, opt)
            ckpts[step] = path
            _write_csv(run_dir / "metrics.csv", METRICS_HEADER, [r.as_list() for r in rows])
            log.info("step %d reward %.4f len %.2f val %.4f", step, stats["train_reward"], stats["mean_len"], val)
        if step == optim.steps:
            break
        grad = estimate_gradient(policy, groups, regime)
        if not np.all(np.isfinite(grad)):
            save_checkpoint(run_dir / "checkpoints" / f"diverged_step_{step}.json", step, policy, opt)
            raise TrainingError(f"non-finite gradient at step {step}")
        policy = policy.with_params(opt.step(policy.params, -grad, optim.lr_at(step)))

    _write_csv(run_dir / "train_steps.csv", STEPS_HEADER,
               [[s[h] for h in STEPS_HEADER] for s in steps_log])
    return RunRecord(rows, ckpts, regime, optim, optim.global_seed, run_dir, steps_log)
