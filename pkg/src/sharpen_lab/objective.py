"""Regimes of the KL-regularized objective and the leave-one-out policy-gradient estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decode import Sample
from .errors import ConfigError, InternalError
from .model import LengthMode, Policy, TokenSeq, batch_logprob_grad
from .tasks import Instance

REGIMES = ("task_rl", "tilted", "dist_sharpen", "tempered")
_REWARD_KIND = {"task_rl": "task", "tilted": "task", "dist_sharpen": "base_logprob", "tempered": "none"}


@dataclass(frozen=True)
class RegimeConfig:
    """One row of the regime table.

    ``beta`` may be ``math.inf`` (the reference term dominates; the optimum is
    the tempered base).
    """

    name: str
    reward_kind: str
    alpha: float
    beta: float
    length: LengthMode
    group_size: int

    @property
    def uses_base(self) -> bool:
        return self.reward_kind == "base_logprob" or self.beta > 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alpha": self.alpha,
            "beta": "inf" if math.isinf(self.beta) else self.beta,
            "group_size": self.group_size,
        }


def build_regime(
    name: str,
    alpha: float = 1.0,
    beta: float | str | None = None,
    length: LengthMode | None = None,
    group_size: int = 8,
) -> RegimeConfig:
    if name not in REGIMES:
        raise ConfigError(f"unknown regime {name!r}; expected one of {REGIMES}", "regime.name")
    if beta == "inf":
        beta = math.inf
    if beta is None:
        beta = {"task_rl": 0.0, "dist_sharpen": 0.0, "tilted": 0.1, "tempered": 1.0}[name]
    beta = float(beta)
    alpha = float(alpha)
    if not alpha >= 1.0:
        raise ConfigError(f"alpha must be >= 1, got {alpha}", "regime.alpha")
    if not beta >= 0.0:
        raise ConfigError(f"beta must be >= 0, got {beta}", "regime.beta")
    if name in ("task_rl", "dist_sharpen") and beta != 0.0:
        raise ConfigError(f"{name} has no KL term; beta must be 0", "regime.beta")
    if name in ("tilted", "tempered") and beta == 0.0:
        raise ConfigError(f"{name} needs beta > 0", "regime.beta")
    if group_size < 2:
        raise ConfigError("group_size must be >= 2 for leave-one-out baselines", "regime.group_size")
    return RegimeConfig(name, _REWARD_KIND[name], alpha, beta, length or LengthMode(), int(group_size))


@dataclass
class RolloutGroup:
    prompt: TokenSeq
    instance: Instance | None
    responses: list[Sample]
    task_rewards: np.ndarray
    logprob_theta: np.ndarray
    logprob_base: np.ndarray | None
    surrogate: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return len(self.responses)


def surrogate_from_arrays(regime: RegimeConfig, task_rewards, logprob_theta, logprob_base) -> np.ndarray:
    """Per-trajectory score ``r + beta * (alpha * log base - log theta)``.

    ``log theta`` is a plain value here; no gradient flows through it.
    """
    r = np.asarray(task_rewards, dtype=np.float64)
    if regime.uses_base:
        if logprob_base is None:
            raise InternalError(f"regime {regime.name} needs base log-probabilities")
        lb = np.asarray(logprob_base, dtype=np.float64)
    if regime.reward_kind == "base_logprob":
        return lb.copy()
    if regime.beta == 0:
        return r.copy()
    ref = regime.alpha * lb - np.asarray(logprob_theta, dtype=np.float64)
    if math.isinf(regime.beta):
        # objective divided by beta: the task reward vanishes, the reference term keeps unit weight
        return ref
    if regime.reward_kind == "none":
        return regime.beta * ref
    return r + regime.beta * ref


def surrogate_reward(group: RolloutGroup, regime: RegimeConfig) -> np.ndarray:
    return surrogate_from_arrays(regime, group.task_rewards, group.logprob_theta, group.logprob_base)


def rloo_advantages(surrogate) -> np.ndarray:
    """``A_i = r_i - mean_{j != i} r_j`` for one group."""
    r = np.asarray(surrogate, dtype=np.float64)
    k = r.shape[-1]
    if k < 2:
        raise ConfigError("leave-one-out advantages need k >= 2", "group_size")
    return (r - r.mean(axis=-1, keepdims=True)) * (k / (k - 1))


def make_group(
    policy: Policy,
    instance: Instance,
    samples: list[Sample],
    task_rewards,
    regime: RegimeConfig,
) -> RolloutGroup:
    lt = np.array([s.logprob_policy for s in samples])
    lb = None
    if samples and samples[0].logprob_base is not None:
        lb = np.array([s.logprob_base for s in samples])
    r = np.asarray(task_rewards, dtype=np.float64)
    sur = surrogate_from_arrays(regime, r, lt, lb)
    return RolloutGroup(instance.prompt, instance, list(samples), r, lt, lb, sur, rloo_advantages(sur))


def estimate_gradient(policy: Policy, groups: list[RolloutGroup], regime: RegimeConfig) -> np.ndarray:
    """``1/(N k) * sum_i A_i grad log pi(y_i)`` over all trajectories of all groups."""
    if not groups:
        raise ConfigError("need at least one group", "groups")
    prompts, responses, weights, recorded = [], [], [], []
    for g in groups:
        for s, a, lt in zip(g.responses, g.advantages, g.logprob_theta):
            prompts.append(g.prompt)
            responses.append(s.response)
            weights.append(a)
            recorded.append(lt)
    weights = np.asarray(weights) / len(weights)
    grad, logp = batch_logprob_grad(policy, prompts, responses, regime.length, weights)
    if not np.allclose(logp, recorded, rtol=0, atol=1e-8):
        raise InternalError("rollout log-probabilities do not match the policy being differentiated")
    return grad


def entropy_metric(groups: list[RolloutGroup], token_counts: np.ndarray | None = None) -> float:
    """Token-weighted entropy estimate ``-sum log pi / sum tokens``.

    ``token_counts`` defaults to the length of each response as stored.
    """
    lt = np.concatenate([g.logprob_theta for g in groups])
    if token_counts is None:
        token_counts = np.array([len(s.response) for g in groups for s in g.responses])
    return float(-lt.sum() / np.sum(token_counts))
