"""Exact ground truth by exhaustive enumeration of the response space."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError, InputError, InternalError, SizeError
from .model import LengthMode, Policy, Vocab, batch_logprob, batch_logprob_grad, history_windows
from .objective import RegimeConfig, surrogate_from_arrays
from .tasks import Instance, TaskSpec, extract_answer

SPACE_GUARD = 10**6


@dataclass(frozen=True, eq=False)
class ResponseSpace:
    """All terminated-or-truncated responses (variable) or all length-``l_max`` strings (fixed).

    ``tokens`` is the (S, l_max) pad-filled array, ``lengths`` the true lengths.
    """

    sequences: tuple[tuple[int, ...], ...]
    vocab: Vocab
    l_max: int
    mode: str
    tokens: np.ndarray
    lengths: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.sequences)

    def answers(self, spec: TaskSpec) -> list:
        """Extracted answer (or None) for every sequence; memoized per task."""
        key = ("answers", spec.family, tuple(sorted(spec.params.items())))
        if key not in self._cache:
            self._cache[key] = [extract_answer(s, spec) for s in self.sequences]
        return self._cache[key]

    def truncated_lengths(self) -> np.ndarray:
        if "tlen" not in self._cache:
            eos = self.vocab.eos_id
            self._cache["tlen"] = np.array(
                [s.index(eos) + 1 if eos in s else len(s) for s in self.sequences], dtype=np.float64
            )
        return self._cache["tlen"]

    @property
    def length(self) -> LengthMode:
        return LengthMode(self.mode, self.l_max)


@dataclass(frozen=True, eq=False)
class OracleDist:
    space: ResponseSpace
    probs: np.ndarray


def space_size(vocab_size: int, l_max: int, mode: str = "variable") -> int:
    if mode == "fixed":
        return (vocab_size - 1) ** l_max
    a = vocab_size - 2
    return sum(a**t for t in range(l_max)) + a**l_max


def enumerate_space(vocab: Vocab, l_max: int, mode: str = "variable") -> ResponseSpace:
    """Enumerate in length-lexicographic order."""
    alphabet = vocab.interior_ids if mode == "variable" else sorted(vocab.interior_ids + [vocab.eos_id])
    top = len(alphabet) ** l_max
    if top > SPACE_GUARD:
        raise SizeError(f"{len(alphabet)}**{l_max} = {top} sequences exceeds guard {SPACE_GUARD}")
    if mode == "fixed":
        seqs = list(itertools.product(alphabet, repeat=l_max))
    else:
        seqs = [p + (vocab.eos_id,) for t in range(l_max) for p in itertools.product(alphabet, repeat=t)]
        seqs += list(itertools.product(alphabet, repeat=l_max))
        seqs.sort(key=lambda s: (len(s), s))
    tokens = np.full((len(seqs), l_max), vocab.pad_id, dtype=np.int64)
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
    return ResponseSpace(tuple(seqs), vocab, l_max, mode, tokens, lengths)


def _prefix_tree(space: ResponseSpace):
    """Unique proper prefixes of the space and, per (sequence, position), the prefix index.

    Scoring one window per prefix instead of one per (sequence, position)
    shrinks the work by roughly the alphabet size.
    """
    if "prefix" not in space._cache:
        index: dict = {}
        ids = np.full(space.tokens.shape, -1, dtype=np.int64)
        for i, seq in enumerate(space.sequences):
            for t in range(len(seq)):
                ids[i, t] = index.setdefault(seq[:t], len(index))
        prefixes = np.full((len(index), space.l_max), space.vocab.pad_id, dtype=np.int64)
        plen = np.zeros(len(index), dtype=np.int64)
        for pre, j in index.items():
            prefixes[j, : len(pre)] = pre
            plen[j] = len(pre)
        space._cache["prefix"] = (prefixes, plen, ids)
    return space._cache["prefix"]


def _space_logprobs(policy: Policy, prompt, space: ResponseSpace, temperature: float = 1.0) -> np.ndarray:
    """Log-probability of every sequence; ``temperature`` renormalizes each step (token-level)."""
    prefixes, plen, ids = _prefix_tree(space)
    W = history_windows(policy, [prompt] * len(prefixes), prefixes)
    lp = policy.log_probs(W[np.arange(len(prefixes)), plen], temperature)
    mask = ids >= 0
    tok = lp[np.where(mask, ids, 0), np.where(mask, space.tokens, 0)]
    return np.where(mask, tok, 0.0).sum(axis=1)


def exact_policy_dist(policy: Policy, prompt, space: ResponseSpace, temperature: float = 1.0) -> OracleDist:
    """Exact distribution of the policy's (EOS-absorbing) sampler over ``space``.

    ``temperature`` applies per token, as in tempered ancestral sampling.
    """
    probs = np.exp(_space_logprobs(policy, prompt, space, temperature))
    total = probs.sum()
    if abs(total - 1.0) > 1e-6:
        raise InternalError(f"enumerated probabilities sum to {total}")
    return OracleDist(space, probs)


def task_rewards(space: ResponseSpace, instance: Instance, spec: TaskSpec) -> np.ndarray:
    gold = tuple(instance.gold)
    return np.array([a is not None and tuple(a) == gold for a in space.answers(spec)], dtype=np.float64)


def exact_target_dist(
    base: OracleDist, regime: RegimeConfig, rewards: np.ndarray | None = None
) -> OracleDist:
    """Closed-form optimum for beta > 0: ``base**alpha * exp(r / beta)``, normalized."""
    if regime.beta == 0:
        raise DomainError("beta = 0 optima are argmax sets; use exact_metrics(...).argmax")
    with np.errstate(divide="ignore"):
        logw = regime.alpha * np.log(base.probs)
    if regime.reward_kind == "task" and not math.isinf(regime.beta):
        if rewards is None:
            raise DomainError("tilted target needs task rewards")
        logw = logw + np.asarray(rewards, dtype=np.float64) / regime.beta
    return OracleDist(base.space, np.exp(logw - logsumexp(logw)))


def dist_distance(p: OracleDist, q: OracleDist, metric: str = "tv") -> float:
    if p.space is not q.space and p.space.sequences != q.space.sequences:
        raise InputError("distributions live on different spaces")
    if metric == "tv":
        return 0.5 * float(np.abs(p.probs - q.probs).sum())
    if metric == "kl":
        m = p.probs > 0
        if np.any(q.probs[m] == 0):
            return math.inf
        return float(np.sum(p.probs[m] * np.log(p.probs[m] / q.probs[m])))
    raise InputError(f"unknown metric {metric!r}")


@dataclass
class ExactMetrics:
    expected_reward: float
    pass_at: dict[int, float]
    maj_at: dict[int, float]
    argmax: tuple[int, ...]
    mean_length: float


def pass_at_k(p: float, k: int) -> float:
    return 1.0 - (1.0 - p) ** k


def majority_vote(answers, rng_uniforms: np.ndarray, answer_probs: np.ndarray, gold, k: int) -> float:
    """Monte-Carlo maj@k: committees of ``k`` answers drawn from ``answer_probs``.

    Ties go to the lexicographically smallest answer; responses without an
    answer do not vote.
    """
    order = sorted(range(len(answers)), key=lambda i: (answers[i] is None, answers[i] or ()))
    answers = [answers[i] for i in order]
    cdf = np.cumsum(answer_probs[order])
    draws = np.minimum(np.searchsorted(cdf, rng_uniforms * cdf[-1], side="right"), len(answers) - 1)
    # relabel to the answers actually drawn; np.unique keeps the lexicographic order
    drawn, compact = np.unique(draws, return_inverse=True)
    n, m = len(drawn), len(rng_uniforms) // k
    counts = np.bincount(np.repeat(np.arange(m), k) * n + compact.ravel(), minlength=m * n).reshape(m, n)
    counts[:, [answers[a] is None for a in drawn]] = 0
    winner = drawn[np.argmax(counts, axis=1)]  # first maximum = smallest answer
    has_vote = counts.max(axis=1) > 0
    gold_idx = answers.index(tuple(gold)) if tuple(gold) in answers else -1
    return float(np.mean(has_vote & (winner == gold_idx)))


def exact_metrics(
    dist: OracleDist,
    instance: Instance,
    spec: TaskSpec,
    k_list=(1, 16),
    committees: int = 10_000,
    seed: int = 0,
) -> ExactMetrics:
    space = dist.space
    rewards = task_rewards(space, instance, spec)
    p = float(np.dot(dist.probs, rewards))
    lengths = space.truncated_lengths()
    best = min(np.flatnonzero(dist.probs == dist.probs.max()), key=lambda i: space.sequences[i])
    by_answer: dict = {}
    for a, q in zip(space.answers(spec), dist.probs):
        by_answer[a] = by_answer.get(a, 0.0) + q
    answers = list(by_answer)
    aprobs = np.array([by_answer[a] for a in answers])
    rng = np.random.default_rng(seed)
    maj = {}
    for k in k_list:
        if k < 1:
            raise InputError("k must be >= 1")
        maj[k] = majority_vote(answers, rng.random(committees * k), aprobs, instance.gold, k)
    return ExactMetrics(
        expected_reward=p,
        pass_at={k: pass_at_k(p, k) for k in k_list},
        maj_at=maj,
        argmax=space.sequences[best],
        mean_length=float(np.dot(dist.probs, lengths)),
    )


def exact_objective(
    policy: Policy, regime: RegimeConfig, prompt, space: ResponseSpace, rewards: np.ndarray, base: Policy | None
) -> float:
    """``E_pi[r] - beta * KL(pi || base**alpha)`` (unnormalized reference) by enumeration.

    For beta = inf the objective is divided by beta, leaving ``-KL``.
    """
    lt = _space_logprobs(policy, prompt, space)
    pi = np.exp(lt)
    lb = _space_logprobs(base, prompt, space) if regime.uses_base else None
    return float(np.dot(pi, surrogate_from_arrays(regime, rewards, lt, lb)))


def exact_gradient(
    policy: Policy,
    regime: RegimeConfig,
    prompt,
    space: ResponseSpace,
    rewards: np.ndarray,
    base: Policy | None = None,
    centered: bool = True,
) -> np.ndarray:
    """``sum_y pi(y) (r~(y) - E r~) grad log pi(y)`` term by term over the space."""
    if space.mode != regime.length.mode or space.l_max != regime.length.l_max:
        raise InputError("space does not match the regime's length mode")
    lt = _space_logprobs(policy, prompt, space)
    pi = np.exp(lt)
    lb = _space_logprobs(base, prompt, space) if regime.uses_base else None
    sur = surrogate_from_arrays(regime, rewards, lt, lb)
    if centered:
        sur = sur - np.dot(pi, sur)
    grad, _ = batch_logprob_grad(policy, [prompt] * len(space), space.sequences, space.length, pi * sur)
    return grad
