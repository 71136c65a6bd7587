"""Inference-time generation: ancestral sampling, beam search and power sampling.

Randomness comes from counter-based streams (see :mod:`sharpen_lab.seeding`):
draw ``t`` of a rollout's stream decides its ``t``-th token, so a batch of
rollouts is bit-identical to generating each one alone with its own seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import LengthMode, Policy, TokenSeq, _as_ids, batch_logprob, response_seq
from .seeding import as_seed_array, derive_seed, uniforms


@dataclass(frozen=True)
class DecodeConfig:
    method: str = "ancestral"
    temperature: float = 1.0
    beam_width: int = 4
    length_penalty: float = 0.0
    alpha: float = 4.0
    block_count: int = 4
    mcmc_steps: int = 10
    length: LengthMode = field(default_factory=LengthMode)
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("ancestral", "beam", "power"):
            raise ConfigError(f"unknown decode method {self.method!r}", "decode.method")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0", "decode.temperature")
        if self.method == "beam" and self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1", "decode.beam_width")
        if self.method == "power":
            if not self.alpha >= 1:
                raise ConfigError("power sampling needs alpha >= 1", "decode.alpha")
            if self.block_count < 1:
                raise ConfigError("block_count must be >= 1", "decode.block_count")
            if self.mcmc_steps < 0:
                raise ConfigError("mcmc_steps must be >= 0", "decode.mcmc_steps")


@dataclass(frozen=True)
class Sample:
    response: TokenSeq
    logprob_policy: float
    logprob_base: float | None = None


@dataclass
class Rollouts:
    """A batch of sampled responses as padded arrays.

    ``tokens`` is (N, l_max), pad-filled past each response's end;
    ``token_logp`` holds the temperature-1 log-probability of each emitted token.
    """

    tokens: np.ndarray
    lengths: np.ndarray
    token_logp: np.ndarray

    @property
    def logp(self) -> np.ndarray:
        return self.token_logp.sum(axis=1)

    def response(self, i: int) -> tuple[int, ...]:
        return tuple(self.tokens[i, : self.lengths[i]].tolist())

    def responses(self) -> list[tuple[int, ...]]:
        return [self.response(i) for i in range(len(self.lengths))]


def prompt_block(policy: Policy, prompts) -> np.ndarray:
    """Left-padded prompt histories of width ``k + max prompt length``."""
    k, pad = policy.k, policy.arch.pad_id
    ids = [_as_ids(p) for p in prompts]
    Lp = max((len(p) for p in ids), default=0)
    block = np.full((len(ids), k + Lp), pad, dtype=np.int64)
    for i, p in enumerate(ids):
        if p:
            block[i, k + Lp - len(p) :] = p
    return block


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p, axis=-1)
    idx = np.sum(cdf <= u[:, None], axis=-1)
    last = p.shape[-1] - 1 - np.argmax((p > 0)[:, ::-1], axis=-1)
    return np.minimum(idx, last)


def _extend(
    policy: Policy,
    pblock: np.ndarray,
    tokens: np.ndarray,
    token_logp: np.ndarray,
    start: np.ndarray,
    seeds: np.ndarray,
    counter_base: int,
    length: LengthMode,
    temperature: float = 1.0,
    greedy: bool = False,
):
    """Resample ``tokens[i, start[i]:]`` for every row; prefixes are kept as given."""
    N, L = tokens.shape
    k, pad, eos = policy.k, policy.arch.pad_id, policy.arch.eos_id
    P = pblock.shape[1]
    hist = np.concatenate([pblock, tokens], axis=1)
    tlp = token_logp.copy()
    cols = np.arange(L)[None, :]
    hist[:, P:][cols >= start[:, None]] = pad
    tlp[cols >= start[:, None]] = 0.0
    alive = np.ones(N, dtype=bool)
    lengths = start.copy()
    t0 = int(start.min()) if N else L
    for t in range(t0, L):
        rows = np.nonzero(alive & (t >= start))[0]
        if rows.size == 0:
            continue
        W = hist[rows, P + t - k : P + t]
        z = policy.logits(W)
        lp1 = _log_softmax(z)
        if greedy:
            choice = np.argmax(z, axis=-1)
        else:
            pT = np.exp(lp1 if temperature == 1.0 else _log_softmax(z / temperature))
            choice = _inverse_cdf(pT, uniforms(seeds[rows], counter_base + t))
        hist[rows, P + t] = choice
        tlp[rows, t] = lp1[np.arange(rows.size), choice]
        lengths[rows] = t + 1
        if length.mode == "variable":
            alive[rows[choice == eos]] = False
    return hist[:, P:], lengths, tlp


def sample_rollouts(
    policy: Policy,
    prompts,
    seeds,
    length: LengthMode,
    temperature: float = 1.0,
    greedy: bool = False,
    counter_base: int = 0,
) -> Rollouts:
    """Ancestral sampling for a batch; row ``i`` uses stream ``seeds[i]``.

    Variable mode stops a row at its first EOS (absorbing); fixed mode always
    emits ``l_max`` tokens and treats EOS as an ordinary token.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be > 0", "decode.temperature")
    seeds = as_seed_array(seeds)
    pblock = prompt_block(policy, prompts)
    N, L = len(seeds), length.l_max
    tokens = np.full((N, L), policy.arch.pad_id, dtype=np.int64)
    tok, lengths, tlp = _extend(
        policy, pblock, tokens, np.zeros((N, L)), np.zeros(N, dtype=np.int64),
        seeds, counter_base, length, temperature, greedy,
    )
    return Rollouts(tok, lengths, tlp)


def _finish(policy: Policy, prompt, ids, logp: float, base: Policy | None, length: LengthMode) -> Sample:
    lb = None
    if base is not None:
        lb = float(batch_logprob(base, [prompt], [ids], length)[0][0])
    return Sample(response_seq(ids), float(logp), lb)


def ancestral_sample(policy: Policy, prompt, cfg: DecodeConfig, base: Policy | None = None) -> Sample:
    if cfg.method != "ancestral":
        raise ConfigError("ancestral_sample needs method='ancestral'", "decode.method")
    r = sample_rollouts(policy, [prompt], [cfg.seed], cfg.length, cfg.temperature)
    return _finish(policy, prompt, r.response(0), r.logp[0], base, cfg.length)


def greedy_decode(policy: Policy, prompt, length: LengthMode) -> Sample:
    r = sample_rollouts(policy, [prompt], [0], length, greedy=True)
    return _finish(policy, prompt, r.response(0), r.logp[0], None, length)


def beam_search(base: Policy, prompt, cfg: DecodeConfig) -> Sample:
    """Length-synchronous beam search over variable-length responses.

    Finished hypotheses (EOS or ``l_max``) are scored by
    ``logp / len**length_penalty``. Ties rank by token order.
    """
    if cfg.method != "beam":
        raise ConfigError("beam_search needs method='beam'", "decode.method")
    W, L = cfg.beam_width, cfg.length.l_max
    eos, pad, k = base.arch.eos_id, base.arch.pad_id, base.k
    prefix = ((pad,) * k + _as_ids(prompt))
    beams: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for t in range(L):
        windows = np.array([(prefix + seq)[-k:] for seq, _ in beams], dtype=np.int64)
        lp = base.log_probs(windows)
        cands = []
        for (seq, s), row in zip(beams, lp):
            for tok in range(base.vocab_size):
                if tok != pad:
                    cands.append((seq + (tok,), s + float(row[tok])))
        cands.sort(key=lambda c: (-c[1], c[0]))
        beams = []
        for rank, (seq, s) in enumerate(cands):
            done = seq[-1] == eos or t == L - 1
            if done:
                if rank < W:
                    finished.append((seq, s))
            elif len(beams) < W:
                beams.append((seq, s))
        if not beams:
            break

    def score(c):
        return c[1] / (len(c[0]) ** cfg.length_penalty) if cfg.length_penalty else c[1]

    best = min(finished, key=lambda c: (-score(c), c[0]))
    return _finish(base, prompt, best[0], best[1], base, cfg.length)


def block_starts(l_max: int, block_count: int) -> np.ndarray:
    """Start positions of ``block_count`` contiguous blocks over ``l_max`` slots."""
    return np.array(sorted({(i * l_max) // block_count for i in range(block_count)}), dtype=np.int64)


def power_rollouts(base: Policy, prompts, seeds, cfg: DecodeConfig) -> Rollouts:
    """Block-wise independence Metropolis-Hastings targeting ``base**alpha``.

    Each step picks a block start ``s`` uniformly from a grid fixed by
    ``l_max``; if ``s`` lies past the end of the current response the step is
    a no-op. Otherwise the suffix from ``s`` is redrawn from ``base`` and
    accepted with probability ``min(1, (p_new_suffix / p_old_suffix)**(alpha - 1))``.
    """
    if cfg.alpha < 1:
        raise ConfigError("power sampling needs alpha >= 1", "decode.alpha")
    seeds = as_seed_array(seeds)
    length, L = cfg.length, cfg.length.l_max
    pblock = prompt_block(base, prompts)
    N = len(seeds)
    tokens = np.full((N, L), base.arch.pad_id, dtype=np.int64)
    tokens, lengths, tlp = _extend(
        base, pblock, tokens, np.zeros((N, L)), np.zeros(N, dtype=np.int64), seeds, 0, length
    )
    starts = block_starts(L, cfg.block_count)
    cols = np.arange(L)[None, :]
    stride = L + 2
    for j in range(cfg.mcmc_steps):
        c0 = (j + 1) * stride
        s = starts[np.minimum((uniforms(seeds, c0) * len(starts)).astype(np.int64), len(starts) - 1)]
        rows = np.nonzero(s < lengths)[0]
        if rows.size == 0:
            continue
        new_tok, new_len, new_tlp = _extend(
            base, pblock[rows], tokens[rows], tlp[rows], s[rows], seeds[rows], c0 + 1, length
        )
        tail = cols >= s[rows][:, None]
        log_ratio = (cfg.alpha - 1.0) * ((new_tlp * tail).sum(1) - (tlp[rows] * tail).sum(1))
        u = uniforms(seeds[rows], c0 + 1 + L)
        acc = u < np.exp(np.minimum(log_ratio, 0.0))
        take = rows[acc]
        tokens[take], lengths[take], tlp[take] = new_tok[acc], new_len[acc], new_tlp[acc]
    return Rollouts(tokens, lengths, tlp)


def power_sample(base: Policy, prompt, cfg: DecodeConfig) -> Sample:
    if cfg.method != "power":
        raise ConfigError("power_sample needs method='power'", "decode.method")
    r = power_rollouts(base, [prompt], [cfg.seed], cfg)
    return _finish(base, prompt, r.response(0), r.logp[0], base, cfg.length)


def decode(policy: Policy, prompt, cfg: DecodeConfig, base: Policy | None = None) -> Sample:
    if cfg.method == "ancestral":
        return ancestral_sample(policy, prompt, cfg, base)
    if cfg.method == "beam":
        return beam_search(policy, prompt, cfg)
    return power_sample(policy, prompt, cfg)


def decode_batch(policy: Policy, prompts, cfg: DecodeConfig, n: int) -> list[list[tuple[int, ...]]]:
    """``n`` responses for each prompt; stream seeds derive from ``cfg.seed``."""
    if cfg.method == "beam":
        return [[beam_search(policy, p, cfg).response.ids] * n for p in prompts]
    flat = [p for p in prompts for _ in range(n)]
    seeds = [derive_seed(cfg.seed, 0, i, r) for i in range(len(prompts)) for r in range(n)]
    if cfg.method == "ancestral":
        r = sample_rollouts(policy, flat, seeds, cfg.length, cfg.temperature)
    else:
        r = power_rollouts(policy, flat, seeds, cfg)
    resp = r.responses()
    return [resp[i * n : (i + 1) * n] for i in range(len(prompts))]
