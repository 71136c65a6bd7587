"""Synthetic verifiable tasks and noisy pretraining corpora.

Responses follow one format: ``filler* <ans> answer... <eos>``.  The reward
checks the span between the first ``<ans>`` delimiter and the end of the
(EOS-truncated) response against the gold answer.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .model import TokenSeq, Vocab, prompt_seq, response_seq, truncate_at_eos

ANS = "<ans>"
FILL = "_"
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_FRACTIONS = (0.6, 0.2, 0.2)
LETTERS = "abcdefgh"


@dataclass(frozen=True)
class TaskSpec:
    family: str
    params: Mapping
    l_max: int
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        p = dict(self.params)
        object.__setattr__(self, "params", p)
        if self.family == "modadd":
            m = int(p.get("modulus", 0))
            if not 2 <= m <= 9:
                raise ConfigError("modadd modulus must be in [2, 9]", "task.params.modulus")
            symbols = [str(d) for d in range(m)] + ["+"]
        elif self.family == "reverse":
            a = int(p.get("alphabet", 0))
            if not 2 <= a <= len(LETTERS):
                raise ConfigError(f"reverse alphabet must be in [2, {len(LETTERS)}]", "task.params.alphabet")
            self._check_range(p)
            symbols = list(LETTERS[:a])
        elif self.family == "parity":
            self._check_range(p)
            symbols = ["0", "1"]
        else:
            raise ConfigError(f"unknown task family {self.family!r}", "task.family")
        vocab = Vocab.build(symbols + [ANS, FILL])
        object.__setattr__(self, "vocab", vocab)
        if self.max_answer_len() + 2 > self.l_max:
            raise ConfigError(
                f"l_max={self.l_max} cannot hold '<ans> answer <eos>' (needs {self.max_answer_len() + 2})",
                "length.l_max",
            )

    @staticmethod
    def _check_range(p):
        lo, hi = int(p.get("min_len", 0)), int(p.get("max_len", 0))
        if not 1 <= lo <= hi:
            raise ConfigError("need 1 <= min_len <= max_len", "task.params")

    @property
    def ans_id(self) -> int:
        return self.vocab.id(ANS)

    @property
    def fill_id(self) -> int:
        return self.vocab.id(FILL)

    def max_answer_len(self) -> int:
        if self.family == "reverse":
            return int(self.params["max_len"])
        return 1

    def all_prompts(self) -> list[tuple[int, ...]]:
        """Every prompt of the family, in a fixed order."""
        v = self.vocab
        if self.family == "modadd":
            m = int(self.params["modulus"])
            plus = v.id("+")
            return [(v.id(str(a)), plus, v.id(str(b))) for a in range(m) for b in range(m)]
        lo, hi = int(self.params["min_len"]), int(self.params["max_len"])
        if self.family == "parity":
            alpha = [v.id("0"), v.id("1")]
        else:
            alpha = [v.id(c) for c in LETTERS[: int(self.params["alphabet"])]]
        return [tuple(t) for n in range(lo, hi + 1) for t in itertools.product(alpha, repeat=n)]

    def gold(self, prompt: Sequence[int]) -> tuple[int, ...]:
        v = self.vocab
        ids = tuple(prompt)
        if self.family == "modadd":
            m = int(self.params["modulus"])
            a, b = int(v.tokens[ids[0]]), int(v.tokens[ids[2]])
            return (v.id(str((a + b) % m)),)
        if self.family == "reverse":
            return tuple(reversed(ids))
        return (v.id(str(sum(int(v.tokens[i]) for i in ids) % 2)),)

    def answer_space(self, prompt: Sequence[int]) -> list[tuple[int, ...]]:
        """All well-formed answers of the right shape for ``prompt``."""
        v = self.vocab
        if self.family == "modadd":
            return [(v.id(str(d)),) for d in range(int(self.params["modulus"]))]
        if self.family == "parity":
            return [(v.id("0"),), (v.id("1"),)]
        alpha = [v.id(c) for c in LETTERS[: int(self.params["alphabet"])]]
        return [tuple(t) for t in itertools.product(alpha, repeat=len(tuple(prompt)))]

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params), "l_max": self.l_max}


@dataclass(frozen=True)
class Instance:
    prompt: TokenSeq
    gold: tuple[int, ...]


@dataclass
class Corpus:
    pairs: list[tuple[TokenSeq, TokenSeq]]
    noise_rate: float
    verbosity_profile: dict[int, float]
    abstain_rate: float = 0.0


def split_of(prompt: Sequence[int], fractions=DEFAULT_SPLIT_FRACTIONS) -> str:
    """Deterministic split label from a hash of the prompt key."""
    key = ",".join(str(int(t)) for t in prompt).encode()
    u = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big") / 2.0**64
    acc = 0.0
    for name, f in zip(SPLITS, fractions):
        acc += f
        if u < acc:
            return name
    return SPLITS[-1]


def split_prompts(spec: TaskSpec, split: str | None, fractions=DEFAULT_SPLIT_FRACTIONS) -> list[tuple[int, ...]]:
    prompts = spec.all_prompts()
    if split is None:
        return prompts
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}", "split")
    return [p for p in prompts if split_of(p, fractions) == split]


def generate_instances(
    spec: TaskSpec,
    n: int,
    seed: int,
    split: str | None = "train",
    fractions=DEFAULT_SPLIT_FRACTIONS,
) -> list[Instance]:
    """Draw ``n`` instances (with replacement) from one split of the prompt space."""
    if n < 1:
        raise ConfigError("n must be >= 1", "n")
    pool = split_prompts(spec, split, fractions)
    if not pool:
        raise ConfigError(f"split {split!r} of {spec.family} has no prompts", "split")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pool), size=n)
    return [Instance(prompt_seq(pool[i]), spec.gold(pool[i])) for i in picks]


def unique_instances(spec: TaskSpec, split: str | None, fractions=DEFAULT_SPLIT_FRACTIONS) -> list[Instance]:
    """Every instance of a split exactly once, in a fixed order."""
    return [Instance(prompt_seq(p), spec.gold(p)) for p in split_prompts(spec, split, fractions)]


def extract_answer(response: TokenSeq | Sequence[int], spec: TaskSpec) -> tuple[int, ...] | None:
    """Answer span after the first delimiter of the EOS-truncated response, or None."""
    ids = truncate_at_eos(response, spec.vocab.eos_id).ids
    if ids and ids[-1] == spec.vocab.eos_id:
        ids = ids[:-1]
    try:
        i = ids.index(spec.ans_id)
    except ValueError:
        return None
    return ids[i + 1 :]


def verify(response: TokenSeq | Sequence[int], instance: Instance, spec: TaskSpec) -> int:
    """Binary task reward; never raises on malformed responses."""
    try:
        ans = extract_answer(response, spec)
    except Exception:
        return 0
    return int(ans is not None and tuple(ans) == tuple(instance.gold))


def demonstration(spec: TaskSpec, answer: Sequence[int], filler: int) -> TokenSeq:
    return response_seq((spec.fill_id,) * filler + (spec.ans_id,) + tuple(answer) + (spec.vocab.eos_id,))


def generate_pretrain_corpus(
    spec: TaskSpec,
    n: int,
    noise_rate: float,
    verbosity_profile: Mapping[int, float],
    seed: int,
    abstain_rate: float = 0.0,
    split: str | None = None,
) -> Corpus:
    """Noisy demonstrations over the prompt space.

    A demonstration is a bare ``<eos>`` with probability ``abstain_rate``;
    otherwise ``filler*f <ans> answer <eos>`` with ``f`` drawn from
    ``verbosity_profile`` and the answer correct with probability
    ``1 - noise_rate`` (uniformly wrong otherwise).
    """
    if not 0.0 <= noise_rate <= 1.0:
        raise ConfigError("noise_rate must be in [0, 1]", "corpus.noise_rate")
    if not 0.0 <= abstain_rate <= 1.0:
        raise ConfigError("abstain_rate must be in [0, 1]", "corpus.abstain_rate")
    profile = {int(f): float(w) for f, w in verbosity_profile.items()}
    if not profile or any(w < 0 for w in profile.values()) or sum(profile.values()) <= 0:
        raise ConfigError("verbosity profile needs nonnegative weights with positive sum", "corpus.verbosity")
    for f in profile:
        if f < 0 or f + spec.max_answer_len() + 2 > spec.l_max:
            raise ConfigError(f"filler length {f} exceeds l_max={spec.l_max}", "corpus.verbosity")
    lengths = sorted(profile)
    weights = np.array([profile[f] for f in lengths]) / sum(profile.values())
    pool = split_prompts(spec, split)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        prompt = pool[rng.integers(len(pool))]
        gold = spec.gold(prompt)
        if rng.random() < abstain_rate:
            pairs.append((prompt_seq(prompt), response_seq((spec.vocab.eos_id,))))
            continue
        f = lengths[rng.choice(len(lengths), p=weights)]
        if rng.random() < noise_rate:
            wrong = [a for a in spec.answer_space(prompt) if a != gold]
            answer = wrong[rng.integers(len(wrong))]
        else:
            answer = gold
        pairs.append((prompt_seq(prompt), demonstration(spec, answer, f)))
    return Corpus(pairs, noise_rate, dict(zip(lengths, weights.tolist())), abstain_rate)


# -- JSON-lines files ------------------------------------------------------------


def write_instances(path, instances: Sequence[Instance]) -> None:
    with open(path, "w") as f:
        for inst in instances:
            f.write(json.dumps({"prompt": list(inst.prompt.ids), "gold": list(inst.gold)}) + "\n")


def read_instances(path) -> list[Instance]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(Instance(prompt_seq(rec["prompt"]), tuple(rec["gold"])))
    return out


def write_corpus(path, corpus: Corpus) -> None:
    with open(path, "w") as f:
        for p, r in corpus.pairs:
            f.write(json.dumps({"prompt": list(p.ids), "response": list(r.ids)}) + "\n")


def read_corpus(path) -> list[tuple[TokenSeq, TokenSeq]]:
    pairs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pairs.append((prompt_seq(rec["prompt"]), response_seq(rec["response"])))
    if not pairs:
        raise InputError(f"empty corpus file {path}")
    return pairs
