"""Vocabularies, token sequences and autoregressive policies.

Two backends share one interface:

* ``tabular``: one row of logits per context window of the last ``k`` tokens.
  Parameters are laid out as a dense ``(V**k, V)`` table, row index
  ``sum(w[i] * V**(k-1-i))`` for window ``w`` (oldest token first).
* ``neural``: concatenated token embeddings -> tanh hidden layer -> logits.
  Flat layout: ``emb (V, E) | W1 (k*E, H) | b1 (H) | W2 (H, V) | b2 (V)``.

The padding token is masked out of every softmax, so it is never sampled.
All gradients are derived by hand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

MAX_TABULAR_ROWS = 1 << 22


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    eos_id: int
    pad_id: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.tokens)
        if n < 3:
            raise ConfigError("vocab needs at least 3 tokens", "vocab")
        if len(set(self.tokens)) != n:
            raise ConfigError("vocab tokens must be unique", "vocab")
        if not (0 <= self.eos_id < n and 0 <= self.pad_id < n) or self.eos_id == self.pad_id:
            raise ConfigError("eos_id and pad_id must be distinct valid indices", "vocab")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, symbols: Sequence[str], eos: str = "<eos>", pad: str = "<pad>") -> "Vocab":
        tokens = tuple(symbols) + (eos, pad)
        return cls(tokens, len(tokens) - 2, len(tokens) - 1)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise InputError(f"unknown token {symbol!r}") from None

    def encode(self, symbols: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.id(s) for s in symbols)

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def interior_ids(self) -> list[int]:
        """Tokens that may appear before the end of a variable-length response."""
        return [i for i in range(len(self)) if i not in (self.eos_id, self.pad_id)]

    def to_dict(self) -> dict:
        return {"tokens": list(self.tokens), "eos_id": self.eos_id, "pad_id": self.pad_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["tokens"]), int(d["eos_id"]), int(d["pad_id"]))


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    kind: str = "response"

    def __post_init__(self):
        if self.kind not in ("prompt", "response"):
            raise InputError(f"kind must be prompt or response, got {self.kind!r}")
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


def prompt_seq(ids: Sequence[int]) -> TokenSeq:
    return TokenSeq(tuple(ids), "prompt")


def response_seq(ids: Sequence[int]) -> TokenSeq:
    return TokenSeq(tuple(ids), "response")


@dataclass(frozen=True)
class LengthMode:
    mode: str = "variable"
    l_max: int = 8

    def __post_init__(self):
        if self.mode not in ("variable", "fixed"):
            raise ConfigError(f"length mode must be variable or fixed, got {self.mode!r}", "length.mode")
        if int(self.l_max) < 1:
            raise ConfigError("l_max must be >= 1", "length.l_max")


def truncate_at_eos(response: TokenSeq | Sequence[int], eos_id: int) -> TokenSeq:
    """Prefix up to and including the first EOS; identity when there is none."""
    ids = tuple(response)
    for i, t in enumerate(ids):
        if t == eos_id:
            return response_seq(ids[: i + 1])
    return response_seq(ids)


@dataclass(frozen=True)
class Arch:
    k: int
    vocab_size: int
    pad_id: int
    eos_id: int
    emb: int = 0
    hidden: int = 0

    def n_params(self, backend: str) -> int:
        V, k = self.vocab_size, self.k
        if backend == "tabular":
            return V**k * V
        E, H = self.emb, self.hidden
        return V * E + k * E * H + H + H * V + V

    def validate(self, backend: str) -> None:
        if backend not in ("tabular", "neural"):
            raise ConfigError(f"unknown backend {backend!r}", "policy.backend")
        if self.k < 1:
            raise ConfigError("context window k must be >= 1", "policy.k")
        if self.vocab_size < 3:
            raise ConfigError("vocab_size must be >= 3", "policy.vocab_size")
        if not (0 <= self.pad_id < self.vocab_size and 0 <= self.eos_id < self.vocab_size):
            raise ConfigError("pad_id/eos_id out of range", "policy")
        if self.pad_id == self.eos_id:
            raise ConfigError("pad_id and eos_id must differ", "policy")
        if backend == "tabular" and self.vocab_size**self.k > MAX_TABULAR_ROWS:
            raise ConfigError(
                f"tabular table would have {self.vocab_size}**{self.k} rows", "policy.k"
            )
        if backend == "neural" and (self.emb < 1 or self.hidden < 1):
            raise ConfigError("neural arch needs emb >= 1 and hidden >= 1", "policy")


@dataclass(frozen=True, eq=False)
class Policy:
    backend: str
    arch: Arch
    params: np.ndarray

    def __post_init__(self):
        self.arch.validate(self.backend)
        p = np.array(self.params, dtype=np.float64)
        if p.ndim != 1 or p.size != self.arch.n_params(self.backend):
            raise ConfigError(
                f"params length {p.size} does not match arch ({self.arch.n_params(self.backend)})",
                "params",
            )
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    def with_params(self, params: np.ndarray) -> "Policy":
        return Policy(self.backend, self.arch, params)

    @property
    def k(self) -> int:
        return self.arch.k

    @property
    def vocab_size(self) -> int:
        return self.arch.vocab_size

    # -- neural parameter views ---------------------------------------------
    def _neural_parts(self, params=None):
        a = self.arch
        V, E, H, k = a.vocab_size, a.emb, a.hidden, a.k
        p = self.params if params is None else params
        o = 0
        emb = p[o : o + V * E].reshape(V, E); o += V * E
        W1 = p[o : o + k * E * H].reshape(k * E, H); o += k * E * H
        b1 = p[o : o + H]; o += H
        W2 = p[o : o + H * V].reshape(H, V); o += H * V
        b2 = p[o : o + V]
        return emb, W1, b1, W2, b2

    def _row_index(self, windows: np.ndarray) -> np.ndarray:
        V = self.vocab_size
        idx = np.zeros(windows.shape[:-1], dtype=np.int64)
        for i in range(self.k):
            idx = idx * V + windows[..., i]
        return idx

    # -- forward / backward -------------------------------------------------
    def logits(self, windows: np.ndarray) -> np.ndarray:
        """Raw logits for ``windows`` of shape (..., k); pad column is -inf."""
        windows = np.asarray(windows, dtype=np.int64)
        if windows.size and (windows.min() < 0 or windows.max() >= self.vocab_size):
            raise InputError("token index out of range")
        if self.backend == "tabular":
            table = self.params.reshape(-1, self.vocab_size)
            out = table[self._row_index(windows)]
        else:
            emb, W1, b1, W2, b2 = self._neural_parts()
            x = emb[windows].reshape(*windows.shape[:-1], -1)
            h = np.tanh(x @ W1 + b1)
            out = h @ W2 + b2
        out = np.array(out, dtype=np.float64)
        out[..., self.arch.pad_id] = -np.inf
        return out

    def log_probs(self, windows: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        z = self.logits(windows)
        if temperature != 1.0:
            z = z / temperature
        m = np.max(z, axis=-1, keepdims=True)
        z = z - m
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))

    def probs(self, windows: np.ndarray, temperature: float = 1.0) -> np.ndarray:
        return np.exp(self.log_probs(windows, temperature))

    def backward(self, windows: np.ndarray, dlogits: np.ndarray) -> np.ndarray:
        """Vector-Jacobian product: d(sum dlogits * logits)/d params."""
        windows = np.asarray(windows, dtype=np.int64).reshape(-1, self.k)
        d = np.array(dlogits, dtype=np.float64).reshape(-1, self.vocab_size)
        d[:, self.arch.pad_id] = 0.0
        grad = np.zeros_like(self.params)
        if self.backend == "tabular":
            g = grad.reshape(-1, self.vocab_size)
            np.add.at(g, self._row_index(windows), d)
            return grad
        a = self.arch
        V, E, H, k = a.vocab_size, a.emb, a.hidden, a.k
        emb, W1, b1, W2, b2 = self._neural_parts()
        x = emb[windows].reshape(-1, k * E)
        h = np.tanh(x @ W1 + b1)
        gemb, gW1, gb1, gW2, gb2 = self._neural_parts(grad)
        gW2[...] = h.T @ d
        gb2[...] = d.sum(axis=0)
        dpre = (d @ W2.T) * (1.0 - h * h)
        gW1[...] = x.T @ dpre
        gb1[...] = dpre.sum(axis=0)
        dx = (dpre @ W1.T).reshape(-1, k, E)
        np.add.at(gemb, windows, dx)
        return grad


def init_policy(arch: Arch, backend: str, seed: int) -> Policy:
    """Zero logits for tabular; centered uniform(1/sqrt(fan_in)) weights for neural."""
    arch.validate(backend)
    if backend == "tabular":
        return Policy(backend, arch, np.zeros(arch.n_params(backend)))
    rng = np.random.default_rng(seed)
    V, E, H, k = arch.vocab_size, arch.emb, arch.hidden, arch.k
    pieces = [
        rng.uniform(-1, 1, V * E) / math.sqrt(V),
        rng.uniform(-1, 1, k * E * H) / math.sqrt(k * E),
        rng.uniform(-1, 1, H) / math.sqrt(k * E),
        rng.uniform(-1, 1, H * V) / math.sqrt(H),
        rng.uniform(-1, 1, V) / math.sqrt(H),
    ]
    return Policy(backend, arch, np.concatenate(pieces))


def context_free_policy(probs: Sequence[float], pad_id: int, eos_id: int, k: int = 1) -> Policy:
    """Tabular policy whose next-token distribution is ``probs`` in every context.

    ``probs`` is indexed by token id and must put zero mass on ``pad_id``;
    other zero entries become ``-inf`` logits, so one-hot rows are allowed.
    """
    probs = np.asarray(probs, dtype=np.float64)
    V = probs.size
    if probs[pad_id] != 0.0:
        raise ConfigError("pad must carry zero probability", "probs")
    with np.errstate(divide="ignore"):
        row = np.where(np.arange(V) == pad_id, 0.0, np.log(probs))
    arch = Arch(k=k, vocab_size=V, pad_id=pad_id, eos_id=eos_id)
    return Policy("tabular", arch, np.tile(row, V**k))


# -- sequence scoring --------------------------------------------------------


def _as_ids(seq) -> tuple[int, ...]:
    return tuple(seq.ids) if isinstance(seq, TokenSeq) else tuple(int(t) for t in seq)


def history_windows(policy: Policy, prompts: Sequence, responses: np.ndarray) -> np.ndarray:
    """Context windows for predicting ``responses[:, t]``; shape (N, T, k).

    Prompts are left-padded with the pad token, which is equivalent to the
    left-padding of short contexts.
    """
    k, pad = policy.k, policy.arch.pad_id
    N, T = responses.shape
    Lp = max((len(p) for p in prompts), default=0)
    hist = np.full((N, k + Lp + T), pad, dtype=np.int64)
    for i, p in enumerate(prompts):
        ids = _as_ids(p)
        if ids:
            hist[i, k + Lp - len(ids) : k + Lp] = ids
    hist[:, k + Lp :] = responses
    view = sliding_window_view(hist, k, axis=1)
    return view[:, Lp : Lp + T]


def scored_lengths(responses: Sequence, length: LengthMode, eos_id: int, pad_id: int) -> np.ndarray:
    """Number of per-token terms in each response's log-likelihood; validates mode constraints."""
    out = np.empty(len(responses), dtype=np.int64)
    for i, r in enumerate(responses):
        ids = _as_ids(r)
        if pad_id in ids:
            raise InputError("pad token inside a response")
        if len(ids) > length.l_max:
            raise InputError(f"response length {len(ids)} exceeds l_max={length.l_max}")
        if length.mode == "fixed":
            if len(ids) != length.l_max:
                raise InputError(f"fixed mode needs exactly {length.l_max} tokens, got {len(ids)}")
            out[i] = length.l_max
        else:
            n = len(ids)
            for j, t in enumerate(ids):
                if t == eos_id:
                    n = j + 1
                    break
            if n == 0:
                raise InputError("empty response")
            out[i] = n
    return out


def _pack(responses: Sequence, n: np.ndarray, pad_id: int) -> np.ndarray:
    T = int(n.max()) if len(n) else 0
    arr = np.full((len(responses), T), pad_id, dtype=np.int64)
    for i, r in enumerate(responses):
        ids = _as_ids(r)[: n[i]]
        arr[i, : len(ids)] = ids
    return arr


def _token_logprobs(policy, prompts, packed, n):
    W = history_windows(policy, prompts, packed)
    lp = policy.log_probs(W)
    mask = np.arange(packed.shape[1])[None, :] < n[:, None]
    tgt = np.where(mask, packed, 0)
    tok = np.take_along_axis(lp, tgt[..., None], axis=-1)[..., 0]
    return W, lp, mask, tgt, np.where(mask, tok, 0.0)


def batch_logprob(policy: Policy, prompts: Sequence, responses: Sequence, length: LengthMode):
    """Log-likelihoods and scored token counts for a batch of (prompt, response) pairs."""
    pad = policy.arch.pad_id
    n = scored_lengths(responses, length, policy.arch.eos_id, pad)
    if len(n) == 0:
        return np.zeros(0), n
    packed = _pack(responses, n, pad)
    *_, tok = _token_logprobs(policy, prompts, packed, n)
    return tok.sum(axis=1), n


def batch_logprob_grad(
    policy: Policy,
    prompts: Sequence,
    responses: Sequence,
    length: LengthMode,
    weights: np.ndarray,
):
    """``sum_n weights[n] * grad log pi(response_n)`` plus the per-sequence log-likelihoods."""
    pad = policy.arch.pad_id
    n = scored_lengths(responses, length, policy.arch.eos_id, pad)
    packed = _pack(responses, n, pad)
    W, lp, mask, tgt, tok = _token_logprobs(policy, prompts, packed, n)
    w = np.asarray(weights, dtype=np.float64)[:, None] * mask
    d = -np.exp(lp) * w[..., None]
    np.put_along_axis(d, tgt[..., None], np.take_along_axis(d, tgt[..., None], -1) + w[..., None], -1)
    return policy.backward(W, d), tok.sum(axis=1)


def next_token_dist(policy: Policy, context: TokenSeq | Sequence[int]) -> np.ndarray:
    """Next-token distribution after ``context`` (prompt followed by a response prefix)."""
    ids = _as_ids(context)
    k, pad = policy.k, policy.arch.pad_id
    window = ((pad,) * k + ids)[-k:]
    return policy.probs(np.array(window, dtype=np.int64)[None, :])[0]


def sequence_logprob(policy: Policy, prompt, response, length: LengthMode) -> float:
    lp, _ = batch_logprob(policy, [prompt], [response], length)
    return float(lp[0])


def sequence_logprob_grad(policy: Policy, prompt, response, length: LengthMode) -> np.ndarray:
    g, _ = batch_logprob_grad(policy, [prompt], [response], length, np.ones(1))
    return g


# -- serialization -------------------------------------------------------------


def policy_to_dict(policy: Policy) -> dict:
    a = policy.arch
    arch = {"k": a.k, "vocab_size": a.vocab_size, "pad_id": a.pad_id, "eos_id": a.eos_id}
    if policy.backend == "neural":
        arch.update(emb=a.emb, hidden=a.hidden)
    return {"backend": policy.backend, "arch": arch, "params": policy.params.tolist()}


def policy_from_dict(d: dict) -> Policy:
    arch = Arch(**{key: int(v) for key, v in d["arch"].items()})
    return Policy(d["backend"], arch, np.array(d["params"], dtype=np.float64))


def save_policy(policy: Policy, path) -> None:
    with open(path, "w") as f:
        json.dump(policy_to_dict(policy), f)


def load_policy(path) -> Policy:
    with open(path) as f:
        return policy_from_dict(json.load(f))
