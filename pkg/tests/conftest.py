import sys
from pathlib import Path

import numpy as np
import pytest

from sharpen_lab.model import Arch, LengthMode, Vocab, context_free_policy, init_policy

sys.path.insert(0, str(Path(__file__).parent))

REPO = Path(__file__).resolve().parents[1]


@pytest.fixture
def ab_vocab():
    """a, b, <eos>, <pad>."""
    return Vocab.build(["a", "b"])


@pytest.fixture
def q_policy(ab_vocab):
    """Context-free base with next-token distribution a:0.5, b:0.3, EOS:0.2."""
    v = ab_vocab
    return context_free_policy([0.5, 0.3, 0.2, 0.0], v.pad_id, v.eos_id)


def random_policy(rng, backend, V=4, k=2, emb=3, hidden=4, scale=1.0):
    """Random policy over a vocab whose last two ids are <eos>, <pad>."""
    arch = Arch(k=k, vocab_size=V, pad_id=V - 1, eos_id=V - 2,
                emb=emb if backend == "neural" else 0, hidden=hidden if backend == "neural" else 0)
    pol = init_policy(arch, backend, int(rng.integers(1 << 31)))
    noise = rng.normal(0.0, scale, pol.params.size)
    return pol.with_params(pol.params + noise)


def random_response(rng, policy, l_max, mode):
    V, eos = policy.vocab_size, policy.arch.eos_id
    alphabet = [t for t in range(V) if t != policy.arch.pad_id]
    if mode == "fixed":
        return tuple(int(x) for x in rng.choice(alphabet, size=l_max))
    n = int(rng.integers(1, l_max + 1))
    body = [int(x) for x in rng.choice([t for t in alphabet if t != eos], size=n)]
    if rng.random() < 0.5:
        body[-1] = eos
    return tuple(body)


@pytest.fixture
def variable2():
    return LengthMode("variable", 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE_COUNT = 12


def pytest_configure(config):
    config._acceptance = {}


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion's verdict and measured detail."""

    def record(criterion, ok, detail):
        request.config._acceptance[criterion] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    numbered = [c for c in range(1, ACCEPTANCE_COUNT + 1)]
    extra = sorted(c for c in results if c not in numbered)
    for c in numbered + extra:
        ok, detail = results.get(c, (False, "not measured (test errored or was deselected)"))
        label = f"criterion {c:>2}" if isinstance(c, int) else f"{c:>12}"
        terminalreporter.write_line(f"{label}: {'PASS' if ok else 'FAIL'}  {detail}")
