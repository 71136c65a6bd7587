"""Command-line driver: pretrain, train, sample, oracle, eval and report.

Every subcommand reads the same JSON experiment config (see ``config.py``).
Failures print one JSON object on stderr and exit nonzero:
2 for invalid configs or inputs, 3 when training diverges, 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config, validate_config
from .decode import DecodeConfig, decode_batch
from .errors import ConfigError, InputError, LabError, SizeError, TrainingError
from .model import LengthMode, Policy, init_policy, load_policy, save_policy
from .oracle import SPACE_GUARD, enumerate_space, exact_policy_dist, exact_target_dist, space_size, task_rewards
from .seeding import derive_seed
from .tasks import (
    Instance,
    TaskSpec,
    extract_answer,
    generate_instances,
    generate_pretrain_corpus,
    prompt_seq,
    unique_instances,
    verify,
)
from .trainflow import evaluate, load_checkpoint, load_run, pretrain_mle, select_checkpoint, train_regime

log = logging.getLogger("sharpen_lab")

# stream tags for the config-level random draws
_CORPUS_TAG = 1 << 43
_INIT_TAG = 1 << 44
_DATA_TAG = 1 << 45

REPORT_HEADER = [
    "run", "criterion", "step", "strategy", "alpha", "beta", "length_mode",
    "pass1", "pass_k", "maj_k", "mean_len", "status",
]
COLLAPSE_POINTS = 0.10


# -- helpers shared by subcommands -------------------------------------------


def instances_for(cfg: ExperimentConfig, split: str) -> list[Instance]:
    n = cfg.data.get(f"n_{split}")
    if n is None:
        return unique_instances(cfg.spec, split, cfg.split_fractions)
    seed = derive_seed(cfg.global_seed, 0, _DATA_TAG, ("train", "val", "test").index(split))
    return generate_instances(cfg.spec, n, seed, split, cfg.split_fractions)


def pretrain_base(cfg: ExperimentConfig) -> Policy:
    c = cfg.corpus
    corpus = generate_pretrain_corpus(
        cfg.spec, c["n"], c["noise_rate"], {int(f): w for f, w in c["verbosity"].items()},
        seed=derive_seed(cfg.global_seed, 0, _CORPUS_TAG, 0), abstain_rate=c["abstain_rate"],
    )
    policy = init_policy(cfg.arch, cfg.backend, derive_seed(cfg.global_seed, 0, _INIT_TAG, 0))
    return pretrain_mle(policy, corpus, cfg.pretrain, LengthMode("variable", cfg.length.l_max))


def parse_prompt(spec: TaskSpec, text: str):
    tokens = text.split()
    try:
        return prompt_seq(spec.vocab.encode(tokens))
    except (KeyError, LabError):
        raise InputError(f"prompt {text!r} uses tokens outside {spec.vocab.tokens}") from None


def _eval_decoders(cfg: ExperimentConfig) -> list[DecodeConfig]:
    if cfg.decoders:
        return cfg.decoders
    return [DecodeConfig("ancestral", length=LengthMode("variable", cfg.length.l_max), seed=cfg.global_seed)]


def _exact_ok(cfg: ExperimentConfig, decode: DecodeConfig, want: bool) -> bool:
    return (want and decode.method == "ancestral"
            and space_size(len(cfg.spec.vocab), cfg.length.l_max, "variable") <= SPACE_GUARD)


def _writer(path):
    if path is None or str(path) == "-":
        return sys.stdout, False
    return open(path, "w", newline=""), True


# -- subcommands ----------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else cfg.run_dir / "base.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    base = pretrain_base(cfg)
    save_policy(base, out)
    print(json.dumps({"policy": str(out), "n_params": int(base.params.size)}))
    return 0


def cmd_run(args) -> int:
    """Pretrain (unless a base checkpoint is configured), then train the regime."""
    cfg = load_config(args.config)
    run_dir = Path(args.run_dir) if args.run_dir else cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    if cfg.base_checkpoint:
        base = load_policy(cfg.base_checkpoint)
        if base.arch != cfg.arch:
            raise ConfigError("base checkpoint architecture differs from the policy section", "base_checkpoint")
    else:
        base = pretrain_base(cfg)
    save_policy(base, run_dir / "base.json")
    resume = None
    if args.resume is not None:
        resume = load_checkpoint(run_dir / "checkpoints" / f"step_{args.resume}.json")
    record = train_regime(
        base, cfg.regime, instances_for(cfg, "train"), cfg.optim, run_dir, cfg.spec,
        validation=instances_for(cfg, "val"), exact_eval=cfg.eval["exact"], eval_k=cfg.eval["k"],
        resume=resume, config=cfg.resolved(),
    )
    last = record.rows[-1]
    print(json.dumps({"run_dir": str(run_dir), "steps": last.step, "val_pass1": last.val_pass1}))
    return 0


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    policy = load_policy(args.policy or cfg.run_dir / "base.json")
    prompt = parse_prompt(cfg.spec, args.prompt)
    dc = DecodeConfig(
        args.method, args.temperature, args.beam_width, args.length_penalty, args.alpha,
        args.block_count, args.mcmc_steps, LengthMode("variable", cfg.length.l_max),
        cfg.global_seed if args.seed is None else args.seed,
    )
    inst = Instance(prompt, cfg.spec.gold(prompt.ids))
    f, close = _writer(args.out)
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["prompt", "response", "answer", "correct"])
    V = cfg.spec.vocab
    for resp in decode_batch(policy, [prompt], dc, args.n)[0]:
        ans = extract_answer(resp, cfg.spec)
        w.writerow([" ".join(V.decode(prompt.ids)), " ".join(V.decode(resp)),
                    "" if ans is None else " ".join(V.decode(ans)), verify(resp, inst, cfg.spec)])
    if close:
        f.close()
    return 0


def cmd_oracle(args) -> int:
    """Dump the exact distribution (policy or regime target) as sequence,probability,reward."""
    cfg = load_config(args.config)
    policy = load_policy(args.policy or cfg.run_dir / "base.json")
    prompt = parse_prompt(cfg.spec, args.prompt)
    inst = Instance(prompt, cfg.spec.gold(prompt.ids))
    space = enumerate_space(cfg.spec.vocab, cfg.length.l_max, cfg.length.mode)
    rewards = task_rewards(space, inst, cfg.spec)
    dist = exact_policy_dist(policy, prompt, space, args.temperature)
    if args.target:
        dist = exact_target_dist(dist, cfg.regime, rewards)
    V = cfg.spec.vocab
    f, close = _writer(args.out)
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["sequence", "probability", "reward"])
    for seq, p, r in zip(space.sequences, dist.probs, rewards):
        w.writerow([" ".join(V.decode(seq)), repr(float(p)), int(r)])
    if close:
        f.close()
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    policy = load_policy(args.policy or cfg.run_dir / "base.json")
    insts = instances_for(cfg, args.split)
    k = args.k or cfg.eval["k"]
    f, close = _writer(args.out)
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["method", "temperature", "pass1", "pass_k", "maj_k", "mean_len", "k", "exact"])
    for dc in _eval_decoders(cfg):
        exact = _exact_ok(cfg, dc, cfg.eval["exact"] and not args.sampled)
        m = evaluate(policy, insts, dc, k, cfg.spec, exact=exact)
        w.writerow([dc.method, dc.temperature, repr(m.pass1), repr(m.pass_k), repr(m.maj_k),
                    repr(m.mean_len), k, int(exact)])
    if close:
        f.close()
    return 0


def _report_rows(run_dir: Path, split: str, k: int | None) -> list[list]:
    record = load_run(run_dir)
    cfg = validate_config(json.loads((run_dir / "config.json").read_text()))
    insts = instances_for(cfg, split)
    k = k or cfg.eval["k"]
    dc = DecodeConfig("ancestral", length=LengthMode("variable", cfg.length.l_max), seed=cfg.global_seed)
    exact = _exact_ok(cfg, dc, cfg.eval["exact"])
    reg = cfg.regime
    beta = "inf" if reg.beta == float("inf") else reg.beta
    rows = []
    for criterion in ("last", "best_validation"):
        ck = select_checkpoint(record, criterion)
        m = evaluate(ck.policy, insts, dc, k, cfg.spec, exact=exact)
        rows.append([str(run_dir), criterion, ck.step, reg.name, reg.alpha, beta, reg.length.mode,
                     m.pass1, m.pass_k, m.maj_k, m.mean_len, "ok"])
    last, best = rows
    if best[7] - last[7] > COLLAPSE_POINTS:
        last[-1] = "collapsed"
    return rows


def cmd_report(args) -> int:
    if not args.run_dirs:
        raise InputError("report needs at least one run directory")
    out_rows = []
    for d in args.run_dirs:
        try:
            out_rows.extend(_report_rows(Path(d), args.split, args.k))
        except (LabError, OSError, KeyError, ValueError) as e:
            log.warning("skipping %s: %s", d, e)
            print(json.dumps({"warning": "skipped", "run": str(d), "message": str(e)}), file=sys.stderr)
    if not out_rows:
        raise InputError("every run directory was incomplete")
    f, close = _writer(args.out)
    w = csv.writer(f, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in out_rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    if close:
        f.close()
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sharpen-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="fit the base policy on the noisy demonstration corpus")
    sp.add_argument("config")
    sp.add_argument("--out", help="policy JSON path (default: <run_dir>/base.json)")
    sp.set_defaults(func=cmd_pretrain)

    for name in ("train", "run"):
        sp = sub.add_parser(name, help="pretrain if needed, then train the configured regime")
        sp.add_argument("config")
        sp.add_argument("--run-dir", help="override the config's run_dir")
        sp.add_argument("--resume", type=int, help="resume from checkpoints/step_N.json")
        sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sample", help="decode responses for one prompt")
    sp.add_argument("config")
    sp.add_argument("--policy")
    sp.add_argument("--prompt", required=True, help="space-separated prompt tokens, e.g. '1 + 2'")
    sp.add_argument("--method", default="ancestral", choices=["ancestral", "beam", "power"])
    sp.add_argument("-n", type=int, default=8)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--beam-width", type=int, default=4)
    sp.add_argument("--length-penalty", type=float, default=0.0)
    sp.add_argument("--alpha", type=float, default=4.0)
    sp.add_argument("--block-count", type=int, default=4)
    sp.add_argument("--mcmc-steps", type=int, default=10)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("oracle", help="CSV dump of the exact response distribution")
    sp.add_argument("config")
    sp.add_argument("--policy")
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--temperature", type=float, default=1.0)
    sp.add_argument("--target", action="store_true", help="dump the regime's closed-form optimum instead")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("eval", help="pass@1, pass@k, maj@k and mean length per configured decoder")
    sp.add_argument("config")
    sp.add_argument("--policy")
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--sampled", action="store_true", help="sample even when exact evaluation is possible")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="last vs best-validation table over run directories")
    sp.add_argument("run_dirs", nargs="*")
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def _fail(code: int, e: Exception) -> int:
    rec = {"error": type(e).__name__, "message": str(e)}
    if getattr(e, "field", None):
        rec["field"] = e.field
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as e:
        return _fail(3, e)
    except (ConfigError, InputError, SizeError) as e:
        return _fail(2, e)
    except FileNotFoundError as e:
        return _fail(2, e)
    except LabError as e:
        return _fail(1, e)


if __name__ == "__main__":
    sys.exit(main())
