"""Command-line entry point: ``poformer {train,eval,score,gradcheck,inspect}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .metrics import DCFParams, TrialSet, compute_eer, compute_min_dcf, read_trials, trialset_from_files, write_scores
from .model import count_parameters
from .train import (
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    embed_utterances,
    format_log,
    score_trials,
    train_run,
)

log = logging.getLogger("poformer")


def _default_seed() -> int | None:
    env = os.environ.get("POFORMER_SEED")
    return int(env) if env else None


def _print_metrics(trials: TrialSet, p_target: float, percent: bool) -> None:
    eer = compute_eer(trials)
    dcf = compute_min_dcf(trials, DCFParams(p_target=p_target))
    if percent:
        eer *= 100.0
    print(f"EER={eer:.6f} minDCF={dcf:.6f}")


def cmd_train(args) -> int:
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config.run.seed = args.seed
    t0 = time.time()
    records, ckpt = train_run(config)
    checkpoint_save(ckpt, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    log_path.write_text(format_log(records))
    final = records[-1][2] if records else float("nan")
    print(f"trained {ckpt.step} steps in {time.time() - t0:.1f}s, final loss {final:.6f}")
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = checkpoint_load(args.ckpt)
    utt_ids = [ln.strip() for ln in Path(args.utterances).read_text().splitlines() if ln.strip()]
    trials = read_trials(args.trials)
    known = set(utt_ids)
    missing = {u for _, e, t in trials for u in (e, t)} - known
    if missing:
        raise KeyError(f"trial ids missing from utterance list: {sorted(missing)[:5]}")
    emb = embed_utterances(ckpt.params, ckpt.config.model, ckpt.config.task, utt_ids)
    scores = score_trials(emb, trials)
    write_scores(args.scores_out, scores)
    ts = TrialSet([lab for lab, _, _ in trials], [s for _, _, s in scores])
    _print_metrics(ts, args.p_target, args.percent)
    return 0


def cmd_score(args) -> int:
    _print_metrics(trialset_from_files(args.scores, args.trials), args.p_target, args.percent)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_model_gradients

    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config.run.seed = args.seed
    t0 = time.time()
    errors = check_model_gradients(config, h=args.h)
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    print(f"checked {len(errors)} parameter tensors in {time.time() - t0:.1f}s")
    print(f"worst relative error {worst:.3e} ({name})")
    if worst >= args.tol:
        print(f"FAILED: {worst:.3e} >= tol {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def cmd_inspect(args) -> int:
    ckpt = checkpoint_load(args.ckpt)
    print(ckpt.config.to_json())
    print(f"step: {ckpt.step}")
    counts = count_parameters(ckpt.params)
    for key, n in counts.items():
        print(f"params.{key}: {n}")
    print(f"params.total: {sum(counts.values())}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on the synthetic speaker task")
    p.add_argument("--config", required=True, help="JSON config with model/task/optim/schedule/run")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log path (default: <out>.log)")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "embed synthetic utterances, score trials, report metrics"),
        ("score", cmd_score, "recompute metrics from an existing score file"),
    ):
        p = sub.add_parser(name, help=helptext)
        if name == "eval":
            p.add_argument("--ckpt", required=True)
            p.add_argument("--utterances", required=True, help="utterance ids, one 'speaker:index:seed' per line")
            p.add_argument("--scores-out", required=True)
        else:
            p.add_argument("--scores", required=True)
        p.add_argument("--trials", required=True, help="'<1|0> <enroll-id> <test-id>' per line")
        p.add_argument("--p-target", type=float, default=0.01)
        p.add_argument("--percent", action="store_true", help="print EER in percent")
        p.add_argument("--seed", type=int, default=_default_seed(), help="accepted for uniformity; eval is deterministic")
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="full-model finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="print checkpoint config, step and parameter counts")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"poformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
