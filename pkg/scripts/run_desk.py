"""Train one or more configs on the synthetic task and report held-out EER / minDCF.

Example::

    python3 scripts/run_desk.py configs/desk.json configs/desk_baseline.json
    python3 scripts/run_desk.py configs/desk.json --set model.norm_placement=post --set model.drop_path=0.45
"""

import argparse
import json
import logging
import time

from poformer.metrics import TrialSet, compute_eer, compute_min_dcf
from poformer.train import TrainConfig, embed_utterances, make_trial_list, score_trials, train_run


def load_with_overrides(path, overrides):
    with open(path) as fh:
        raw = json.load(fh)
    for item in overrides:
        key, value = item.split("=", 1)
        section, field = key.split(".", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        raw.setdefault(section, {})[field] = parsed
    return TrainConfig.from_dict(raw)


def evaluate(params, config, speakers, utts_per_speaker, seed):
    ids, trials = make_trial_list(speakers, utts_per_speaker, seed)
    emb = embed_utterances(params, config.model, config.task, ids)
    scores = score_trials(emb, trials)
    ts = TrialSet([t[0] for t in trials], [s for *_, s in scores])
    return compute_eer(ts), compute_min_dcf(ts)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config field")
    ap.add_argument("--heldout-speakers", type=int, default=20)
    ap.add_argument("--utts-per-speaker", type=int, default=6)
    ap.add_argument("--eval-seed", type=int, default=99)
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    rows = []
    for path in args.configs:
        config = load_with_overrides(path, args.set)
        first = config.task.num_speakers
        t0 = time.perf_counter()
        records, ckpt = train_run(config)
        train_s = time.perf_counter() - t0
        unseen = range(first, first + args.heldout_speakers)
        eer, dcf = evaluate(ckpt.params, config, unseen, args.utts_per_speaker, args.eval_seed)
        final = records[-1][2] if records else float("nan")
        rows.append((path, config.model.head, final, eer, dcf, train_s))

    print(f"{'config':32s} {'head':24s} {'loss':>8s} {'EER':>8s} {'minDCF':>8s} {'time':>7s}")
    for path, head, loss, eer, dcf, secs in rows:
        print(f"{path:32s} {head:24s} {loss:8.4f} {eer:8.4f} {dcf:8.4f} {secs:6.0f}s")


if __name__ == "__main__":
    main()
