"""Write an utterance list and an all-pairs trial list for held-out synthetic speakers.

The outputs feed ``poformer eval --utterances ... --trials ...``.
"""

import argparse
from pathlib import Path

from poformer.metrics import write_trials
from poformer.train import make_trial_list


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--first-speaker", type=int, default=20, help="speaker ids at or above num_speakers are unseen in training")
    ap.add_argument("--num-speakers", type=int, default=20)
    ap.add_argument("--utts-per-speaker", type=int, default=6)
    ap.add_argument("--seed", type=int, default=99, help="utterance seed, distinct from the training seed")
    ap.add_argument("--out-dir", default="trials")
    args = ap.parse_args()

    speakers = range(args.first_speaker, args.first_speaker + args.num_speakers)
    ids, trials = make_trial_list(speakers, args.utts_per_speaker, args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "utterances.txt").write_text("\n".join(ids) + "\n")
    write_trials(out / "trials.txt", trials)
    n_target = sum(t[0] for t in trials)
    print(f"{len(ids)} utterances, {len(trials)} trials ({n_target} target) -> {out}/")


if __name__ == "__main__":
    main()
