"""AM-softmax objective, cosine scoring and detection metrics (EER, minDCF)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, l2_normalize, log_softmax_rows


def am_softmax_loss(
    embeddings: Tensor,
    labels: Sequence[int],
    class_weights: Tensor,
    scale: float = 30.0,
    margin: float = 0.25,
) -> Tensor:
    """Additive-margin softmax over cosine logits, averaged over the batch.

    The margin is subtracted from the target-class cosine only; all logits
    are then multiplied by ``scale``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = class_weights.shape[0]
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise ValueError(f"expected (B, e) embeddings and B labels, got {embeddings.shape}, {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((labels.size, num_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    cos = l2_normalize(embeddings) @ l2_normalize(class_weights).transpose()
    logits = (cos - onehot * margin) * scale
    return -(log_softmax_rows(logits) * onehot).sum() * (1.0 / labels.size)


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# trials and metrics


@dataclass
class TrialSet:
    """Scores with boolean target labels (True = same speaker)."""

    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise ValueError("labels and scores must be 1-d arrays of equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[object, float]]) -> TrialSet:
        pairs = list(pairs)
        labels = [lab in (1, True, "target", "1") for lab, _ in pairs]
        return cls(np.array(labels, dtype=bool), np.array([s for _, s in pairs], dtype=np.float64))

    @classmethod
    def from_scores(cls, target_scores, nontarget_scores) -> TrialSet:
        t = np.asarray(target_scores, dtype=np.float64)
        n = np.asarray(nontarget_scores, dtype=np.float64)
        return cls(np.r_[np.ones(t.size, bool), np.zeros(n.size, bool)], np.r_[t, n])

    @property
    def target_scores(self) -> np.ndarray:
        return self.scores[self.labels]

    @property
    def nontarget_scores(self) -> np.ndarray:
        return self.scores[~self.labels]


@dataclass
class DCFParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    normalize: bool = True

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError(f"p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("detection costs must be positive")


def det_curve(trials: TrialSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Operating points ``(thresholds, p_miss, p_fa)`` for accept-iff-score>=threshold.

    Thresholds run from -inf (accept all) through each distinct score above
    the minimum to +inf (reject all); the minimum score would repeat the
    accept-all point.
    """
    tgt = np.sort(trials.target_scores)
    non = np.sort(trials.nontarget_scores)
    if tgt.size == 0 or non.size == 0:
        raise ValueError("need at least one target and one nontarget trial")
    distinct = np.unique(trials.scores)[1:]
    thresholds = np.r_[-np.inf, distinct, np.inf]
    p_miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return thresholds, p_miss, p_fa


def compute_eer(trials: TrialSet) -> float:
    """Equal error rate, linearly interpolated between the bracketing DET points."""
    _, p_miss, p_fa = det_curve(trials)
    diff = p_miss - p_fa
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        return float(p_miss[j])
    t = -diff[j - 1] / (diff[j] - diff[j - 1])
    return float(p_miss[j - 1] + t * (p_miss[j] - p_miss[j - 1]))


def compute_min_dcf(trials: TrialSet, params: DCFParams | None = None) -> float:
    params = params or DCFParams()
    _, p_miss, p_fa = det_curve(trials)
    cost = params.c_miss * params.p_target * p_miss + params.c_fa * (1.0 - params.p_target) * p_fa
    best = float(cost.min())
    if params.normalize:
        best /= min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    return best


# ---------------------------------------------------------------------------
# text formats


def read_trials(path: str | Path) -> list[tuple[bool, str, str]]:
    """Parse ``<label> <enroll-id> <test-id>`` lines (label 1 = target)."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise ValueError(f"{path}:{lineno}: expected '<1|0> <enroll-id> <test-id>', got {line!r}")
        out.append((parts[0] == "1", parts[1], parts[2]))
    return out


def write_trials(path: str | Path, trials: Iterable[tuple[bool, str, str]]) -> None:
    lines = [f"{int(bool(lab))} {e} {t}\n" for lab, e, t in trials]
    Path(path).write_text("".join(lines))


def read_scores(path: str | Path) -> dict[tuple[str, str], float]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected '<enroll-id> <test-id> <score>', got {line!r}")
        out[(parts[0], parts[1])] = float(parts[2])
    return out


def write_scores(path: str | Path, scores: Iterable[tuple[str, str, float]]) -> None:
    Path(path).write_text("".join(f"{e} {t} {float(s)!r}\n" for e, t, s in scores))


def trialset_from_files(scores_path: str | Path, trials_path: str | Path) -> TrialSet:
    scores = read_scores(scores_path)
    labels, values = [], []
    for lab, e, t in read_trials(trials_path):
        if (e, t) not in scores:
            raise KeyError(f"no score for trial {e} {t}")
        labels.append(lab)
        values.append(scores[(e, t)])
    return TrialSet(np.array(labels, dtype=bool), np.array(values))
