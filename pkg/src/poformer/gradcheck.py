"""Full-model gradient check against central finite differences."""

from __future__ import annotations

import numpy as np

from .model import init_params, named_parameters
from .tensor import finite_diff_grad
from .train import TrainConfig, loss_on_batch, make_rng, synth_batch

# N=2, d=16, n=2; T and batch come from the task/run sections
GRADCHECK_CONFIG = {
    "model": {
        "num_layers": 2,
        "d_model": 16,
        "num_heads": 2,
        "ffn_dim": 32,
        "peg_kernel": 5,
        "drop_path": 0.3,
        "head": "class_token_plus_stats",
        "tdnn_dims": [12, 12, 12, 12, 16],
        "tdnn_activation": "gelu",
        "embed_dim": 16,
    },
    "task": {"num_speakers": 4, "frames_per_utterance": 11, "feature_dim": 8},
    "schedule": {"total_steps": 10, "warmup_steps": 1},
    "run": {"steps": 0, "batch_size": 3, "seed": 0},
}


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - n|| / max(||a||, ||n||)`` with a floor for all-zero gradients."""
    num = float(np.linalg.norm(analytic - numeric))
    den = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return num / den


def check_model_gradients(config: TrainConfig, h: float = 1e-5, mode: str = "train") -> dict[str, float]:
    """Relative error of backprop vs finite differences for every parameter tensor.

    Drop-path masks are frozen by re-seeding the generator before every
    forward pass, so the loss is a deterministic function of the weights.
    """
    rng = make_rng(config.run.seed)
    params = init_params(config.model, rng)
    feats, labels = synth_batch(config.task, config.run.batch_size, rng)
    mask_seed = config.run.seed + 1

    def loss():
        return loss_on_batch(params, config.model, feats, labels, mode, make_rng(mask_seed))

    named = list(named_parameters(params))
    for _, t in named:
        t.zero_grad()
    loss().backward()
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for _, t in named]
    numeric = finite_diff_grad(lambda: loss().item(), [t for _, t in named], h)
    return {name: rel_error(a, n) for (name, _), a, n in zip(named, analytic, numeric)}


def default_gradcheck_config() -> TrainConfig:
    return TrainConfig.from_dict(GRADCHECK_CONFIG)


__all__ = ["GRADCHECK_CONFIG", "check_model_gradients", "default_gradcheck_config", "rel_error"]
