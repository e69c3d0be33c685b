"""Acceptance suite: one test per numbered criterion.

Each test records a one-line summary; ``conftest.py`` prints a PASS/FAIL
line per criterion at the end of the pytest run.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from naive import (
    brute_force_eer,
    brute_force_min_dcf,
    brute_force_points_vectorized,
    conv_loops,
    ffn_numpy,
    mhsa_numpy,
    stats_loops,
)
from poformer.gradcheck import check_model_gradients
from poformer.layers import DropPathSpec, drop_path
from poformer.metrics import TrialSet, compute_eer, compute_min_dcf
from poformer.model import (
    FFNParams,
    MHSAParams,
    PEGParams,
    PoFormerConfig,
    ffn_forward,
    init_params,
    mhsa_forward,
    peg_forward,
    poformer_forward,
    stats_pooling_forward,
    transformer_layer_forward,
)
from poformer.layers import LinearParams
from poformer.tensor import Tensor, depthwise_conv1d
from poformer.train import (
    LRSchedule,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    embed_utterances,
    format_log,
    lr_at_step,
    make_trial_list,
    score_trials,
    train_run,
)
from poformer.model import named_parameters

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def summarize(record_property, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    record_property("detail", detail)
    assert ok, detail


@pytest.mark.criterion(1, "full-model gradient check")
def test_full_model_gradient_check(record_property):
    config = TrainConfig.load(CONFIGS / "gradcheck.json")
    m = config.model
    assert (m.num_layers, m.d_model, m.num_heads) == (2, 16, 2)
    assert (config.task.frames_per_utterance, config.run.batch_size) == (11, 3)
    t0 = time.perf_counter()
    errors = check_model_gradients(config, h=1e-5)
    elapsed = time.perf_counter() - t0
    name, worst = max(errors.items(), key=lambda kv: kv[1])
    ok = worst < 1e-4 and elapsed < 60.0
    summarize(record_property, ok, f"{len(errors)} tensors, worst rel err {worst:.2e} ({name}), {elapsed:.1f}s")


@pytest.mark.criterion(2, "identity suite")
def test_identity_suite(record_property):
    rng = np.random.default_rng(0)
    cfg = PoFormerConfig(feat_dim=81, num_classes=20)
    worst = 0.0
    for _ in range(5):
        params = init_params(cfg, rng)
        x = Tensor(rng.normal(size=(4, 17, cfg.d_model)))
        layer = params.layers[0]

        # zero LayerScale
        g1, g2 = layer.gamma1.data.copy(), layer.gamma2.data.copy()
        layer.gamma1.data[:] = 0.0
        layer.gamma2.data[:] = 0.0
        out = transformer_layer_forward(x, layer, "pre", DropPathSpec(0.3, "train", rng))
        worst = max(worst, float(np.max(np.abs(out.data - x.data))))
        layer.gamma1.data[:], layer.gamma2.data[:] = g1, g2

        # both branches dropped
        out = transformer_layer_forward(x, layer, "pre", DropPathSpec(0.3, "train", forced=False))
        worst = max(worst, float(np.max(np.abs(out.data - x.data))))

        # zero PEG kernel
        out = peg_forward(x, PEGParams(Tensor(np.zeros((cfg.peg_kernel, cfg.d_model)))))
        worst = max(worst, float(np.max(np.abs(out.data - x.data))))

        # eval-mode drop path matches p = 0
        frames = Tensor(rng.normal(size=(3, 20, cfg.tdnn_dims[-1])))
        ev = poformer_forward(frames, params, cfg, "eval")
        p0 = PoFormerConfig(**{**cfg.to_dict(), "drop_path": 0.0})
        tr = poformer_forward(frames, params, p0, "train", rng)
        worst = max(worst, float(np.max(np.abs(ev.data - tr.data))))
        branch = Tensor(rng.normal(size=(6, 5, 4)))
        worst = max(worst, float(np.max(np.abs(drop_path(branch, DropPathSpec(0.45, "eval", rng)).data - branch.data))))
    summarize(record_property, worst <= 1e-12, f"max abs deviation {worst:.1e} over 5 draws (tol 1e-12)")


@pytest.mark.criterion(3, "permutation invariance without position signal")
def test_permutation_invariance(record_property):
    rng = np.random.default_rng(1)
    base_cfg = PoFormerConfig(feat_dim=81, num_classes=20)
    frames = rng.normal(size=(50, base_cfg.tdnn_dims[-1]))

    cfg = PoFormerConfig(**{**base_cfg.to_dict(), "pos_encoding": "none"})
    params = init_params(cfg, rng)
    ref = poformer_forward(Tensor(frames), params, cfg).data
    invariant = max(
        float(np.max(np.abs(poformer_forward(Tensor(frames[rng.permutation(50)]), params, cfg).data - ref)))
        for _ in range(50)
    )

    assert base_cfg.peg_kernel == 9
    params = init_params(base_cfg, rng)
    ref = poformer_forward(Tensor(frames), params, base_cfg).data
    variant = max(
        float(np.max(np.abs(poformer_forward(Tensor(frames[rng.permutation(50)]), params, base_cfg).data - ref)))
        for _ in range(50)
    )
    ok = invariant < 1e-10 and variant > 1e-6
    summarize(record_property, ok, f"no position signal: max diff {invariant:.1e}; PEG k=9: max diff {variant:.2e}")


@pytest.mark.criterion(4, "metric oracle equivalence")
def test_metric_oracle(record_property):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        labels = rng.random(1000) < rng.uniform(0.05, 0.5)
        labels[:2] = [True, False]
        scores = rng.normal(size=1000) + labels * rng.uniform(0.0, 3.0)
        if i % 3 == 0:
            scores = np.round(scores, 2)  # heavy ties
        ts = TrialSet(labels, scores)
        tgt, non = ts.target_scores, ts.nontarget_scores
        sweep = brute_force_points_vectorized
        worst = max(
            worst,
            abs(compute_eer(ts) - brute_force_eer(tgt, non, sweep=sweep)),
            abs(compute_min_dcf(ts) - brute_force_min_dcf(tgt, non, sweep=sweep)),
        )
    worked = TrialSet.from_scores([0.8, 0.6, 0.4], [0.7, 0.3, 0.2])
    eer, dcf = compute_eer(worked), compute_min_dcf(worked)
    ok = worst <= 1e-12 and abs(eer - 1 / 3) <= 1e-12 and abs(dcf - 2 / 3) <= 1e-12
    summarize(record_property, ok, f"100 sets x 1000 trials max diff {worst:.1e}; worked example EER={eer:.6f} minDCF={dcf:.6f}")


@pytest.mark.criterion(5, "schedule endpoints")
def test_schedule_endpoints(record_property):
    s = LRSchedule()
    peak, floor = lr_at_step(10_000, s), lr_at_step(100_000, s)
    left, right = lr_at_step(9_999, s), lr_at_step(10_001, s)
    jump = max(abs(left - peak), abs(right - peak))
    # no step larger than one warmup increment on either side of the boundary
    ok = peak == 1e-3 and floor == 5e-5 and jump <= (s.lr_max / s.warmup_steps) * (1 + 1e-9)
    summarize(record_property, ok, f"lr(10000)={peak!r} lr(100000)={floor!r}; max one-step change at boundary {jump:.1e}")


@pytest.mark.criterion(6, "drop-path expectation")
def test_drop_path_expectation(record_property):
    rng = np.random.default_rng(3)
    branch = rng.normal(size=(7, 5))
    n = 10_000
    parts = []
    ok = True
    for p in (0.2, 0.3, 0.45):
        # each batch row draws its own mask, so one call gives n independent masks
        samples = drop_path(Tensor(np.broadcast_to(branch, (n, 7, 5)).copy()), DropPathSpec(p, "train", rng)).data
        se = samples.std(axis=0, ddof=1) / math.sqrt(n)
        z = float(np.max(np.abs(samples.mean(axis=0) - branch) / se))
        ok = ok and z <= 3.0
        parts.append(f"p={p}: max |z|={z:.2f}")
    summarize(record_property, ok, ", ".join(parts))


def _heldout_eer(params, model_cfg, task_cfg):
    ids, trials = make_trial_list(range(20, 40), 6, seed=99)
    emb = embed_utterances(params, model_cfg, task_cfg, ids)
    scores = score_trials(emb, trials)
    return compute_eer(TrialSet([t[0] for t in trials], [s for *_, s in scores]))


@pytest.mark.criterion(7, "desk-scale learning")
def test_desk_scale_learning(record_property):
    t0 = time.perf_counter()
    cfg = TrainConfig.load(CONFIGS / "desk.json")
    assert (cfg.model.num_layers, cfg.model.d_model, cfg.model.head) == (2, 32, "class_token")
    assert (cfg.task.num_speakers, cfg.run.steps) == (20, 2000)
    _, ckpt = train_run(cfg)
    eer_poformer = _heldout_eer(ckpt.params, cfg.model, cfg.task)

    base = TrainConfig.load(CONFIGS / "desk_baseline.json")
    assert base.model.head == "stats_pooling_baseline" and base.run == cfg.run and base.task == cfg.task
    _, ckpt = train_run(base)
    eer_baseline = _heldout_eer(ckpt.params, base.model, base.task)

    over = TrainConfig.load(CONFIGS / "overfit.json")
    assert over.run.fixed_batch and over.run.steps == 200 and over.run.batch_size == 8
    records, _ = train_run(over)
    losses = [r[2] for r in records]
    reduction = 1.0 - losses[-1] / losses[0]
    elapsed = time.perf_counter() - t0

    ok = (
        eer_poformer <= 0.05
        and eer_baseline <= 0.10
        and reduction >= 0.90
        and all(map(math.isfinite, losses))
        and elapsed < 15 * 60
    )
    summarize(
        record_property,
        ok,
        f"PoFormer EER {eer_poformer:.4f}, baseline EER {eer_baseline:.4f}, "
        f"overfit loss reduction {reduction:.1%}, {elapsed:.0f}s",
    )


@pytest.mark.criterion(8, "checkpoint determinism")
def test_checkpoint_determinism(record_property):
    cfg = TrainConfig.load(CONFIGS / "desk.json")
    cfg.run.steps = 8
    cfg.schedule.total_steps, cfg.schedule.warmup_steps = 8, 2
    full, end_full = train_run(cfg)
    first, mid = train_run(cfg, stop_at=4)
    blob = checkpoint_bytes(mid)
    loaded = checkpoint_from_bytes(blob)
    bit_exact = all(
        np.array_equal(a.data, b.data) for (_, a), (_, b) in zip(named_parameters(mid.params), named_parameters(loaded.params))
    )
    stable = checkpoint_bytes(loaded) == blob
    rest, end_resumed = train_run(cfg, resume=loaded)
    same_log = format_log(first + rest) == format_log(full)
    same_end = checkpoint_bytes(end_resumed) == checkpoint_bytes(end_full)
    ok = bit_exact and stable and same_log and same_end
    summarize(
        record_property,
        ok,
        f"round trip bit-exact={bit_exact}, resave identical={stable}, resumed log identical={same_log}, "
        f"final state identical={same_end}",
    )


@pytest.mark.criterion(9, "reference equivalence")
def test_reference_equivalence(record_property):
    rng = np.random.default_rng(4)
    mismatches = []
    for draw in range(20):
        L, d = int(rng.integers(2, 30)), 8
        n = int(rng.choice([1, 2, 4]))
        dk = d // n
        x = rng.normal(size=(L, d))
        wq, wk, wv = ([rng.normal(size=(d, dk)) for _ in range(n)] for _ in range(3))
        wo = rng.normal(size=(d, d))
        got = mhsa_forward(Tensor(x), MHSAParams(*([Tensor(w) for w in ws] for ws in (wq, wk, wv)), Tensor(wo)))
        if not np.array_equal(got.data, mhsa_numpy(x, wq, wk, wv, wo)):
            mismatches.append(f"mhsa#{draw}")

        h = int(rng.integers(4, 20))
        w1, b1, w2, b2 = rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=(h, d)), rng.normal(size=d)
        act = "relu" if draw % 2 else "gelu"
        ffn = FFNParams(LinearParams(Tensor(w1), Tensor(b1)), LinearParams(Tensor(w2), Tensor(b2)))
        if not np.array_equal(ffn_forward(Tensor(x), ffn, act).data, ffn_numpy(x, w1, b1, w2, b2, act)):
            mismatches.append(f"ffn#{draw}")

        k = int(rng.choice([1, 3, 5, 9]))
        kern = rng.normal(size=(k, d))
        if not np.array_equal(depthwise_conv1d(Tensor(x), Tensor(kern)).data, conv_loops(x, kern)):
            mismatches.append(f"conv#{draw}")

        if not np.array_equal(stats_pooling_forward(Tensor(x)).data, stats_loops(x)):
            mismatches.append(f"stats#{draw}")
    summarize(
        record_property,
        not mismatches,
        f"80 comparisons over 20 draws, mismatches: {', '.join(mismatches) or 'none'}",
    )
