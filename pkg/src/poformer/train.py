"""Training recipe: warmup + cosine LR, AdamW, synthetic speakers, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .metrics import am_softmax_loss, cosine_score
from .model import ModelParams, PoFormerConfig, embed_forward, init_params, named_parameters
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass
class LRSchedule:
    lr_max: float = 1e-3
    lr_min: float = 5e-5
    total_steps: int = 100_000
    warmup_steps: int = 10_000

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")


def lr_at_step(step: int, sched: LRSchedule) -> float:
    """Linear warmup from 0, then cosine annealing from lr_max down to lr_min."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.lr_max * step / sched.warmup_steps
    frac = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    w = 0.5 * (1.0 + math.cos(math.pi * frac))
    # convex combination keeps both endpoints exact
    return w * sched.lr_max + (1.0 - w) * sched.lr_min


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamWState, lr: float
) -> None:
    """One in-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# synthetic speakers


@dataclass
class SyntheticTaskConfig:
    """Gaussian speaker-centroid task.

    A frame is ``centroid + spread * (noise + pattern_scale * pattern(t))``
    where the pattern is a random sinusoid along a random direction, drawn
    once per utterance.
    """

    num_speakers: int = 20
    frames_per_utterance: int = 300
    feature_dim: int = 81
    spread: float = 1.0
    pattern_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")
        if self.frames_per_utterance < 1 or self.feature_dim < 1:
            raise ValueError("frames_per_utterance and feature_dim must be positive")
        if self.spread < 0:
            raise ValueError("spread must be non-negative")


def speaker_centroid(cfg: SyntheticTaskConfig, speaker: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, 0, speaker]).normal(size=cfg.feature_dim)


def synth_utterance(
    cfg: SyntheticTaskConfig, speaker: int, index: int, seed: int | None = None, num_frames: int | None = None
) -> np.ndarray:
    """Features ``(T, F)`` for utterance ``index`` of ``speaker``.

    Any non-negative speaker id is valid; ids beyond ``num_speakers`` are
    speakers unseen in training.
    """
    seed = cfg.seed if seed is None else seed
    T = num_frames or cfg.frames_per_utterance
    rng = np.random.default_rng([seed, 1, speaker, index])
    noise = rng.normal(size=(T, cfg.feature_dim))
    direction = rng.normal(size=cfg.feature_dim)
    cycles = rng.uniform(0.5, 3.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * cycles * np.arange(T) / T + phase)
    nuisance = noise + cfg.pattern_scale * wave[:, None] * direction
    return speaker_centroid(cfg, speaker) + cfg.spread * nuisance


def synth_batch(cfg: SyntheticTaskConfig, batch: int, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    speakers = rng.integers(0, cfg.num_speakers, size=batch)
    indices = rng.integers(0, 2**31, size=batch)
    feats = np.stack([synth_utterance(cfg, int(s), int(i)) for s, i in zip(speakers, indices)])
    return Tensor(feats), speakers


def parse_utterance_id(utt_id: str) -> tuple[int, int, int]:
    """``speaker:index:seed`` -> integer triple."""
    parts = utt_id.split(":")
    if len(parts) != 3:
        raise ValueError(f"utterance id must be 'speaker:index:seed', got {utt_id!r}")
    speaker, index, seed = (int(p) for p in parts)
    if min(speaker, index, seed) < 0:
        raise ValueError(f"utterance id fields must be non-negative, got {utt_id!r}")
    return speaker, index, seed


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2


@dataclass
class RunConfig:
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    fixed_batch: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


_SECTIONS = {
    "model": PoFormerConfig,
    "task": SyntheticTaskConfig,
    "optim": OptimConfig,
    "schedule": LRSchedule,
    "run": RunConfig,
}


@dataclass
class TrainConfig:
    model: PoFormerConfig = field(default_factory=PoFormerConfig)
    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: LRSchedule = field(default_factory=LRSchedule)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        if self.model.num_classes != self.task.num_speakers:
            raise ValueError(
                f"model.num_classes ({self.model.num_classes}) != task.num_speakers ({self.task.num_speakers})"
            )
        if self.model.feat_dim != self.task.feature_dim:
            raise ValueError(f"model.feat_dim ({self.model.feat_dim}) != task.feature_dim ({self.task.feature_dim})")
        if self.run.steps > self.schedule.total_steps:
            raise ValueError("run.steps exceeds schedule.total_steps")

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "task": dataclasses.asdict(self.task),
            "optim": dataclasses.asdict(self.optim),
            "schedule": dataclasses.asdict(self.schedule),
            "run": dataclasses.asdict(self.run),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TrainConfig:
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, klass in _SECTIONS.items():
            body = dict(d.get(name, {}))
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(body) - known
            if bad:
                raise ValueError(f"unknown keys in section {name!r}: {sorted(bad)}")
            sections[name] = body
        task = SyntheticTaskConfig(**sections["task"])
        sections["model"].setdefault("num_classes", task.num_speakers)
        sections["model"].setdefault("feat_dim", task.feature_dim)
        return cls(
            model=PoFormerConfig.from_dict(sections["model"]),
            task=task,
            optim=OptimConfig(**sections["optim"]),
            schedule=LRSchedule(**sections["schedule"]),
            run=RunConfig(**sections["run"]),
        )

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"POFM"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised for unreadable, truncated, corrupted or wrong-version checkpoints."""


@dataclass
class Checkpoint:
    config: TrainConfig
    params: ModelParams
    adam: AdamWState
    rng_state: dict
    step: int


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def _unpack_array(buf: bytes) -> np.ndarray:
    (ndim,) = struct.unpack_from("<I", buf, 0)
    shape = struct.unpack_from(f"<{ndim}Q", buf, 4)
    offset = 4 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(buf) != offset + 8 * count:
        raise CheckpointError("tensor section has the wrong length")
    return np.frombuffer(buf, dtype="<f8", offset=offset).astype(np.float64).reshape(shape)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sections: list[tuple[str, bytes]] = [
        ("config", ckpt.config.to_json().encode()),
        ("step", struct.pack("<Q", ckpt.step)),
        ("rng", json.dumps(ckpt.rng_state, sort_keys=True).encode()),
        (
            "adam",
            json.dumps(
                {k: getattr(ckpt.adam, k) for k in ("beta1", "beta2", "eps", "weight_decay", "step")},
                sort_keys=True,
            ).encode(),
        ),
    ]
    for name, t in named_parameters(ckpt.params):
        sections.append((f"param/{name}", _pack_array(t.data)))
    for name in sorted(ckpt.adam.m):
        sections.append((f"adam_m/{name}", _pack_array(ckpt.adam.m[name])))
        sections.append((f"adam_v/{name}", _pack_array(ckpt.adam.v[name])))
    body = bytearray(MAGIC + struct.pack("<II", FORMAT_VERSION, len(sections)))
    for name, payload in sections:
        raw = name.encode()
        body += struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def checkpoint_save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or truncated header)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch: file is truncated or corrupted")
    sections: dict[str, bytes] = {}
    pos = 12
    end = len(data) - 4
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            (plen,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + plen > end:
                raise CheckpointError(f"section {name!r} runs past end of file")
            sections[name] = data[pos : pos + plen]
            pos += plen
    except struct.error as exc:
        raise CheckpointError(f"truncated section table: {exc}") from exc
    if pos != end:
        raise CheckpointError("trailing bytes after last section")

    config = TrainConfig.from_dict(json.loads(sections["config"]))
    params = init_params(config.model, np.random.default_rng(0))
    for name, t in named_parameters(params):
        key = f"param/{name}"
        if key not in sections:
            raise CheckpointError(f"missing parameter {name!r}")
        arr = _unpack_array(sections[key])
        if arr.shape != t.shape:
            raise CheckpointError(f"parameter {name!r} has shape {arr.shape}, config implies {t.shape}")
        t.data = arr
    meta = json.loads(sections["adam"])
    adam = AdamWState(**meta)
    for key, payload in sections.items():
        if key.startswith("adam_m/"):
            adam.m[key[7:]] = _unpack_array(payload)
        elif key.startswith("adam_v/"):
            adam.v[key[7:]] = _unpack_array(payload)
    (step,) = struct.unpack("<Q", sections["step"])
    return Checkpoint(config, params, adam, json.loads(sections["rng"]), step)


def checkpoint_load(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def format_log(records) -> str:
    return "".join(f"{s}\t{lr!r}\t{loss!r}\n" for s, lr, loss in records)


def loss_on_batch(params: ModelParams, config: PoFormerConfig, feats: Tensor, labels, mode: str, rng) -> Tensor:
    emb = embed_forward(feats, params, config, mode, rng)
    return am_softmax_loss(emb, labels, params.class_weights, config.am_scale, config.am_margin)


def train_run(
    config: TrainConfig,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
) -> tuple[list[tuple[int, float, float]], Checkpoint]:
    """Train from scratch (or from ``resume``) until ``stop_at`` or ``run.steps``.

    Everything random (init, batches, drop-path masks) comes from one
    generator seeded by ``run.seed``; its state is part of the checkpoint.
    """
    stop = config.run.steps if stop_at is None else stop_at
    if resume is None:
        rng = make_rng(config.run.seed)
        params = init_params(config.model, rng)
        adam = AdamWState(**dataclasses.asdict(config.optim))
        step = 0
        fixed = synth_batch(config.task, config.run.batch_size, rng) if config.run.fixed_batch else None
    else:
        rng = make_rng(0)
        rng.bit_generator.state = resume.rng_state
        params, adam, step = resume.params, resume.adam, resume.step
        fixed = None
        if config.run.fixed_batch:
            # the fixed batch is the first draw after init
            replay = make_rng(config.run.seed)
            init_params(config.model, replay)
            fixed = synth_batch(config.task, config.run.batch_size, replay)

    named = dict(named_parameters(params))
    records: list[tuple[int, float, float]] = []
    while step < stop:
        feats, labels = fixed if fixed is not None else synth_batch(config.task, config.run.batch_size, rng)
        for t in named.values():
            t.zero_grad()
        loss = loss_on_batch(params, config.model, feats, labels, "train", rng)
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"loss is {value} at step {step + 1}; aborting")
        loss.backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in named.items()}
        step += 1
        lr = lr_at_step(step, config.schedule)
        adamw_step(named, grads, adam, lr)
        records.append((step, lr, value))
        if step % 100 == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, value)
    return records, Checkpoint(config, params, adam, rng.bit_generator.state, step)


def embed_utterances(
    params: ModelParams,
    model_cfg: PoFormerConfig,
    task_cfg: SyntheticTaskConfig,
    utt_ids,
    batch_size: int = 32,
) -> dict[str, np.ndarray]:
    """Eval-mode embeddings for synthetic utterance ids ``speaker:index:seed``."""
    ids = list(dict.fromkeys(utt_ids))
    out: dict[str, np.ndarray] = {}
    with no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            feats = np.stack([synth_utterance(task_cfg, s, i, seed) for s, i, seed in map(parse_utterance_id, chunk)])
            emb = embed_forward(Tensor(feats), params, model_cfg, "eval")
            for uid, row in zip(chunk, emb.data):
                out[uid] = row.copy()
    return out


def make_trial_list(speakers, utts_per_speaker: int, seed: int) -> tuple[list[str], list[tuple[bool, str, str]]]:
    """Every pair among ``utts_per_speaker`` utterances of each listed speaker."""
    ids = [f"{s}:{i}:{seed}" for s in speakers for i in range(utts_per_speaker)]
    trials = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            same = ids[a].split(":")[0] == ids[b].split(":")[0]
            trials.append((same, ids[a], ids[b]))
    return ids, trials


def score_trials(embeddings: Mapping[str, np.ndarray], trials) -> list[tuple[str, str, float]]:
    return [(e, t, cosine_score(embeddings[e], embeddings[t])) for _, e, t in trials]
