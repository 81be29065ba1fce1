"""Three-stage training: loss composition, trainable masks, AdamW with warm-up, and the loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .bridging import _as_batch_target
from .checkpoint import Checkpoint, CheckpointError
from .comprehension import VocabSpec, llm_loss
from .datapipe.imageio import read_pgm, read_ppm
from .datapipe.pipeline import read_manifest
from .generation import EditBatch, sd_loss
from .model import EditModel, Features, ModelConfig
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)

STAGE_LOSSES = {
    1: ("llm", "text_feature", "image_feature"),
    2: ("llm", "sd", "target_image_feature"),
    3: ("target_image_feature", "sd"),
}

TRAINABLE = {
    1: frozenset({"lora", "mm_embeddings", "qformer", "iaa.mapper"}),
    2: frozenset({"lora", "mm_embeddings", "qformer", "iaa.mapper", "bim", "denoiser"}),
    3: frozenset({"iaa", "denoiser.cross_attn.img"}),
}

DEFAULT_STEPS = {1: 500, 2: 300, 3: 300}


def _check_stage(stage: int) -> int:
    if stage not in STAGE_LOSSES:
        raise ValueError(f"unknown stage {stage!r}; expected 1, 2 or 3")
    return stage


def trainable_mask(stage: int) -> frozenset[str]:
    return TRAINABLE[_check_stage(stage)]


def selector_matches(name: str, selector: str) -> bool:
    """True when the selector's dotted parts occur in order within the parameter name's parts."""
    parts = iter(name.split("."))
    return all(any(p == s for p in parts) for s in selector.split("."))


def is_trainable(name: str, stage: int) -> bool:
    return any(selector_matches(name, s) for s in trainable_mask(stage))


@dataclass
class StageSchedule:
    stage: int
    losses: tuple[str, ...]
    trainable: frozenset[str]
    lr: float
    weight_decay: float
    warmup_ratio: float
    steps: int
    batch_size: int = 16
    lam: float = 0.0  # image-condition weight used while training

    def __post_init__(self):
        _check_stage(self.stage)
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_ratio * self.steps)

    def lr_at(self, step: int) -> float:
        """Linear warm-up from 0 at step 0, then constant."""
        w = self.warmup_steps
        return self.lr if w == 0 or step >= w else self.lr * step / w


# lr / weight decay / warm-up as published; too small to move a toy model in a few hundred steps
PAPER_HPARAMS = {1: (2e-4, 0.0, 0.0), 2: (1e-5, 0.0, 0.001), 3: (1e-5, 0.0, 0.001)}
TOY_HPARAMS = {1: (3e-3, 0.0, 0.0), 2: (2e-3, 0.0, 0.001), 3: (2e-3, 0.0, 0.001)}


def default_schedule(stage: int, profile: str = "toy", steps: int | None = None,
                     batch_size: int = 16) -> StageSchedule:
    table = {"toy": TOY_HPARAMS, "paper": PAPER_HPARAMS}.get(profile)
    if table is None:
        raise ValueError(f"unknown schedule profile {profile!r}")
    lr, wd, warm = table[_check_stage(stage)]
    return StageSchedule(stage, STAGE_LOSSES[stage], TRAINABLE[stage], lr, wd, warm,
                         steps or DEFAULT_STEPS[stage], batch_size, 1.0 if stage == 3 else 0.0)


# --- losses ------------------------------------------------------------------

@dataclass
class StageBatch:
    instructions: list[str]
    feats: Features
    t: np.ndarray | None = None
    eps: np.ndarray | None = None


def stage_losses(model: EditModel, stage: int, batch: StageBatch, lam: float | None = None):
    """Returns (total, {part: scalar}); total is the in-order sum of the parts."""
    _check_stage(stage)
    if not batch.instructions or batch.feats is None:
        raise ValueError("batch needs instructions and features")
    parts: dict[str, Tensor] = {}
    if stage == 1:
        logits, ids, q_prime, _, _, mapped, _ = model.conditions(batch.instructions, None)
        parts["llm"] = llm_loss(logits, ids, model.vocab)
        parts["text_feature"] = T.mse(_as_batch_target(batch.feats.text_embed, q_prime), q_prime)
        parts["image_feature"] = T.mse(_as_batch_target(batch.feats.src_embed, mapped), mapped)
    else:
        if batch.t is None or batch.eps is None:
            raise ValueError(f"stage {stage} batch needs timesteps and noise")
        lam = (0.0 if stage == 2 else model.cfg.lambda_default) if lam is None else lam
        logits, ids, _, f_txt, v_txt, mapped, f_img = model.conditions(batch.instructions, batch.feats)
        eb = EditBatch(batch.feats.src_latent, batch.feats.tgt_latent, f_txt, v_txt, f_img, batch.t, batch.eps)
        if stage == 2:
            parts["llm"] = llm_loss(logits, ids, model.vocab)
        parts["sd"] = sd_loss(model.denoiser, model.schedule, eb, lam)
        parts["target_image_feature"] = T.mse(_as_batch_target(batch.feats.tgt_embed, mapped), mapped)
        parts = {k: parts[k] for k in STAGE_LOSSES[stage]}
    total = None
    for p in parts.values():
        total = p if total is None else total + p
    return total, parts


# --- optimizer ---------------------------------------------------------------

class AdamW:
    """Decoupled weight decay; moments are kept only for trainable parameters."""

    def __init__(self, params: dict[str, T.Parameter], schedule: StageSchedule,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.schedule = schedule
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self) -> float:
        lr = self.schedule.lr_at(self.step_count)
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name} at step {self.step_count}")
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.schedule.weight_decay * p.data)
        return lr

    def state(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n: (self.m[n].copy(), self.v[n].copy()) for n in self.params}

    def load_state(self, step: int, moments: dict) -> None:
        if set(moments) != set(self.params):
            raise CheckpointError("optimizer state does not match this stage's trainable parameters")
        self.step_count = step
        for n, (m, v) in moments.items():
            self.m[n], self.v[n] = m.copy(), v.copy()


# --- data --------------------------------------------------------------------

@dataclass
class EditDataset:
    ids: list[str]
    sources: np.ndarray
    targets: np.ndarray
    masks: np.ndarray
    instructions: list[str]
    tasks: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_manifest(cls, path, accepted_only: bool = True, tasks=None, modes=None, limit: int | None = None):
        path = Path(path)
        root = path.parent
        rows = [r for r in read_manifest(path)
                if (r["accepted"] or not accepted_only)
                and (tasks is None or r["task"] in tasks)
                and (modes is None or r["mode"] in modes)]
        rows = rows[:limit] if limit is not None else rows
        if not rows:
            raise ValueError(f"no usable samples in {path}")
        return cls([r["id"] for r in rows],
                   np.stack([read_ppm(root / r["src_path"]) for r in rows]),
                   np.stack([read_ppm(root / r["tgt_path"]) for r in rows]),
                   np.stack([read_pgm(root / r["mask_path"]) for r in rows]),
                   [r["instruction"] for r in rows], [r["task"] for r in rows])


# --- loop --------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    stage: int
    total: float
    parts: dict[str, float]


def set_trainable(model: EditModel, stage: int) -> dict[str, T.Parameter]:
    """Enable gradients exactly on the stage's trainable set (permanently frozen weights stay off)."""
    chosen = {}
    for name, p in model.named_parameters():
        p.requires_grad = (not p.frozen) and is_trainable(name, stage)
        p.grad = None
        if p.requires_grad:
            chosen[name] = p
    return chosen


def make_checkpoint(model: EditModel, stage: int, step: int, opt: AdamW | None,
                    rng: np.random.Generator | None, extra: dict | None = None) -> Checkpoint:
    header = {"model": model.cfg.to_dict(), "vocab": model.vocab.words[2:], "r": model.vocab.r,
              "stage": stage, "step": step, **(extra or {})}
    return Checkpoint(header, {n: p.data.copy() for n, p in model.named_parameters()},
                      opt.step_count if opt else 0, opt.state() if opt else {},
                      rng.bit_generator.state if rng is not None else None)


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> EditModel:
    saved = ModelConfig.from_dict(ckpt.header["model"])
    if cfg is not None and cfg != saved:
        diff = sorted(k for k, v in cfg.to_dict().items() if saved.to_dict()[k] != v)
        raise CheckpointError(f"checkpoint/config mismatch on {diff}")
    model = EditModel(saved, VocabSpec(ckpt.header["vocab"], ckpt.header["r"]))
    load_params(model, ckpt.params)
    return model


def load_params(model: EditModel, params: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing, extra = sorted(set(own) - set(params)), sorted(set(params) - set(own))
        raise CheckpointError(f"parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, p in own.items():
        if p.data.shape != params[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: {p.data.shape} vs {params[name].shape}")
        p.data = params[name].copy()


def write_trace(path, rows: list[TraceRow], stage: int) -> None:
    names = list(STAGE_LOSSES[stage])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "stage", "total", *names])
        for row in rows:
            w.writerow([row.step, row.stage, repr(row.total), *(repr(row.parts[n]) for n in names)])


def train_stage(model: EditModel, stage: int, data: EditDataset, schedule: StageSchedule, seed: int = 0,
                feats: Features | None = None, resume: Checkpoint | None = None,
                trace_path=None, log_every: int = 50,
                stop_at: int | None = None) -> tuple[Checkpoint, list[TraceRow]]:
    """Deterministic loop over seeded minibatches; returns the final checkpoint and the loss trace.

    Trace steps are 1-based: row ``k`` records the loss the k-th update was computed from.
    ``stop_at`` ends early (warm-up still follows ``schedule.steps``) so a run can be resumed.
    """
    _check_stage(stage)
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if schedule.stage != stage:
        raise ValueError(f"schedule is for stage {schedule.stage}, not {stage}")
    feats = feats or model.featurize(data.sources, data.targets, data.instructions)
    params = set_trainable(model, stage)
    opt = AdamW(params, schedule)
    rng = np.random.default_rng([seed, stage])
    start = 0
    if resume is not None:
        if resume.header.get("stage") != stage:
            raise CheckpointError("resume checkpoint is from a different stage")
        opt.load_state(resume.opt_step, resume.opt_moments)
        rng.bit_generator.state = resume.rng_state
        start = resume.header["step"]
    bs = min(schedule.batch_size, len(data))
    trace: list[TraceRow] = []
    end = schedule.steps if stop_at is None else min(stop_at, schedule.steps)
    for step in range(start, end):
        idx = np.sort(rng.choice(len(data), bs, replace=False))
        batch = StageBatch([data.instructions[i] for i in idx], feats.take(idx))
        if stage > 1:
            batch.t = rng.integers(1, model.schedule.T + 1, size=bs)
            batch.eps = rng.standard_normal(batch.feats.tgt_latent.shape)
        model.zero_grad()
        total, parts = stage_losses(model, stage, batch, schedule.lam)
        T.backward(total)
        opt.step()
        row = TraceRow(step + 1, stage, total.item(), {k: v.item() for k, v in parts.items()})
        trace.append(row)
        if log_every and (step + 1) % log_every == 0:
            log.info("stage %d step %d total %.5f %s", stage, step + 1, row.total,
                     " ".join(f"{k}={v:.4f}" for k, v in row.parts.items()))
    if trace_path is not None:
        write_trace(trace_path, trace, stage)
    return make_checkpoint(model, stage, end, opt, rng, {"seed": seed}), trace
