"""Two-phase training: cross-entropy pretraining, then adversarial self-distillation.

Phase 1 trains a plain classifier and emits the checkpoint later used as the
frozen "superior" teacher. Phase 2 trains a fresh student against three
signals — hard labels, the superior's softened logits, and the previous
epoch's snapshot — plus an adversarial term from a gradient-penalized critic
that scores logit vectors. Critic and student alternate on every batch,
critic first.

Determinism: every random decision draws from a named substream of the run
seed (data order, augmentation, penalty epsilons, each init), re-derived per
epoch. Two runs with the same config agree step for step, and a run restored
from an epoch-boundary checkpoint continues the original trajectory.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .augment import AugmentPolicy, MixedBatch, apply_policy, mixed_ce
from .data import SampleSource, batch_tensors, epoch_iterator, normalize_images, substream_seed
from .losses import (
    LossWeights,
    adversarial_loss,
    critic_loss,
    gradient_penalty,
    guide_loss,
    progressive_loss,
    soften,
    total_loss,
)
from .metrics import evaluate
from .models import (
    ClassifierSpec,
    CriticSpec,
    LogitCritic,
    ModelTriple,
    build_classifier,
    build_critic,
    freeze,
    load_superior,
    parameter_checksum,
    save_checkpoint,
    snapshot_previous,
)

__all__ = [
    "ABLATIONS",
    "TrainConfig",
    "RunState",
    "RunAbortError",
    "apply_ablation",
    "milestone_lr",
    "config_digest",
    "pretrain",
    "distill",
    "distill_step",
    "critic_phase",
    "init_distill_state",
    "latest_epoch_checkpoint",
]

ABLATIONS = ("full", "no_adv", "only_progressive", "only_guide", "baseline")


class RunAbortError(RuntimeError):
    """A loss went non-finite; carries the diagnostic step record."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class SGDConfig:
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4


@dataclass(frozen=True)
class CriticConfig:
    lr: float = 1e-4  # Adam
    steps_per_student_step: int = 1
    include_superior_term: bool = False
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.steps_per_student_step < 1:
            raise ValueError("steps_per_student_step must be at least 1")


@dataclass(frozen=True)
class TrainConfig:
    phase: str  # pretrain | distill
    epochs: int = 300
    batch_size: int = 128
    sgd: SGDConfig = field(default_factory=SGDConfig)
    lr_milestones: tuple = (150, 225)
    lr_gamma: float = 0.1
    critic: CriticConfig = field(default_factory=CriticConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    ablation: str = "full"

    def __post_init__(self):
        if self.phase not in ("pretrain", "distill"):
            raise ValueError(f"phase must be pretrain or distill, got {self.phase!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        ms = tuple(self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs for m in ms):
            raise ValueError("lr_milestones must be strictly increasing and below epochs")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        object.__setattr__(self, "lr_milestones", ms)


def apply_ablation(preset: str, weights: LossWeights) -> LossWeights:
    """Effective loss weights for an ablation preset.

    ``only_progressive`` and ``baseline`` need no superior checkpoint at all.
    """
    if preset not in ABLATIONS:
        raise ValueError(f"unknown ablation preset {preset!r}")
    w = dataclasses.asdict(weights)
    if preset == "no_adv":
        w["omega"] = 0.0
    elif preset == "only_progressive":
        w.update(alpha_g=0.0, omega=0.0)
    elif preset == "only_guide":
        w.update(alpha_p=0.0, omega=0.0)
    elif preset == "baseline":
        w.update(alpha_g=0.0, alpha_p=0.0, omega=0.0)
    return LossWeights(**w)


def preset_needs_superior(preset: str) -> bool:
    return preset in ("full", "no_adv", "only_guide")


def milestone_lr(base_lr: float, gamma: float, milestones, epoch: int) -> float:
    """Step-decayed learning rate for a 1-based epoch index."""
    drops = sum(1 for m in milestones if m <= epoch)
    return base_lr * gamma**drops


def config_digest(*objs) -> str:
    """Short stable digest of dataclass configs, for checkpoint provenance."""
    def _plain(o):
        if dataclasses.is_dataclass(o):
            return {k: _plain(v) for k, v in dataclasses.asdict(o).items()}
        if isinstance(o, (list, tuple)):
            return [_plain(v) for v in o]
        if isinstance(o, dict):
            return {k: _plain(v) for k, v in o.items()}
        return o

    blob = json.dumps([_plain(o) for o in objs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class RunLog:
    """Append-only JSON-lines log; one record per step plus one per epoch."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not append:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class RunState:
    """Everything phase 2 mutates while running; enough to resume from."""

    config: TrainConfig
    spec: ClassifierSpec
    triple: ModelTriple
    critic: Optional[LogitCritic]
    student_opt: torch.optim.Optimizer
    critic_opt: Optional[torch.optim.Optimizer]
    weights: LossWeights  # post-ablation
    epoch: int = 1
    global_step: int = 0

    @property
    def adversarial(self) -> bool:
        return self.critic is not None and self.weights.omega > 0.0


def _abort_if_nonfinite(record: dict, log: Optional[RunLog]) -> None:
    bad = {k: v for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)}
    if bad:
        diag = dict(record, kind="abort")
        if log is not None:
            log.write(diag)
        raise RunAbortError(f"non-finite losses {bad}", diag)


def critic_phase(state: RunState, images: torch.Tensor, gp_rng: np.random.Generator) -> float:
    """Run the configured number of critic updates on one batch; returns the last loss.

    The first batch a critic ever sees also fixes its normalization
    statistics (student and superior logits pooled); after that every pass,
    here and in the student's adversarial term, evaluates the same
    fixed-statistics function. The student and superior are only read, in
    eval mode.
    """
    student, superior, critic = state.triple.student, state.triple.superior, state.critic
    was_training = student.training
    student.eval()
    ld = 0.0
    for _ in range(state.config.critic.steps_per_student_step):
        with torch.no_grad():
            student_logits = student(images)
            superior_logits = superior(images)
        if not bool(critic.stats_ready):
            critic.warm_up_stats(torch.cat([student_logits, superior_logits]))
        critic.eval()
        scores_student = critic(student_logits)
        scores_superior = (
            critic(superior_logits) if state.config.critic.include_superior_term else None
        )
        eps = torch.from_numpy(gp_rng.random(len(images)))
        gp = gradient_penalty(critic, superior_logits, student_logits, eps)
        loss = critic_loss(
            scores_student,
            scores_superior,
            gp,
            state.weights,
            include_superior_term=state.config.critic.include_superior_term,
        )
        state.critic_opt.zero_grad()
        loss.backward()
        state.critic_opt.step()
        ld = float(loss.detach())
    if was_training:
        student.train()
    return ld


def distill_step(
    state: RunState,
    batch: MixedBatch,
    gp_rng: np.random.Generator,
    log: Optional[RunLog] = None,
    lr: Optional[float] = None,
) -> dict:
    """One alternating update: critic step(s) first, then one student step.

    ``batch.images`` must already be augmented and normalized. Returns the
    per-term loss record that also lands in the run log.
    """
    weights = state.weights
    images = batch.images
    record = {
        "kind": "step",
        "step": state.global_step,
        "epoch": state.epoch,
        "ce": float("nan"),
        "lg": float("nan"),
        "lp": float("nan"),
        "la": float("nan"),
        "ld": 0.0,
        "lr": state.student_opt.param_groups[0]["lr"] if lr is None else lr,
        "total": float("nan"),
    }
    try:
        record["ld"] = critic_phase(state, images, gp_rng) if state.adversarial else 0.0

        student = state.triple.student
        student.train()
        student_logits = student(images)
        ce = mixed_ce(soften(student_logits, 1.0), batch)
        record["ce"] = float(ce.detach())

        if weights.alpha_g > 0:
            with torch.no_grad():
                superior_logits = state.triple.superior(images)
            lg = guide_loss(superior_logits, student_logits, weights.tau_g)
        else:
            lg = torch.zeros(())
        record["lg"] = float(lg.detach())

        if weights.alpha_p > 0:
            if state.epoch == 1:
                # No meaningful snapshot exists yet: the progressive target
                # falls back to the hard label, folding alpha_p onto CE.
                lp = ce
            else:
                with torch.no_grad():
                    prev_logits = state.triple.previous(images)
                lp = progressive_loss(prev_logits, student_logits, weights.tau_p)
        else:
            lp = torch.zeros(())
        record["lp"] = float(lp.detach())

        if state.adversarial:
            critic = state.critic
            critic.eval()
            for p in critic.parameters():
                p.requires_grad_(False)
            la = adversarial_loss(critic(student_logits))
            for p in critic.parameters():
                p.requires_grad_(True)
        else:
            la = torch.zeros(())
        record["la"] = float(la.detach())

        loss = total_loss(ce, lp, lg, la, weights)
        record["total"] = float(loss.detach())
    except ValueError as exc:
        diag = dict(record, kind="abort")
        if log is not None:
            log.write(diag)
        raise RunAbortError(str(exc), diag) from exc
    _abort_if_nonfinite(record, log)

    state.student_opt.zero_grad()
    loss.backward()
    state.student_opt.step()
    state.global_step += 1
    if log is not None:
        log.write(record)
    return record


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _epoch_record(
    epoch: int, lr: float, train_loss: float, model, val_src: SampleSource, extra: dict,
    crop: Optional[int] = None,
) -> dict:
    report, _ = evaluate(model, val_src, crop=crop)
    record = {
        "kind": "epoch",
        "epoch": epoch,
        "lr": lr,
        "train_loss": train_loss,
        "val_top1_error": report.top1_error,
        "val_top5_error": report.top5_error,
        "val_macro_f1": report.macro_f1,
        "val_ece": report.ece,
    }
    record.update(extra)
    return record


def _write_metrics(
    out_dir: Path, model, val_src: SampleSource, n_bins: int = 15, crop: Optional[int] = None
) -> dict:
    report, _ = evaluate(model, val_src, n_bins=n_bins, crop=crop)
    payload = report.to_json_dict()
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def latest_epoch_checkpoint(out_dir: Path) -> Optional[Path]:
    candidates = []
    for path in Path(out_dir).glob("ckpt_epoch_*"):
        m = re.fullmatch(r"ckpt_epoch_(\d+)", path.name)
        if m:
            candidates.append((int(m.group(1)), path))
    return max(candidates)[1] if candidates else None


def pretrain(
    config: TrainConfig,
    spec: ClassifierSpec,
    train_src: SampleSource,
    val_src: SampleSource,
    out_dir: Path,
    policy: AugmentPolicy = AugmentPolicy(),
    resume: bool = False,
) -> Path:
    """Phase 1: cross-entropy training under the milestone schedule.

    Writes ``ckpt_epoch_<n>``, ``log.jsonl`` and ``metrics.json`` under
    ``out_dir`` and returns the final checkpoint path (the phase-2 superior).
    """
    if config.phase != "pretrain":
        raise ValueError("config.phase must be 'pretrain'")
    if spec.num_classes != train_src.manifest.num_classes:
        raise ValueError(
            f"spec has {spec.num_classes} classes, dataset {train_src.manifest.num_classes}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config, spec, policy)

    model = build_classifier(spec, substream_seed(config.seed, "pretrain-init"))
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.sgd.lr,
        momentum=config.sgd.momentum,
        nesterov=config.sgd.nesterov,
        weight_decay=config.sgd.weight_decay,
    )
    start_epoch = 1
    if resume:
        ckpt_path = latest_epoch_checkpoint(out_dir)
        if ckpt_path is not None:
            payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
            model.load_state_dict(payload["state_dict"])
            opt.load_state_dict(payload["extra"]["student_opt"])
            start_epoch = payload["epoch"] + 1
    log = RunLog(out_dir / "log.jsonl", append=start_epoch > 1)

    step = (start_epoch - 1) * math.ceil(len(train_src) / config.batch_size)
    final_path = None
    for epoch in range(start_epoch, config.epochs + 1):
        lr = milestone_lr(config.sgd.lr, config.lr_gamma, config.lr_milestones, epoch)
        _set_lr(opt, lr)
        aug_rng = np.random.default_rng(substream_seed(config.seed, "augment", epoch))
        losses = []
        model.train()
        for idx in epoch_iterator(train_src, config.batch_size, config.seed, epoch):
            images, labels = batch_tensors(train_src, idx, normalize=False)
            mixed = apply_policy(images, labels, policy, aug_rng)
            mixed.images = normalize_images(mixed.images, train_src.manifest)
            logits = model(mixed.images)
            ce = mixed_ce(soften(logits, 1.0), mixed)
            record = {
                "kind": "step", "step": step, "epoch": epoch,
                "ce": float(ce.detach()), "lg": 0.0, "lp": 0.0, "la": 0.0, "ld": 0.0,
                "lr": lr, "total": float(ce.detach()),
            }
            _abort_if_nonfinite(record, log)
            opt.zero_grad()
            ce.backward()
            opt.step()
            log.write(record)
            losses.append(record["ce"])
            step += 1
        record = _epoch_record(
            epoch, lr, float(np.mean(losses)), model, val_src,
            {"student_hash": parameter_checksum(model)}, crop=policy.crop,
        )
        log.write(record)
        final_path = out_dir / f"ckpt_epoch_{epoch}"
        save_checkpoint(
            final_path, model, spec, digest, epoch,
            val_accuracy=1.0 - record["val_top1_error"] / 100.0,
            extra={"student_opt": opt.state_dict()},
        )
    _write_metrics(out_dir, model, val_src, crop=policy.crop)
    return final_path


def init_distill_state(
    config: TrainConfig,
    spec: ClassifierSpec,
    superior_ckpt: Optional[Path],
    num_classes: int,
) -> RunState:
    """Build models, critic, and optimizers for phase 2."""
    weights = apply_ablation(config.ablation, config.weights)
    superior = None
    if preset_needs_superior(config.ablation):
        if superior_ckpt is None:
            raise ValueError(f"ablation {config.ablation!r} requires a superior checkpoint")
        superior = load_superior(superior_ckpt, spec)
    student = build_classifier(spec, substream_seed(config.seed, "student-init"))
    triple = ModelTriple(student=student, superior=superior, previous=None, spec=spec)
    snapshot_previous(triple)  # previous starts as the initial student
    critic = critic_opt = None
    if superior is not None and weights.omega > 0.0:
        critic = build_critic(
            CriticSpec(input_dim=num_classes, leaky_slope=config.critic.leaky_slope),
            substream_seed(config.seed, "critic-init"),
        )
        critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic.lr)
    student_opt = torch.optim.SGD(
        student.parameters(),
        lr=config.sgd.lr,
        momentum=config.sgd.momentum,
        nesterov=config.sgd.nesterov,
        weight_decay=config.sgd.weight_decay,
    )
    return RunState(
        config=config,
        spec=spec,
        triple=triple,
        critic=critic,
        student_opt=student_opt,
        critic_opt=critic_opt,
        weights=weights,
    )


def distill(
    config: TrainConfig,
    spec: ClassifierSpec,
    superior_ckpt: Optional[Path],
    train_src: SampleSource,
    val_src: SampleSource,
    out_dir: Path,
    policy: AugmentPolicy = AugmentPolicy(),
    resume: bool = False,
) -> Path:
    """Phase 2: adversarial self-distillation with per-epoch snapshots.

    The previous-epoch model starts as the student's initial copy, and during
    epoch 1 the progressive term falls back to the hard label. Epoch records
    carry parameter checksums of all three roles so teacher constancy and the
    snapshot schedule are auditable from the log alone.
    """
    if config.phase != "distill":
        raise ValueError("config.phase must be 'distill'")
    if spec.num_classes != train_src.manifest.num_classes:
        raise ValueError(
            f"spec has {spec.num_classes} classes, dataset {train_src.manifest.num_classes}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_digest(config, spec, policy)

    state = init_distill_state(config, spec, superior_ckpt, train_src.manifest.num_classes)
    start_epoch = 1
    if resume:
        ckpt_path = latest_epoch_checkpoint(out_dir)
        if ckpt_path is not None:
            payload = torch.load(ckpt_path, map_location="cpu", weights_only=False)
            extra = payload["extra"]
            state.triple.student.load_state_dict(payload["state_dict"])
            state.triple.previous.load_state_dict(extra["previous"])
            freeze(state.triple.previous)
            state.student_opt.load_state_dict(extra["student_opt"])
            if state.critic is not None and extra.get("critic") is not None:
                state.critic.load_state_dict(extra["critic"])
                state.critic_opt.load_state_dict(extra["critic_opt"])
            state.global_step = extra["global_step"]
            start_epoch = payload["epoch"] + 1
    log = RunLog(out_dir / "log.jsonl", append=start_epoch > 1)

    superior_hash = (
        parameter_checksum(state.triple.superior) if state.triple.superior is not None else None
    )
    final_path = None
    for epoch in range(start_epoch, config.epochs + 1):
        state.epoch = epoch
        lr = milestone_lr(config.sgd.lr, config.lr_gamma, config.lr_milestones, epoch)
        _set_lr(state.student_opt, lr)
        aug_rng = np.random.default_rng(substream_seed(config.seed, "augment", epoch))
        gp_rng = np.random.default_rng(substream_seed(config.seed, "gp-epsilon", epoch))
        totals = []
        for idx in epoch_iterator(train_src, config.batch_size, config.seed, epoch):
            images, labels = batch_tensors(train_src, idx, normalize=False)
            mixed = apply_policy(images, labels, policy, aug_rng)
            mixed.images = normalize_images(mixed.images, train_src.manifest)
            record = distill_step(state, mixed, gp_rng, log=log, lr=lr)
            totals.append(record["total"])
        # Hashes reflect the models as used during this epoch, before the
        # boundary snapshot replaces `previous`.
        hashes = {
            "student_hash": parameter_checksum(state.triple.student),
            "previous_hash": parameter_checksum(state.triple.previous),
            "superior_hash": superior_hash,
        }
        snapshot_previous(state.triple)
        record = _epoch_record(
            epoch, lr, float(np.mean(totals)), state.triple.student, val_src, hashes,
            crop=policy.crop,
        )
        log.write(record)
        final_path = out_dir / f"ckpt_epoch_{epoch}"
        save_checkpoint(
            final_path, state.triple.student, spec, digest, epoch,
            val_accuracy=1.0 - record["val_top1_error"] / 100.0,
            extra={
                "previous": state.triple.previous.state_dict(),
                "critic": state.critic.state_dict() if state.critic is not None else None,
                "student_opt": state.student_opt.state_dict(),
                "critic_opt": state.critic_opt.state_dict() if state.critic_opt else None,
                "global_step": state.global_step,
            },
        )
    _write_metrics(out_dir, state.triple.student, val_src, crop=policy.crop)
    return final_path
