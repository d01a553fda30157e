"""Semi-supervised training loop: EMA teacher, imbalance-aware CutMix, feature distillation."""
from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import augment, pic
from .config import TrainConfig, config_digest, dump_config, parse_config_text
from .evalkit import SlidingWindowSpec, evaluate
from .fkd import FoundationTeacher, Projector, build_teacher, distillation_loss, extract_teacher_features_batch
from .losses import LossBreakdown, aux_keep_mask, seg_loss, total_loss
from .model import NetConfig, StudentNet, ema_update, make_teacher, teacher_pseudo_label
from .volcore import ClassStats, Dataset, compute_class_stats

log = logging.getLogger(__name__)

# named random sub-streams, all derived from the single config seed
STREAMS = {"data": 0, "augment": 1, "pic": 2, "init": 3, "auxmask": 4}

TRAIN_LOG_COLUMNS = ("step", "epoch", "lr") + LossBreakdown.field_names()


class CheckpointError(RuntimeError):
    pass


def stream_rng(seed: int, name: str, step: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name], step)))


def lr_at(config: TrainConfig, step: int, total_steps: Optional[int] = None) -> float:
    """Polynomial decay ``lr0 * (1 - step / total) ** 0.9``."""
    total = config.total_steps if total_steps is None else total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return config.lr0 * (1.0 - step / total) ** 0.9


@dataclass
class TrainState:
    config: TrainConfig
    num_classes: int
    student: StudentNet
    teacher: StudentNet
    projector: Optional[Projector]
    foundation: Optional[FoundationTeacher]
    optimizer: torch.optim.Optimizer
    class_counts: np.ndarray
    step: int = 0

    @property
    def epoch(self) -> int:
        return self.step // self.config.steps_per_epoch

    @property
    def ratios(self) -> np.ndarray:
        return pic.imbalance_ratios(ClassStats(self.class_counts, int(self.class_counts.sum())))

    def class_distribution(self, epoch: int) -> np.ndarray:
        schedule = pic.PICSchedule(self.config.pic_gamma, self.config.pic_eta, self.config.e_max)
        ratios = self.ratios
        p_bal = pic.balanced_distribution(ratios, schedule.gamma)
        return pic.progressive_distribution(p_bal, min(epoch, schedule.e_max), schedule, ratios)


def init_state(config: TrainConfig, num_classes: int, stats: ClassStats) -> TrainState:
    net_cfg = NetConfig(num_classes=num_classes, base_channels=config.base_channels, stages=config.stages)
    init_seed = int(stream_rng(config.seed, "init").integers(2**31))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        student = StudentNet(net_cfg)
        projector = foundation = None
        if config.use_fkd:
            if config.teacher_kind == "fixture":
                foundation = build_teacher(
                    "fixture",
                    out_channels=config.teacher_channels,
                    input_size=(config.teacher_input, config.teacher_input),
                    seed=init_seed,
                )
            else:
                foundation = build_teacher(
                    "vit", config.teacher_weights, input_size=(config.teacher_input, config.teacher_input)
                )
            projector = Projector(net_cfg.feature_channels, foundation.out_channels, kind=config.projector)
    teacher = make_teacher(student)
    params = list(student.parameters()) + (list(projector.parameters()) if projector else [])
    optimizer = torch.optim.SGD(
        params, lr=config.lr0, momentum=config.momentum, weight_decay=config.weight_decay
    )
    return TrainState(config, num_classes, student, teacher, projector, foundation, optimizer,
                      np.asarray(stats.counts, dtype=np.int64).copy())


def _stack(arrays, dtype=torch.float32):
    return torch.stack([torch.as_tensor(np.ascontiguousarray(a)) for a in arrays]).to(dtype)


def train_step(state: TrainState, labeled: Sequence, unlabeled: Sequence) -> LossBreakdown:
    """One optimisation step on ``labeled`` (image, labels) pairs and ``unlabeled`` images.

    Mutates ``state`` (student, projector, optimizer, teacher, step) and returns
    the loss breakdown of this step.
    """
    if not labeled or not unlabeled:
        raise ValueError("train_step needs non-empty labeled and unlabeled batches")
    cfg = state.config
    step = state.step
    aug_rng = stream_rng(cfg.seed, "augment", step)
    pic_rng = stream_rng(cfg.seed, "pic", step)
    mask_rng = stream_rng(cfg.seed, "auxmask", step)
    gamma_range = (cfg.gamma_min, cfg.gamma_max)

    # weak views
    lab_img, lab_gt = [], []
    for img, gt in labeled:
        v, l, _ = augment.apply_weak(img, gt, aug_rng.integers(2**63), cfg.crop_dims, cfg.flip)
        lab_img.append(v)
        lab_gt.append(l)
    weak_u, crops_u = [], []
    for img in unlabeled:
        v, _, rec = augment.apply_weak(img, None, aug_rng.integers(2**63), cfg.crop_dims, cfg.flip)
        weak_u.append(v)
        crops_u.append(rec)

    # pseudo-labels from the EMA teacher on weak views
    pseudo, conf = teacher_pseudo_label(state.teacher, _stack(weak_u)[:, None])
    pseudo = pseudo.numpy().astype(np.uint8)
    conf = conf.numpy()

    # strong views and imbalance-aware cut-paste
    p_e = state.class_distribution(state.epoch)
    patch = pic.PatchSpec(cfg.patch)
    mixes = []
    for i, (wv, rec) in enumerate(zip(weak_u, crops_u)):
        strong, _ = augment.apply_strong(wv, aug_rng.integers(2**63), gamma_range, source=rec)
        j = i % len(lab_img)
        _, center = pic.sample_center(p_e, lab_gt[j], pic_rng)
        mixes.append(pic.cutmix_paste((lab_img[j], lab_gt[j]), strong, pseudo[i], center, patch))

    x = _stack(lab_img + [m.image for m in mixes])[:, None]
    main, aux, feats = state.student(x)
    n_l = len(lab_img)
    gt_t = _stack(lab_gt, torch.long)
    mix_target = _stack([m.target for m in mixes], torch.long)

    keep_u = None
    if cfg.conf_threshold > 0:
        keep_u = torch.as_tensor(np.stack([m.mask | (c >= cfg.conf_threshold) for m, c in zip(mixes, conf)]))

    sup = seg_loss(main[:n_l], gt_t)
    unsup = seg_loss(main[n_l:], mix_target, keep_u)
    zero = main.sum() * 0.0
    if cfg.use_aux:
        ratios = state.ratios
        keep_l = torch.as_tensor(aux_keep_mask(np.stack(lab_gt), ratios, mask_rng))
        keep_ua = torch.as_tensor(aux_keep_mask(np.stack([m.target for m in mixes]), ratios, mask_rng))
        if keep_u is not None:
            keep_ua = keep_ua & keep_u
        sup_aux = seg_loss(aux[:n_l], gt_t, keep_l)
        unsup_aux = seg_loss(aux[n_l:], mix_target, keep_ua)
    else:
        sup_aux = unsup_aux = zero

    if cfg.use_fkd:
        if cfg.distill_input == "mix":
            f_s, src = feats[n_l:], x[n_l:]
        else:
            src = _stack(weak_u)[:, None]
            f_s = state.student.encode(src)[-1]
        f_t = extract_teacher_features_batch(state.foundation, src, f_s.shape[2:])
        distill = distillation_loss(state.projector(f_s), f_t)
    else:
        distill = zero

    terms = [t.double() for t in (sup, sup_aux, unsup, unsup_aux, distill)]
    total = total_loss(*terms, cfg.lambda_unsup)

    lr = lr_at(cfg, min(step, cfg.total_steps))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(state.teacher, state.student, cfg.ema_momentum)
    state.step += 1

    values = [float(t.detach()) for t in terms]
    return LossBreakdown(*values, total=float(total_loss(*values, cfg.lambda_unsup)))


def sample_batches(state: TrainState, dataset: Dataset):
    """Labeled and unlabeled batches for the current step, drawn with replacement."""
    cfg = state.config
    rng = stream_rng(cfg.seed, "data", state.step)
    lab_cases = dataset.section("labeled")
    unl_cases = dataset.section("unlabeled")
    if not lab_cases or not unl_cases:
        raise ValueError("dataset needs labeled and unlabeled cases")
    lab = [lab_cases[i] for i in rng.integers(len(lab_cases), size=cfg.labeled_bs)]
    unl = [unl_cases[i] for i in rng.integers(len(unl_cases), size=cfg.unlabeled_bs)]
    return [(c.image, c.labels) for c in lab], [c.image for c in unl]


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path) -> None:
    payload = {
        "format": "dinomix-checkpoint-1",
        "config": dump_config(state.config),
        "config_digest": config_digest(state.config),
        "num_classes": state.num_classes,
        "class_counts": state.class_counts.tolist(),
        "step": state.step,
        "epoch": state.epoch,
        # every random stream is a pure function of (seed, step)
        "rng": {"seed": state.config.seed, "step": state.step},
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "projector": state.projector.state_dict() if state.projector else None,
        "optimizer": state.optimizer.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, config: Optional[TrainConfig] = None) -> TrainState:
    """Restore a full training state.

    When ``config`` is given and differs from the stored one, a warning carrying
    both digests is emitted and ``config`` is used.
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        stored = parse_config_text(payload["config"], f"{path}[config]")
        digest = payload["config_digest"]
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if config is not None and config_digest(config) != digest:
        warnings.warn(
            f"config digest mismatch: checkpoint {digest[:12]} vs current {config_digest(config)[:12]}",
            stacklevel=2,
        )
    cfg = config or stored
    counts = np.asarray(payload["class_counts"], dtype=np.int64)
    state = init_state(cfg, payload["num_classes"], ClassStats(counts, int(counts.sum())))
    try:
        state.student.load_state_dict(payload["student"])
        state.teacher.load_state_dict(payload["teacher"])
        if state.projector is not None:
            state.projector.load_state_dict(payload["projector"])
        state.optimizer.load_state_dict(payload["optimizer"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} does not match the configured model: {exc}") from exc
    state.step = int(payload["step"])
    return state


# ---------------------------------------------------------------------------
# full runs


@dataclass
class RunResult:
    state: TrainState
    step_log: list = field(default_factory=list)  # (step, epoch, lr, LossBreakdown)
    epoch_log: list = field(default_factory=list)  # dicts, one per epoch
    checkpoint: Optional[Path] = None


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


class _CsvLog:
    def __init__(self, path, header, append=False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self.fh = open(self.path, "a" if not fresh else "w", newline="")
        self.writer = csv.writer(self.fh)
        if fresh:
            self.writer.writerow(header)

    def write(self, row):
        self.writer.writerow([_fmt(v) for v in row])
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_training(
    config: TrainConfig,
    dataset: Dataset,
    run_dir=None,
    resume: Optional[TrainState] = None,
) -> RunResult:
    """Train for ``e_max`` epochs of ``steps_per_epoch`` steps.

    With ``run_dir`` the resolved config, per-step training log, per-epoch
    validation log and checkpoints are written there. ``resume`` continues a
    state restored by :func:`load_checkpoint`.
    """
    c = dataset.num_classes
    if resume is None:
        stats = compute_class_stats([case.labels for case in dataset.section("labeled")], c)
        state = init_state(config, c, stats)
    else:
        state = resume
    val_cases = dataset.section("val")
    window = SlidingWindowSpec(config.crop_dims, config.eval_stride)
    result = RunResult(state)

    logs = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(dump_config(config))
        append = resume is not None
        logs = (
            _CsvLog(run_dir / "train_log.csv", TRAIN_LOG_COLUMNS, append),
            _CsvLog(run_dir / "val_log.csv", ["epoch", "mean_dice"] + [f"dice_{k}" for k in range(1, c)], append),
        )

    try:
        start_epoch = state.epoch
        for epoch in range(start_epoch, config.e_max):
            rows = []
            while state.step < (epoch + 1) * config.steps_per_epoch:
                step, lr = state.step, lr_at(config, state.step)
                lab, unl = sample_batches(state, dataset)
                bd = train_step(state, lab, unl)
                rows.append(bd)
                result.step_log.append((step, epoch, lr, bd))
                if logs:
                    logs[0].write([step, epoch, lr, *bd.as_tuple()])
                if not math.isfinite(bd.total):
                    raise FloatingPointError(f"non-finite total loss at step {step}")
            entry = {"epoch": epoch, **{k: float(np.mean([getattr(r, k) for r in rows])) if rows else None
                                       for k in LossBreakdown.field_names()}}
            last_epoch = epoch == config.e_max - 1
            if val_cases and ((epoch + 1) % config.val_every == 0 or last_epoch):
                report = evaluate(state.student, val_cases, window, c)
                entry["val_dice"] = report.mean_dice
                entry["val_class_dice"] = report.dice
                if logs:
                    logs[1].write([epoch, report.mean_dice, *report.dice])
            result.epoch_log.append(entry)
            log.info("epoch %d total %.4f val %s", epoch, entry["total"] or float("nan"), entry.get("val_dice"))
            if run_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(state, run_dir / "checkpoints" / f"epoch{epoch + 1:04d}.pt")
        if run_dir is not None:
            result.checkpoint = run_dir / "checkpoints" / "final.pt"
            save_checkpoint(state, result.checkpoint)
    finally:
        if logs:
            for lg in logs:
                lg.close()
    return result
