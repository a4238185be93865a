"""Optimization loop: student forward, frozen teacher, masked objective, AdamW."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from lexalign.data.batching import Batch, ImageCache, make_batches
from lexalign.data.corpus import CorpusManifest
from lexalign.errors import ConfigError, TrainingDivergedError
from lexalign.losses import LOSS_NAMES, LossBundle, parse_loss_mask, total_loss
from lexalign.model import (
    DualEncoder,
    ModelConfig,
    frozen_copy,
    load_checkpoint,
    save_checkpoint,
    select_lexeme,
    set_trainable_depth,
)
from lexalign.regions import crop_region, roi_align

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-6
    epochs: int = 5
    max_steps: int | None = None
    # None: min(1000, 10% of total steps)
    warmup_steps: int | None = None
    batch_size: int = 16
    # None: every image block trainable
    unlocked_layers: int | None = None
    loss_mask: tuple[str, ...] = LOSS_NAMES
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0
    roi_grid: int = 3
    roi_sampling: int | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.loss_mask = tuple(sorted(parse_loss_mask(self.loss_mask), key=LOSS_NAMES.index))
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be >= 0")

    def total_steps(self, n_samples: int) -> int:
        steps = self.epochs * math.ceil(n_samples / self.batch_size)
        return steps if self.max_steps is None else min(steps, self.max_steps)

    def resolved_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(1000, total_steps // 10)


def lr_at_step(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    warmup = cfg.resolved_warmup(total_steps)
    if total_steps <= warmup:
        raise ConfigError(f"total_steps {total_steps} must exceed warmup_steps {warmup}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return cfg.lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def fingerprint(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TeacherHandle:
    """Frozen model whose global embedding of region crops supervises regions."""

    def __init__(self, model: DualEncoder):
        self.params = frozen_copy(model)
        self.fingerprint = fingerprint(self.params)

    @torch.no_grad()
    def encode_crops(self, images, boxes):
        size = self.params.cfg.image_size
        return self.params.encode_image_global(crop_region(images, boxes, size))

    def verify(self) -> bool:
        return fingerprint(self.params) == self.fingerprint


def _no_decay(name: str) -> bool:
    return name.endswith("bias") or "ln_" in name or "positional_embedding" in name or "log_tau" in name


class Trainer:
    """Owns the student, its optimizer and the step counter."""

    def __init__(self, model: DualEncoder, cfg: TrainConfig, total_steps: int,
                 teacher: TeacherHandle | None = None):
        self.model = model
        self.cfg = cfg
        self.total_steps = total_steps
        self.mask = frozenset(cfg.loss_mask)
        if "GR" in self.mask and teacher is None:
            teacher = TeacherHandle(model)
        self.teacher = teacher
        set_trainable_depth(model, model.cfg.img_blocks if cfg.unlocked_layers is None else cfg.unlocked_layers)
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            if p.requires_grad:
                (no_decay if _no_decay(name) else decay).append(p)
        self.params = decay + no_decay
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": cfg.weight_decay},
             {"params": no_decay, "weight_decay": 0.0}],
            lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
        )
        self.step_count = 0

    def compute_losses(self, batch: Batch) -> LossBundle:
        m, mask = self.model, self.mask
        need_regions = bool(mask & {"LRC", "GR"})
        v = t = r = lex = e = None
        if need_regions:
            v, dense = m.encode_image(batch.images)
            r = roi_align(dense, batch.boxes, m.cfg.patch_size, self.cfg.roi_grid, self.cfg.roi_sampling)
        elif "GC" in mask:
            v = m.encode_image_global(batch.images)
        if mask & {"GC", "LRC"}:
            t, hidden = m.encode_text(batch.tokens, batch.eot_index)
            if "LRC" in mask:
                lex = select_lexeme(hidden, batch.token_idx)
        if "GR" in mask:
            e = self.teacher.encode_crops(batch.images, batch.boxes)
        return total_loss(v, t, r, lex, e, m.log_tau, mask, log_tau_lrc=m.log_tau_lrc)

    def train_step(self, batch: Batch) -> tuple[LossBundle, float]:
        lr = lr_at_step(self.step_count, self.cfg, self.total_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        self.optimizer.zero_grad(set_to_none=False)
        bundle = self.compute_losses(batch)
        if not torch.isfinite(bundle.total):
            raise TrainingDivergedError(
                f"non-finite loss at step {self.step_count}",
                snapshot={"step": self.step_count, "lr": lr, "losses": bundle.as_dict(),
                          "tau": self.model.tau, "batch_indices": batch.indices.tolist()},
            )
        bundle.total.backward()
        for p in self.params:
            # decoupled decay must still reach parameters the loss did not touch
            if p.grad is None:
                p.grad = torch.zeros_like(p)
        if self.cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.optimizer.step()
        self.model.clamp_temperature()
        self.step_count += 1
        return LossBundle(*(x.detach() for x in (bundle.l_gc, bundle.l_lrc, bundle.l_gr, bundle.total))), lr


@dataclass
class FitResult:
    model: DualEncoder
    metrics: list[dict]
    checkpoint: Path | None
    teacher_fingerprint: tuple[str, str] | None
    extra: dict = field(default_factory=dict)


def _resolve_model(init, corpus: CorpusManifest, model_cfg: ModelConfig | None, seed: int):
    if isinstance(init, DualEncoder):
        return init, {"vocab": corpus.vocab.to_list(), "train_steps": 0}
    if init is not None:
        model, extra = load_checkpoint(init)
        if "vocab" in extra and extra["vocab"] != corpus.vocab.to_list():
            raise ConfigError("checkpoint vocabulary differs from the corpus vocabulary")
        return model, dict(extra)
    cfg = model_cfg or ModelConfig()
    if cfg.vocab_size != len(corpus.vocab):
        cfg = ModelConfig(**{**asdict(cfg), "vocab_size": len(corpus.vocab)})
    torch.manual_seed(seed)
    return DualEncoder(cfg), {"vocab": corpus.vocab.to_list(), "train_steps": 0}


def fit(
    corpus: CorpusManifest,
    cfg: TrainConfig,
    init=None,
    model_cfg: ModelConfig | None = None,
    teacher=None,
    out_dir=None,
) -> FitResult:
    """Train for ``cfg.epochs`` passes (capped by ``cfg.max_steps``).

    ``init`` may be a model, a checkpoint path or None for a fresh seeded model.
    ``teacher`` may be a model or checkpoint path; by default it is a frozen
    snapshot of the initial student. With ``out_dir`` set, per-step metrics go
    to ``metrics.jsonl`` and checkpoints to ``checkpoints/``.
    """
    model, extra = _resolve_model(init, corpus, model_cfg, cfg.seed)
    total = cfg.total_steps(len(corpus))
    handle = None
    if "GR" in cfg.loss_mask:
        if teacher is None:
            handle = TeacherHandle(model)
        else:
            handle = TeacherHandle(teacher if isinstance(teacher, DualEncoder) else load_checkpoint(teacher)[0])
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a")

    metrics: list[dict] = []
    start_fp = handle.fingerprint if handle else None
    try:
        if total > 0:
            trainer = Trainer(model, cfg, total, handle)
            cache = ImageCache(corpus, model.cfg.image_size)
            batches = make_batches(corpus, cfg.batch_size, cfg.seed, cfg.epochs,
                                   model.cfg.image_size, model.cfg.max_text_len, cache)
            t0 = time.perf_counter()
            for batch in batches:
                if trainer.step_count >= total:
                    break
                bundle, lr = trainer.train_step(batch)
                rec = {"step": trainer.step_count, "lr": lr, **bundle.as_dict(),
                       "wall_time": round(time.perf_counter() - t0, 4)}
                metrics.append(rec)
                if metrics_fh:
                    metrics_fh.write(json.dumps(rec) + "\n")
                if trainer.step_count % 100 == 0:
                    log.info("step %d lr %.3g loss %.4f", trainer.step_count, lr, rec["total"])
                if out is not None and cfg.checkpoint_every and trainer.step_count % cfg.checkpoint_every == 0:
                    save_checkpoint(out / "checkpoints" / f"step_{trainer.step_count:06d}.pt", model,
                                    {**extra, "train_steps": extra.get("train_steps", 0) + trainer.step_count})
            extra = {**extra, "train_steps": extra.get("train_steps", 0) + trainer.step_count}
    finally:
        if metrics_fh:
            metrics_fh.close()

    ckpt = save_checkpoint(out / "checkpoints" / "final.pt", model, extra) if out is not None else None
    fps = (start_fp, fingerprint(handle.params)) if handle else None
    return FitResult(model, metrics, ckpt, fps, extra)
