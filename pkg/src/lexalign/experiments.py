"""Ablation grids and stage-2 fine-tuning built on ``fit`` and the evaluators."""

from __future__ import annotations

import copy
import csv
import json
import logging
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from lexalign.data.corpus import CorpusManifest
from lexalign.errors import ConfigError
from lexalign.evaluate import eval_bbox_classification, eval_retrieval
from lexalign.losses import LOSS_NAMES, parse_loss_mask
from lexalign.model import DualEncoder, ModelConfig, load_checkpoint, save_checkpoint
from lexalign.train import TrainConfig, _resolve_model, fit

log = logging.getLogger(__name__)

# objective rows in reporting order
OBJECTIVE_ROWS = (("GC",), ("GC", "LRC"), ("GC", "GR"), ("GC", "LRC", "GR"))
METRICS = ("i2t_at_1", "t2i_at_1", "top1", "top5")


def mask_label(mask) -> str:
    names = sorted(parse_loss_mask(mask), key=LOSS_NAMES.index)
    return "".join("+" + n for n in names)


def evaluate_model(model: DualEncoder, corpus, prompt_template: str | None = None) -> dict[str, float]:
    """Retrieval and box-classification metrics on one corpus.

    A list of corpora gives the unweighted mean of each metric. Retrieval runs
    within each corpus, so the gallery size stays that of one corpus.
    """
    if not isinstance(corpus, CorpusManifest):
        per = [evaluate_model(model, c, prompt_template) for c in corpus]
        if not per:
            raise ConfigError("no evaluation corpora given")
        return {k: sum(m[k] for m in per) / len(per) for k in METRICS}
    r = eval_retrieval(model, corpus)
    kw = {} if prompt_template is None else {"prompt_template": prompt_template}
    b = eval_bbox_classification(model, corpus, **kw)
    return {"i2t_at_1": r.i2t_at_1, "t2i_at_1": r.t2i_at_1, "top1": b.top1, "top5": b.top5}


@dataclass
class GridRow:
    label: str
    loss_mask: tuple[str, ...]
    unlocked_layers: int | None
    metrics: dict[str, float] = field(default_factory=dict)
    status: str = "ok"
    error: str | None = None
    # trained cell model, kept only when the grid is run with keep_models=True
    model: DualEncoder | None = field(default=None, repr=False, compare=False)

    @property
    def retrieval(self) -> float:
        return 0.5 * (self.metrics["i2t_at_1"] + self.metrics["t2i_at_1"])

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("label", "loss_mask", "unlocked_layers", "metrics", "status", "error")}
        if self.status == "ok":
            d["retrieval_mean_at_1"] = self.retrieval
        return d


@dataclass
class AblationTable:
    axis: str
    rows: list[GridRow]

    def row(self, label: str) -> GridRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def summary(self) -> str:
        head = f"{'row':<16}{'I->T@1':>8}{'T->I@1':>8}{'top1':>8}{'top5':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            if r.status != "ok":
                lines.append(f"{r.label:<16}  failed: {r.error}")
                continue
            m = r.metrics
            lines.append(f"{r.label:<16}" + "".join(f"{100 * m[k]:>8.2f}" for k in METRICS))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "ablation") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps({"axis": self.axis, "rows": [r.to_json() for r in self.rows]}, indent=2) + "\n")
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "loss_mask", "unlocked_layers", *METRICS, "status", "error"])
            for r in self.rows:
                w.writerow([r.label, "+".join(r.loss_mask), r.unlocked_layers,
                            *(r.metrics.get(k, "") for k in METRICS), r.status, r.error or ""])
        (out / f"{stem}.txt").write_text(self.summary())
        return out


def _grid_cells(base: TrainConfig, grid: dict) -> tuple[str, list[tuple[str, TrainConfig]]]:
    if not grid or len(grid) != 1:
        raise ConfigError("grid must vary exactly one of 'loss_mask' or 'unlocked_layers'")
    (axis, values), = grid.items()
    values = list(values)
    if not values:
        raise ConfigError("grid is empty")
    if axis == "loss_mask":
        masks = [tuple(sorted(parse_loss_mask(v), key=LOSS_NAMES.index)) for v in values]
        rank = {m: i for i, m in enumerate(OBJECTIVE_ROWS)}
        masks = sorted(dict.fromkeys(masks), key=lambda m: (rank.get(m, len(rank)), m))
        return axis, [(mask_label(m), replace(base, loss_mask=m)) for m in masks]
    if axis == "unlocked_layers":
        depths = sorted(dict.fromkeys(int(v) for v in values))
        return axis, [(f"layers={k}", replace(base, unlocked_layers=k)) for k in depths]
    raise ConfigError(f"unknown grid axis {axis!r}")


def run_ablation_grid(
    base: TrainConfig,
    grid: dict,
    train_corpus: CorpusManifest,
    eval_corpus,
    init=None,
    model_cfg: ModelConfig | None = None,
    out_dir=None,
    prompt_template: str | None = None,
    keep_models: bool = False,
) -> AblationTable:
    """Train one model per grid value from the same init and evaluate each.

    ``grid`` is ``{"loss_mask": [...]}`` or ``{"unlocked_layers": [...]}``.
    Every cell starts from a copy of one initial model and shares the base
    seed, so cells differ only in the varied setting. A cell that raises is
    kept as a failed row. With ``keep_models`` each row holds its trained model.
    ``eval_corpus`` may be a list of corpora; see ``evaluate_model``.
    """
    axis, cells = _grid_cells(base, grid)
    init_model, extra = _resolve_model(init, train_corpus, model_cfg, base.seed)
    rows = []
    for label, cfg in cells:
        row = GridRow(label, cfg.loss_mask, cfg.unlocked_layers)
        try:
            student = copy.deepcopy(init_model)
            teacher = copy.deepcopy(init_model)
            cell_dir = Path(out_dir) / "cells" / label.strip("+").replace("+", "_").replace("=", "") if out_dir else None
            res = fit(train_corpus, cfg, init=student, teacher=teacher, out_dir=cell_dir)
            row.metrics = evaluate_model(res.model, eval_corpus, prompt_template)
            if keep_models:
                row.model = res.model
        except Exception as exc:  # a broken cell must not sink the grid
            log.warning("grid cell %s failed: %s", label, exc)
            row.status = "failed"
            row.error = f"{type(exc).__name__}: {exc}"
            log.debug("%s", traceback.format_exc())
        rows.append(row)
    table = AblationTable(axis, rows)
    if out_dir is not None:
        table.write(out_dir)
    return table


@dataclass
class Stage2Report:
    before: dict[str, float]
    after: dict[str, float]
    delta: dict[str, float]
    steps: int
    checkpoint: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def write(self, out_dir, stem: str = "stage2") -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return out


def run_stage2_finetune(
    init_checkpoint,
    cfg: TrainConfig,
    train_corpus: CorpusManifest,
    eval_corpus,
    out_dir=None,
    prompt_template: str | None = None,
) -> tuple[DualEncoder, Stage2Report]:
    """Evaluate ``init_checkpoint``, fine-tune it with an LRC-bearing mask, re-evaluate."""
    if "LRC" not in cfg.loss_mask:
        raise ConfigError("stage-2 fine-tuning needs LRC in the loss mask")
    if isinstance(init_checkpoint, DualEncoder):
        model, extra = copy.deepcopy(init_checkpoint), {"vocab": train_corpus.vocab.to_list(), "train_steps": 0}
    else:
        model, extra = load_checkpoint(init_checkpoint)
    before = evaluate_model(model, eval_corpus, prompt_template)
    snapshot = copy.deepcopy(model)
    res = fit(train_corpus, cfg, init=model, teacher=snapshot, out_dir=out_dir)
    after = evaluate_model(res.model, eval_corpus, prompt_template)
    steps = len(res.metrics)
    ckpt = None
    if out_dir is not None:
        ckpt = str(save_checkpoint(Path(out_dir) / "checkpoints" / "final.pt", res.model,
                                   {**extra, "train_steps": extra.get("train_steps", 0) + steps}))
    report = Stage2Report(before, after, {k: after[k] - before[k] for k in METRICS}, steps, ckpt)
    if out_dir is not None:
        report.write(Path(out_dir) / "reports")
    return res.model, report
