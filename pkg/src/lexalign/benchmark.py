"""Shape-world benchmark: a fixed pretrain-then-finetune protocol on synthetic corpora.

A randomly initialised tiny model has no global semantics for the region
objectives to preserve or distill, so every objective comparison starts from a
shared short contrastive pretraining run on a larger, differently seeded corpus.
Objective cells are then fine-tuned on a 200-sample task corpus and scored on
held-out corpora drawn from the same distribution.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

from .data import CorpusManifest, SynthConfig, generate_synthetic_corpus
from .experiments import OBJECTIVE_ROWS, AblationTable, run_ablation_grid
from .model import DualEncoder, ModelConfig
from .train import TrainConfig, fit

COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white")
SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "bar", "frame")
# each color is tied to one shape so a class is identifiable from either cue
CLASSES = tuple(zip(COLORS, SHAPES))
SIZE_WORDS = ("small", "large")


@dataclass
class Protocol:
    pretrain_seed: int = 100
    pretrain_images: int = 2000
    pretrain_steps: int = 6000
    pretrain_lr: float = 1e-3
    train_seed: int = 0
    # several small held-out corpora: a single one has too few captions to
    # separate the objective cells, and one large corpus would repeat captions
    eval_seeds: tuple[int, ...] = (1, 2, 3, 4)
    task_images: int = 100
    finetune_lr: float = 5e-4
    finetune_steps: int = 1500
    stage2_lr: float = 5e-4
    stage2_epochs: int = 15
    model: ModelConfig = field(default_factory=ModelConfig)

    def _synth(self, **kw) -> SynthConfig:
        return SynthConfig(classes=CLASSES, size_words=SIZE_WORDS, size_split=12, **kw)

    def pretrain_corpus(self) -> CorpusManifest:
        # wider size range than the task so enlarged crops still look familiar; half
        # the phrases drop the size word so plain class prompts are in-distribution
        cfg = self._synth(min_objects=1, max_objects=2, min_size=8, max_size=24, unique_captions=False,
                          size_word_prob=0.5)
        return generate_synthetic_corpus(self.pretrain_seed, self.pretrain_images, cfg)

    def task_corpus(self, seed: int) -> CorpusManifest:
        cfg = self._synth(min_objects=2, max_objects=2, min_size=8, max_size=16)
        return generate_synthetic_corpus(seed, self.task_images, cfg)

    def train_corpus(self) -> CorpusManifest:
        return self.task_corpus(self.train_seed)

    def eval_corpora(self) -> list[CorpusManifest]:
        return [self.task_corpus(s) for s in self.eval_seeds]

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(lr=self.pretrain_lr, epochs=10**6, max_steps=self.pretrain_steps, loss_mask="GC")

    def finetune_config(self, loss_mask="GC,LRC,GR", **kw) -> TrainConfig:
        return TrainConfig(lr=self.finetune_lr, epochs=10**6, max_steps=self.finetune_steps,
                           loss_mask=loss_mask, **kw)

    def stage2_config(self) -> TrainConfig:
        return TrainConfig(lr=self.stage2_lr, epochs=self.stage2_epochs, loss_mask="GC,LRC")

    def pretrain(self, out_dir=None) -> DualEncoder:
        res = fit(self.pretrain_corpus(), self.pretrain_config(), model_cfg=copy.deepcopy(self.model),
                  out_dir=out_dir)
        return res.model

    def objective_grid(self, init, out_dir=None, keep_models: bool = False) -> AblationTable:
        """Fine-tune the four objective rows from ``init``; score on the held-out corpora."""
        grid = {"loss_mask": [",".join(m) for m in OBJECTIVE_ROWS]}
        return run_ablation_grid(self.finetune_config(), grid, self.train_corpus(), self.eval_corpora(),
                                 init=init, out_dir=out_dir, keep_models=keep_models)
