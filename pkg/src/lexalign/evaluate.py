"""Retrieval, zero-shot box classification and global/region concordance.

Metric kernels operate on embedding matrices so they can be checked without a
model; the ``eval_*`` wrappers embed a corpus with a model first.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from lexalign.data.batching import ImageCache
from lexalign.data.corpus import CorpusManifest
from lexalign.data.tokenizer import Vocab
from lexalign.errors import InputError
from lexalign.losses import cosine_similarity, similarity_matrix
from lexalign.model import DualEncoder
from lexalign.regions import roi_align

DEFAULT_TEMPLATE = "a photo of a {}"


@dataclass
class RetrievalReport:
    i2t_at_1: float
    t2i_at_1: float
    n_images: int
    n_texts: int

    @property
    def n_queries(self) -> int:
        return self.n_images + self.n_texts

    @property
    def mean_at_1(self) -> float:
        return 0.5 * (self.i2t_at_1 + self.t2i_at_1)

    def to_json(self) -> dict:
        return {**asdict(self), "n_queries": self.n_queries, "mean_at_1": self.mean_at_1}


@dataclass
class BboxReport:
    top1: float
    top5: float
    n_boxes: int
    class_set: list[str]
    prompt_template: str = DEFAULT_TEMPLATE

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ConcordanceReport:
    """Per-sample (cos(I_R, I_G), cos(I_R, T_G)) pairs and their summary.

    ``pearson_r`` is None when either series has zero variance.
    """

    per_sample: list[tuple[float, float]]
    matrix: list[list[int]]
    bin_edges: list[float]
    pearson_r: float | None
    mean_region_image: float
    mean_region_text: float
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_sample"] = [list(p) for p in self.per_sample]
        d["pearson_defined"] = self.pearson_r is not None
        return d

    def write(self, out_dir, stem: str = "concordance", heatmap: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(json.dumps(self.to_json(), indent=2) + "\n")
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cos_region_image", "cos_region_text"])
            w.writerows(self.per_sample)
        if heatmap:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(4, 4))
            e = self.bin_edges
            ax.imshow(np.asarray(self.matrix).T, origin="lower", extent=(e[0], e[-1], e[0], e[-1]), cmap="viridis")
            ax.set_xlabel("cos(I_R, I_G)")
            ax.set_ylabel("cos(I_R, T_G)")
            fig.tight_layout()
            fig.savefig(out / f"{stem}.png", dpi=120)
            plt.close(fig)
        return out


# -- metric kernels -----------------------------------------------------------

def recall_at_1(image_emb: Tensor, text_emb: Tensor, text_to_image: Sequence[int]) -> tuple[float, float]:
    """I->T and T->I Recall@1 by cosine ranking; ties go to the lower index.

    An image query hits when its top-ranked text is any of its own texts.
    """
    owner = torch.as_tensor(text_to_image, dtype=torch.long)
    if image_emb.shape[0] < 1 or text_emb.shape[0] < 1:
        raise InputError("empty retrieval set")
    if owner.numel() != text_emb.shape[0]:
        raise InputError("need one image index per text")
    sim = similarity_matrix(image_emb.double(), text_emb.double())
    top_text = sim.argmax(dim=1)
    i2t = (owner[top_text] == torch.arange(sim.shape[0])).double().mean()
    top_image = sim.argmax(dim=0)
    t2i = (top_image == owner).double().mean()
    return float(i2t), float(t2i)


def topk_accuracy(region_emb: Tensor, class_emb: Tensor, targets: Sequence[int], ks=(1, 5)) -> dict[int, float]:
    targets = torch.as_tensor(targets, dtype=torch.long)
    sim = similarity_matrix(region_emb.double(), class_emb.double())
    # stable sort keeps lower class index first among ties
    order = torch.sort(sim, dim=1, descending=True, stable=True).indices
    out = {}
    for k in ks:
        k_eff = min(k, sim.shape[1])
        out[k] = float((order[:, :k_eff] == targets[:, None]).any(dim=1).double().mean())
    return out


def concordance(region_emb: Tensor, image_emb: Tensor, text_emb: Tensor, bins: int = 10) -> ConcordanceReport:
    if region_emb.shape[0] < 1:
        raise InputError("empty concordance set")
    a = cosine_similarity(region_emb.double(), image_emb.double()).numpy()
    b = cosine_similarity(region_emb.double(), text_emb.double()).numpy()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hist, _, _ = np.histogram2d(np.clip(a, -1, 1), np.clip(b, -1, 1), bins=[edges, edges])
    notes = ["pairs are per-sample cosines of the pooled region feature against the image global and paired caption global embeddings"]
    if a.std() == 0 or b.std() == 0:
        r = None
        notes.append("zero-variance series: correlation undefined")
    else:
        r = float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))
    return ConcordanceReport(
        per_sample=[(float(x), float(y)) for x, y in zip(a, b)],
        matrix=hist.astype(int).tolist(),
        bin_edges=edges.tolist(),
        pearson_r=r,
        mean_region_image=float(a.mean()),
        mean_region_text=float(b.mean()),
        notes=notes,
    )


# -- model wrappers -----------------------------------------------------------

@torch.no_grad()
def embed_images(model: DualEncoder, images: Tensor, chunk: int = 256) -> Tensor:
    model.eval()
    return torch.cat([model.encode_image_global(images[i : i + chunk]) for i in range(0, len(images), chunk)])


@torch.no_grad()
def embed_texts(model: DualEncoder, vocab: Vocab, texts: Sequence[str], chunk: int = 256) -> Tensor:
    model.eval()
    out = []
    for i in range(0, len(texts), chunk):
        ids, eot = vocab.encode_batch(texts[i : i + chunk], model.cfg.max_text_len)
        out.append(model.encode_text(ids, eot)[0])
    return torch.cat(out)


@torch.no_grad()
def embed_regions(model: DualEncoder, images: Tensor, boxes: Tensor, chunk: int = 256,
                  roi_grid: int = 3, roi_sampling=None) -> Tensor:
    model.eval()
    out = []
    for i in range(0, len(images), chunk):
        dense = model.encode_image_dense(images[i : i + chunk])
        out.append(roi_align(dense, boxes[i : i + chunk], model.cfg.patch_size, roi_grid, roi_sampling))
    return torch.cat(out)


def _sample_arrays(model: DualEncoder, corpus: CorpusManifest):
    cache = ImageCache(corpus, model.cfg.image_size)
    images, boxes = [], []
    for s in corpus.samples:
        img, sx, sy = cache.get(s.image_ref)
        images.append(img)
        b = s.box
        boxes.append((b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy))
    return torch.stack(images), torch.tensor(boxes, dtype=torch.float32), cache


def eval_retrieval(model: DualEncoder, corpus: CorpusManifest) -> RetrievalReport:
    refs, captions, owner = corpus.retrieval_pairs()
    if len(refs) < 2:
        raise InputError("retrieval needs at least 2 images")
    cache = ImageCache(corpus, model.cfg.image_size)
    img = embed_images(model, cache.images(refs))
    txt = embed_texts(model, corpus.vocab, captions)
    i2t, t2i = recall_at_1(img, txt, owner)
    return RetrievalReport(i2t, t2i, len(refs), len(captions))


def eval_bbox_classification(
    model: DualEncoder,
    corpus: CorpusManifest,
    class_names: Sequence[str] | None = None,
    prompt_template: str = DEFAULT_TEMPLATE,
) -> BboxReport:
    """Zero-shot classification of every ground-truth box by prompt similarity."""
    labels = [s.class_label for s in corpus.samples]
    if class_names is None:
        class_names = corpus.stats.get("class_names") or sorted(set(labels))
    class_names = list(class_names)
    index = {c: i for i, c in enumerate(class_names)}
    unknown = sorted(set(labels) - set(index))
    if unknown:
        raise InputError(f"labels missing from class set: {unknown}")
    images, boxes, _ = _sample_arrays(model, corpus)
    regions = embed_regions(model, images, boxes)
    prompts = embed_texts(model, corpus.vocab, [prompt_template.format(c) for c in class_names])
    acc = topk_accuracy(regions, prompts, [index[l] for l in labels])
    return BboxReport(acc[1], acc[5], len(labels), class_names, prompt_template)


def analyze_concordance(model: DualEncoder, corpus: CorpusManifest, bins: int = 10) -> ConcordanceReport:
    images, boxes, _ = _sample_arrays(model, corpus)
    regions = embed_regions(model, images, boxes)
    globals_ = embed_images(model, images)
    texts = embed_texts(model, corpus.vocab, [s.caption for s in corpus.samples])
    return concordance(regions, globals_, texts, bins)
