"""Seeded shuffling and collation of grounded samples into tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import Tensor

from lexalign.data.corpus import CorpusManifest, GroundedSample
from lexalign.data.tokenizer import Vocab
from lexalign.errors import ConfigError, InputError


@dataclass
class Batch:
    indices: np.ndarray
    images: Tensor  # (N, 3, S, S) in [0, 1]
    tokens: Tensor  # (N, max_text_len)
    eot_index: Tensor  # (N,)
    boxes: Tensor  # (N, 4) pixels at the model's image size
    token_idx: Tensor  # (N,)

    def __len__(self) -> int:
        return len(self.indices)


class ImageCache:
    """Float CHW tensors at a fixed square size, with per-image box scale factors."""

    def __init__(self, corpus: CorpusManifest, image_size: int):
        self.corpus = corpus
        self.image_size = image_size
        self._cache: dict[str, tuple[Tensor, float, float]] = {}

    def get(self, ref: str) -> tuple[Tensor, float, float]:
        if ref not in self._cache:
            arr = self.corpus.load_image(ref)
            h, w = arr.shape[:2]
            if (h, w) != (self.image_size, self.image_size):
                from PIL import Image

                arr = np.asarray(
                    Image.fromarray(arr).resize((self.image_size, self.image_size), Image.BILINEAR)
                )
            t = torch.from_numpy(np.array(arr, copy=True)).permute(2, 0, 1).float() / 255.0
            self._cache[ref] = (t, self.image_size / w, self.image_size / h)
        return self._cache[ref]

    def images(self, refs: Sequence[str]) -> Tensor:
        return torch.stack([self.get(r)[0] for r in refs])


def collate(samples: Sequence[GroundedSample], indices, vocab: Vocab, cache: ImageCache,
            max_text_len: int) -> Batch:
    images, boxes = [], []
    for s in samples:
        img, sx, sy = cache.get(s.image_ref)
        images.append(img)
        b = s.box
        boxes.append((b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy))
    tokens, eot = vocab.encode_batch([s.caption for s in samples], max_text_len)
    token_idx = torch.tensor([s.token_idx for s in samples], dtype=torch.long)
    if bool((token_idx >= eot).any()):
        raise InputError("token_idx falls at or after the EOT position")
    return Batch(
        indices=np.asarray(indices),
        images=torch.stack(images),
        tokens=tokens,
        eot_index=eot,
        boxes=torch.tensor(boxes, dtype=torch.float32),
        token_idx=token_idx,
    )


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def make_batches(
    corpus: CorpusManifest,
    batch_size: int,
    seed: int,
    epochs: int = 1,
    image_size: int = 32,
    max_text_len: int = 16,
    cache: ImageCache | None = None,
) -> Iterator[Batch]:
    """Yield shuffled batches for ``epochs`` passes; the last short batch is kept.

    One generator seeded with ``seed`` draws a fresh permutation per epoch.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 for in-batch negatives")
    if len(corpus) == 0:
        raise InputError("empty corpus")
    rng = np.random.default_rng(seed)
    cache = cache or ImageCache(corpus, image_size)
    for _ in range(epochs):
        for idx in batch_indices(len(corpus), batch_size, rng):
            yield collate([corpus.samples[i] for i in idx], idx, corpus.vocab, cache, max_text_len)
