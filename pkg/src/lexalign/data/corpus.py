"""Grounded samples and the on-disk corpus manifest.

Manifest layout in a corpus directory::

    manifest.jsonl   one GroundedSample per line (keys sorted)
    stats.json       counts plus ``schema_version``
    vocab.json       token table, reserved tokens first
    images/          rendered PNGs (synthetic corpora only)

Each manifest line carries ``image_ref``, ``caption``, ``box`` as
``[x_min, y_min, x_max, y_max]`` in pixels, ``word``, ``token_idx``, ``label``
and ``image_size`` as ``[width, height]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from lexalign.data.tokenizer import Vocab, tokenize
from lexalign.errors import InputError
from lexalign.regions import Bbox

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GroundedSample:
    image_ref: str
    caption: str
    box: Bbox
    word: str
    token_idx: int
    label: str = ""
    image_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        words = self.word.split()
        toks = tokenize(self.caption)
        if toks[self.token_idx : self.token_idx + len(words)] != words:
            raise InputError(f"token {self.token_idx} of {self.caption!r} is not {self.word!r}")

    @property
    def class_label(self) -> str:
        return self.label or self.word

    def to_json(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box.as_tuple())
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GroundedSample":
        return cls(
            image_ref=d["image_ref"],
            caption=d["caption"],
            box=Bbox(*map(float, d["box"])),
            word=d["word"],
            token_idx=int(d["token_idx"]),
            label=d.get("label", ""),
            image_size=tuple(d.get("image_size", (0, 0))),
        )


@dataclass
class CorpusManifest:
    samples: list[GroundedSample]
    vocab: Vocab
    stats: dict = field(default_factory=dict)
    images: dict[str, np.ndarray] | None = None
    image_root: Path | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def image_refs(self) -> list[str]:
        return list(dict.fromkeys(s.image_ref for s in self.samples))

    def load_image(self, ref: str) -> np.ndarray:
        """uint8 (H, W, 3) array for ``ref``."""
        if self.images is not None and ref in self.images:
            return self.images[ref]
        if self.image_root is None:
            raise InputError(f"no pixels available for {ref}")
        from PIL import Image

        with Image.open(self.image_root / ref) as im:
            arr = np.asarray(im.convert("RGB"))
        if self.images is None:
            self.images = {}
        self.images[ref] = arr
        return arr

    def retrieval_pairs(self) -> tuple[list[str], list[str], list[int]]:
        """Distinct images, distinct (image, caption) texts, and each text's image index."""
        refs = self.image_refs()
        index = {r: i for i, r in enumerate(refs)}
        seen, captions, owner = set(), [], []
        for s in self.samples:
            key = (s.image_ref, s.caption)
            if key not in seen:
                seen.add(key)
                captions.append(s.caption)
                owner.append(index[s.image_ref])
        return refs, captions, owner

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "manifest.jsonl", "w") as fh:
            for s in self.samples:
                fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
        stats = dict(self.stats, samples=len(self.samples), schema_version=SCHEMA_VERSION)
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
        (out / "vocab.json").write_text(json.dumps(self.vocab.to_list()) + "\n")
        if self.images:
            from PIL import Image

            (out / "images").mkdir(exist_ok=True)
            for ref, arr in self.images.items():
                Image.fromarray(arr).save(out / ref)
        return out

    @classmethod
    def load(cls, corpus_dir, image_root=None) -> "CorpusManifest":
        d = Path(corpus_dir)
        stats = json.loads((d / "stats.json").read_text())
        if stats.get("schema_version") != SCHEMA_VERSION:
            raise InputError(f"unsupported manifest schema {stats.get('schema_version')}")
        with open(d / "manifest.jsonl") as fh:
            samples = [GroundedSample.from_json(json.loads(line)) for line in fh if line.strip()]
        vocab = Vocab.from_list(json.loads((d / "vocab.json").read_text()))
        root = Path(image_root) if image_root is not None else d
        return cls(samples, vocab, stats, images=None, image_root=root)
