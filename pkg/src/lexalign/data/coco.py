"""Merge caption and instance annotations into word-region samples.

Every (caption, instance) pair of an image is one matching attempt. An attempt
succeeds when the instance's category label occurs in the caption's tokens;
each success becomes its own sample, so a caption naming two annotated objects
yields two samples. Failed attempts are counted and dropped.
"""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

from lexalign.data.corpus import CorpusManifest, GroundedSample
from lexalign.data.tokenizer import Vocab, tokenize
from lexalign.errors import AnnotationParseError, EmptyCorpusError
from lexalign.regions import Bbox


def _read_json(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(path, exc.msg, offset=exc.pos) from None
    if not isinstance(data, dict) or not isinstance(data.get("annotations"), list):
        raise AnnotationParseError(path, "expected an object with an 'annotations' list", offset=0)
    return data


def find_label(tokens: list[str], label: list[str], plurals: bool = False) -> int | None:
    """Index of the first contiguous occurrence of ``label`` in ``tokens``.

    With ``plurals`` the last label token may also carry an ``s``/``es`` suffix.
    """
    n = len(label)
    if n == 0:
        return None
    head, last = label[:-1], label[-1]
    accepted = {last, last + "s", last + "es"} if plurals else {last}
    for i in range(len(tokens) - n + 1):
        if tokens[i : i + n - 1] == head and tokens[i + n - 1] in accepted:
            return i
    return None


def build_grounded_corpus(
    captions_file,
    instances_file,
    plurals: bool = False,
    min_box_area: float = 1.0,
) -> CorpusManifest:
    captions_data = _read_json(captions_file)
    instances_data = _read_json(instances_file)

    try:
        categories = {c["id"]: c["name"] for c in instances_data.get("categories", [])}
        images = {im["id"]: im for im in instances_data.get("images", [])}
        if not images:
            images = {im["id"]: im for im in captions_data.get("images", [])}
        captions = defaultdict(list)
        for ann in captions_data["annotations"]:
            captions[ann["image_id"]].append(ann["caption"])
        instances = defaultdict(list)
        for ann in instances_data["annotations"]:
            instances[ann["image_id"]].append((ann["category_id"], [float(v) for v in ann["bbox"]]))
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(instances_file, f"malformed annotation entry: {exc!r}") from None

    samples: list[GroundedSample] = []
    attempts = discarded = degenerate = 0
    unmatched_instances = 0
    shared = sorted(set(captions) & set(instances))
    for image_id in shared:
        meta = images.get(image_id, {})
        width, height = meta.get("width"), meta.get("height")
        ref = meta.get("file_name", str(image_id))
        for cat_id, (x, y, w, h) in instances[image_id]:
            if cat_id not in categories:
                raise AnnotationParseError(instances_file, f"unknown category_id {cat_id}")
            label = categories[cat_id].lower()
            box = Bbox.from_xywh(x, y, w, h)
            if width is not None and height is not None:
                box = box.clamp(width, height)
            matched_any = False
            for caption in captions[image_id]:
                attempts += 1
                idx = find_label(tokenize(caption), tokenize(label), plurals)
                if idx is None:
                    discarded += 1
                    continue
                if box.area < min_box_area:
                    discarded += 1
                    degenerate += 1
                    continue
                matched_any = True
                word = " ".join(tokenize(caption)[idx : idx + len(tokenize(label))])
                samples.append(
                    GroundedSample(
                        image_ref=ref,
                        caption=caption,
                        box=box,
                        word=word,
                        token_idx=idx,
                        label=label,
                        image_size=(int(width or 0), int(height or 0)),
                    )
                )
            if not matched_any:
                unmatched_instances += 1

    if not samples:
        raise EmptyCorpusError("no caption token matched any instance label")
    vocab = Vocab.build(c for cs in captions.values() for c in cs)
    stats = {
        "images": len(shared),
        "captions": sum(len(captions[i]) for i in shared),
        "instances": sum(len(instances[i]) for i in shared),
        "attempts": attempts,
        "samples": len(samples),
        "discarded": discarded,
        "discarded_degenerate": degenerate,
        "unmatched_instances": unmatched_instances,
    }
    return CorpusManifest(samples, vocab, stats)
