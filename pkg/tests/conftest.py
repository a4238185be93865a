import json

import pytest
import torch

from lexalign.model import DualEncoder, ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_size=16, patch_size=4, img_blocks=2, txt_blocks=2, d_model=32,
                       embed_dim=32, num_heads=4, vocab_size=32, max_text_len=12)


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return DualEncoder(tiny_cfg)


# Mini annotation set with hand-derived answers:
#   image 1: c1 names dog and cat (splits into 2 samples), c2 names the frisbee,
#            the bicycle instance appears in no caption and is discarded
#   image 2: one horse, one caption
#   image 3: traffic light (two-token label) and bus, one caption each
COCO_IMAGES = [
    {"id": 1, "file_name": "000001.jpg", "width": 64, "height": 48},
    {"id": 2, "file_name": "000002.jpg", "width": 40, "height": 40},
    {"id": 3, "file_name": "000003.jpg", "width": 50, "height": 30},
]
COCO_CAPTIONS = [
    {"id": 11, "image_id": 1, "caption": "A dog chases a cat."},
    {"id": 12, "image_id": 1, "caption": "A frisbee flies through the air"},
    {"id": 21, "image_id": 2, "caption": "Horse grazing in a field"},
    {"id": 31, "image_id": 3, "caption": "A red Traffic Light over the road"},
    {"id": 32, "image_id": 3, "caption": "The bus waits at the stop"},
]
COCO_CATEGORIES = [
    {"id": 1, "name": "dog"}, {"id": 2, "name": "cat"}, {"id": 3, "name": "frisbee"},
    {"id": 4, "name": "bicycle"}, {"id": 5, "name": "horse"}, {"id": 6, "name": "traffic light"},
    {"id": 7, "name": "bus"},
]
COCO_INSTANCES = [
    {"id": 101, "image_id": 1, "category_id": 1, "bbox": [2, 3, 20, 15]},
    {"id": 102, "image_id": 1, "category_id": 2, "bbox": [30, 10, 12, 12]},
    {"id": 103, "image_id": 1, "category_id": 3, "bbox": [50, 0, 20, 8]},  # runs past the right edge
    {"id": 104, "image_id": 1, "category_id": 4, "bbox": [5, 30, 10, 10]},
    {"id": 201, "image_id": 2, "category_id": 5, "bbox": [0, 0, 40, 40]},
    {"id": 301, "image_id": 3, "category_id": 6, "bbox": [10, 2, 4, 10]},
    {"id": 302, "image_id": 3, "category_id": 7, "bbox": [20, 10, 25, 15]},
]
# (caption, word, token_idx) in builder order
COCO_EXPECTED = [
    ("A dog chases a cat.", "dog", 1),
    ("A dog chases a cat.", "cat", 4),
    ("A frisbee flies through the air", "frisbee", 1),
    ("Horse grazing in a field", "horse", 0),
    ("A red Traffic Light over the road", "traffic light", 2),
    ("The bus waits at the stop", "bus", 1),
]


@pytest.fixture
def coco_files(tmp_path):
    caps = tmp_path / "captions.json"
    inst = tmp_path / "instances.json"
    caps.write_text(json.dumps({"images": COCO_IMAGES, "annotations": COCO_CAPTIONS}))
    inst.write_text(json.dumps({"images": COCO_IMAGES, "categories": COCO_CATEGORIES,
                                "annotations": COCO_INSTANCES}))
    return caps, inst


def pytest_terminal_summary(terminalreporter):
    lines, broken = [], []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" not in getattr(rep, "nodeid", ""):
                continue
            props = [v for k, v in getattr(rep, "user_properties", []) if k == "acceptance"]
            if props:
                lines.extend(props)
            elif rep.failed and rep.when == "call":
                broken.append(f"FAIL  {rep.nodeid} did not report a result")
    if lines or broken:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s[1:3])) + broken:
            terminalreporter.write_line(line)
