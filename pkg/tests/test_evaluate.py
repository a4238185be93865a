import json

import numpy as np
import pytest
import torch

from lexalign.data import SynthConfig, generate_synthetic_corpus
from lexalign.errors import InputError
from lexalign.evaluate import (
    analyze_concordance,
    concordance,
    eval_bbox_classification,
    eval_retrieval,
    recall_at_1,
    topk_accuracy,
)
from lexalign.model import DualEncoder, ModelConfig


def _rand(n, d=16, seed=0):
    return torch.randn(n, d, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestRecall:
    def test_identity_pairing(self):
        x = _rand(10)
        assert recall_at_1(x, x, range(10)) == (1.0, 1.0)

    def test_adversarial_pairing(self):
        x = torch.eye(6, dtype=torch.float64)
        # every query's nearest text belongs to the next image
        assert recall_at_1(x, x, [(i + 1) % 6 for i in range(6)]) == (0.0, 0.0)

    def test_chance_level(self):
        vals = [np.mean(recall_at_1(_rand(100, seed=s), _rand(100, seed=1000 + s), range(100))) for s in range(20)]
        assert abs(np.mean(vals) - 0.01) < 0.03

    def test_symmetry(self):
        a, b = _rand(12), _rand(12, seed=5)
        i2t, t2i = recall_at_1(a, b, range(12))
        assert recall_at_1(b, a, range(12)) == (t2i, i2t)

    def test_rescaling_invariance(self):
        a, b = _rand(12), _rand(12, seed=5)
        scale = torch.rand(12, 1, dtype=torch.float64) * 10 + 0.1
        assert recall_at_1(a * scale, b, range(12)) == recall_at_1(a, b, range(12))

    def test_multiple_captions_per_image(self):
        img = torch.eye(3, dtype=torch.float64)
        txt = torch.stack([img[0], img[0] * 0.9 + img[1] * 0.1, img[1], img[2]])
        i2t, t2i = recall_at_1(img, txt, [0, 0, 1, 2])
        assert i2t == 1.0 and t2i == 1.0

    def test_tie_break_lower_index(self):
        img = torch.ones(2, 3, dtype=torch.float64)
        txt = torch.ones(2, 3, dtype=torch.float64)
        assert recall_at_1(img, txt, [0, 1]) == (0.5, 0.5)

    def test_guards(self):
        with pytest.raises(InputError):
            recall_at_1(_rand(3), _rand(4), [0, 1, 2])


class TestTopK:
    def test_single_class(self):
        acc = topk_accuracy(_rand(7), _rand(1, seed=1), [0] * 7)
        assert acc[1] == 1.0 and acc[5] == 1.0

    def test_pigeonhole(self):
        targets = np.random.default_rng(0).integers(0, 5, 30)
        assert topk_accuracy(_rand(30), _rand(5, seed=1), targets)[5] == 1.0

    def test_monotone(self):
        targets = np.random.default_rng(0).integers(0, 20, 50)
        acc = topk_accuracy(_rand(50), _rand(20, seed=1), targets, ks=(1, 2, 5, 10, 20))
        vals = [acc[k] for k in (1, 2, 5, 10, 20)]
        assert vals == sorted(vals) and vals[-1] == 1.0


class TestConcordance:
    def test_degenerate(self):
        x = torch.ones(5, 4)
        rep = concordance(x, x, x)
        assert rep.pearson_r is None and rep.to_json()["pearson_defined"] is False
        assert sum(map(sum, rep.matrix)) == 5

    def test_identical_series(self):
        r = _rand(30)
        g = _rand(30, seed=1)
        rep = concordance(r, g, g.clone())
        assert rep.pearson_r == pytest.approx(1.0, abs=1e-12)

    def test_histogram_mass_and_bounds(self):
        rep = concordance(_rand(40), _rand(40, seed=1), _rand(40, seed=2), bins=7)
        assert np.asarray(rep.matrix).shape == (7, 7)
        assert sum(map(sum, rep.matrix)) == 40
        assert -1.0 <= rep.pearson_r <= 1.0

    def test_permutation_invariance(self):
        r, g, t = _rand(25), _rand(25, seed=1), _rand(25, seed=2)
        p = torch.randperm(25, generator=torch.Generator().manual_seed(0))
        a, b = concordance(r, g, t), concordance(r[p], g[p], t[p])
        assert a.pearson_r == pytest.approx(b.pearson_r, abs=1e-12)
        assert a.mean_region_image == pytest.approx(b.mean_region_image, abs=1e-12)
        assert a.matrix == b.matrix

    def test_write(self, tmp_path):
        rep = concordance(_rand(10), _rand(10, seed=1), _rand(10, seed=2))
        rep.write(tmp_path)
        data = json.loads((tmp_path / "concordance.json").read_text())
        assert len(data["per_sample"]) == 10
        assert len((tmp_path / "concordance.csv").read_text().splitlines()) == 11


@pytest.fixture(scope="module")
def corpus():
    classes = tuple(zip("red green blue yellow magenta cyan orange white".split(),
                        "circle square triangle cross diamond ring bar frame".split()))
    return generate_synthetic_corpus(5, 60, SynthConfig(classes=classes, min_objects=2, max_objects=2))


class TestModelEval:
    def test_reports(self, corpus):
        torch.manual_seed(0)
        m = DualEncoder(ModelConfig(vocab_size=len(corpus.vocab)))
        r = eval_retrieval(m, corpus)
        assert 0 <= r.i2t_at_1 <= 1 and r.n_queries == 120
        b = eval_bbox_classification(m, corpus)
        assert b.top1 <= b.top5 <= 1 and b.n_boxes == 120 and len(b.class_set) == 8
        assert b.prompt_template == "a photo of a {}"
        c = analyze_concordance(m, corpus)
        assert len(c.per_sample) == 120 and c.pearson_r is not None
        assert analyze_concordance(m, corpus).per_sample == c.per_sample

    def test_untrained_bbox_chance(self, corpus):
        tops = []
        for seed in range(8):
            torch.manual_seed(seed)
            tops.append(eval_bbox_classification(DualEncoder(ModelConfig(vocab_size=len(corpus.vocab))), corpus).top1)
        assert abs(np.mean(tops) - 1 / 8) < 0.05

    def test_unknown_label(self, corpus):
        m = DualEncoder(ModelConfig(vocab_size=len(corpus.vocab)))
        with pytest.raises(InputError):
            eval_bbox_classification(m, corpus, class_names=["red circle"])
