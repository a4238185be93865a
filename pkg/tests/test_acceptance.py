"""Acceptance criteria, one test per criterion.

Each test records a ``PASS`` or ``FAIL`` line that the terminal summary prints
in criterion order. Run standalone with ``python tests/test_acceptance.py``.

Criteria 7, 8, 9 and 11 share one benchmark run (pretrain once, four objective
cells, one stage-2 fine-tune), scored on the protocol's held-out corpora. It
takes a few minutes on one CPU thread.
"""

import math
import sys
import time

import numpy as np
import pytest
import torch

from lexalign.benchmark import Protocol
from lexalign.data import SynthConfig, build_grounded_corpus, generate_synthetic_corpus
from lexalign.evaluate import analyze_concordance, eval_bbox_classification, eval_retrieval
from lexalign.experiments import run_stage2_finetune
from lexalign.losses import (
    global_contrastive_loss,
    global_region_alignment_loss,
    lexeme_region_contrastive_loss,
)
from lexalign.model import DualEncoder, ModelConfig, ResidualBlock
from lexalign.regions import roi_align
from lexalign.train import TrainConfig, fit

from conftest import COCO_EXPECTED
from oracles import central_difference, dense_pool

torch.set_num_threads(1)


@pytest.fixture
def record(record_property):
    def _record(cid, ok, detail):
        line = f"C{cid:<2} {'PASS' if ok else 'FAIL'}  {detail}"
        record_property("acceptance", line)
        return ok

    return _record


def _t(a):
    return torch.tensor(a, dtype=torch.float64)


def _contrastive(fn):
    def value(x, y, lt):
        return float(fn(_t(x), _t(y), _t(lt)))

    def grads(x, y, lt):
        tx, ty, tl = (_t(a).requires_grad_() for a in (x, y, lt))
        fn(tx, ty, tl).backward()
        return tx.grad.numpy(), ty.grad.numpy(), tl.grad.numpy()

    return value, grads


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_c01_gradients(record):
    rng = np.random.default_rng(0)
    worst = 0.0
    t0 = time.perf_counter()
    for n in (2, 5, 8):
        x, y = rng.normal(size=(n, 6)), rng.normal(size=(n, 6))
        lt = np.array(math.log(0.3) + rng.normal(scale=0.2))
        for fn in (global_contrastive_loss, lexeme_region_contrastive_loss):
            value, grads = _contrastive(fn)
            gx, gy, gl = grads(x, y, lt)
            worst = max(worst,
                        _rel(gx, central_difference(lambda a: value(a, y, lt), x)),
                        _rel(gy, central_difference(lambda a: value(x, a, lt), y)),
                        _rel(gl, central_difference(lambda a: value(x, y, a), lt)))
        # the teacher side is a stop-gradient target, so only the region side is checked
        tr = _t(x).requires_grad_()
        global_region_alignment_loss(tr, _t(y)).backward()
        fd = central_difference(lambda a: float(global_region_alignment_loss(_t(a), _t(y))), x)
        worst = max(worst, _rel(tr.grad.numpy(), fd))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    assert record(1, ok, f"gradient check max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_c02_closed_forms(record):
    rng = np.random.default_rng(1)
    one = abs(float(global_contrastive_loss(_t(rng.normal(size=(1, 8))), _t(rng.normal(size=(1, 8))), _t(0.3))))
    tau = 0.07
    e = torch.eye(2, 4, dtype=torch.float64)
    two = float(global_contrastive_loss(e, e, _t(math.log(tau))))
    err2 = abs(two - math.log1p(math.exp(-1 / tau)))
    x = _t(rng.normal(size=(6, 8)))
    gr0 = abs(float(global_region_alignment_loss(x, 3 * x)))
    gr2 = abs(float(global_region_alignment_loss(x, -x)) - 2)
    ok = one <= 1e-12 and err2 <= 1e-9 and gr0 <= 1e-12 and gr2 <= 1e-12
    assert record(2, ok, f"L_GC(N=1)={one:.1e}, orthogonal err {err2:.1e}, L_GR extremes err {gr0:.1e}/{gr2:.1e}")


def test_c03_invariances(record):
    rng = np.random.default_rng(2)
    n, d = 8, 6
    x, y = _t(rng.normal(size=(n, d))), _t(rng.normal(size=(n, d)))
    lt = _t(math.log(0.2))
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    q = _t(q)
    sx, sy = _t(rng.uniform(0.1, 10, (n, 1))), _t(rng.uniform(0.1, 10, (n, 1)))
    losses = (lambda a, b: global_contrastive_loss(a, b, lt),
              lambda a, b: lexeme_region_contrastive_loss(a, b, lt),
              global_region_alignment_loss)
    transform = max(abs(float(f(x @ q, y @ q) - f(x, y))) for f in losses)
    rescale = max(abs(float(f(x * sx, y * sy) - f(x, y))) for f in losses)
    sym = abs(float(global_contrastive_loss(x, y, lt) - global_contrastive_loss(y, x, lt)))
    perm = torch.from_numpy(rng.permutation(n))
    exact = all(float(f(x[perm], y[perm])) == float(f(x, y)) for f in losses)
    ok = transform <= 1e-6 and rescale <= 1e-6 and sym <= 1e-9 and exact
    assert record(3, ok, f"orthogonal {transform:.1e}, rescale {rescale:.1e}, symmetry {sym:.1e}, "
                         f"permutation exact={exact}")


def test_c04_block_locality(record):
    torch.manual_seed(4)
    block = ResidualBlock(32, 4).double()
    x = torch.randn(2, 17, 32, dtype=torch.float64)
    y = x.clone()
    y[:, 5] += torch.randn(2, 32, dtype=torch.float64)
    with torch.no_grad():
        diff = (block.forward_without_attention(y) - block.forward_without_attention(x)).abs().amax(-1)
    moved = float(diff[:, 5].min())
    diff[:, 5] = 0
    other = float(diff.max())
    ok = other <= 1e-6 and moved > 1e-3
    assert record(4, ok, f"max change on untouched tokens {other:.1e} (<= 1e-6), perturbed token moved {moved:.2f}")


def _random_box(rng, size):
    x0, x1 = np.sort(rng.uniform(0, size, 2))
    y0, y1 = np.sort(rng.uniform(0, size, 2))
    return (x0, y0, max(x1, x0 + 1.0), max(y1, y0 + 1.0))


def test_c05_roi_oracle(record):
    rng = np.random.default_rng(5)
    stride, g = 8, 6
    size = stride * g
    worst = 0.0
    for _ in range(100):
        fmap = rng.normal(size=(g, g, 3))
        box = _random_box(rng, size - 1.0)
        got = roi_align(torch.from_numpy(fmap), [box], stride)[0].numpy()
        want = np.array([dense_pool(fmap[..., c], box, stride) for c in range(3)])
        worst = max(worst, np.abs(got - want).max())
    const = np.full((g, g, 2), 1.7)
    ii, jj = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    ramp = np.stack([0.3 * jj - 1.1 * ii + 2.0, 0.5 * ii], -1)
    exact = 0.0
    lo, hi = stride / 2, size - stride / 2
    for _ in range(50):
        # boxes inside the span of cell centres, where the ramp is not clamped
        box = _random_box(rng, hi - lo - 1.0)
        box = tuple(v + lo for v in box)
        u = ((box[0] + box[2]) / 2) / stride - 0.5
        v = ((box[1] + box[3]) / 2) / stride - 0.5
        want = np.array([0.3 * u - 1.1 * v + 2.0, 0.5 * v])
        got = roi_align(torch.from_numpy(ramp), [box], stride)[0].numpy()
        flat = roi_align(torch.from_numpy(const), [_random_box(rng, size - 1.0)], stride)[0].numpy()
        exact = max(exact, np.abs(got - want).max(), np.abs(flat - 1.7).max())
    ok = worst <= 1e-3 and exact <= 1e-6
    assert record(5, ok, f"100 random cases max err {worst:.1e} (<= 1e-3), constant/ramp max err {exact:.1e} (<= 1e-6)")


def test_c06_dataset_builder(record, coco_files):
    a = build_grounded_corpus(*coco_files)
    b = build_grounded_corpus(*coco_files)
    got = [(s.caption, s.word, s.token_idx) for s in a.samples]
    same = [s.to_json() for s in a.samples] == [s.to_json() for s in b.samples]
    splits = max(sum(s.caption == c for s in a.samples) for c, _, _ in COCO_EXPECTED)
    ok = got == COCO_EXPECTED and a.stats["unmatched_instances"] == 1 and splits == 2 and same
    assert record(6, ok, f"{len(a)} samples (expect {len(COCO_EXPECTED)}), token indices match={got == COCO_EXPECTED}, "
                         f"discarded instance={a.stats['unmatched_instances']}, deterministic={same}")


def test_c10_frozen_teacher_and_freeze(record):
    corpus = generate_synthetic_corpus(0, 12, SynthConfig(min_objects=2, max_objects=2))
    res = fit(corpus, TrainConfig(lr=1e-2, epochs=2, batch_size=8), model_cfg=ModelConfig())
    start, end = res.teacher_fingerprint
    torch.manual_seed(0)
    model = DualEncoder(ModelConfig(vocab_size=len(corpus.vocab)))
    before = {k: v.clone() for k, v in model.visual.named_parameters()}
    frozen = fit(corpus, TrainConfig(lr=1e-2, epochs=2, batch_size=8, unlocked_layers=0), init=model).model
    changed = [k for k, v in frozen.visual.named_parameters() if not torch.equal(v, before[k])]
    ok = start == end and not changed
    assert record(10, ok, f"teacher fingerprint constant={start == end} over {len(res.metrics)} steps, "
                          f"image params changed with unlocked_layers=0: {len(changed)}")


def _retrieval(metrics):
    return 0.5 * (metrics["i2t_at_1"] + metrics["t2i_at_1"])


@pytest.fixture(scope="module")
def bench():
    proto = Protocol()
    t0 = time.perf_counter()
    init = proto.pretrain()
    table = proto.objective_grid(init, keep_models=True)
    elapsed = time.perf_counter() - t0
    held = proto.eval_corpora()
    _, stage2 = run_stage2_finetune(table.row("+GC+GR").model, proto.stage2_config(),
                                    proto.train_corpus(), held)
    return {"proto": proto, "init": init, "table": table, "elapsed": elapsed, "stage2": stage2, "held": held}


def test_c07_end_to_end_overfit(record, bench):
    train = bench["proto"].train_corpus()
    model = bench["table"].row("+GC+LRC+GR").model
    r = eval_retrieval(model, train)
    b = eval_bbox_classification(model, train)
    ok = len(train) == 200 and r.i2t_at_1 >= 0.95 and r.t2i_at_1 >= 0.95 and b.top1 >= 0.90
    assert record(7, ok, f"train R@1 {r.i2t_at_1:.3f}/{r.t2i_at_1:.3f} (>= 0.95), bbox top-1 {b.top1:.3f} (>= 0.90), "
                         f"{bench['proto'].finetune_steps} steps, pretrain + 4 cells {bench['elapsed'] / 60:.1f} min")


def test_c08_objective_trends(record, bench):
    t = bench["table"]
    gc, lrc, gr, full = (t.row(k) for k in ("+GC", "+GC+LRC", "+GC+GR", "+GC+LRC+GR"))
    best_r = max(r.retrieval for r in t.rows)
    best_b = max(r.metrics["top1"] for r in t.rows)
    checks = (gr.metrics["top1"] > gc.metrics["top1"], lrc.retrieval > gc.retrieval,
              best_r - full.retrieval <= 0.05, best_b - full.metrics["top1"] <= 0.05)
    assert record(8, all(checks),
                  f"bbox GC+GR {gr.metrics['top1']:.3f} > GC {gc.metrics['top1']:.3f}; "
                  f"R@1 GC+LRC {lrc.retrieval:.3f} > GC {gc.retrieval:.3f}; "
                  f"full gap R {best_r - full.retrieval:.3f} bbox {best_b - full.metrics['top1']:.3f} (<= 0.05)")


def test_c09_stage2(record, bench):
    d = bench["stage2"].delta
    dr = 0.5 * (d["i2t_at_1"] + d["t2i_at_1"])
    ok = dr >= 0 and d["top1"] > -0.02
    assert record(9, ok, f"stage-2 retrieval delta {dr:+.3f} (>= 0), bbox delta {d['top1']:+.3f} (> -0.02), "
                         f"{bench['stage2'].steps} steps")


def _concordance(model, corpora):
    reps = [analyze_concordance(model, c) for c in corpora]
    mean = sum(r.mean_region_image for r in reps) / len(reps)
    return mean, [r.pearson_r for r in reps]


def test_c11_concordance(record, bench):
    before, _ = _concordance(bench["init"], bench["held"])
    after = {k: _concordance(bench["table"].row(k).model, bench["held"]) for k in ("+GC+GR", "+GC+LRC+GR")}
    finite = all(r is not None and math.isfinite(r) for _, rs in after.values() for r in rs)
    ok = finite and all(m > before for m, _ in after.values())
    parts = ", ".join(f"{k} {m:.3f} (r={min(rs):.3f}..{max(rs):.3f})" for k, (m, rs) in after.items())
    assert record(11, ok, f"mean cos(I_R, I_G) init {before:.3f} -> {parts}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-rN"]))
