"""Contrastive and alignment objectives.

All functions take plain tensors and are differentiable with autograd. The
temperature is passed in log domain (``log_tau``) so the learnable parameter
can be handed over directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from lexalign.errors import InputError, NumericalDomainError

EPS = 1e-8
LOSS_NAMES = ("GC", "LRC", "GR")


def _normalize(x: Tensor) -> Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalDomainError("cosine similarity of a zero-norm vector is undefined")
    return x / norms.clamp_min(EPS)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity ``a.b / (|a||b|)``; works on vectors or batches."""
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    return (_normalize(a) * _normalize(b)).sum(-1)


def similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity, ``S[i, j] = s(a_i, b_j)``."""
    return _normalize(a) @ _normalize(b).T


def _ordered_sum(x: Tensor, dim: int = -1) -> Tensor:
    # summing in sorted order makes the result independent of batch order
    return torch.sort(x, dim=dim).values.sum(dim=dim)


def _logsumexp(x: Tensor, dim: int) -> Tensor:
    m = x.detach().amax(dim=dim, keepdim=True)
    return m.squeeze(dim) + torch.log(_ordered_sum((x - m).exp(), dim=dim))


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.dim() != 2 or y.dim() != 2:
        raise InputError("embedding batches must be 2-D (N, d)")
    if x.shape[0] == 0:
        raise InputError("empty embedding batch")
    if x.shape != y.shape:
        raise InputError(f"mismatched batches {tuple(x.shape)} and {tuple(y.shape)}")


def symmetric_infonce(x: Tensor, y: Tensor, log_tau) -> Tensor:
    """Two-direction InfoNCE over cosine logits, averaged over 2N terms.

    Row i of ``x`` is the positive for row i of ``y``. Duplicate positives
    elsewhere in the batch are left unmasked. Reductions run in sorted order,
    so permuting the pairs leaves the value bit-identical.
    """
    _check_pair(x, y)
    log_tau = torch.as_tensor(log_tau, dtype=x.dtype)
    logits = similarity_matrix(x, y) / log_tau.exp()
    diag = logits.diagonal()
    x_to_y = _logsumexp(logits, dim=1) - diag
    y_to_x = _logsumexp(logits, dim=0) - diag
    return _ordered_sum(torch.cat([x_to_y, y_to_x])) / (2 * x.shape[0])


def global_contrastive_loss(image_emb: Tensor, text_emb: Tensor, log_tau) -> Tensor:
    return symmetric_infonce(image_emb, text_emb, log_tau)


def lexeme_region_contrastive_loss(region_emb: Tensor, lexeme_emb: Tensor, log_tau) -> Tensor:
    return symmetric_infonce(region_emb, lexeme_emb, log_tau)


def global_region_alignment_loss(region_emb: Tensor, teacher_emb: Tensor) -> Tensor:
    """``1 - mean_i cos(R_i, E_i)``; the teacher side never receives gradient."""
    _check_pair(region_emb, teacher_emb)
    cos = cosine_similarity(region_emb, teacher_emb.detach())
    return 1.0 - _ordered_sum(cos) / cos.shape[0]


@dataclass
class LossBundle:
    l_gc: Tensor
    l_lrc: Tensor
    l_gr: Tensor
    total: Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "l_gc": float(self.l_gc.detach()),
            "l_lrc": float(self.l_lrc.detach()),
            "l_gr": float(self.l_gr.detach()),
            "total": float(self.total.detach()),
        }


def parse_loss_mask(mask) -> frozenset[str]:
    if isinstance(mask, str):
        mask = [m for m in mask.replace("+", ",").split(",") if m.strip()]
    out = frozenset(m.strip().upper() for m in mask)
    unknown = out - set(LOSS_NAMES)
    if unknown:
        raise InputError(f"unknown loss names {sorted(unknown)}")
    if not out:
        raise InputError("loss mask must name at least one loss")
    return out


def total_loss(
    image_emb=None,
    text_emb=None,
    region_emb=None,
    lexeme_emb=None,
    teacher_emb=None,
    log_tau=None,
    mask=LOSS_NAMES,
    log_tau_lrc=None,
) -> LossBundle:
    """Unit-weight sum of the enabled losses; disabled ones contribute 0.

    ``log_tau_lrc`` overrides the temperature of the lexeme-region term when
    the model keeps a separate one.
    """
    mask = parse_loss_mask(mask)
    ref = next(t for t in (image_emb, region_emb, text_emb) if t is not None)
    zero = ref.new_zeros(())
    l_gc = l_lrc = l_gr = zero
    if "GC" in mask:
        l_gc = global_contrastive_loss(image_emb, text_emb, log_tau)
    if "LRC" in mask:
        l_lrc = lexeme_region_contrastive_loss(
            region_emb, lexeme_emb, log_tau if log_tau_lrc is None else log_tau_lrc
        )
    if "GR" in mask:
        l_gr = global_region_alignment_loss(region_emb, teacher_emb)
    return LossBundle(l_gc, l_lrc, l_gr, l_gc + l_lrc + l_gr)


def combine_losses(l_gc=0.0, l_lrc=0.0, l_gr=0.0, mask=LOSS_NAMES) -> LossBundle:
    """Bundle precomputed sub-losses, zeroing the ones the mask leaves out."""
    mask = parse_loss_mask(mask)
    parts = [torch.as_tensor(v, dtype=torch.float64) if n in mask else torch.zeros((), dtype=torch.float64)
             for n, v in zip(LOSS_NAMES, (l_gc, l_lrc, l_gr))]
    return LossBundle(*parts, parts[0] + parts[1] + parts[2])
