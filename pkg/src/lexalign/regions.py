"""Box geometry on pixel images and dense feature grids.

Both RoIAlign and crop resampling use the same clamped bilinear interpolant:
cell ``j`` of an ``n``-cell axis sits at continuous coordinate ``j``, values
between centres are linear, and values beyond the outer centres replicate the
edge cell. Because the interpolant is separable, every pooling or resampling
step here is ``Wy @ values @ Wx.T`` with per-axis weight matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from lexalign.errors import InputError


@dataclass(frozen=True)
class Bbox:
    """Axis-aligned box in pixel coordinates, corner form."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "Bbox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def clamp(self, width: float, height: float) -> "Bbox":
        return Bbox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )

    def validate(self, image_size, min_area: float = 1.0) -> "Bbox":
        W, H = (image_size, image_size) if isinstance(image_size, (int, float)) else image_size
        if not (0 <= self.x_min < self.x_max <= W and 0 <= self.y_min < self.y_max <= H):
            raise InputError(f"box {self.as_tuple()} outside image of size {W}x{H}")
        if self.area < min_area:
            raise InputError(f"box area {self.area} below minimum {min_area}")
        return self

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


def boxes_tensor(boxes, dtype=torch.float32) -> Tensor:
    if isinstance(boxes, Tensor):
        out = boxes.to(dtype)
    else:
        rows = [b.as_tuple() if isinstance(b, Bbox) else tuple(b) for b in boxes]
        out = torch.tensor(rows, dtype=dtype)
    return out.reshape(-1, 4)


def check_boxes(boxes: Tensor, width: float, height: float, min_area: float = 1.0) -> None:
    x0, y0, x1, y1 = boxes.unbind(-1)
    inside = (x0 >= 0) & (y0 >= 0) & (x1 <= width) & (y1 <= height) & (x0 < x1) & (y0 < y1)
    if not bool(inside.all()):
        bad = boxes[~inside][0].tolist()
        raise InputError(f"box {bad} outside image of size {width}x{height}")
    area = (x1 - x0) * (y1 - y0)
    if bool((area < min_area).any()):
        raise InputError(f"box area {float(area.min())} below minimum {min_area}")


def _hat_cdf(u: Tensor, n: int) -> Tensor:
    """Integral from -inf to ``u`` of each unclamped hat centred at 0..n-1."""
    t = (u.unsqueeze(-1) - torch.arange(n, dtype=u.dtype)).clamp(-1.0, 1.0)
    return torch.where(t < 0, 0.5 * (t + 1) ** 2, 1 - 0.5 * (1 - t) ** 2)


def integral_weights(a: Tensor, b: Tensor, n: int) -> Tensor:
    """Mean of the clamped interpolant over ``[a, b]`` as weights on the n cells.

    ``a`` and ``b`` have any matching shape S; the result has shape S + (n,).
    """
    lo = (torch.minimum(b, torch.zeros_like(b)) - a).clamp(min=0)
    hi = (b - torch.maximum(a, torch.full_like(a, n - 1.0))).clamp(min=0)
    a_in = a.clamp(0, n - 1.0)
    b_in = b.clamp(0, n - 1.0)
    w = _hat_cdf(b_in, n) - _hat_cdf(a_in, n)
    w[..., 0] += lo
    w[..., n - 1] += hi
    return w / (b - a).unsqueeze(-1)


def point_weights(u: Tensor, n: int) -> Tensor:
    """Bilinear weights on n cells for sample coordinates ``u`` (clamped)."""
    u = u.clamp(0, n - 1.0)
    lo = u.floor().clamp(max=n - 1).long()
    hi = (lo + 1).clamp(max=n - 1)
    frac = u - lo.to(u.dtype)
    w = torch.zeros(*u.shape, n, dtype=u.dtype)
    w.scatter_add_(-1, lo.unsqueeze(-1), (1 - frac).unsqueeze(-1))
    w.scatter_add_(-1, hi.unsqueeze(-1), frac.unsqueeze(-1))
    return w


def _bin_weights(a: Tensor, b: Tensor, n: int, bins: int, sampling_ratio) -> Tensor:
    """Per-bin weights of shape (N, bins, n) for boxes spanning [a, b] on one axis."""
    step = (b - a) / bins
    k = torch.arange(bins, dtype=a.dtype)
    left = a.unsqueeze(-1) + k * step.unsqueeze(-1)
    if sampling_ratio is None:
        return integral_weights(left, left + step.unsqueeze(-1), n)
    s = (torch.arange(sampling_ratio, dtype=a.dtype) + 0.5) / sampling_ratio
    u = left.unsqueeze(-1) + s * step.reshape(-1, 1, 1)
    return point_weights(u, n).mean(dim=-2)


def roi_align_bins(
    dense: Tensor,
    boxes,
    stride: float,
    output_grid: int = 3,
    sampling_ratio: int | None = None,
    min_area: float = 1.0,
) -> Tensor:
    """Pool each box into a (P, P) grid of bins.

    ``dense`` is (N, h, w, C) with one box per map, or (h, w, C) with any number
    of boxes on the same map. Boxes are pixel-space ``(x_min, y_min, x_max,
    y_max)``; they map to feature space as ``x / stride - 0.5``, so cell centres
    sit at pixel ``(j + 0.5) * stride``.

    ``sampling_ratio=k`` averages a k x k lattice of bilinear samples in each bin.
    ``None`` averages the interpolant exactly over the bin (the k -> inf limit).
    Returns (N, P, P, C).
    """
    boxes = boxes_tensor(boxes, dtype=dense.dtype)
    if dense.dim() == 3:
        dense = dense.unsqueeze(0).expand(boxes.shape[0], *dense.shape)
    if dense.dim() != 4 or dense.shape[0] != boxes.shape[0]:
        raise InputError("need one (h, w, C) map per box")
    if output_grid < 1 or (sampling_ratio is not None and sampling_ratio < 1):
        raise InputError("output_grid and sampling_ratio must be positive")
    _, h, w, _ = dense.shape
    check_boxes(boxes, w * stride, h * stride, min_area)
    f = boxes / stride - 0.5
    wx = _bin_weights(f[:, 0], f[:, 2], w, output_grid, sampling_ratio)
    wy = _bin_weights(f[:, 1], f[:, 3], h, output_grid, sampling_ratio)
    return torch.einsum("npi,nijc,nqj->npqc", wy, dense, wx)


def roi_align(
    dense: Tensor,
    boxes,
    stride: float,
    output_grid: int = 3,
    sampling_ratio: int | None = None,
    min_area: float = 1.0,
) -> Tensor:
    """RoIAlign followed by a mean over the P x P bins; returns (N, C)."""
    return roi_align_bins(dense, boxes, stride, output_grid, sampling_ratio, min_area).mean(dim=(1, 2))


def crop_region(images: Tensor, boxes, target_size: int, min_area: float = 1.0) -> Tensor:
    """Cut each box out of its image and bilinearly resize it to a square.

    ``images`` is (N, C, H, W) or (C, H, W); output pixel ``k`` samples the
    source at pixel-space ``x_min + (k + 0.5) * width / target_size``.
    """
    squeeze = images.dim() == 3
    if squeeze:
        images = images.unsqueeze(0)
    boxes = boxes_tensor(boxes, dtype=images.dtype)
    if boxes.shape[0] != images.shape[0]:
        raise InputError("need one box per image")
    _, _, H, W = images.shape
    check_boxes(boxes, W, H, min_area)
    k = (torch.arange(target_size, dtype=images.dtype) + 0.5) / target_size
    ux = boxes[:, :1] + k * (boxes[:, 2:3] - boxes[:, :1]) - 0.5
    uy = boxes[:, 1:2] + k * (boxes[:, 3:4] - boxes[:, 1:2]) - 0.5
    wx = point_weights(ux, W)
    wy = point_weights(uy, H)
    out = torch.einsum("nyi,ncij,nxj->ncyx", wy, images, wx)
    return out[0] if squeeze else out
