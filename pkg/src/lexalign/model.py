"""Tiny dual encoder: patch ViT image tower and causal token text tower.

The image tower exposes two read-outs from one shared trunk. The global path
runs every block normally and projects the CLS token. The dense path replaces
the self-attention of the final block with its value projection alone, so each
spatial token is processed independently, then projects every patch token into
the joint space.

The text tower returns both the projected end-of-text embedding and the raw
per-token hidden states (after the final LayerNorm, before projection).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from lexalign.errors import ConfigError, InputError

TAU_MIN = 1.0 / 100.0
TAU_MAX = 100.0
CHECKPOINT_FORMAT = "lexalign-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    img_blocks: int = 2
    txt_blocks: int = 2
    d_model: int = 64
    embed_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 16
    tau_init: float = 0.07
    mlp_ratio: int = 4
    separate_lrc_tau: bool = False

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.d_model % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide d_model {self.d_model}")
        if self.d_model != self.embed_dim:
            raise ConfigError("d_model must equal embed_dim so hidden states and region features share a width")
        if self.img_blocks < 1 or self.txt_blocks < 1:
            raise ConfigError("both towers need at least one block")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ConfigError(f"tau_init {self.tau_init} outside [{TAU_MIN}, {TAU_MAX}]")
        if self.vocab_size < 4 or self.max_text_len < 2:
            raise ConfigError("vocab_size must be >= 4 and max_text_len >= 2")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor, causal: bool = False) -> Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        return self.out_proj(out.transpose(1, 2).reshape(B, L, D))

    def value_path(self, x: Tensor) -> Tensor:
        """Proj(v): the value projection (bias kept) followed by the output projection."""
        D = x.shape[-1]
        v = F.linear(x, self.qkv.weight[2 * D :], self.qkv.bias[2 * D :])
        return self.out_proj(v)


class ResidualBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 4, causal: bool = False):
        super().__init__()
        self.causal = causal
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln_1(x), causal=self.causal)
        return x + self.mlp(self.ln_2(x))

    def forward_without_attention(self, x: Tensor) -> Tensor:
        # y' = x + Proj(v); z' = y' + FFN(y'). No cross-token operation remains.
        y = x + self.attn.value_path(self.ln_1(x))
        return y + self.mlp(self.ln_2(y))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.patch_embed = nn.Conv2d(3, D, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.class_embedding = nn.Parameter(torch.zeros(D))
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.grid_size**2 + 1, D))
        self.ln_pre = nn.LayerNorm(D)
        self.blocks = nn.ModuleList(
            ResidualBlock(D, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.img_blocks)
        )
        self.ln_post = nn.LayerNorm(D)
        self.proj = nn.Linear(D, cfg.embed_dim, bias=False)

    def _check(self, images: Tensor) -> Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        s = self.cfg.image_size
        if images.dim() != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise InputError(f"expected images of shape (N, 3, {s}, {s}), got {tuple(images.shape)}")
        return images

    def trunk(self, images: Tensor) -> Tensor:
        """Token sequence entering the final block, shape (N, 1 + h*w, D)."""
        x = self.patch_embed(self._check(images)).flatten(2).transpose(1, 2)
        cls = self.class_embedding.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        x = self.ln_pre(x)
        for block in self.blocks[:-1]:
            x = block(x)
        return x

    def global_head(self, x: Tensor) -> Tensor:
        x = self.blocks[-1](x)
        return self.proj(self.ln_post(x[:, 0]))

    def dense_head(self, x: Tensor) -> Tensor:
        last = self.blocks[-1]
        if isinstance(last, ResidualBlock):
            z = last.forward_without_attention(x)
        else:
            z = last(x)
        z = self.proj(self.ln_post(z[:, 1:]))
        g = self.cfg.grid_size
        return z.reshape(z.shape[0], g, g, -1)

    def forward(self, images: Tensor) -> Tensor:
        return self.global_head(self.trunk(images))


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.d_model
        self.token_embedding = nn.Embedding(cfg.vocab_size, D)
        self.positional_embedding = nn.Parameter(torch.zeros(cfg.max_text_len, D))
        self.blocks = nn.ModuleList(
            ResidualBlock(D, cfg.num_heads, cfg.mlp_ratio, causal=True) for _ in range(cfg.txt_blocks)
        )
        self.ln_final = nn.LayerNorm(D)
        self.text_projection = nn.Linear(D, cfg.embed_dim, bias=False)

    def hidden_states(self, ids: Tensor) -> Tensor:
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        L = ids.shape[1]
        if L < 1 or L > self.cfg.max_text_len:
            raise InputError(f"token sequence length {L} outside [1, {self.cfg.max_text_len}]")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise InputError("token id outside vocabulary")
        x = self.token_embedding(ids) + self.positional_embedding[:L]
        for block in self.blocks:
            x = block(x)
        return self.ln_final(x)

    def forward(self, ids: Tensor, eot_index: Tensor) -> tuple[Tensor, Tensor]:
        hidden = self.hidden_states(ids)
        eot_index = torch.as_tensor(eot_index, dtype=torch.long).reshape(-1)
        if eot_index.numel() != hidden.shape[0]:
            raise InputError("one eot_index per sequence is required")
        if eot_index.min() < 0 or eot_index.max() >= hidden.shape[1]:
            raise InputError("eot_index outside the token sequence")
        rows = torch.arange(hidden.shape[0])
        return self.text_projection(hidden[rows, eot_index]), hidden


def _init_weights(module: nn.Module) -> None:
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif "ln_" in name:
            # LayerNorm gains keep their default of one
            continue
        elif p.dim() >= 1 and "log_tau" not in name:
            nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04)


class DualEncoder(nn.Module):
    """Image and text towers plus the learnable temperature(s)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.visual = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)
        _init_weights(self)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        if cfg.separate_lrc_tau:
            self.log_tau_lrc = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        else:
            self.log_tau_lrc = None

    @property
    def tau(self) -> float:
        return float(self.log_tau.detach().exp())

    @torch.no_grad()
    def clamp_temperature(self) -> None:
        lo, hi = math.log(TAU_MIN), math.log(TAU_MAX)
        self.log_tau.clamp_(lo, hi)
        if self.log_tau_lrc is not None:
            self.log_tau_lrc.clamp_(lo, hi)

    def encode_image_global(self, images: Tensor) -> Tensor:
        return self.visual(images)

    def encode_image_dense(self, images: Tensor) -> Tensor:
        """Dense map of shape (N, h, w, embed_dim)."""
        return self.visual.dense_head(self.visual.trunk(images))

    def encode_image(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Global embedding and dense map from one shared trunk pass."""
        x = self.visual.trunk(images)
        return self.visual.global_head(x), self.visual.dense_head(x)

    def encode_text(self, ids: Tensor, eot_index) -> tuple[Tensor, Tensor]:
        return self.text(ids, eot_index)


def select_lexeme(hidden: Tensor, token_idx) -> Tensor:
    """Pick h[token_idx] per sequence, without projection.

    ``hidden`` is (L, D) or (N, L, D); ``token_idx`` is an int or one index per row.
    """
    squeeze = hidden.dim() == 2
    if squeeze:
        hidden = hidden.unsqueeze(0)
    idx = torch.as_tensor(token_idx, dtype=torch.long).reshape(-1)
    if idx.numel() != hidden.shape[0]:
        raise InputError("one token index per sequence is required")
    if idx.min() < 0 or idx.max() >= hidden.shape[1]:
        raise InputError(f"token index outside [0, {hidden.shape[1]})")
    out = hidden[torch.arange(hidden.shape[0]), idx]
    return out[0] if squeeze else out


def image_parameter_groups(model: DualEncoder) -> tuple[list[nn.Module], list[nn.Parameter]]:
    visual = model.visual
    embeddings = [visual.patch_embed.weight, visual.patch_embed.bias,
                  visual.class_embedding, visual.positional_embedding]
    embeddings += list(visual.ln_pre.parameters())
    return list(visual.blocks), embeddings


def set_trainable_depth(model: DualEncoder, unlocked_layers: int) -> DualEncoder:
    """Unlock the last ``unlocked_layers`` image blocks and freeze the rest.

    Patch/positional embeddings, ln_pre, ln_post and the visual projection are
    trainable only on a full unlock. The text tower and temperatures stay
    trainable regardless.
    """
    n = model.cfg.img_blocks
    if not 0 <= unlocked_layers <= n:
        raise InputError(f"unlocked_layers must be in [0, {n}], got {unlocked_layers}")
    full = unlocked_layers == n
    for p in model.visual.parameters():
        p.requires_grad_(full)
    for block in list(model.visual.blocks)[n - unlocked_layers :]:
        for p in block.parameters():
            p.requires_grad_(True)
    for p in model.text.parameters():
        p.requires_grad_(True)
    model.log_tau.requires_grad_(True)
    if model.log_tau_lrc is not None:
        model.log_tau_lrc.requires_grad_(True)
    return model


def frozen_copy(model: DualEncoder) -> DualEncoder:
    teacher = copy.deepcopy(model).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def save_checkpoint(path, model: DualEncoder, extra: dict | None = None) -> Path:
    """Write config, every named parameter tensor and ``extra`` metadata.

    The file is a ``torch.save`` archive holding a plain dict:
    ``{"format", "version", "config", "state_dict", "extra"}``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[DualEncoder, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"unsupported checkpoint version {payload.get('version')}")
    model = DualEncoder(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload["extra"]
