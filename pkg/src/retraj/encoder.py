"""Bidirectional transformer encoder with low-rank adaptation.

The base weights are frozen; only rank-r factor pairs (B, C) attached to
the query/key/value projections train.  B is Gaussian-initialized and C
starts at zero, so a fresh adapter leaves the base model's function
bit-identical.  The effective projection weight W + B @ C is
materialized before the matmul, which keeps the adapted layer exactly
equal to a plain layer carrying that weight.

Base weights default to a seeded random initialization; a pretrained
checkpoint in the package's tensor-archive format can be loaded over
them instead.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    dim: int = 512
    heads: int = 8
    ffn_dim: int = 2048
    lora_rank: int = 8

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if not 1 <= self.lora_rank <= self.dim:
            raise ConfigError(f"adapter rank must be in [1, {self.dim}]")


class LowRankDelta(nn.Module):
    """Trainable rank-r additive update for one square weight matrix."""

    def __init__(self, dim: int, rank: int) -> None:
        super().__init__()
        self.down = nn.Parameter(torch.randn(dim, rank) / math.sqrt(dim))  # B
        self.up = nn.Parameter(torch.zeros(rank, dim))  # C, zero so delta starts at 0

    def forward(self) -> torch.Tensor:
        return self.down @ self.up  # [dim, dim]


class EncoderLayer(nn.Module):
    """Post-norm attention + feed-forward block, all base weights frozen."""

    def __init__(self, cfg: TransformerConfig) -> None:
        super().__init__()
        self.heads = cfg.heads
        self.dim = cfg.dim
        d = cfg.dim
        self.w_q = nn.Linear(d, d)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.w_o = nn.Linear(d, d)
        self.ffn_in = nn.Linear(d, cfg.ffn_dim)
        self.ffn_out = nn.Linear(cfg.ffn_dim, d)
        self.norm_attn = nn.LayerNorm(d)
        self.norm_ffn = nn.LayerNorm(d)
        for p in self.parameters():
            p.requires_grad_(False)
        self.delta_q = LowRankDelta(d, cfg.lora_rank)
        self.delta_k = LowRankDelta(d, cfg.lora_rank)
        self.delta_v = LowRankDelta(d, cfg.lora_rank)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        """x: [B, N, F]; key_mask: [B, N] bool, True on real rows."""
        q = F.linear(x, self.w_q.weight + self.delta_q(), self.w_q.bias)
        k = F.linear(x, self.w_k.weight + self.delta_k(), self.w_k.bias)
        v = F.linear(x, self.w_v.weight + self.delta_v(), self.w_v.bias)
        qh, kh, vh = self._heads(q), self._heads(k), self._heads(v)  # [B, H, N, dh]

        scale = 1.0 / math.sqrt(self.dim // self.heads)
        scores = (qh @ kh.transpose(-1, -2)) * scale  # [B, H, N, N]
        blocked = ~key_mask[:, None, None, :]
        scores = scores.masked_fill(blocked, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = attn @ vh  # [B, H, N, dh]
        ctx = ctx.transpose(1, 2).reshape(x.shape)
        x = self.norm_attn(x + self.w_o(ctx))

        h = self.ffn_out(F.gelu(self.ffn_in(x)))
        return self.norm_ffn(x + h)


class AdaptedEncoder(nn.Module):
    """Stack of frozen encoder layers with trainable low-rank deltas."""

    def __init__(self, cfg: TransformerConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self._init_base()

    def _init_base(self) -> None:
        # small-Gaussian weights, zero biases, unit layer norms
        for layer in self.layers:
            for lin in (layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.ffn_in, layer.ffn_out):
                with torch.no_grad():
                    lin.weight.copy_(0.02 * torch.randn_like(lin.weight))
                    lin.bias.zero_()

    def forward(self, z: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            z = layer(z, key_mask)
        return z

    def adapter_parameters(self) -> list[nn.Parameter]:
        out = []
        for layer in self.layers:
            for delta in (layer.delta_q, layer.delta_k, layer.delta_v):
                out.extend(delta.parameters())
        return out

    def base_parameters(self) -> list[tuple[str, nn.Parameter]]:
        adapters = {id(p) for p in self.adapter_parameters()}
        return [(n, p) for n, p in self.named_parameters() if id(p) not in adapters]

    def base_checksum(self) -> str:
        """SHA-256 over the frozen weights in name order."""
        digest = hashlib.sha256()
        for name, p in sorted(self.base_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
        return digest.hexdigest()

    def load_base_weights(self, path: str) -> None:
        """Overwrite the frozen base from an .npz keyed by parameter name."""
        with np.load(path) as arch:
            available = set(arch.files)
            for name, p in self.base_parameters():
                if name not in available:
                    raise ConfigError(f"pretrained archive missing tensor {name}")
                arr = arch[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ConfigError(
                        f"pretrained tensor {name} has shape {arr.shape}, expected {tuple(p.shape)}"
                    )
                with torch.no_grad():
                    p.copy_(torch.from_numpy(arr).to(p.dtype))

    def unfreeze_attention(self) -> None:
        """Optionally let the base attention projections train as well."""
        for layer in self.layers:
            for lin in (layer.w_q, layer.w_k, layer.w_v, layer.w_o):
                lin.weight.requires_grad_(True)
                lin.bias.requires_grad_(True)


class OutputHeads(nn.Module):
    """Segment classifier and moving-ratio regressor over encoder rows."""

    def __init__(self, dim: int, n_edges: int) -> None:
        super().__init__()
        self.segment = nn.Linear(dim, n_edges)
        self.ratio = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, S, F] -> logits [B, S, E], ratios [B, S] strictly in (0, 1)."""
        logits = self.segment(z)
        raw = torch.sigmoid(self.ratio(z).squeeze(-1))
        # float32 sigmoid saturates to exactly 1.0 for large inputs; keep open interval
        ratios = raw.clamp(min=1e-6, max=1.0 - 1e-6)
        return logits, ratios


def predict_slots(
    logits: torch.Tensor, ratios: torch.Tensor, slot_mask: torch.Tensor
) -> list[list[tuple[int, float]]]:
    """Per-example (segment_index, ratio) picks over real slots.

    Argmax ties go to the smallest segment index.
    """
    out: list[list[tuple[int, float]]] = []
    logits_np = logits.detach().cpu().numpy()
    ratios_np = ratios.detach().cpu().numpy()
    mask_np = slot_mask.detach().cpu().numpy().astype(bool)
    for b in range(logits_np.shape[0]):
        picks = []
        for s in range(logits_np.shape[1]):
            if not mask_np[b, s]:
                continue
            picks.append((int(np.argmax(logits_np[b, s])), float(ratios_np[b, s])))
        out.append(picks)
    return out
