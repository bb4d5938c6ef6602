"""End-to-end recovery model.

A batch flows as: prompt tokens -> embedding table; slots -> observed or
missing embedding; local conv + reference attention; prompt and slot
rows concatenated with sinusoidal position codes; frozen transformer
with low-rank adapters; segment and ratio heads over the slot rows (the
prompt rows are dropped before prediction).

Variable lengths are handled by padding the prompt block and the slot
block separately and carrying boolean masks; positions index the
logical (unpadded) sequence so padding never shifts the encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .embedder import FeatureTransform, SlotEmbedder, SlotFeatures, sinusoidal_pe
from .encoder import AdaptedEncoder, OutputHeads, TransformerConfig
from .errors import ConfigError
from .prompts import FlowGridEncoder, GridMeta


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 512
    layers: int = 4
    heads: int = 8
    ffn_dim: int = 2048
    lora_rank: int = 8
    ref_tokens: int = 512
    kappa: float = 15.0
    phi_dist: float = 50.0
    epsilon: int = 15
    coord_scale: float = 10.0

    def __post_init__(self) -> None:
        if self.ref_tokens < 1:
            raise ConfigError("need at least one reference token")
        if self.kappa <= 0 or self.phi_dist <= 0:
            raise ConfigError("kappa and phi_dist must be positive")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(
            layers=self.layers,
            dim=self.dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            lora_rank=self.lora_rank,
        )

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "lora_rank": self.lora_rank,
            "ref_tokens": self.ref_tokens,
            "kappa": self.kappa,
            "phi_dist": self.phi_dist,
            "epsilon": self.epsilon,
            "coord_scale": self.coord_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


@dataclass
class Batch:
    prompt_ids: torch.Tensor  # int64 [B, P]
    prompt_mask: torch.Tensor  # bool [B, P]
    slot_mask: torch.Tensor  # bool [B, S], real slots
    observed: torch.Tensor  # bool [B, S]
    norm_lat: torch.Tensor  # float32 [B, S]
    norm_lng: torch.Tensor
    nbr_idx: torch.Tensor  # int64 [B, S, N]
    nbr_dist: torch.Tensor  # float32 [B, S, N]
    flow_fwd: torch.Tensor  # int64 [B, S]
    flow_bwd: torch.Tensor
    dt_fwd: torch.Tensor  # float32 [B, S]
    dt_bwd: torch.Tensor
    positions: torch.Tensor  # int64 [B, P + S], logical position of each row
    target_edge: torch.Tensor | None = None  # int64 [B, S]
    target_ratio: torch.Tensor | None = None  # float32 [B, S]

    @property
    def size(self) -> int:
        return self.prompt_ids.shape[0]


def collate(examples: list[SlotFeatures]) -> Batch:
    """Pad a list of featurized trajectories into one batch."""
    if not examples:
        raise ValueError("empty batch")
    b = len(examples)
    prompts = [ex.prompt_ids for ex in examples]
    p_max = max(len(p) for p in prompts)
    s_max = max(ex.slot_count for ex in examples)
    n_max = max(ex.nbr_idx.shape[1] for ex in examples)

    prompt_ids = np.zeros((b, p_max), dtype=np.int64)
    prompt_mask = np.zeros((b, p_max), dtype=bool)
    slot_mask = np.zeros((b, s_max), dtype=bool)
    observed = np.zeros((b, s_max), dtype=bool)
    norm_lat = np.zeros((b, s_max), dtype=np.float32)
    norm_lng = np.zeros((b, s_max), dtype=np.float32)
    nbr_idx = np.zeros((b, s_max, n_max), dtype=np.int64)
    nbr_dist = np.full((b, s_max, n_max), 1.0e9, dtype=np.float32)
    flow_fwd = np.zeros((b, s_max), dtype=np.int64)
    flow_bwd = np.zeros((b, s_max), dtype=np.int64)
    dt_fwd = np.zeros((b, s_max), dtype=np.float32)
    dt_bwd = np.zeros((b, s_max), dtype=np.float32)
    positions = np.zeros((b, p_max + s_max), dtype=np.int64)
    has_targets = all(ex.target_edge is not None for ex in examples)
    target_edge = np.zeros((b, s_max), dtype=np.int64) if has_targets else None
    target_ratio = np.zeros((b, s_max), dtype=np.float32) if has_targets else None

    for i, ex in enumerate(examples):
        p, s, n = len(prompts[i]), ex.slot_count, ex.nbr_idx.shape[1]
        prompt_ids[i, :p] = prompts[i]
        prompt_mask[i, :p] = True
        slot_mask[i, :s] = True
        observed[i, :s] = ex.observed
        norm_lat[i, :s] = ex.norm_lat
        norm_lng[i, :s] = ex.norm_lng
        nbr_idx[i, :s, :n] = ex.nbr_idx
        nbr_dist[i, :s, :n] = ex.nbr_dist
        flow_fwd[i, :s] = ex.flow_fwd
        flow_bwd[i, :s] = ex.flow_bwd
        dt_fwd[i, :s] = ex.dt_fwd
        dt_bwd[i, :s] = ex.dt_bwd
        positions[i, :p] = np.arange(p)
        positions[i, p_max : p_max + s] = p + np.arange(s)
        if has_targets:
            target_edge[i, :s] = ex.target_edge
            target_ratio[i, :s] = ex.target_ratio

    def t(x):
        return torch.from_numpy(x)

    return Batch(
        prompt_ids=t(prompt_ids),
        prompt_mask=t(prompt_mask),
        slot_mask=t(slot_mask),
        observed=t(observed),
        norm_lat=t(norm_lat),
        norm_lng=t(norm_lng),
        nbr_idx=t(nbr_idx),
        nbr_dist=t(nbr_dist),
        flow_fwd=t(flow_fwd),
        flow_bwd=t(flow_bwd),
        dt_fwd=t(dt_fwd),
        dt_bwd=t(dt_bwd),
        positions=t(positions),
        target_edge=t(target_edge) if has_targets else None,
        target_ratio=t(target_ratio) if has_targets else None,
    )


class TrajectoryRecoveryModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        n_edges: int,
        vocab_size: int,
        grid: GridMeta,
        flow_counts: np.ndarray,
    ) -> None:
        super().__init__()
        if flow_counts.shape != (grid.rows, grid.cols, grid.slices):
            raise ConfigError(
                f"flow grid shape {flow_counts.shape} does not match meta "
                f"({grid.rows}, {grid.cols}, {grid.slices})"
            )
        self.cfg = cfg
        self.grid = grid
        self.n_edges = n_edges
        self.prompt_emb = nn.Embedding(vocab_size, cfg.dim)
        self.flow_enc = FlowGridEncoder(cfg.dim)
        self.register_buffer("flow_counts", torch.from_numpy(flow_counts).to(torch.float32))
        self.slots = SlotEmbedder(n_edges, cfg.dim, cfg.kappa, cfg.phi_dist)
        self.transform = FeatureTransform(cfg.dim, cfg.ref_tokens, cfg.heads)
        self.encoder = AdaptedEncoder(cfg.transformer())
        self.heads = OutputHeads(cfg.dim, n_edges)

    def flow_field(self) -> torch.Tensor:
        """[rows * cols * slices, F] feature per grid cell."""
        field = self.flow_enc(self.flow_counts)
        return field.reshape(-1, self.cfg.dim)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (segment_logits [B, S, E], ratios [B, S])."""
        field = self.flow_field()
        flow_fwd = field[batch.flow_fwd]  # [B, S, F]
        flow_bwd = field[batch.flow_bwd]

        h_obs = self.slots.observed(batch.norm_lat, batch.norm_lng, batch.nbr_idx, batch.nbr_dist)
        h_mis = self.slots.missing(batch.dt_fwd, batch.dt_bwd, flow_fwd, flow_bwd)
        h = torch.where(batch.observed.unsqueeze(-1), h_obs, h_mis)
        h = self.transform(h, batch.slot_mask)  # [B, S, F]

        prompt = self.prompt_emb(batch.prompt_ids) * batch.prompt_mask.unsqueeze(-1)
        z = torch.cat([prompt, h * batch.slot_mask.unsqueeze(-1)], dim=1)  # [B, P+S, F]
        key_mask = torch.cat([batch.prompt_mask, batch.slot_mask], dim=1)
        pe = sinusoidal_pe(batch.positions, self.cfg.dim).to(z.dtype)
        z = z + pe * key_mask.unsqueeze(-1)

        z = self.encoder(z, key_mask)
        slot_rows = z[:, batch.prompt_ids.shape[1] :, :]  # prompt rows dropped
        return self.heads(slot_rows)


def trainable_parameter_groups(model: TrajectoryRecoveryModel) -> dict[str, list[nn.Parameter]]:
    """Trainable parameters by functional group; frozen base excluded."""
    groups: dict[str, list[nn.Parameter]] = {
        "adapter": model.encoder.adapter_parameters(),
        "prompt_embeddings": list(model.prompt_emb.parameters()),
        "flow_encoder": list(model.flow_enc.parameters()),
        "embedder": list(model.slots.parameters()) + list(model.transform.parameters()),
        "heads": list(model.heads.parameters()),
        # populated only when the base attention has been unfrozen explicitly
        "unfrozen_base": [p for _, p in model.encoder.base_parameters() if p.requires_grad],
    }
    return {name: [p for p in params if p.requires_grad] for name, params in groups.items()}


def all_trainable(model: TrajectoryRecoveryModel) -> list[nn.Parameter]:
    out: list[nn.Parameter] = []
    for params in trainable_parameter_groups(model).values():
        out.extend(params)
    return out
