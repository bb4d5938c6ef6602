"""Per-slot trajectory embedding.

Observed slots combine a learnable Fourier encoding of their coordinates
with a distance-weighted mixture of nearby segment embeddings.  Missing
slots combine a shared placeholder vector, an encoding of the time gaps
to their observed neighbors, and a recency-weighted blend of the flow
field at those neighbors' grid cells.  A local convolution plus
attention over a bank of reference tokens then smooths the sequence
before it meets the transformer.

The geometry-dependent parts (neighbor lookups, grid cells, time gaps)
are precomputed once per trajectory by ``SlotFeaturizer``; the modules
here consume plain tensors so training stays on the hot path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .prompts import GridMeta
from .roadnet import RoadNetwork
from .trajdata import UnifiedTrajectory

logger = logging.getLogger(__name__)

# padding value for neighbor distances; far beyond any cutoff
_PAD_DIST = 1.0e9


def road_weight(dist: float, kappa: float, phi_dist: float) -> float:
    """Gaussian proximity weight with a hard cutoff.

    exp(-(d / kappa)^2) for d strictly below phi_dist, exactly 0 at and
    beyond it.
    """
    if dist >= phi_dist:
        return 0.0
    return math.exp(-((dist / kappa) ** 2))


def blend_weights(dt_forward: torch.Tensor, dt_backward: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Recency weights for the two observed neighbors of a missing slot.

    Softmax over the negated gaps; the forward weight reduces to
    sigmoid(dt_backward - dt_forward).
    """
    w_fwd = torch.sigmoid(dt_backward - dt_forward)
    return w_fwd, 1.0 - w_fwd


class LearnableFourierFeatures(nn.Module):
    """Scalar coordinate -> dim-dimensional feature.

    phi(x) = W_out [cos(x w) || sin(x w)] with a learnable frequency
    vector w of size dim/2.  With W_out = I the inner product
    phi(x)' phi(y) is sum_i cos((x - y) w_i), so nearby coordinates get
    similar encodings regardless of their absolute position.
    """

    def __init__(self, dim: int) -> None:
        super().__init__()
        if dim % 2 != 0:
            raise ValueError(f"feature dim must be even, got {dim}")
        self.dim = dim
        self.freqs = nn.Parameter(torch.randn(dim // 2))
        self.out = nn.Parameter(torch.eye(dim) + 0.02 * torch.randn(dim, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """[...] -> [..., dim]"""
        ang = x.unsqueeze(-1) * self.freqs  # [..., dim/2]
        feats = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
        return feats @ self.out.t()


class SlotEmbedder(nn.Module):
    """Observed- and missing-slot encoders sharing one feature width."""

    def __init__(self, n_edges: int, dim: int, kappa: float, phi_dist: float) -> None:
        super().__init__()
        self.dim = dim
        self.kappa = kappa
        self.phi_dist = phi_dist
        self.coord_enc = LearnableFourierFeatures(dim)  # shared by lat and lng
        self.segment_emb = nn.Embedding(n_edges, dim)
        self.observed_proj = nn.Linear(2 * dim, dim)
        self.missing_token = nn.Parameter(0.02 * torch.randn(dim))
        self.gap_enc = nn.Linear(2, dim)
        self.missing_proj = nn.Linear(3 * dim, dim)

    def road_mix(self, nbr_idx: torch.Tensor, nbr_dist: torch.Tensor) -> torch.Tensor:
        """Weighted mean of nearby segment embeddings.

        nbr_idx: [..., N] edge indices, nbr_dist: [..., N] meters (pads
        use a huge distance).  Slots with no in-range neighbor embed to
        the zero vector.
        """
        w = torch.exp(-((nbr_dist / self.kappa) ** 2))
        w = torch.where(nbr_dist < self.phi_dist, w, torch.zeros_like(w))
        emb = self.segment_emb(nbr_idx)  # [..., N, F]
        total = w.sum(dim=-1, keepdim=True)  # [..., 1]
        mixed = (w.unsqueeze(-1) * emb).sum(dim=-2) / total.clamp(min=1e-12)
        return torch.where(total > 0, mixed, torch.zeros_like(mixed))

    def observed(
        self,
        norm_lat: torch.Tensor,
        norm_lng: torch.Tensor,
        nbr_idx: torch.Tensor,
        nbr_dist: torch.Tensor,
    ) -> torch.Tensor:
        """[B, S] coords (+ [B, S, N] neighbors) -> [B, S, F]"""
        coord = self.coord_enc(norm_lat) + self.coord_enc(norm_lng)
        road = self.road_mix(nbr_idx, nbr_dist)
        return self.observed_proj(torch.cat([coord, road], dim=-1))

    def missing(
        self,
        dt_fwd: torch.Tensor,
        dt_bwd: torch.Tensor,
        flow_fwd: torch.Tensor,
        flow_bwd: torch.Tensor,
    ) -> torch.Tensor:
        """Gaps [B, S] (grid units) + flow features [B, S, F] -> [B, S, F]"""
        w_fwd, w_bwd = blend_weights(dt_fwd, dt_bwd)
        flow = w_fwd.unsqueeze(-1) * flow_fwd + w_bwd.unsqueeze(-1) * flow_bwd
        gaps = self.gap_enc(torch.stack([dt_fwd, dt_bwd], dim=-1))
        token = self.missing_token.expand(flow.shape)
        return self.missing_proj(torch.cat([token, gaps, flow], dim=-1))


class FeatureTransform(nn.Module):
    """Local smoothing then attention over reference tokens.

    The convolution mixes each slot with its immediate neighbors; the
    attention rewrites every slot as a convex combination (per head) of
    a learnable token bank, which ties rare slots to patterns shared
    across the dataset.
    """

    def __init__(self, dim: int, n_ref: int, heads: int) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.local = nn.Conv1d(dim, dim, kernel_size=3, padding=1)
        self.ref_tokens = nn.Parameter(0.02 * torch.randn(n_ref, dim))

    def forward(self, h: torch.Tensor, slot_mask: torch.Tensor) -> torch.Tensor:
        """[B, S, F] -> [B, S, F]; padded slots are zeroed first."""
        h = h * slot_mask.unsqueeze(-1)
        h = self.local(h.transpose(1, 2)).transpose(1, 2)  # [B, S, F]

        b, s, _ = h.shape
        k, heads = self.ref_tokens.shape[0], self.heads
        dh = self.dim // heads
        q = h.view(b, s, heads, dh)
        kv = self.ref_tokens.view(k, heads, dh)
        scores = torch.einsum("bshd,khd->bshk", q, kv) / math.sqrt(dh)
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("bshk,khd->bshd", attn, kv)
        return out.reshape(b, s, self.dim)


def sinusoidal_pe(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic transformer positional encoding for integer positions.

    positions: [...] int64 -> [..., dim] float32.
    """
    if dim % 2 != 0:
        raise ValueError(f"feature dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / half)
    )
    ang = positions.to(torch.float64).unsqueeze(-1) * freqs
    pe = torch.empty(*positions.shape, dim, dtype=torch.float64)
    pe[..., 0::2] = torch.sin(ang)
    pe[..., 1::2] = torch.cos(ang)
    return pe


# -- per-trajectory feature extraction ---------------------------------------


@dataclass
class SlotFeatures:
    """Arrays feeding one trajectory through the model."""

    traj_id: str
    times: np.ndarray  # int64 [S]
    observed: np.ndarray  # bool [S]
    norm_lat: np.ndarray  # float32 [S], 0 where missing
    norm_lng: np.ndarray
    nbr_idx: np.ndarray  # int64 [S, N], segment indices, 0-padded
    nbr_dist: np.ndarray  # float32 [S, N], meters, _PAD_DIST-padded
    flow_fwd: np.ndarray  # int64 [S], flat grid cell of previous observed fix
    flow_bwd: np.ndarray  # int64 [S], flat grid cell of next observed fix
    dt_fwd: np.ndarray  # float32 [S], gap to previous observed fix, grid units
    dt_bwd: np.ndarray
    prompt_parts: list[np.ndarray]  # token ids per prompt part
    target_edge: Optional[np.ndarray] = None  # int64 [S], segment indices
    target_ratio: Optional[np.ndarray] = None  # float32 [S]

    @property
    def slot_count(self) -> int:
        return len(self.times)

    @property
    def prompt_ids(self) -> np.ndarray:
        return np.concatenate(self.prompt_parts)


class SlotFeaturizer:
    """Precomputes everything the embedder needs about each slot."""

    def __init__(
        self,
        net: RoadNetwork,
        grid: GridMeta,
        kappa: float,
        phi_dist: float,
        epsilon: int,
        coord_scale: float = 10.0,
        coord_bounds: Optional[tuple[float, float, float, float]] = None,
    ) -> None:
        self.net = net
        self.grid = grid
        self.kappa = kappa
        self.phi_dist = phi_dist
        self.epsilon = epsilon
        self.coord_scale = coord_scale
        # normalization frame; a checkpoint pins the frame it was trained with
        bounds = coord_bounds if coord_bounds is not None else net.bounds
        self.lat_min, self.lat_max, self.lng_min, self.lng_max = bounds
        self.n_empty_neighborhoods = 0
        self.n_clamped_cells = 0

    @property
    def coord_bounds(self) -> tuple[float, float, float, float]:
        return self.lat_min, self.lat_max, self.lng_min, self.lng_max

    def _norm(self, lat: float, lng: float) -> tuple[float, float]:
        u = (lat - self.lat_min) / (self.lat_max - self.lat_min) * self.coord_scale
        v = (lng - self.lng_min) / (self.lng_max - self.lng_min) * self.coord_scale
        return u, v

    def featurize(
        self, unified: UnifiedTrajectory, prompt_parts: list[np.ndarray]
    ) -> SlotFeatures:
        s = unified.slot_count
        obs_idx = unified.observed_indices
        norm_lat = np.zeros(s, dtype=np.float32)
        norm_lng = np.zeros(s, dtype=np.float32)

        neighbors: list[list[tuple[int, float]]] = [[] for _ in range(s)]
        max_n = 1
        for i in obs_idx:
            lat, lng = float(unified.lats[i]), float(unified.lngs[i])
            norm_lat[i], norm_lng[i] = self._norm(lat, lng)
            found = self.net.nearby_segments(lat, lng, self.phi_dist)
            if not found:
                self.n_empty_neighborhoods += 1
                logger.warning(
                    "trajectory %s: slot %d has no segment within %.0f m",
                    unified.traj_id,
                    int(i),
                    self.phi_dist,
                )
            neighbors[i] = [(self.net.edge_index(eid), d) for eid, d in found]
            max_n = max(max_n, len(found))

        nbr_idx = np.zeros((s, max_n), dtype=np.int64)
        nbr_dist = np.full((s, max_n), _PAD_DIST, dtype=np.float32)
        for i, found in enumerate(neighbors):
            for n, (ei, d) in enumerate(found):
                nbr_idx[i, n] = ei
                nbr_dist[i, n] = d

        # observed anchor on each side of every slot (first/last are observed)
        prev_obs = np.maximum.accumulate(np.where(unified.observed, np.arange(s), -1))
        next_rev = np.maximum.accumulate(
            np.where(unified.observed[::-1], np.arange(s), -1)
        )
        next_obs = (s - 1) - next_rev[::-1]

        flow_fwd = np.zeros(s, dtype=np.int64)
        flow_bwd = np.zeros(s, dtype=np.int64)
        dt_fwd = np.zeros(s, dtype=np.float32)
        dt_bwd = np.zeros(s, dtype=np.float32)
        for i in range(s):
            if unified.observed[i]:
                continue
            p, q = int(prev_obs[i]), int(next_obs[i])
            for anchor, store in ((p, flow_fwd), (q, flow_bwd)):
                cell, clamped = self.grid.flat_index(
                    float(unified.lats[anchor]),
                    float(unified.lngs[anchor]),
                    int(unified.times[anchor]),
                )
                store[i] = cell
                self.n_clamped_cells += int(clamped)
            dt_fwd[i] = (unified.times[i] - unified.times[p]) / self.epsilon
            dt_bwd[i] = (unified.times[q] - unified.times[i]) / self.epsilon

        return SlotFeatures(
            traj_id=unified.traj_id,
            times=unified.times.copy(),
            observed=unified.observed.copy(),
            norm_lat=norm_lat,
            norm_lng=norm_lng,
            nbr_idx=nbr_idx,
            nbr_dist=nbr_dist,
            flow_fwd=flow_fwd,
            flow_bwd=flow_bwd,
            dt_fwd=dt_fwd,
            dt_bwd=dt_bwd,
            prompt_parts=prompt_parts,
        )
