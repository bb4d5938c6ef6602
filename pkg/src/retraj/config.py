"""Run configuration: flat ``section.key = value`` files plus overrides.

Precedence is command-line overrides, then the config file, then
defaults.  Unknown keys and malformed values fail loudly.  Every command
writes the fully resolved configuration next to its outputs so a run can
be reproduced from its artifacts alone.
"""

from __future__ import annotations

import os
from typing import Callable, Optional

from .errors import ConfigError
from .mapmatch import HmmParams
from .model import ModelConfig
from .prompts import GridMeta
from .synth import SynthConfig
from .training import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_intervals(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v.strip()) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"not a comma-separated integer list: {text!r}") from exc
    if not vals:
        raise ValueError("interval list is empty")
    return vals


def _parse_optional_float(text: str) -> Optional[float]:
    if text.strip().lower() in ("none", ""):
        return None
    return float(text)


# dotted key -> (caster, default)
_SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "seed": (int, 0),
    "model.dim": (int, 512),
    "model.layers": (int, 4),
    "model.heads": (int, 8),
    "model.ffn_dim": (int, 2048),
    "model.lora_rank": (int, 8),
    "model.ref_tokens": (int, 512),
    "geometry.kappa": (float, 15.0),
    "geometry.phi_dist": (float, 50.0),
    "geometry.epsilon": (int, 15),
    "geometry.coord_scale": (float, 10.0),
    "grid.rows": (int, 64),
    "grid.cols": (int, 64),
    "grid.slices": (int, 24),
    "training.lam": (float, 10.0),
    "training.lr": (float, 1e-4),
    "training.batch_size": (int, 64),
    "training.max_epochs": (int, 50),
    "training.patience": (int, 10),
    "training.optimizer": (str, "adam"),
    "training.finetune_lr": (_parse_optional_float, None),
    "training.intervals": (_parse_intervals, (60, 120, 240)),
    "match.sigma_z": (float, 4.07),
    "match.beta": (float, 20.0),
    "match.candidate_radius": (float, 50.0),
    "match.max_route_factor": (float, 4.0),
    "prepare.min_duration": (int, 300),
    "prepare.max_duration": (int, 3600),
    "synth.grid_nodes": (int, 10),
    "synth.cell_len_m": (float, 200.0),
    "synth.n_traj": (int, 20),
    "synth.noise_sigma_m": (float, 0.0),
    "synth.min_slots": (int, 24),
    "synth.max_slots": (int, 96),
    "synth.base_lat": (float, 40.0),
    "synth.base_lng": (float, -3.0),
    "synth.base_time": (int, 1_672_617_600),
}


class RunConfig:
    """Resolved flat configuration with typed accessors."""

    def __init__(self, values: dict[str, object]) -> None:
        self.values = values

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def resolve(
        cls, config_path: Optional[str] = None, overrides: Optional[list[str]] = None
    ) -> "RunConfig":
        values = {key: default for key, (_, default) in _SCHEMA.items()}
        if config_path is not None:
            if not os.path.exists(config_path):
                raise ConfigError(f"config file not found: {config_path}")
            with open(config_path) as fh:
                for line_no, raw in enumerate(fh, start=1):
                    line = raw.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{config_path}:{line_no}: expected key = value")
                    key, text = (part.strip() for part in line.split("=", 1))
                    values[key] = cls._cast(key, text, f"{config_path}:{line_no}")
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like key=value")
            key, text = (part.strip() for part in item.split("=", 1))
            values[key] = cls._cast(key, text, "override")
        return cls(values)

    @staticmethod
    def _cast(key: str, text: str, where: str):
        if key not in _SCHEMA:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        caster, _ = _SCHEMA[key]
        try:
            return caster(text)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc

    # -- typed views --------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            dim=v["model.dim"],
            layers=v["model.layers"],
            heads=v["model.heads"],
            ffn_dim=v["model.ffn_dim"],
            lora_rank=v["model.lora_rank"],
            ref_tokens=v["model.ref_tokens"],
            kappa=v["geometry.kappa"],
            phi_dist=v["geometry.phi_dist"],
            epsilon=v["geometry.epsilon"],
            coord_scale=v["geometry.coord_scale"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lam=v["training.lam"],
            lr=v["training.lr"],
            batch_size=v["training.batch_size"],
            max_epochs=v["training.max_epochs"],
            patience=v["training.patience"],
            seed=self.seed,
            optimizer=v["training.optimizer"],
            finetune_lr=v["training.finetune_lr"],
            intervals=tuple(v["training.intervals"]),
        )

    def hmm_params(self) -> HmmParams:
        v = self.values
        return HmmParams(
            sigma_z=v["match.sigma_z"],
            beta=v["match.beta"],
            candidate_radius=v["match.candidate_radius"],
            max_route_factor=v["match.max_route_factor"],
        )

    def synth_config(self) -> SynthConfig:
        v = self.values
        return SynthConfig(
            grid_nodes=v["synth.grid_nodes"],
            cell_len_m=v["synth.cell_len_m"],
            n_traj=v["synth.n_traj"],
            noise_sigma_m=v["synth.noise_sigma_m"],
            epsilon=v["geometry.epsilon"],
            seed=self.seed,
            base_lat=v["synth.base_lat"],
            base_lng=v["synth.base_lng"],
            min_slots=v["synth.min_slots"],
            max_slots=v["synth.max_slots"],
            base_time=v["synth.base_time"],
        )

    def grid_meta(self, bounds: tuple[float, float, float, float]) -> GridMeta:
        v = self.values
        lat_min, lat_max, lng_min, lng_max = bounds
        return GridMeta(
            lat_min=lat_min,
            lat_max=lat_max,
            lng_min=lng_min,
            lng_max=lng_max,
            rows=v["grid.rows"],
            cols=v["grid.cols"],
            slices=v["grid.slices"],
        )

    def echo(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(str(x) for x in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def write_echo(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.echo())
