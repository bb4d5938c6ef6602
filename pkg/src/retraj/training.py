"""Losses, dataset assembly, the training loop, and checkpointing.

Training minimizes mean segment cross-entropy plus ``lam`` times mean
ratio squared error, both over real slots only.  One model is trained
jointly on examples built at several sparse intervals; fine-tuning
reruns the same loop restricted to a single interval, starting from a
checkpoint.  The best-validation state (including the starting state)
is what gets persisted, so a fine-tune run can only keep or improve the
validation loss it started from.

Checkpoints are directories: a JSON config plus one compressed tensor
archive per parameter group, each hashed into a manifest.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .embedder import SlotFeaturizer, SlotFeatures
from .errors import ConfigError, DataError, IntegrityError, TrainingError
from .model import (
    Batch,
    ModelConfig,
    TrajectoryRecoveryModel,
    all_trainable,
    collate,
    trainable_parameter_groups,
)
from .prompts import GridMeta, PromptVocab, build_explicit_prompt
from .roadnet import RoadNetwork
from .trajdata import Trajectory, TrajectoryRecord, sparsify, unify_intervals

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 10.0  # ratio-loss weight
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"  # or "sgd" for plain gradient steps
    finetune_lr: Optional[float] = None
    intervals: tuple[int, ...] = (60, 120, 240)

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("invalid training hyperparameters")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.intervals:
            raise ConfigError("need at least one sparse interval")


# -- losses -------------------------------------------------------------------


def segment_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over real slots."""
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none"
    ).reshape(targets.shape)
    m = mask.to(ce.dtype)
    return (ce * m).sum() / m.sum()


def ratio_loss(pred: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over real slots."""
    m = mask.to(pred.dtype)
    return (((pred - targets) ** 2) * m).sum() / m.sum()


def total_loss(
    logits: torch.Tensor,
    ratios: torch.Tensor,
    batch: Batch,
    lam: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(total, segment part, ratio part)."""
    seg = segment_loss(logits, batch.target_edge, batch.slot_mask)
    rat = ratio_loss(ratios, batch.target_ratio, batch.slot_mask)
    return seg + lam * rat, seg, rat


# -- dataset assembly ---------------------------------------------------------


@dataclass
class TrainingExample:
    features: SlotFeatures
    interval: int  # the sparse interval this example was built at


def _matched_window(rec: TrajectoryRecord) -> Optional[Trajectory]:
    """Dense sub-trajectory covered by the matched truth, or None."""
    if rec.matched is None:
        return None
    t, m = rec.traj, rec.matched
    lo = int(np.searchsorted(t.times, m.times[0]))
    hi = lo + len(m)
    if hi > len(t) or not np.array_equal(t.times[lo:hi], m.times):
        raise IntegrityError(
            f"trajectory {t.traj_id}: matched timestamps do not align with fixes"
        )
    if hi - lo < 2:
        return None
    return Trajectory(t.traj_id, t.lats[lo:hi], t.lngs[lo:hi], t.times[lo:hi], t.declared_interval)


def build_examples(
    records: Sequence[TrajectoryRecord],
    intervals: Iterable[int],
    featurizer: SlotFeaturizer,
    vocab: PromptVocab,
    epsilon: int,
) -> tuple[list[TrainingExample], int]:
    """One example per (trajectory, interval); returns (examples, n_skipped).

    Trajectories shorter than an interval, or without matched truth, are
    skipped and counted.
    """
    interval_list = tuple(intervals)
    examples: list[TrainingExample] = []
    skipped = 0
    net = featurizer.net
    for rec in records:
        dense = _matched_window(rec)
        if dense is None:
            skipped += len(interval_list)
            continue
        for mu in interval_list:
            if dense.duration < mu:
                skipped += 1
                continue
            sparse = sparsify(dense, mu, epsilon)
            unified = unify_intervals(sparse, epsilon)
            prompt = build_explicit_prompt(sparse, mu, epsilon)
            feats = featurizer.featurize(unified, vocab.encode_prompt(prompt))
            m = rec.matched
            lo = int(np.searchsorted(m.times, unified.times[0]))
            sel = slice(lo, lo + unified.slot_count)
            if not np.array_equal(m.times[sel], unified.times):
                raise IntegrityError(
                    f"trajectory {rec.traj.traj_id}: slot grid does not match truth timestamps"
                )
            feats.target_edge = np.array(
                [net.edge_index(int(e)) for e in m.edge_ids[sel]], dtype=np.int64
            )
            feats.target_ratio = m.ratios[sel].astype(np.float32)
            examples.append(TrainingExample(feats, mu))
    return examples, skipped


def sparse_example(
    traj: Trajectory,
    featurizer: SlotFeaturizer,
    vocab: PromptVocab,
    epsilon: int,
    mu: Optional[int] = None,
) -> TrainingExample:
    """Featurize an already-sparse trajectory for recovery (no targets)."""
    interval = mu if mu is not None else traj.declared_interval
    if interval is None:
        diffs = np.diff(traj.times)
        interval = int(np.bincount(diffs.astype(np.int64)).argmax())
    unified = unify_intervals(traj, epsilon)
    prompt = build_explicit_prompt(traj, int(interval), epsilon)
    feats = featurizer.featurize(unified, vocab.encode_prompt(prompt))
    return TrainingExample(feats, int(interval))


# -- evaluation ---------------------------------------------------------------


def _batches(examples: Sequence[TrainingExample], size: int) -> Iterable[list[SlotFeatures]]:
    for i in range(0, len(examples), size):
        yield [ex.features for ex in examples[i : i + size]]


@torch.no_grad()
def evaluate(
    model: TrajectoryRecoveryModel,
    examples: Sequence[TrainingExample],
    lam: float,
    batch_size: int = 64,
) -> dict[str, float]:
    """Slot-weighted losses and quick accuracy measures.

    Results are independent of ``batch_size``: all sums are accumulated
    per slot before normalizing.
    """
    if not examples:
        raise ConfigError("cannot evaluate on an empty example set")
    model.eval()
    ce_sum = mse_sum = correct = abs_err = 0.0
    n_slots = 0
    for feats in _batches(examples, batch_size):
        batch = collate(feats)
        logits, ratios = model(batch)
        m = batch.slot_mask
        mf = m.to(logits.dtype)
        ce = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]),
            batch.target_edge.reshape(-1),
            reduction="none",
        ).reshape(batch.target_edge.shape)
        ce_sum += float((ce * mf).sum())
        mse_sum += float((((ratios - batch.target_ratio) ** 2) * mf).sum())
        abs_err += float(((ratios - batch.target_ratio).abs() * mf).sum())
        pred = logits.argmax(dim=-1)
        correct += float(((pred == batch.target_edge) & m).sum())
        n_slots += int(m.sum())
    model.train()
    seg = ce_sum / n_slots
    rat = mse_sum / n_slots
    return {
        "loss": seg + lam * rat,
        "segment_loss": seg,
        "ratio_loss": rat,
        "segment_acc": correct / n_slots,
        "ratio_mae": abs_err / n_slots,
        "n_slots": float(n_slots),
    }


# -- training loop ------------------------------------------------------------


@dataclass
class TrainResult:
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    history: list[dict] = field(default_factory=list)
    checkpoint_dir: Optional[str] = None


def _grad_report(model: TrajectoryRecoveryModel) -> str:
    lines = []
    for name, params in trainable_parameter_groups(model).items():
        if not params:
            continue
        pnorm = float(torch.sqrt(sum((p.detach() ** 2).sum() for p in params)))
        gs = [p.grad for p in params if p.grad is not None]
        gnorm = float(torch.sqrt(sum((g**2).sum() for g in gs))) if gs else float("nan")
        lines.append(f"{name}: |param|={pnorm:.3e} |grad|={gnorm:.3e}")
    return "; ".join(lines)


def make_optimizer(model: TrajectoryRecoveryModel, cfg: TrainConfig, lr: Optional[float] = None):
    params = all_trainable(model)
    rate = lr if lr is not None else cfg.lr
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=rate)
    return torch.optim.Adam(params, lr=rate)


def train(
    model: TrajectoryRecoveryModel,
    train_examples: Sequence[TrainingExample],
    val_examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    lr: Optional[float] = None,
    tag: str = "joint",
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Early-stopped training that keeps the best-validation state.

    The starting state is scored first and counts as the epoch-0
    candidate, so the persisted model is never worse on validation than
    the one passed in.
    """
    if not train_examples:
        raise ConfigError("no training examples")
    torch.set_num_threads(1)  # keeps reductions bit-reproducible
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg, lr)

    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w")

    def log_epoch(entry: dict) -> None:
        if log_fh is not None:
            log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log_fh.flush()

    val0 = evaluate(model, val_examples, cfg.lam, cfg.batch_size)
    best_val = val0["loss"]
    best_epoch = 0
    best_state = copy.deepcopy(model.state_dict())
    history = [{"epoch": 0, "train_loss": None, **{f"val_{k}": v for k, v in val0.items()}}]
    log_epoch(history[0])

    bad_epochs = 0
    epochs_run = 0
    order = np.arange(len(train_examples))
    for epoch in range(1, cfg.max_epochs + 1):
        rng.shuffle(order)
        ce_sum = mse_sum = 0.0
        n_slots = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = collate([train_examples[i].features for i in idx])
            logits, ratios = model(batch)
            loss, seg, rat = total_loss(logits, ratios, batch, cfg.lam)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"seg={seg.item():.4g} ratio={rat.item():.4g}; {_grad_report(model)}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            k = float(batch.slot_mask.sum())
            ce_sum += seg.item() * k
            mse_sum += rat.item() * k
            n_slots += int(k)

        train_loss = (ce_sum + cfg.lam * mse_sum) / n_slots
        val = evaluate(model, val_examples, cfg.lam, cfg.batch_size)
        entry = {"epoch": epoch, "train_loss": train_loss}
        entry.update({f"val_{k}": v for k, v in val.items()})
        history.append(entry)
        log_epoch(entry)
        epochs_run = epoch

        if val["loss"] < best_val:
            best_val = val["loss"]
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                logger.info("early stop at epoch %d (best %.6f @ %d)", epoch, best_val, best_epoch)
                break

    if log_fh is not None:
        log_fh.close()
    model.load_state_dict(best_state)

    result = TrainResult(best_val, best_epoch, epochs_run, history)
    if out_dir is not None:
        ckpt = os.path.join(out_dir, "checkpoint")
        meta = dict(extra_meta or {})
        meta.update(
            {
                "tag": tag,
                "best_val_loss": best_val,
                "best_epoch": best_epoch,
                "epochs_run": epochs_run,
                "train": {
                    "lam": cfg.lam,
                    "lr": lr if lr is not None else cfg.lr,
                    "batch_size": cfg.batch_size,
                    "max_epochs": cfg.max_epochs,
                    "patience": cfg.patience,
                    "seed": cfg.seed,
                    "optimizer": cfg.optimizer,
                    "intervals": list(cfg.intervals),
                },
            }
        )
        save_checkpoint(ckpt, model, meta)
        result.checkpoint_dir = ckpt
    return result


def finetune(
    model: TrajectoryRecoveryModel,
    examples: Sequence[TrainingExample],
    val_examples: Sequence[TrainingExample],
    mu: int,
    cfg: TrainConfig,
    out_dir: Optional[str] = None,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Continue training restricted to one sparse interval."""
    train_mu = [ex for ex in examples if ex.interval == mu]
    val_mu = [ex for ex in val_examples if ex.interval == mu]
    if not train_mu or not val_mu:
        raise ConfigError(f"no examples at interval {mu}s to fine-tune on")
    return train(
        model,
        train_mu,
        val_mu,
        cfg,
        out_dir=out_dir,
        lr=cfg.finetune_lr,
        tag=f"finetune-{mu}",
        extra_meta=extra_meta,
    )


# -- checkpoints --------------------------------------------------------------

_GROUP_OF_PREFIX = (
    ("prompt_emb.", "prompt_embeddings"),
    ("flow_enc.", "flow_encoder"),
    ("slots.", "embedder"),
    ("transform.", "embedder"),
    ("heads.", "heads"),
    ("flow_counts", "buffers"),
)


def _group_of(key: str) -> str:
    if key.startswith("encoder."):
        return "adapter" if ".delta_" in key else "base"
    for prefix, group in _GROUP_OF_PREFIX:
        if key.startswith(prefix):
            return group
    raise KeyError(f"state key {key} belongs to no checkpoint group")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(ckpt_dir: str, model: TrajectoryRecoveryModel, meta: dict) -> None:
    """Write config.json, per-group tensor archives, and a manifest."""
    groups_dir = os.path.join(ckpt_dir, "groups")
    os.makedirs(groups_dir, exist_ok=True)
    state = model.state_dict()
    by_group: dict[str, dict[str, np.ndarray]] = {}
    for key, tensor in state.items():
        by_group.setdefault(_group_of(key), {})[key] = tensor.detach().cpu().numpy()

    manifest: dict[str, dict] = {}
    for group, arrays in sorted(by_group.items()):
        path = os.path.join(groups_dir, f"{group}.npz")
        np.savez_compressed(path, **arrays)
        manifest[f"groups/{group}.npz"] = {
            "sha256": _sha256(path),
            "arrays": {k: list(v.shape) for k, v in sorted(arrays.items())},
        }

    config = dict(meta)
    config["model"] = model.cfg.to_dict()
    config["grid"] = model.grid.to_dict()
    config["n_edges"] = model.n_edges
    with open(os.path.join(ckpt_dir, "config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
    with open(os.path.join(ckpt_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str) -> tuple[TrajectoryRecoveryModel, dict]:
    """Rebuild the model from a checkpoint directory, verifying checksums."""
    config_path = os.path.join(ckpt_dir, "config.json")
    if not os.path.exists(config_path):
        raise DataError(f"checkpoint {ckpt_dir} is missing config.json; run training first")
    with open(config_path) as fh:
        meta = json.load(fh)
    with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
        manifest = json.load(fh)

    state: dict[str, torch.Tensor] = {}
    for rel, entry in manifest.items():
        path = os.path.join(ckpt_dir, rel)
        if not os.path.exists(path):
            raise IntegrityError(f"checkpoint {ckpt_dir}: missing archive {rel}")
        if _sha256(path) != entry["sha256"]:
            raise IntegrityError(f"checkpoint {ckpt_dir}: checksum mismatch for {rel}")
        with np.load(path) as arch:
            for key in arch.files:
                arr = arch[key]
                if list(arr.shape) != entry["arrays"].get(key, list(arr.shape)):
                    raise IntegrityError(f"checkpoint {ckpt_dir}: shape mismatch for {key}")
                state[key] = torch.from_numpy(arr)

    cfg = ModelConfig.from_dict(meta["model"])
    grid = GridMeta.from_dict(meta["grid"])
    counts = state["flow_counts"].numpy().astype(np.float64)
    vocab_size = state["prompt_emb.weight"].shape[0]
    model = TrajectoryRecoveryModel(cfg, int(meta["n_edges"]), vocab_size, grid, counts)
    model.load_state_dict(state, strict=True)
    return model, meta
