"""Losses, dataset assembly, the training loop, and checkpoints."""

import json
import math

import numpy as np
import pytest
import torch

from retraj.embedder import SlotFeaturizer
from retraj.errors import ConfigError, DataError, IntegrityError, TrainingError
from retraj.model import ModelConfig, TrajectoryRecoveryModel, collate
from retraj.prompts import PromptVocab, compute_flow_grid
from retraj.trajdata import Trajectory, TrajectoryRecord
from retraj.training import (
    TrainConfig,
    build_examples,
    evaluate,
    finetune,
    load_checkpoint,
    make_optimizer,
    ratio_loss,
    save_checkpoint,
    segment_loss,
    sparse_example,
    total_loss,
    train,
)

T0 = 1_672_617_600


def tiny_model_cfg():
    return ModelConfig(
        dim=16, layers=1, heads=2, ffn_dim=32, lora_rank=2, ref_tokens=4,
        kappa=15.0, phi_dist=50.0, epsilon=15, coord_scale=10.0,
    )


@pytest.fixture(scope="module")
def setup(grid4, records4, meta4):
    torch.manual_seed(0)
    vocab = PromptVocab.default()
    grid = compute_flow_grid(records4, meta4)
    fz = SlotFeaturizer(grid4, meta4, 15.0, 50.0, 15)

    def fresh_model():
        torch.manual_seed(0)
        return TrajectoryRecoveryModel(
            tiny_model_cfg(), grid4.n_edges, len(vocab), meta4, grid.counts
        )

    examples, skipped = build_examples(records4, (60, 120), fz, vocab, 15)
    assert skipped == 0
    return fresh_model, fz, vocab, examples


class FakeBatch:
    def __init__(self, target_edge, target_ratio, slot_mask):
        self.target_edge = target_edge
        self.target_ratio = target_ratio
        self.slot_mask = slot_mask


# -- losses -------------------------------------------------------------------


def test_uniform_logits_give_log_n():
    n_classes = 48
    logits = torch.zeros((3, 5, n_classes), dtype=torch.float64)
    targets = torch.randint(0, n_classes, (3, 5))
    mask = torch.ones((3, 5), dtype=torch.bool)
    got = segment_loss(logits, targets, mask)
    assert abs(got.item() - math.log(n_classes)) < 1e-12


def test_confident_correct_logits_give_zero():
    targets = torch.tensor([[2, 0, 1]])
    logits = torch.full((1, 3, 4), -1e4, dtype=torch.float64)
    for j, t in enumerate(targets[0]):
        logits[0, j, t] = 1e4
    mask = torch.ones((1, 3), dtype=torch.bool)
    assert segment_loss(logits, targets, mask).item() < 1e-9


def test_mse_constant_offset():
    targets = torch.rand((4, 7), dtype=torch.float64)
    pred = targets + 0.1
    mask = torch.ones((4, 7), dtype=torch.bool)
    got = ratio_loss(pred, targets, mask)
    assert abs(got.item() - 0.01) < 1e-12


def test_total_is_weighted_sum():
    torch.manual_seed(1)
    logits = torch.randn((2, 6, 10), dtype=torch.float64)
    ratios = torch.rand((2, 6), dtype=torch.float64)
    batch = FakeBatch(
        torch.randint(0, 10, (2, 6)),
        torch.rand((2, 6), dtype=torch.float64),
        torch.ones((2, 6), dtype=torch.bool),
    )
    for lam in (0.0, 1.0, 10.0):
        tot, seg, rat = total_loss(logits, ratios, batch, lam)
        assert abs(tot.item() - (seg.item() + lam * rat.item())) < 1e-9
    tot0, seg0, _ = total_loss(logits, ratios, batch, 0.0)
    assert tot0.item() == pytest.approx(seg0.item(), abs=1e-12)


def test_losses_ignore_masked_slots():
    logits = torch.zeros((1, 4, 5), dtype=torch.float64)
    targets = torch.tensor([[1, 2, 0, 0]])
    ratios = torch.tensor([[0.5, 0.5, 0.0, 0.0]], dtype=torch.float64)
    truth = torch.tensor([[0.5, 0.5, 0.9, 0.9]], dtype=torch.float64)
    mask = torch.tensor([[True, True, False, False]])
    # garbage in the masked tail must not leak into either loss
    poisoned = logits.clone()
    poisoned[0, 2:] = 1e6
    assert segment_loss(logits, targets, mask).item() == pytest.approx(
        segment_loss(poisoned, targets, mask).item(), abs=1e-12
    )
    assert ratio_loss(ratios, truth, mask).item() == 0.0


# -- dataset assembly ----------------------------------------------------------


def test_build_examples_one_per_pair(setup, records4):
    _, _, _, examples = setup
    assert len(examples) == len(records4) * 2
    by_mu = {}
    for ex in examples:
        by_mu.setdefault(ex.interval, 0)
        by_mu[ex.interval] += 1
    assert by_mu == {60: len(records4), 120: len(records4)}
    for ex in examples:
        f = ex.features
        assert f.target_edge is not None and f.target_ratio is not None
        assert len(f.target_edge) == f.slot_count
        assert len(f.target_ratio) == f.slot_count
        assert f.target_edge.min() >= 0
        assert np.all(f.target_ratio >= 0.0) and np.all(f.target_ratio <= 1.0)


def test_build_examples_skips_unmatched(setup, records4):
    _, fz, vocab, _ = setup
    bare = [TrajectoryRecord(records4[0].traj, None)]
    examples, skipped = build_examples(bare, (60, 120), fz, vocab, 15)
    assert examples == [] and skipped == 2


def test_build_examples_skips_short_spans(setup, records4):
    _, fz, vocab, _ = setup
    rec = records4[0]
    stub = Trajectory(
        "stub", rec.traj.lats[:5], rec.traj.lngs[:5], rec.traj.times[:5], 15
    )
    m = rec.matched
    stub_matched = type(m)("stub", m.edge_ids[:5], m.ratios[:5], m.times[:5], 15)
    examples, skipped = build_examples(
        [TrajectoryRecord(stub, stub_matched)], (60, 120), fz, vocab, 15
    )
    # 5 fixes span 60 s: enough for mu=60, too short for mu=120
    assert len(examples) == 1 and examples[0].interval == 60
    assert skipped == 1


def test_sparse_example_interval_inference(setup, records4):
    _, fz, vocab, _ = setup
    t = records4[0].traj
    sparse_times = t.times[::4][:4]  # every 60 s
    sparse = Trajectory("s", t.lats[::4][:4], t.lngs[::4][:4], sparse_times, 60)
    assert sparse_example(sparse, fz, vocab, 15).interval == 60
    assert sparse_example(sparse, fz, vocab, 15, mu=120).interval == 120
    undeclared = Trajectory("s", t.lats[::4][:4], t.lngs[::4][:4], sparse_times, None)
    assert sparse_example(undeclared, fz, vocab, 15).interval == 60


def test_evaluate_batch_size_independent(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    results = [evaluate(model, examples, 10.0, batch_size=b) for b in (1, 3, 64)]
    for key in results[0]:
        vals = [r[key] for r in results]
        assert vals[0] == pytest.approx(vals[1], rel=1e-3, abs=1e-4), key
        assert vals[0] == pytest.approx(vals[2], rel=1e-3, abs=1e-4), key
    assert results[0]["n_slots"] == sum(ex.features.slot_count for ex in examples)


def test_evaluate_rejects_empty(setup):
    fresh_model, _, _, _ = setup
    with pytest.raises(ConfigError):
        evaluate(fresh_model(), [], 10.0)


# -- training loop --------------------------------------------------------------


def test_train_zero_epochs_keeps_start_state(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(batch_size=4, max_epochs=0, patience=2, seed=0)
    result = train(model, examples, examples, cfg)
    assert result.epochs_run == 0 and result.best_epoch == 0
    assert len(result.history) == 1
    assert math.isfinite(result.best_val_loss)
    after = model.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_train_never_worse_than_start(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    start_val = evaluate(model, examples, 10.0)["loss"]
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=3, patience=10, seed=0)
    result = train(model, examples, examples, cfg)
    assert result.best_val_loss <= start_val + 1e-9
    assert result.history[0]["val_loss"] == pytest.approx(start_val, rel=1e-6)


def test_train_writes_metrics_and_checkpoint(setup, tmp_path):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, patience=10, seed=0)
    result = train(
        model, examples, examples, cfg,
        out_dir=str(tmp_path), extra_meta={"note": "hello"},
    )
    lines = (tmp_path / "metrics.jsonl").read_text().strip().splitlines()
    assert len(lines) == result.epochs_run + 1
    entries = [json.loads(line) for line in lines]
    assert entries[0]["epoch"] == 0 and entries[0]["train_loss"] is None
    assert all("val_loss" in e for e in entries)
    assert result.checkpoint_dir == str(tmp_path / "checkpoint")
    with open(tmp_path / "checkpoint" / "config.json") as fh:
        meta = json.load(fh)
    assert meta["tag"] == "joint"
    assert meta["note"] == "hello"
    assert meta["train"]["lr"] == pytest.approx(1e-3)
    assert meta["best_val_loss"] == pytest.approx(result.best_val_loss)


def test_train_early_stops_on_flat_validation(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    # lr below float32 resolution: parameters never move, val never improves
    cfg = TrainConfig(
        lr=1e-30, batch_size=4, max_epochs=50, patience=3, seed=0, optimizer="sgd"
    )
    result = train(model, examples, examples, cfg)
    assert result.epochs_run == 3
    assert result.best_epoch == 0


def test_train_raises_on_non_finite_loss(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    with torch.no_grad():
        model.heads.segment.weight[0, 0] = float("nan")
    cfg = TrainConfig(batch_size=4, max_epochs=2, patience=2, seed=0)
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(model, examples, examples, cfg)


def test_train_rejects_empty(setup):
    fresh_model, _, _, examples = setup
    with pytest.raises(ConfigError):
        train(fresh_model(), [], examples, TrainConfig())


def test_optimizer_selection(setup):
    fresh_model, _, _, _ = setup
    model = fresh_model()
    assert isinstance(make_optimizer(model, TrainConfig(optimizer="sgd")), torch.optim.SGD)
    assert isinstance(make_optimizer(model, TrainConfig(optimizer="adam")), torch.optim.Adam)
    opt = make_optimizer(model, TrainConfig(lr=1.0), lr=0.25)
    assert opt.param_groups[0]["lr"] == 0.25


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adagrad")
    with pytest.raises(ConfigError):
        TrainConfig(intervals=())


def test_finetune_requires_examples_at_interval(setup):
    fresh_model, _, _, examples = setup
    with pytest.raises(ConfigError, match="240"):
        finetune(fresh_model(), examples, examples, 240, TrainConfig(max_epochs=1))


def test_finetune_never_worse_at_its_interval(setup):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    at_60 = [ex for ex in examples if ex.interval == 60]
    start = evaluate(model, at_60, 10.0)["loss"]
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=2, patience=5, seed=0)
    result = finetune(model, examples, examples, 60, cfg)
    assert result.best_val_loss <= start + 1e-9


# -- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip(setup, tmp_path):
    fresh_model, _, _, examples = setup
    model = fresh_model()
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=1, patience=5, seed=0)
    train(model, examples, examples, cfg, out_dir=str(tmp_path), extra_meta={"k": 1})

    loaded, meta = load_checkpoint(str(tmp_path / "checkpoint"))
    assert meta["k"] == 1 and meta["tag"] == "joint"
    assert loaded.n_edges == model.n_edges
    assert loaded.cfg == model.cfg

    batch = collate([ex.features for ex in examples[:3]])
    with torch.no_grad():
        a_logits, a_ratios = model(batch)
        b_logits, b_ratios = loaded(batch)
    assert torch.equal(a_logits, b_logits)
    assert torch.equal(a_ratios, b_ratios)


def test_checkpoint_group_layout(setup, tmp_path):
    fresh_model, _, _, _ = setup
    save_checkpoint(str(tmp_path), fresh_model(), {"tag": "t"})
    groups = sorted(p.name for p in (tmp_path / "groups").iterdir())
    assert groups == [
        "adapter.npz", "base.npz", "buffers.npz", "embedder.npz",
        "flow_encoder.npz", "heads.npz", "prompt_embeddings.npz",
    ]
    with open(tmp_path / "manifest.json") as fh:
        manifest = json.load(fh)
    assert set(manifest) == {f"groups/{g}" for g in groups}
    for entry in manifest.values():
        assert "sha256" in entry and entry["arrays"]


def test_checkpoint_tamper_detected(setup, tmp_path):
    fresh_model, _, _, _ = setup
    save_checkpoint(str(tmp_path), fresh_model(), {"tag": "t"})
    victim = tmp_path / "groups" / "heads.npz"
    blob = bytearray(victim.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    victim.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError, match="checksum mismatch"):
        load_checkpoint(str(tmp_path))


def test_checkpoint_missing_archive(setup, tmp_path):
    fresh_model, _, _, _ = setup
    save_checkpoint(str(tmp_path), fresh_model(), {"tag": "t"})
    (tmp_path / "groups" / "adapter.npz").unlink()
    with pytest.raises(IntegrityError, match="missing archive"):
        load_checkpoint(str(tmp_path))


def test_missing_checkpoint_hint(tmp_path):
    with pytest.raises(DataError, match="run training first"):
        load_checkpoint(str(tmp_path))
