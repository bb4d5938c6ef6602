import numpy as np
import pytest
import torch

from retraj.errors import ConfigError
from retraj.prompts import (
    FlowGridEncoder,
    GridMeta,
    PromptVocab,
    UNK_TOKEN,
    build_explicit_prompt,
    clock_words,
    compute_flow_grid,
    day_words,
    interval_words,
    number_words,
    tokenize,
)
from retraj.trajdata import Trajectory, TrajectoryRecord

T0 = 1_672_617_600  # 2023-01-02 00:00:00 UTC, a Monday


def make_traj(n, interval, t0=T0, lat_step=1e-4):
    times = t0 + np.arange(n, dtype=np.int64) * interval
    lats = 40.0 + lat_step * np.arange(n)
    lngs = np.full(n, -3.0)
    return Trajectory("p", lats, lngs, times, declared_interval=interval)


# -- number and time words ------------------------------------------------------


def test_number_words_small():
    assert number_words(0) == "zero"
    assert number_words(15) == "fifteen"
    assert number_words(19) == "nineteen"
    assert number_words(20) == "twenty"
    assert number_words(42) == "forty-two"
    assert number_words(90) == "ninety"


def test_number_words_large():
    assert number_words(100) == "one hundred"
    assert number_words(101) == "one hundred one"
    assert number_words(999) == "nine hundred ninety-nine"
    assert number_words(1000) == "one thousand"
    assert number_words(68_204) == "sixty-eight thousand two hundred four"


def test_number_words_range():
    with pytest.raises(ValueError):
        number_words(-1)
    with pytest.raises(ValueError):
        number_words(1_000_000)


def test_interval_words():
    assert interval_words(60) == "one minute"
    assert interval_words(240) == "four minutes"
    assert interval_words(15) == "fifteen seconds"
    assert interval_words(90) == "ninety seconds"
    with pytest.raises(ValueError):
        interval_words(0)


def test_clock_words():
    assert clock_words(T0) == "zero o'clock"
    assert clock_words(T0 + 8 * 3600) == "eight o'clock"
    assert clock_words(T0 + 8 * 3600 + 7 * 60) == "eight oh seven"
    assert clock_words(T0 + 8 * 3600 + 30 * 60) == "eight thirty"
    assert clock_words(T0 + 23 * 3600 + 59 * 60) == "twenty-three fifty-nine"


def test_day_words_utc():
    assert day_words(T0) == "Monday"
    assert day_words(T0 + 5 * 86400) == "Saturday"
    assert day_words(T0 - 1) == "Sunday"  # 23:59:59 the day before, in UTC


# -- prompt assembly --------------------------------------------------------------


def test_prompt_parts_render_exactly():
    traj = make_traj(9, 60)  # 8 minutes, starts Monday midnight
    p = build_explicit_prompt(traj, 60, 15)
    assert p.task_part == "Sparse trajectory recovery."
    assert p.target_part == (
        "Output the road segment and moving ratio for each point in the trajectory."
    )
    assert p.content_part == (
        "The sparse trajectory is sampled every one minute "
        "and aims to recover trajectory every fifteen seconds."
    )
    assert p.time_part == (
        "The trajectory started at zero o'clock on Monday "
        "and ended at zero oh eight on Monday."
    )
    assert p.movement_part.startswith("Total time cost: eight minutes zero seconds.")
    assert p.movement_part.endswith("kilometers.")
    assert len(p.parts) == 5
    assert p.text == " ".join(p.parts)


def test_prompt_zero_displacement_distance():
    traj = make_traj(5, 240, lat_step=0.0)
    p = build_explicit_prompt(traj, 240, 15)
    assert p.content_part.startswith("The sparse trajectory is sampled every four minutes")
    assert "0.00 kilometers" in p.movement_part


def test_prompt_sixty_minutes():
    traj = make_traj(61, 60)
    p = build_explicit_prompt(traj, 60, 15)
    assert "sixty minutes zero seconds" in p.movement_part


def test_prompt_afternoon_weekend():
    t0 = T0 + 5 * 86400 + 8 * 3600  # Saturday 08:00
    traj = make_traj(5, 120, t0=t0)
    p = build_explicit_prompt(traj, 120, 15)
    assert "started at eight o'clock on Saturday" in p.time_part


def test_prompt_rejects_mu_not_above_epsilon():
    with pytest.raises(ConfigError):
        build_explicit_prompt(make_traj(5, 15), 15, 15)


def test_prompt_distance_two_decimals():
    traj = make_traj(11, 60, lat_step=1e-3)  # ~111 m per step
    p = build_explicit_prompt(traj, 60, 15)
    dist_word = p.movement_part.split("distance: ")[1].split(" ")[0]
    assert len(dist_word.split(".")[1]) == 2


# -- tokenizer and vocabulary -------------------------------------------------------


def test_tokenize_splits_digits():
    assert tokenize("Total 1.25 km.") == ["total", "1", ".", "2", "5", "km", "."]


def test_tokenize_keeps_hyphens_and_apostrophes():
    assert tokenize("forty-two o'clock") == ["forty-two", "o'clock"]


def test_tokenize_punctuation():
    assert tokenize("cost: 3 minutes, done.") == [
        "cost", ":", "3", "minutes", ",", "done", "."
    ]


def test_vocab_unk_is_zero_and_sorted():
    v = PromptVocab(["b", "a", "b"])
    assert v.words == [UNK_TOKEN, "a", "b"]
    assert list(v.encode("a b zzz")) == [1, 2, 0]


def test_default_vocab_covers_all_prompts():
    v = PromptVocab.default()
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(3, 80))
        mu = int(rng.choice([60, 120, 240]))
        t0 = T0 + int(rng.integers(0, 7 * 86400))
        traj = make_traj(n, mu, t0=t0, lat_step=float(rng.uniform(0, 2e-3)))
        p = build_explicit_prompt(traj, mu, 15)
        for arr in v.encode_prompt(p):
            assert (arr > 0).all(), p.text  # nothing falls to [unk]


def test_default_vocab_deterministic():
    assert PromptVocab.default().words == PromptVocab.default().words


def test_encode_prompt_gives_five_blocks():
    v = PromptVocab.default()
    p = build_explicit_prompt(make_traj(9, 60), 60, 15)
    blocks = v.encode_prompt(p)
    assert len(blocks) == 5
    assert all(len(b) > 0 for b in blocks)


# -- flow grid -----------------------------------------------------------------------


def small_meta():
    return GridMeta(40.0, 40.01, -3.0, -2.99, rows=4, cols=4, slices=24)


def test_grid_meta_validation():
    with pytest.raises(ConfigError):
        GridMeta(40.0, 40.0, -3.0, -2.99, 4, 4, 24)
    with pytest.raises(ConfigError):
        GridMeta(40.0, 40.01, -3.0, -2.99, 0, 4, 24)


def test_single_fix_lands_in_expected_cell():
    meta = small_meta()
    t = T0 + 8 * 3600 + 30 * 60  # 08:30 -> slice 8 of 24
    times = np.array([t, t + 15], dtype=np.int64)
    traj = Trajectory(
        "f", np.array([40.00125, 40.00125]), np.array([-2.99875, -2.99875]), times
    )
    grid = compute_flow_grid([TrajectoryRecord(traj)], meta)
    assert grid.counts.sum() == 2.0
    assert grid.counts[0, 0, 8] == 2.0
    assert grid.n_clamped == 0


def test_same_cell_different_hours():
    meta = small_meta()
    times = np.array([T0 + 8 * 3600, T0 + 9 * 3600], dtype=np.int64)
    traj = Trajectory("f", np.full(2, 40.001), np.full(2, -2.999), times)
    grid = compute_flow_grid([TrajectoryRecord(traj)], meta)
    assert grid.counts[0, 0, 8] == 1.0
    assert grid.counts[0, 0, 9] == 1.0


def test_out_of_region_clamps_and_counts():
    meta = small_meta()
    times = np.array([T0, T0 + 15], dtype=np.int64)
    traj = Trajectory("f", np.array([39.0, 41.0]), np.array([-3.5, -2.5]), times)
    grid = compute_flow_grid([TrajectoryRecord(traj)], meta)
    assert grid.n_clamped == 2
    assert grid.counts[0, 0, 0] == 1.0  # clamped low
    assert grid.counts[3, 3, 0] == 1.0  # clamped high


def test_max_boundary_is_inside():
    meta = small_meta()
    i, j, clamped = meta.spatial_cell(meta.lat_max, meta.lng_max)
    assert (i, j, clamped) == (3, 3, False)


def test_time_cell_scales_with_slices():
    meta = GridMeta(40.0, 40.01, -3.0, -2.99, 4, 4, 12)
    assert meta.time_cell(T0) == 0
    assert meta.time_cell(T0 + 2 * 3600) == 1  # two hours per slice
    assert meta.time_cell(T0 + 23 * 3600) == 11


def test_flat_index_consistent():
    meta = small_meta()
    flat, _ = meta.flat_index(40.0072, -2.9931, T0 + 5 * 3600)
    i, j, _ = meta.spatial_cell(40.0072, -2.9931)
    assert flat == (i * meta.cols + j) * meta.slices + 5


# -- flow grid encoder -----------------------------------------------------------


def test_flow_encoder_shape():
    torch.manual_seed(0)
    enc = FlowGridEncoder(dim=6)
    counts = torch.rand(4, 5, 24)
    out = enc(counts)
    assert out.shape == (4, 5, 24, 6)


def test_flow_encoder_identity_kernel():
    # center-one spatial kernel and center-one temporal kernel, F=1:
    # the field must equal the raw counts
    enc = FlowGridEncoder(dim=1, activation=False, bias=False)
    with torch.no_grad():
        enc.spatial.weight.zero_()
        enc.spatial.weight[0, 0, 1, 1] = 1.0
        enc.temporal.weight.zero_()
        enc.temporal.weight[0, 0, 1] = 1.0
    counts = torch.rand(3, 4, 8)
    out = enc(counts)
    assert torch.allclose(out.squeeze(-1), counts, atol=1e-6)


def test_flow_encoder_linear_without_activation():
    torch.manual_seed(1)
    enc = FlowGridEncoder(dim=3, activation=False, bias=False)
    a = torch.rand(3, 3, 6)
    b = torch.rand(3, 3, 6)
    lhs = enc(2.0 * a + 3.0 * b)
    rhs = 2.0 * enc(a) + 3.0 * enc(b)
    assert torch.allclose(lhs, rhs, atol=1e-5)


def test_flow_encoder_bias_only_baseline():
    # zero weights: the output is a constant field determined by the biases
    torch.manual_seed(2)
    enc = FlowGridEncoder(dim=2, activation=False)
    with torch.no_grad():
        enc.spatial.weight.zero_()
        enc.temporal.weight.zero_()
    out = enc(torch.rand(2, 2, 4))
    flat = out.reshape(-1, 2)
    assert torch.allclose(flat, flat[0].expand_as(flat), atol=1e-6)
