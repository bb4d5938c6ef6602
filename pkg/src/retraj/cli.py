"""Command-line pipeline.

    synth     -> network CSVs + dense trajectories with ground truth
    prepare   -> filtered train/val/test splits
    match     -> map-matched trajectories
    sparsify  -> downsampled trajectories at one interval
    flowgrid  -> regional flow histogram
    train     -> joint-interval model checkpoint
    finetune  -> single-interval checkpoint from an existing one
    recover   -> dense (segment, ratio) sequences from sparse input
    eval      -> quality report against ground truth

Exit codes: 0 on success, 2 for configuration problems, 3 for missing or
inconsistent data.  Every command writes the resolved configuration next
to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .embedder import SlotFeaturizer
from .errors import ConfigError, DataError
from .mapmatch import map_match
from .metrics import evaluate_recovery
from .model import TrajectoryRecoveryModel, collate
from .encoder import predict_slots
from .prompts import GridMeta, PromptVocab, compute_flow_grid
from .roadnet import RoadNetwork, load_road_network
from .synth import generate_network, generate_trajectories, write_network_csv
from .trajdata import (
    MapMatchedTrajectory,
    TrajectoryRecord,
    filter_trajectories,
    read_trajectories,
    sparsify,
    split_by_id,
    write_trajectories,
)
from .training import (
    build_examples,
    evaluate,
    finetune,
    load_checkpoint,
    sparse_example,
    train,
)

logger = logging.getLogger(__name__)


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing input {path}; {hint}")
    return path


def _load_network(network_dir: str, cell_size_m: float = 50.0) -> RoadNetwork:
    nodes = _require(
        os.path.join(network_dir, "nodes.csv"), "generate one with `retraj synth`"
    )
    edges = _require(
        os.path.join(network_dir, "edges.csv"), "generate one with `retraj synth`"
    )
    return load_road_network(nodes, edges, cell_size_m=cell_size_m)


def _echo_beside(cfg: RunConfig, out_path: str) -> None:
    if os.path.isdir(out_path):
        cfg.write_echo(os.path.join(out_path, "config_echo.txt"))
    else:
        cfg.write_echo(out_path + ".config.txt")


# -- commands -----------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    scfg = cfg.synth_config()
    net = generate_network(scfg)
    records = generate_trajectories(net, scfg)
    write_network_csv(
        net, os.path.join(args.out, "nodes.csv"), os.path.join(args.out, "edges.csv")
    )
    n = write_trajectories(os.path.join(args.out, "trajectories.jsonl"), records)
    _echo_beside(cfg, args.out)
    logger.info("wrote %d-node network and %d trajectories to %s", len(net.nodes), n, args.out)
    return 0


def cmd_prepare(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    net = _load_network(args.network)
    records = read_trajectories(_require(args.traj, "run `retraj synth` or `retraj match` first"))
    pad = cfg["match.candidate_radius"] / 1000.0  # degrees are overkill; pad generously
    lat_min, lat_max, lng_min, lng_max = net.bounds
    bounds = (lat_min - pad, lat_max + pad, lng_min - pad, lng_max + pad)
    kept, dropped = filter_trajectories(
        records,
        min_duration=cfg["prepare.min_duration"],
        max_duration=cfg["prepare.max_duration"],
        bounds=bounds,
    )
    train_set, val_set, test_set = split_by_id(kept)
    for name, chunk in (("train", train_set), ("val", val_set), ("test", test_set)):
        write_trajectories(os.path.join(args.out, f"{name}.jsonl"), chunk)
    _echo_beside(cfg, args.out)
    logger.info(
        "kept %d trajectories (%d dropped): %d train / %d val / %d test",
        len(kept),
        dropped,
        len(train_set),
        len(val_set),
        len(test_set),
    )
    return 0


def cmd_match(args, cfg: RunConfig) -> int:
    net = _load_network(args.network, cell_size_m=cfg["match.candidate_radius"])
    params = cfg.hmm_params()
    records = read_trajectories(_require(args.traj, "produce trajectories first"))
    out_records = []
    for rec in records:
        matched = map_match(net, rec.traj, params)
        out_records.append(TrajectoryRecord(rec.traj, matched))
    write_trajectories(args.out, out_records)
    _echo_beside(cfg, args.out)
    logger.info("matched %d trajectories into %s", len(out_records), args.out)
    return 0


def cmd_sparsify(args, cfg: RunConfig) -> int:
    records = read_trajectories(_require(args.traj, "produce dense trajectories first"))
    eps = cfg["geometry.epsilon"]
    out_records = []
    for rec in records:
        sparse = sparsify(rec.traj, args.mu, eps)
        out_records.append(TrajectoryRecord(sparse, None))
    write_trajectories(args.out, out_records)
    _echo_beside(cfg, args.out)
    logger.info("sparsified %d trajectories at %ds into %s", len(out_records), args.mu, args.out)
    return 0


def cmd_flowgrid(args, cfg: RunConfig) -> int:
    net = _load_network(args.network)
    records = read_trajectories(
        _require(args.traj, "pass the training split from `retraj prepare`")
    )
    meta = cfg.grid_meta(net.bounds)
    grid = compute_flow_grid(records, meta)
    npy_path = args.out + ".npy"
    np.save(npy_path, grid.counts)
    digest = hashlib.sha256(open(npy_path, "rb").read()).hexdigest()
    sidecar = {
        "meta": meta.to_dict(),
        "sha256": digest,
        "n_clamped": grid.n_clamped,
        "n_trajectories": len(records),
    }
    with open(args.out + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    _echo_beside(cfg, args.out)
    logger.info(
        "flow grid %dx%dx%d with %.0f fixes (%d clamped) -> %s",
        meta.rows,
        meta.cols,
        meta.slices,
        float(grid.counts.sum()),
        grid.n_clamped,
        npy_path,
    )
    return 0


def _load_flowgrid(prefix: str) -> tuple[np.ndarray, GridMeta]:
    npy_path = _require(prefix + ".npy", "run `retraj flowgrid` first")
    sidecar_path = _require(prefix + ".json", "run `retraj flowgrid` first")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    blob = open(npy_path, "rb").read()
    if hashlib.sha256(blob).hexdigest() != sidecar["sha256"]:
        raise DataError(f"flow grid {npy_path} does not match its recorded checksum")
    counts = np.load(npy_path)
    return counts, GridMeta.from_dict(sidecar["meta"])


def _build_model_inputs(args, cfg: RunConfig):
    net = _load_network(args.network)
    counts, grid = _load_flowgrid(args.flowgrid)
    vocab = PromptVocab.default()
    mcfg = cfg.model_config()
    featurizer = SlotFeaturizer(
        net, grid, mcfg.kappa, mcfg.phi_dist, mcfg.epsilon, mcfg.coord_scale
    )
    return net, counts, grid, vocab, mcfg, featurizer


def cmd_train(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    net, counts, grid, vocab, mcfg, featurizer = _build_model_inputs(args, cfg)
    tcfg = cfg.train_config()
    train_records = read_trajectories(_require(args.train, "run `retraj prepare` first"))
    val_records = read_trajectories(_require(args.val, "run `retraj prepare` first"))
    train_ex, skipped_t = build_examples(
        train_records, tcfg.intervals, featurizer, vocab, mcfg.epsilon
    )
    val_ex, skipped_v = build_examples(
        val_records, tcfg.intervals, featurizer, vocab, mcfg.epsilon
    )
    if skipped_t or skipped_v:
        logger.info("skipped %d train and %d val pairs", skipped_t, skipped_v)

    torch.manual_seed(cfg.seed)
    model = TrajectoryRecoveryModel(mcfg, net.n_edges, len(vocab), grid, counts)
    extra = {"vocab": vocab.words, "coord_bounds": list(featurizer.coord_bounds)}
    result = train(model, train_ex, val_ex, tcfg, out_dir=args.out, extra_meta=extra)
    _echo_beside(cfg, args.out)
    logger.info(
        "trained %d epochs; best val loss %.6f at epoch %d; checkpoint %s",
        result.epochs_run,
        result.best_val_loss,
        result.best_epoch,
        result.checkpoint_dir,
    )
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    model, meta = load_checkpoint(_require(args.checkpoint, "run `retraj train` first"))
    net = _load_network(args.network)
    if net.n_edges != model.n_edges:
        raise DataError(
            f"network has {net.n_edges} segments but checkpoint expects {model.n_edges}"
        )
    vocab = PromptVocab(meta["vocab"])
    mcfg = model.cfg
    featurizer = SlotFeaturizer(
        net,
        model.grid,
        mcfg.kappa,
        mcfg.phi_dist,
        mcfg.epsilon,
        mcfg.coord_scale,
        coord_bounds=tuple(meta["coord_bounds"]),
    )
    tcfg = cfg.train_config()
    train_records = read_trajectories(_require(args.train, "run `retraj prepare` first"))
    val_records = read_trajectories(_require(args.val, "run `retraj prepare` first"))
    train_ex, _ = build_examples(train_records, [args.mu], featurizer, vocab, mcfg.epsilon)
    val_ex, _ = build_examples(val_records, [args.mu], featurizer, vocab, mcfg.epsilon)
    extra = {"vocab": vocab.words, "coord_bounds": list(featurizer.coord_bounds)}
    result = finetune(model, train_ex, val_ex, args.mu, tcfg, out_dir=args.out, extra_meta=extra)
    _echo_beside(cfg, args.out)
    logger.info(
        "fine-tuned at %ds; best val loss %.6f at epoch %d; checkpoint %s",
        args.mu,
        result.best_val_loss,
        result.best_epoch,
        result.checkpoint_dir,
    )
    return 0


def cmd_recover(args, cfg: RunConfig) -> int:
    model, meta = load_checkpoint(_require(args.checkpoint, "run `retraj train` first"))
    net = _load_network(args.network)
    if net.n_edges != model.n_edges:
        raise DataError(
            f"network has {net.n_edges} segments but checkpoint expects {model.n_edges}"
        )
    vocab = PromptVocab(meta["vocab"])
    mcfg = model.cfg
    featurizer = SlotFeaturizer(
        net,
        model.grid,
        mcfg.kappa,
        mcfg.phi_dist,
        mcfg.epsilon,
        mcfg.coord_scale,
        coord_bounds=tuple(meta["coord_bounds"]),
    )
    records = read_trajectories(_require(args.traj, "run `retraj sparsify` first"))
    model.eval()
    out_records = []
    batch_size = cfg["training.batch_size"]
    examples = [
        sparse_example(rec.traj, featurizer, vocab, mcfg.epsilon, args.mu) for rec in records
    ]
    with torch.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = collate([ex.features for ex in chunk])
            logits, ratios = model(batch)
            picks = predict_slots(logits, ratios, batch.slot_mask)
            for rec, ex, slot_picks in zip(records[start : start + batch_size], chunk, picks):
                edge_ids = np.array(
                    [net.edge_id_at(idx) for idx, _ in slot_picks], dtype=np.int64
                )
                out_ratios = np.array([r for _, r in slot_picks], dtype=np.float64)
                matched = MapMatchedTrajectory(
                    rec.traj.traj_id,
                    edge_ids,
                    out_ratios,
                    ex.features.times,
                    mcfg.epsilon,
                )
                out_records.append(TrajectoryRecord(rec.traj, matched))
    write_trajectories(args.out, out_records)
    _echo_beside(cfg, args.out)
    logger.info("recovered %d trajectories into %s", len(out_records), args.out)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    os.makedirs(args.out, exist_ok=True)
    net = _load_network(args.network)
    truth_records = read_trajectories(_require(args.truth, "need ground-truth trajectories"))
    pred_records = read_trajectories(_require(args.pred, "run `retraj recover` first"))
    truth_by_id = {r.traj.traj_id: r for r in truth_records}
    pairs = []
    for rec in pred_records:
        if rec.matched is None:
            raise DataError(f"prediction {rec.traj.traj_id} has no matched sequence")
        truth = truth_by_id.get(rec.traj.traj_id)
        if truth is None or truth.matched is None:
            raise DataError(f"no ground truth for trajectory {rec.traj.traj_id}")
        t, p = truth.matched, rec.matched
        lo = int(np.searchsorted(t.times, p.times[0]))
        sel = slice(lo, lo + len(p))
        aligned = MapMatchedTrajectory(
            t.traj_id, t.edge_ids[sel], t.ratios[sel], t.times[sel], t.interval
        )
        pairs.append((aligned, p))
    report = evaluate_recovery(net, pairs)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    _echo_beside(cfg, args.out)
    print(report.to_table())
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retraj", description="sparse-to-dense trajectory recovery pipeline"
    )
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config value (repeatable)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic grid network and drives")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter and split trajectories")
    p.add_argument("--network", required=True, help="directory with nodes.csv and edges.csv")
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("match", help="map-match trajectories onto the network")
    p.add_argument("--network", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("sparsify", help="downsample dense trajectories")
    p.add_argument("--traj", required=True)
    p.add_argument("--mu", required=True, type=int, help="sparse interval in seconds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("flowgrid", help="build the regional flow histogram")
    p.add_argument("--network", required=True)
    p.add_argument("--traj", required=True, help="training split")
    p.add_argument("--out", required=True, help="output prefix (.npy/.json added)")
    p.set_defaults(func=cmd_flowgrid)

    p = sub.add_parser("train", help="train the recovery model jointly over intervals")
    p.add_argument("--network", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--flowgrid", required=True, help="prefix from `retraj flowgrid`")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint at one interval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--mu", required=True, type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("recover", help="recover dense positions from sparse input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--traj", required=True, help="sparse trajectories")
    p.add_argument("--mu", type=int, default=None, help="override the declared interval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("eval", help="score recovered trajectories against truth")
    p.add_argument("--network", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.resolve(args.config, args.overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
