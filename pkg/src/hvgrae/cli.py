"""Command-line surface: synth, train, inject, detect, eval, export-latents, experiment."""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import os
import re
import sys
from dataclasses import replace

import numpy as np
import torch

from . import bench
from .config import ConfigError, load_run_config, load_synth_spec
from .detection import Thresholds, detect, score_snapshot, score_stream
from .graph import IngestionError, load_dataset, save_dataset, split_train_test
from .model import SnapshotTensors, commit_state, load_checkpoint, save_checkpoint
from .training import NumericalError, train, training_scores

__all__ = ["main", "EXIT_OK", "EXIT_VALIDATION", "EXIT_NUMERICAL", "read_labels", "write_labels"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

logger = logging.getLogger("hvgrae")

_LABEL_RE = re.compile(r"^labels_(\d+)\.csv$")


def write_labels(labeled, out_dir: str) -> None:
    for ls in labeled:
        with open(os.path.join(out_dir, f"labels_{ls.snapshot.t}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "label"])
            for (i, j), lab in sorted(ls.labels.items()):
                writer.writerow([i, j, lab])


def read_labels(label_dir: str) -> dict[int, dict[tuple[int, int], int]]:
    out = {}
    for path in sorted(glob.glob(os.path.join(label_dir, "labels_*.csv"))):
        m = _LABEL_RE.match(os.path.basename(path))
        if not m:
            continue
        labels = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["i", "j", "label"]:
                raise IngestionError(f"{path}:1: expected header i,j,label")
            for lineno, row in enumerate(reader, 2):
                try:
                    i, j, lab = (int(v) for v in row)
                except ValueError:
                    raise IngestionError(f"{path}:{lineno}: expected three integers, got {row!r}") from None
                if lab not in (0, 1):
                    raise IngestionError(f"{path}:{lineno}: label must be 0 or 1")
                labels[(i, j)] = lab
        out[int(m.group(1))] = labels
    if not out:
        raise IngestionError(f"{label_dir}: no labels_<t>.csv files")
    return out


def _parse_targets(text: str, n_snapshots: int) -> list[int]:
    """'LAST:K' or a comma list of 1-based positions -> 0-based positions."""
    if text.upper().startswith("LAST:"):
        k = int(text.split(":", 1)[1])
        if not 1 <= k <= n_snapshots:
            raise ValueError(f"LAST:{k} needs 1 <= K <= {n_snapshots}")
        return list(range(n_snapshots - k, n_snapshots))
    positions = [int(p) - 1 for p in text.split(",") if p.strip()]
    if not positions:
        raise ValueError(f"empty snapshot selection {text!r}")
    return positions


# -- commands --------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec) if args.spec else bench.SynthSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    net = bench.generate_synthetic(spec)
    save_dataset(net, args.out)
    np.savetxt(os.path.join(args.out, "communities.csv"), net.meta["communities"], fmt="%d", delimiter=",")
    logger.info("wrote %d snapshots of %d nodes to %s", len(net), net.node_count, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
        cfg.model = replace(cfg.model, seed=args.seed)
    net = load_dataset(args.data)
    test_len = cfg.train.test_len if args.test_len is None else args.test_len
    train_net, _ = split_train_test(net, test_len, cfg.train.train_edge_ratio, cfg.train.seed)
    model, log = train(cfg.model, cfg.train, train_net)
    edge_scores, node_scores = training_scores(model, train_net, seed=cfg.train.seed)
    thresholds = Thresholds.fit(edge_scores, node_scores, cfg.evt.risk_q, cfg.evt.initial_quantile)
    save_checkpoint(args.out, model, thresholds.to_dict(),
                    extra={"train_config": vars(cfg.train), "train_snapshots": len(train_net)})
    log.to_csv(args.log or args.out + ".log.csv")
    logger.info("final elbo %.4f, alpha_A %.4f", log.rows[-1]["elbo"], thresholds.alpha_A)
    return EXIT_OK


def cmd_inject(args) -> int:
    net = load_dataset(args.data)
    targets = _parse_targets(args.snapshots, len(net))
    labeled = bench.inject_anomalies(net, bench.InjectionSpec(args.ratio, args.seed, targets))
    save_dataset(bench.injected_network(net, labeled), args.out)
    write_labels(labeled, args.out)
    logger.info("injected %d edges into %d snapshots", sum(len(ls.injected) for ls in labeled), len(labeled))
    return EXIT_OK


def _load_model(path: str):
    model, payload = load_checkpoint(path)
    raw = payload.get("thresholds")
    thresholds = Thresholds.from_dict(raw) if raw else None
    return model, thresholds, payload


def cmd_detect(args) -> int:
    model, thresholds, payload = _load_model(args.ckpt)
    if thresholds is None:
        raise ValueError(f"{args.ckpt}: checkpoint carries no thresholds")
    net = load_dataset(args.data)
    _check_compatible(model, net)
    state = model.initial_state(net.node_count, args.samples or model.config.mc_score)
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else payload["seed"])
    with open(args.report, "w") as fh:
        for snap in net:
            report, state = score_snapshot(model, state, snap, gen)
            fh.write(detect(report, thresholds).to_json() + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, payload = _load_model(args.ckpt)
    net = load_dataset(args.data)
    _check_compatible(model, net)
    labels = read_labels(args.labels)
    reports, _ = score_stream(model, net, n_samples=args.samples, seed=args.seed if args.seed is not None else payload["seed"])
    labeled = []
    for snap in net:
        if snap.t in labels:
            missing = {tuple(e) for e in snap.edges(net.directed).tolist()} - set(labels[snap.t])
            if missing:
                raise IngestionError(f"labels for t={snap.t} do not cover edge {sorted(missing)[0]}")
            labeled.append(bench.LabeledSnapshot(snap, labels[snap.t]))
    if not labeled:
        raise ValueError("no labeled snapshot matches the data")
    rows = []
    all_pairs = []
    for ls in labeled:
        pairs = bench.evaluate_reports(reports, [ls])
        all_pairs.extend(pairs)
        n_pos = sum(lab for _, lab in pairs)
        value = bench.auc(pairs) if 0 < n_pos < len(pairs) else float("nan")
        rows.append({"t": ls.snapshot.t, "n_edges": len(pairs), "n_injected": n_pos, "auc": value})
    rows.append({"t": "all", "n_edges": len(all_pairs), "n_injected": sum(lab for _, lab in all_pairs),
                 "auc": bench.auc(all_pairs)})
    bench.write_results(rows, csv_path=args.out)
    logger.info("overall auc %.4f", rows[-1]["auc"])
    return EXIT_OK


def cmd_export_latents(args) -> int:
    model, _, payload = _load_model(args.ckpt)
    net = load_dataset(args.data)
    _check_compatible(model, net)
    cfg = model.config
    d = cfg.latent_dim
    state = model.initial_state(net.node_count, args.samples or cfg.mc_score)
    gen = torch.Generator().manual_seed(args.seed if args.seed is not None else payload["seed"])
    header = ["t", "node", "scale"] + [f"mu_{k}" for k in range(d)] + [f"var_{k}" for k in range(d)] + [
        f"z_{k}" for k in range(d)]
    with open(args.out, "w", newline="") as fh, torch.no_grad():
        writer = csv.writer(fh)
        writer.writerow(header)
        for snap in net:
            res = model.forward_step(state, SnapshotTensors.from_snapshot(snap), generator=gen)
            for i in range(cfg.scales):
                mu = res.merged[i].mu.mean(0).numpy()
                var = res.merged[i].sigma_sq.mean(0).numpy()
                z = res.samples[i].z[0].numpy()
                for node in range(net.node_count):
                    writer.writerow([snap.t, node, i + 1, *mu[node], *var[node], *z[node]])
            state = commit_state(state, res)
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = load_run_config(args.config)
    if args.data:
        net = load_dataset(args.data)
    else:
        net = bench.generate_synthetic(load_synth_spec(args.synth) if args.synth else bench.SynthSpec())
    ratios = [float(r) for r in args.ratios.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = bench.run_experiment(net, cfg.model, cfg.train, ratios, seeds)
    bench.write_results(rows, csv_path=args.out, json_path=args.json)
    for row in rows:
        if row["seed"] == "mean":
            print(f"ratio {row['ratio']:.2f}  mean auc {row['auc']:.4f}")
    return EXIT_OK


def _check_compatible(model, net) -> None:
    cfg = model.config
    if net.attr_dim != cfg.attr_dim or net.directed != cfg.directed or net.attributed != cfg.attributed:
        raise ValueError(
            f"dataset (D={net.attr_dim}, directed={net.directed}, attributed={net.attributed}) does not match "
            f"checkpoint (D={cfg.attr_dim}, directed={cfg.directed}, attributed={cfg.attributed})"
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvgrae", description="Hierarchical variational graph recurrent autoencoder")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dynamic SBM dataset")
    p.add_argument("--spec", help="flat key=value file with SynthSpec fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on the head of a dataset and fit thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-len", type=int, help="snapshots held out at the end (default: config test_len)")
    p.add_argument("--log", help="TrainLog CSV path (default: OUT.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inject", help="inject labeled anomalous edges")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--snapshots", required=True, help="LAST:K or comma list of 1-based positions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("detect", help="stream snapshots and write one verdict JSON per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="AUC of edge scores against injection labels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latents", help="per t, node and scale: mean, variance and a sampled z")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("experiment", help="train/inject/score protocol over ratios and seeds")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--synth", help="SynthSpec file (default: built-in synthetic benchmark)")
    p.add_argument("--config")
    p.add_argument("--ratios", default="0.01,0.05,0.10")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out", required=True)
    p.add_argument("--json")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, IngestionError, bench.CapacityError, ValueError, IndexError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
