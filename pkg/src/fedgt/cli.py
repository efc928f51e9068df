"""Command-line entry point: ``fedgt {partition,preprocess,train,theory,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import graph as G
from .config import ConfigError, ExperimentConfig, config_from_dict, parse_config
from .preprocess import laplacian_pe, ppr_matrix, write_matrix
from .report import emit_report, read_history_csv, summary, write_json
from .runtime import train
from .theory import run_harness

logger = logging.getLogger("fedgt")


def load_dataset(cfg: ExperimentConfig):
    """Return ``(graph, regions_or_None)`` for the configured dataset."""
    spec = dict(cfg.dataset)
    kind = spec.pop("kind")
    if kind == "csv":
        return G.load_graph(spec["nodes"], spec["edges"], spec.get("num_classes")), None
    if kind == "sbm":
        spec.setdefault("blocks", [100, 100, 100, 100])
        spec.setdefault("p_in", 0.1)
        spec.setdefault("p_out", 0.005)
        return G.generate_sbm(seed=cfg.seed, **spec), None
    g, region, _ = G.generate_regime_sbm(seed=cfg.seed, **spec)
    return g, region


def build_subgraphs(cfg: ExperimentConfig, g: G.Graph, regions=None) -> list:
    if cfg.partition == "regions":
        return G.make_nonoverlapping(g, regions)
    if cfg.partition == "file":
        return G.make_nonoverlapping(g, G.load_partition(cfg.partition_file, g))
    if cfg.partition == "overlapping":
        return G.make_overlapping(g, cfg.num_clients // cfg.samples_per_part, cfg.samples_per_part,
                                  cfg.sample_frac, seed=cfg.seed)
    part = G.partition_louvain(g, cfg.num_clients, seed=cfg.seed)
    if part.round_robin:
        logger.warning("graph has no edges; clients were assigned round-robin")
    return G.make_nonoverlapping(g, part)


def _load(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig().validate()
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.clients is not None:
        overrides["num_clients"] = args.clients
    if args.dump_similarity:
        overrides["dump_similarity"] = True
    if overrides:
        cfg = config_from_dict({**cfg.to_dict(), **overrides})
    return cfg


def cmd_partition(cfg: ExperimentConfig) -> dict:
    g, regions = load_dataset(cfg)
    subs = build_subgraphs(cfg, g, regions)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = G.graph_stats(g, subs)
    write_json(stats, out / "stats.json")
    with (out / "partition.csv").open("w", encoding="utf-8") as fh:
        fh.write("id,client\n")
        for s in subs:
            for i in s.nodes.tolist():
                fh.write(f"{g.node_ids[i]},{s.client_id}\n")
    return stats


def cmd_preprocess(cfg: ExperimentConfig) -> dict:
    g, regions = load_dataset(cfg)
    subs = build_subgraphs(cfg, g, regions)
    out = Path(cfg.out_dir) / "cache"
    out.mkdir(parents=True, exist_ok=True)
    for s in subs:
        write_matrix(out / f"client{s.client_id:03d}_ppr.bin", ppr_matrix(s, cfg.nu).values)
        if cfg.pe_dim:
            write_matrix(out / f"client{s.client_id:03d}_pe.bin", laplacian_pe(s, cfg.pe_dim).vectors)
    return {"clients": len(subs), "cache_dir": str(out)}


def cmd_train(cfg: ExperimentConfig) -> dict:
    g, regions = load_dataset(cfg)
    subs = build_subgraphs(cfg, g, regions)
    stats = G.graph_stats(g, subs)
    history = train(cfg.run_config(), g, subs)
    out = Path(cfg.out_dir)
    emit_report(history, stats, out, cfg.dump_similarity)
    (out / "config.json").write_text(cfg.dumps(), encoding="utf-8")
    return summary(history, stats)


def cmd_theory(cfg: ExperimentConfig) -> dict:
    report = run_harness(seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "theory.json")
    return report


def cmd_report(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.out_dir)
    history = read_history_csv(out / "history.csv")
    previous = json.loads((out / "summary.json").read_text()) if (out / "summary.json").exists() else {}
    history.epsilon = previous.get("epsilon")
    report = summary(history, previous)
    write_json(report, out / "summary.json")
    return report


COMMANDS = {
    "partition": cmd_partition,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "theory": cmd_theory,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="overrides seed")
        p.add_argument("--clients", type=int, help="overrides num_clients")
        p.add_argument("--dump-similarity", action="store_true", help="write per-round S/alpha CSVs")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        result = COMMANDS[args.command](cfg)
    except (ConfigError, G.GraphFormatError, G.ReferentialError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, sort_keys=True, default=_json_default))
    return 0


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


if __name__ == "__main__":
    sys.exit(main())
