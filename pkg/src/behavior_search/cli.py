"""Command-line pipeline: fetch, prepare, train, eval, diagnose.

Every failure exits non-zero with a single ``error[CODE]: message`` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
import time
import urllib.error
import urllib.request
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .corpus import CorpusError, ingest, kcore_filter, load_amazon, load_corpus, prepare_corpus, save_corpus
from .evaluation import build_cases, evaluate
from .graph import (build_graph, jumping_propagate, load_graph, save_graph, spectral_diagnostics,
                    verify_theorem1)
from .model import load_checkpoint, save_checkpoint
from .training import TrainingDivergence, rng_for, train

logger = logging.getLogger("behavior_search")

# published statistics of the benchmark subsets, for side-by-side comparison
REFERENCE_STATS = {
    "magazine": {"reviews": 4583, "user": 694, "query": 170, "product": 876, "seq": 2337, "edge": 3078},
    "software": {"reviews": 25086, "user": 3642, "query": 999, "product": 5875, "seq": 17814, "edge": 16391},
    "phones": {"reviews": 133792, "user": 17464, "query": 163, "product": 10278, "seq": 79224, "edge": 93174},
    "toys": {"reviews": 148756, "user": 16370, "query": 399, "product": 11875, "seq": 78616, "edge": 111578},
}


class CLIError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# commands


# 2018 release of the review corpus (5-core review files plus product metadata)
_AMAZON = "https://datarepo.eng.ucsd.edu/mcauley_group/data/amazon_v2"
DATASET_SOURCES = {
    "magazine": "Magazine_Subscriptions",
    "software": "Software",
    "phones": "Cell_Phones_and_Accessories",
    "toys": "Toys_and_Games",
}


def dataset_urls(name: str) -> list[str]:
    stem = DATASET_SOURCES[name.lower()]
    return [f"{_AMAZON}/categoryFilesSmall/{stem}_5.json.gz", f"{_AMAZON}/metaFiles2/meta_{stem}.json.gz"]


def fetch_one(url: str, out_dir: Path, name: str | None = None, sha256: str | None = None) -> Path:
    """Download ``url`` into ``out_dir`` unless a copy with a matching ``.sha256`` exists."""
    name = name or (url.rstrip("/").rsplit("/", 1)[-1] if url else "")
    if not name:
        raise CLIError("E_FETCH", "nothing to fetch: pass --url, --name or a known --dataset")
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / name
    sums = out_dir / f"{name}.sha256"
    if target.exists() and sums.exists():
        if sums.read_text().split()[0] == sha256_file(target):
            logger.info("cached %s matches recorded checksum", target)
            return target
        if not url:
            raise CLIError("E_CHECKSUM", f"{target} does not match {sums}; re-fetch with --url")
    if not url:
        raise CLIError("E_FETCH", f"no URL given and no cached copy at {target}; "
                                  "pass --url pointing at the review dump or place the file there")
    tmp = target.with_suffix(target.suffix + ".part")
    try:
        with urllib.request.urlopen(url, timeout=60) as resp, open(tmp, "wb") as fh:
            shutil.copyfileobj(resp, fh)
    except (urllib.error.URLError, OSError) as exc:
        tmp.unlink(missing_ok=True)
        raise CLIError("E_NETWORK", f"download failed for {url}: {exc}; download it by other means "
                                    f"into {out_dir} and rerun, or pass --url") from None
    digest = sha256_file(tmp)
    if sha256 and sha256 != digest:
        tmp.unlink()
        raise CLIError("E_CHECKSUM", f"checksum mismatch: expected {sha256}, got {digest}")
    tmp.replace(target)
    sums.write_text(f"{digest}  {name}\n")
    return target


def cmd_fetch(cfg, args) -> list[Path]:
    out_dir = Path(args.out)
    if cfg["url"] or args.name or cfg["dataset"].lower() not in DATASET_SOURCES:
        return [fetch_one(cfg["url"], out_dir, args.name or None, args.sha256)]
    return [fetch_one(url, out_dir) for url in dataset_urls(cfg["dataset"])]


def cmd_prepare(cfg, args) -> Path:
    if not cfg["input"]:
        raise CLIError("E_INPUT", "prepare needs --input")
    if cfg["input_format"] == "amazon":
        if not cfg["meta"]:
            raise CLIError("E_INPUT", "amazon input needs --meta")
        records = load_amazon(cfg["input"], cfg["meta"])
    else:
        records, _ = ingest(cfg["input"], cfg["input_format"], cfg["max_bad_lines"])
    if cfg["kcore"]:
        records = kcore_filter(records, cfg["kcore"])
    corpus = prepare_corpus(records, cfg["R"], cfg["min_count"])
    out = Path(args.out)
    save_corpus(corpus, out)
    graph = build_graph(corpus.split.train, corpus.n_products)
    save_graph(graph, out / "graph.tsv")
    stats = corpus.stats()
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    ref = REFERENCE_STATS.get(cfg["dataset"].lower())
    lines = [f"{'stat':<10}{'ours':>10}" + (f"{'published':>12}" if ref else "")]
    for key, value in stats.items():
        extra = f"{ref[key]:>12}" if ref and key in ref else ""
        lines.append(f"{key:<10}{value:>10}{extra}")
    (out / "stats.txt").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print("\n".join(lines))
    return out


def _load_prepared(path):
    try:
        corpus = load_corpus(path)
    except FileNotFoundError as exc:
        raise CLIError("E_CORPUS", f"no prepared corpus at {path}: {exc}") from None
    graph_file = Path(path) / "graph.tsv"
    graph = load_graph(graph_file) if graph_file.exists() else build_graph(corpus.split.train, corpus.n_products)
    return corpus, graph


def cmd_train(cfg, args) -> Path:
    corpus, graph = _load_prepared(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    stamp = cfgmod.model_keys(cfg)
    try:
        result = train(corpus, graph, cfgmod.train_config(cfg), log_path=out / "metrics.csv",
                       timing=not args.no_timing)
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "checkpoint", stamp)
        raise CLIError("E_DIVERGED", str(exc)) from None
    save_checkpoint(result.params, out / "checkpoint", stamp)
    return out / "checkpoint"


def cmd_eval(cfg, args) -> Path:
    corpus, graph = _load_prepared(args.corpus)
    try:
        params, manifest = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CLIError("E_CHECKPOINT", f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    if manifest["config_hash"] != cfgmod.model_hash(cfg) and not args.force:
        raise CLIError("E_FINGERPRINT", "checkpoint was trained under a different configuration "
                                        "(pass the same settings or --force)")
    cases = build_cases(corpus.split, seed=cfg["seed"], pool_size=cfg["pool_size"],
                        history_cap=cfg["history_cap"])
    enriched = jumping_propagate(graph, params.node_embeddings(), cfgmod.propagation(cfg)).matrix
    report = evaluate(params, enriched[:corpus.n_products], cases, corpus.queries, cfg["f_mode"],
                      fingerprint=manifest["config_hash"])
    out = Path(args.out)
    report.write(out)
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print(report.table(), end="")
    return out


def cmd_diagnose(cfg, args) -> Path:
    if args.corpus:
        corpus, graph = _load_prepared(args.corpus)
    else:
        corpus = None
        graph = _random_graph(cfg["seed"], args.random_products, args.random_sequences)
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
        H0 = params.node_embeddings().astype(np.float64)
        if H0.shape[0] != graph.n_nodes:
            raise CLIError("E_SHAPE", "checkpoint does not match the graph")
    else:
        H0 = rng_for(cfg["seed"], "diagnose").normal(size=(graph.n_nodes, cfg["d"]))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = sorted(set(cfg["diag_layers"]) - {0})
    rep = verify_theorem1(graph, H0, cfg["omega"], cfg["beta"], max(grid, default=1), layers=grid)
    with open(out / "diversity.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "omega", "beta", "omega_jump_diversity",
                                           "omega_plain_diversity"])
        w.writeheader()
        w.writerow({"layer": 0, "omega": cfg["omega"], "beta": cfg["beta"],
                    "omega_jump_diversity": rep.initial_diversity, "omega_plain_diversity": rep.initial_diversity})
        for row in rep.rows():
            w.writerow(row)
    summary = {"status": rep.status, "violations": rep.violations, "initial_diversity": rep.initial_diversity}
    try:
        spec = spectral_diagnostics(graph, cfg["omega"], cfg["beta"], H0, cap=cfg["spectral_cap"])
    except ValueError as exc:
        logger.warning("%s; spectral diagnostics skipped", exc)
        summary["spectral"] = str(exc)
    else:
        with open(out / "spectral.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "eigenvalue", "limit_coefficient"])
            for i, (lam, c) in enumerate(zip(spec.eigenvalues, spec.limit_coefficients)):
                w.writerow([i, f"{lam:.12g}", f"{c:.12g}"])
        summary["limit_diversity"] = spec.limit_diversity

    if args.sweep_train:
        if corpus is None:
            raise CLIError("E_INPUT", "--sweep-train needs --corpus")
        with open(out / "ndcg_vs_layers.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layers", "jump", "val_ndcg10", "test_ndcg10"])
            cases = build_cases(corpus.split, seed=cfg["seed"], pool_size=cfg["pool_size"],
                                history_cap=cfg["history_cap"])
            for L in sorted(set(cfg["diag_layers"])):
                sub = dict(cfg, layers=L)
                tc = cfgmod.train_config(sub)
                res = train(corpus, graph, tc, timing=False)
                enriched = jumping_propagate(graph, res.params.node_embeddings(), tc.propagation).matrix
                test = evaluate(res.params, enriched[:corpus.n_products], cases, corpus.queries, cfg["f_mode"])
                best = max(r["val_ndcg10"] for r in res.log)
                w.writerow([L, cfg["jump"], f"{best:.6f}", f"{test.metrics['NDCG@10']:.6f}"])

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    (out / "config.txt").write_text(cfgmod.dump(cfg))
    print(json.dumps(summary, default=float))
    return out


def _random_graph(seed, n_products, n_sequences, p=0.3):
    from .graph import BehaviorGraph

    rng = rng_for(seed, "random-graph")
    mask = rng.random((n_products, n_sequences)) < p
    ep, es = np.nonzero(mask)
    return BehaviorGraph(n_products, n_sequences, ep, es)


# ---------------------------------------------------------------------------
# argument handling


def _run_dir(cfg, command) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(cfg["out_dir"]) / f"{command}-{cfgmod.model_hash(cfg)}-{stamp}"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--run-dir", help="output directory (default: <out_dir>/<command>-<hash>-<time>)")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, (default, _) in cfgmod.SCHEMA.items():
        common.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            help=f"default: {default}")
    common.add_argument("--no-jump", dest="jump", action="store_const", const="false",
                        help="plain stacked convolution without jumping connections")

    parser = argparse.ArgumentParser(prog="behavior-search", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("fetch", parents=[common], help="download a raw review dump")
    p.add_argument("--name")
    p.add_argument("--sha256", help="expected checksum")
    sub.add_parser("prepare", parents=[common], help="build corpus files and the behavior graph")
    p = sub.add_parser("train", parents=[common], help="train a model on a prepared corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--no-timing", action="store_true", help="write 0 for wall_seconds (byte-stable logs)")
    p = sub.add_parser("eval", parents=[common], help="rank test cases and report metrics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--force", action="store_true")
    p = sub.add_parser("diagnose", parents=[common], help="over-smoothing and spectral diagnostics")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--random-products", type=int, default=30)
    p.add_argument("--random-sequences", type=int, default=40)
    p.add_argument("--sweep-train", action="store_true", help="also train per layer count and record NDCG@10")
    return parser


COMMANDS = {"fetch": cmd_fetch, "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        file_values = cfgmod.read_config_file(args.config) if args.config else {}
        flags = {k: getattr(args, k) for k in cfgmod.SCHEMA}
        cfg = cfgmod.resolve(file_values, flags=flags)
        args.out = args.run_dir or str(_run_dir(cfg, args.command))
        COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 2
    except cfgmod.ConfigError as exc:
        print(f"error[E_CONFIG]: {exc}", file=sys.stderr)
        return 2
    except CorpusError as exc:
        print(f"error[E_CORPUS]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error[E_RUNTIME]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
