"""Command line: synth, build-graph, partition, train, infer, evaluate, compare, cv-report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import NumericalError, load_checkpoint, save_checkpoint
from .config import RunConfig, leaf_keys
from .evaluation import (HistoricalAverage, NodeMetricTable, bin_mae_by_cv, coefficient_of_variation, compare,
                         fmt, node_metrics, persistence_forecast, target_timestamps, write_cv_report)
from .graph import (GraphError, KernelConfig, build_adjacency, export_graph, import_graph, read_distances,
                    sigma_from_distances, write_distances)
from .partition import (PartitionError, edge_cut, extract_subgraph, kway_partition, read_assignment,
                        write_assignment)
from .seq2seq import ModelParameters
from .synth import inject_missing, make_corpus
from .timeseries import (ConfigError, FrameFormatError, SpeedScaler, impute_missing, load_frame, make_windows,
                         save_frame, split_by_time)
from .trainer import TrainConfig, fit_ss, fit_tl, forecast_next, infer_unseen, partition_datasets

logger = logging.getLogger("tldcrnn")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_DATA = 4
EXIT_DIVERGED = 5


class MissingInput(FileNotFoundError):
    pass


# -- run directories ----------------------------------------------------------


def file_digest(path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        if path.is_dir():
            h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class RunDir:
    """``<root>/<timestamp>-<hash>/`` holding one command's outputs and its manifest."""

    def __init__(self, command: str, cfg: RunConfig, inputs: dict[str, str], root=None, path=None):
        self.inputs = {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items())}
        ident = json.dumps({"command": command, "config": cfg.to_dict(),
                            "inputs": {k: v["sha256"] for k, v in self.inputs.items()}}, sort_keys=True)
        self.manifest_id = hashlib.sha256(ident.encode()).hexdigest()[:16]
        if path is None:
            root = Path(root or os.environ.get("TLDCRNN_RUNS_DIR", "runs"))
            stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
            path = root / f"{stamp}-{self.manifest_id[:8]}"
            suffix = 1
            while path.exists():
                path = root / f"{stamp}-{self.manifest_id[:8]}-{suffix}"
                suffix += 1
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.cfg = cfg
        self.outputs: list[str] = []
        self.extra: dict = {}
        self.started = time.time()

    def out(self, name: str) -> Path:
        self.outputs.append(name)
        return self.path / name

    def write_manifest(self, status: str = "ok") -> Path:
        doc = {
            "manifest_id": self.manifest_id,
            "command": self.command,
            "status": status,
            "version": __version__,
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "elapsed_s": round(time.time() - self.started, 3),
            "config": self.cfg.to_dict(),
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
            **self.extra,
        }
        p = self.path / "manifest.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def manifest_id_near(path) -> str | None:
    m = Path(path).parent / "manifest.json"
    if m.exists():
        return json.loads(m.read_text()).get("manifest_id")
    return None


def _need(value, what: str) -> Path:
    if value is None:
        raise ConfigError(f"{what} is required")
    p = Path(value)
    if not p.exists():
        raise MissingInput(f"{what} not found: {p}")
    return p


# -- model bundles ------------------------------------------------------------


def save_model(run: RunDir, name: str, params: ModelParameters, meta: dict) -> None:
    save_checkpoint(run.out(f"{name}.dcp"), params.state_dict())
    with open(run.out(f"{name}.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_models(model_dir) -> list[tuple[str, ModelParameters, SpeedScaler, dict]]:
    model_dir = Path(model_dir)
    metas = sorted(model_dir.glob("model*.json"))
    if not metas:
        raise MissingInput(f"no model*.json checkpoints in {model_dir}")
    out = []
    for meta_path in metas:
        meta = json.loads(meta_path.read_text())
        m = meta["model"]
        params = ModelParameters.init(np.random.default_rng(0), input_dim=meta["input_dim"], hidden=m["R"],
                                      K=m["K"], layers=m["L"])
        params.load_state_dict(load_checkpoint(meta_path.with_suffix(".dcp")))
        scaler = SpeedScaler()
        scaler.mean_ = np.array([meta["scaler"]["mean"], 0.0])
        scaler.scale_ = np.array([meta["scaler"]["std"], 1.0])
        out.append((meta_path.stem, params, scaler, meta))
    return out


def _train_config(cfg: RunConfig) -> TrainConfig:
    t, m = cfg.train, cfg.model
    return TrainConfig(batch_size=t.batch, P=m.P, Q=m.Q, epochs=t.epochs, lr=t.lr, lr_decay=t.decay,
                       decay_epochs=tuple(t.decay_epochs), max_grad_norm=t.clip, K=m.K, L=m.L, R=m.R,
                       seed=t.seed, scheduled_sampling=t.scheduled_sampling,
                       sampling_decay_steps=t.sampling_decay_steps, shuffle_subgraphs=t.shuffle_subgraphs)


def _load_clean_frame(cfg: RunConfig):
    frame = load_frame(_need(cfg.data.frame, "data.frame"), cfg.data.format)
    return impute_missing(frame)


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, args, run: RunDir) -> None:
    s = cfg.synth
    corpus = make_corpus(s.regions, s.nodes_per_region, s.days, seed=s.seed)
    frame = inject_missing(corpus.frame, s.missing, s.seed) if s.missing else corpus.frame
    ext = "csv" if cfg.data.format == "csv" else "tsf"
    save_frame(frame, run.out(f"frame.{ext}"), cfg.data.format)
    write_distances(run.out("distances.csv"), corpus.distances)
    with open(run.out("regions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "region"])
        for nid in frame.node_ids:
            w.writerow([nid, corpus.region_of[nid]])
    run.extra["synth_configs"] = [json.loads(c.to_json()) for c in corpus.configs]


def cmd_build_graph(cfg: RunConfig, args, run: RunDir) -> None:
    dist = read_distances(_need(cfg.data.distances, "data.distances"))
    if cfg.data.frame:
        nodes = load_frame(_need(cfg.data.frame, "data.frame"), cfg.data.format).node_ids
        keep = set(nodes)
        # a frame over a subset of sensors selects the induced part of the distance list
        kept = [d for d in dist if d[0] in keep and d[1] in keep]
        if len(kept) < len(dist):
            logger.info("dropped %d distance rows naming sensors outside the frame", len(dist) - len(kept))
        dist = kept
    else:
        nodes = sorted({d[0] for d in dist} | {d[1] for d in dist})
    sigma = cfg.graph.sigma if cfg.graph.sigma is not None else sigma_from_distances(d for _, _, d in dist)
    kernel = KernelConfig(sigma, cfg.graph.tau)
    graph = build_adjacency(dist, nodes, kernel)
    export_graph(graph, run.path / "graph")
    run.outputs += ["graph/nodes.csv", "graph/edges.csv"]
    run.extra["graph"] = {"nodes": graph.n_nodes, "edges": int(graph.adjacency.nnz), "sigma": kernel.sigma}


def cmd_partition(cfg: RunConfig, args, run: RunDir) -> None:
    graph = import_graph(_need(cfg.data.graph, "data.graph"))
    p = cfg.partition
    assignment = kway_partition(graph, p.k, p.tol, p.seed)
    write_assignment(run.out("assignment.csv"), assignment)
    run.extra["partition"] = {"k": p.k, "seed": p.seed, "sizes": assignment.sizes().tolist(),
                              "edge_cut": edge_cut(graph, assignment.part_of)}


def _source_setup(cfg: RunConfig, run: RunDir):
    graph = import_graph(_need(cfg.data.graph, "data.graph"))
    frame = _load_clean_frame(cfg)
    if set(frame.node_ids) != set(graph.node_ids):
        raise FrameFormatError("frame and graph node ids differ")
    if cfg.data.assignment:
        assignment = read_assignment(_need(cfg.data.assignment, "data.assignment"), graph.node_ids)
    else:
        p = cfg.partition
        assignment = kway_partition(graph, p.k, p.tol, p.seed)
        write_assignment(run.out("assignment.csv"), assignment)
    parts = list(range(assignment.k)) if cfg.train.parts is None else [int(x) for x in cfg.train.parts]
    for p in parts:
        if not 0 <= p < assignment.k:
            raise ConfigError(f"train.parts entry {p} out of range for k={assignment.k}")
    splits = split_by_time(frame, cfg.train.split)
    src_nodes = [nid for p in parts for nid in assignment.members(p)]
    scaler = SpeedScaler().fit(splits[0].select_nodes(src_nodes))
    return graph, assignment, parts, splits, scaler


def cmd_train(cfg: RunConfig, args, run: RunDir) -> None:
    graph, assignment, parts, splits, scaler = _source_setup(cfg, run)
    tcfg = _train_config(cfg)
    hops = cfg.partition.overlap_hops
    largest = max(extract_subgraph(graph, assignment, p, hops).real_count for p in parts)
    n = cfg.partition.n or largest
    datasets = partition_datasets(graph, assignment, parts, splits, scaler, n, tcfg.P, tcfg.Q, hops)

    log_fh = open(run.out("train_log.csv"), "w", newline="")
    log = csv.writer(log_fh, lineterminator="\n")
    log.writerow(["epoch", "subgraph", "step", "loss", "wall_ms"])

    def on_step(epoch, sg, step, loss, wall_ms):
        log.writerow([epoch, sg, step, fmt(loss), f"{wall_ms:.1f}"])

    base_meta = {"input_dim": 2, "n": n, "model": vars(cfg.model).copy(), "scaler": scaler.stats,
                 "partition_seed": cfg.partition.seed, "manifest_id": run.manifest_id}
    runs = []
    try:
        if args.mode == "tl":
            res = fit_tl(datasets, tcfg, on_step=on_step)
            save_model(run, "model", res.params, {**base_meta, "mode": "tl", "parts": parts,
                                                  "best_epoch": res.best_epoch})
            runs.append(("tl", res))
        else:
            for p, ds in zip(parts, datasets):
                res = fit_ss(ds, tcfg, on_step=on_step)
                save_model(run, f"model-part{p}", res.params, {**base_meta, "mode": "ss", "parts": [p],
                                                              "best_epoch": res.best_epoch})
                runs.append((f"part{p}", res))
    finally:
        log_fh.close()

    with open(run.out("history.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "subgraph", "mean_loss", "steps"])
        for name, res in runs:
            for h in res.history:
                w.writerow([name, h.epoch, h.subgraph, fmt(h.mean_loss), h.steps])
    with open(run.out("val_mae.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "node_id", "mae"])
        for name, res in runs:
            for e, val in enumerate(res.val_history):
                for nid in sorted(val):
                    w.writerow([name, e, nid, fmt(val[nid])])
    run.extra["scaler"] = scaler.stats
    run.extra["padded_n"] = n


def _target(cfg: RunConfig):
    graph = import_graph(_need(cfg.data.graph, "data.graph"))
    frame = _load_clean_frame(cfg)
    if set(frame.node_ids) != set(graph.node_ids):
        raise FrameFormatError("frame and graph node ids differ")
    return graph, frame.select_nodes(graph.node_ids)


def _model_arg(cfg: RunConfig, args) -> Path:
    return _need(args.model or cfg.data.checkpoint, "--model (or data.checkpoint)")


def cmd_infer(cfg: RunConfig, args, run: RunDir) -> None:
    graph, frame = _target(cfg)
    models = load_models(_model_arg(cfg, args))
    tcfg = _train_config(cfg)
    p = cfg.partition
    preds = []
    for _, params, scaler, meta in models:
        future, out = forecast_next(params, scaler, graph, p.k, frame, meta["n"], tcfg, p.seed, p.tol,
                                    p.overlap_hops)
        preds.append(out)
    out = np.mean(preds, axis=0)
    with open(run.out("forecasts.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "horizon", "timestamp", "speed"])
        for j, nid in enumerate(graph.node_ids):
            for q in range(tcfg.Q):
                w.writerow([nid, q + 1, str(future[q].astype("datetime64[s]")), fmt(out[q, j])])
    run.extra["models"] = [m[0] for m in models]


def cmd_evaluate(cfg: RunConfig, args, run: RunDir) -> None:
    graph, frame = _target(cfg)
    tcfg = _train_config(cfg)
    train, _, test = split_by_time(frame, cfg.train.split)
    floor = cfg.eval.mape_floor
    summary = {}
    if args.model or cfg.data.checkpoint:
        models = load_models(_model_arg(cfg, args))
        p = cfg.partition
        preds, truth = [], None
        for _, params, scaler, meta in models:
            uf = infer_unseen(params, scaler, graph, p.k, test, meta["n"], tcfg, p.seed, p.tol, p.overlap_hops)
            preds.append(uf.forecasts)
            truth = uf.truth
        table = node_metrics(np.mean(preds, axis=0), truth, node_ids=graph.node_ids, mape_floor=floor)
        table.to_csv(run.out("metrics_model.csv"))
        summary["model"] = table.mean("mae")
    wins = make_windows(test, tcfg.P, tcfg.Q)
    truth = np.asarray(wins.targets[..., 0])
    pers = node_metrics(persistence_forecast(wins), truth, node_ids=test.node_ids, mape_floor=floor)
    pers.to_csv(run.out("metrics_persistence.csv"))
    ha = HistoricalAverage().fit(train)
    hap = node_metrics(ha.predict(target_timestamps(wins, tcfg.P, tcfg.Q)), truth, node_ids=test.node_ids,
                       mape_floor=floor)
    hap.to_csv(run.out("metrics_ha.csv"))
    summary["persistence"] = pers.mean("mae")
    summary["historical_average"] = hap.mean("mae")
    with open(run.out("summary.json"), "w") as fh:
        json.dump({k: float(v) for k, v in summary.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_compare(cfg: RunConfig, args, run: RunDir) -> None:
    if args.test != "wilcoxon":
        raise ConfigError(f"unsupported test {args.test!r}")
    a = NodeMetricTable.from_csv(_need(args.m1, "--m1"))
    b = NodeMetricTable.from_csv(_need(args.m2, "--m2"))
    name1 = args.name1 or Path(args.m1).stem
    name2 = args.name2 or Path(args.m2).stem
    report = compare(a.as_dict(), b.as_dict(), name1, name2, alpha=cfg.eval.alpha,
                     manifests={name1: manifest_id_near(args.m1), name2: manifest_id_near(args.m2)})
    report.to_json(run.out("compare.json"))
    report.to_csv(run.out("diffs.csv"))


def cmd_cv_report(cfg: RunConfig, args, run: RunDir) -> None:
    frame = _load_clean_frame(cfg)
    _, _, test = split_by_time(frame, cfg.train.split)
    cv = dict(zip(test.node_ids, coefficient_of_variation(test).tolist()))
    with open(run.out("node_cv.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "cv"])
        for nid in test.node_ids:
            w.writerow([nid, fmt(cv[nid])])
    if args.diffs:
        with open(_need(args.diffs, "--diffs"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = [r["node_id"] for r in rows if r["node_id"] in cv]
        diffs = np.array([float(r["diff"]) for r in rows if r["node_id"] in cv])
        bins = bin_mae_by_cv(diffs, np.array([cv[i] for i in ids]), cfg.eval.bins)
        write_cv_report(run.out("cv_bins.csv"), bins)


COMMANDS = {
    "synth": (cmd_synth, []),
    "build-graph": (cmd_build_graph, ["distances", "frame"]),
    "partition": (cmd_partition, ["graph"]),
    "train": (cmd_train, ["frame", "graph", "assignment"]),
    "infer": (cmd_infer, ["frame", "graph", "checkpoint"]),
    "evaluate": (cmd_evaluate, ["frame", "graph", "checkpoint"]),
    "compare": (cmd_compare, []),
    "cv-report": (cmd_cv_report, ["frame"]),
}


# -- argument handling --------------------------------------------------------


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tldcrnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    leaves = leaf_keys()
    counts: dict[str, int] = {}
    for _, key, _ in leaves:
        counts[key] = counts.get(key, 0) + 1
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config; flags override its leaves")
        p.add_argument("--run-dir", help="write here instead of a fresh directory under TLDCRNN_RUNS_DIR")
        p.add_argument("-v", "--verbose", action="store_true")
        for section, key, _ in leaves:
            flags = [f"--{section}.{key}"]
            if counts[key] == 1:
                flags.append(f"--{key}")
                flags.append(f"--{key.replace('_', '-')}")
            if section == "data":
                flags.append(f"--{key}")
            p.add_argument(*dict.fromkeys(flags), dest=f"{section}.{key}", default=None, type=_parse_value,
                           metavar="VALUE")
        if name == "train":
            p.add_argument("--mode", choices=["tl", "ss"], default="tl")
        if name in ("infer", "evaluate"):
            p.add_argument("--model", help="directory of a train run")
        if name == "compare":
            p.add_argument("--m1", required=True)
            p.add_argument("--m2", required=True)
            p.add_argument("--name1")
            p.add_argument("--name2")
            p.add_argument("--test", default="wilcoxon")
        if name == "cv-report":
            p.add_argument("--diffs", help="diffs.csv from compare")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return EXIT_DIVERGED
    if isinstance(exc, (FileNotFoundError, MissingInput)):
        return EXIT_MISSING_INPUT
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (FrameFormatError, GraphError, PartitionError, ValueError, KeyError)):
        return EXIT_BAD_DATA
    return EXIT_UNEXPECTED


def _error_record(command: str, exc: BaseException, code: int) -> dict:
    return {"command": command, "error": type(exc).__name__, "message": str(exc), "exit_code": code}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = RunConfig.load(_need(args.config, "--config")) if args.config else RunConfig()
        overrides = {k: v for k, v in vars(args).items() if "." in k and v is not None}
        cfg = cfg.with_overrides(overrides)
        func, input_keys = COMMANDS[args.command]
        inputs = {k: getattr(cfg.data, k) for k in input_keys if getattr(cfg.data, k, None)}
        if args.command in ("infer", "evaluate") and args.model:
            inputs["checkpoint"] = args.model
        if args.command == "compare":
            inputs.update(m1=args.m1, m2=args.m2)
        if args.command == "cv-report" and args.diffs:
            inputs["diffs"] = args.diffs
        for k, v in inputs.items():
            _need(v, k)
        run = RunDir(args.command, cfg, inputs, path=args.run_dir)
        run.out("config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        func(cfg, args, run)
        run.write_manifest("ok")
        print(run.path)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code + record
        code = _exit_code(exc)
        record = _error_record(args.command, exc, code)
        if run is not None:
            (run.path / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
            run.write_manifest("error")
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        if code == EXIT_UNEXPECTED:
            logger.exception("unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
