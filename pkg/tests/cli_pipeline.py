"""Drive the command line end to end on a small synthetic corpus."""
from __future__ import annotations

import csv
from pathlib import Path

from tldcrnn.cli import main
from tldcrnn.graph import read_distances, write_distances
from tldcrnn.timeseries import load_frame, save_frame

SMALL = ["--model.P", "3", "--model.Q", "3", "--model.R", "4", "--model.L", "1", "--train.epochs", "1"]


def run(*argv) -> Path:
    import io
    from contextlib import redirect_stdout
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = main(list(argv))
    if code != 0:
        raise RuntimeError(f"{argv[0]} exited {code}")
    return Path(buf.getvalue().strip().splitlines()[-1])


def target_inputs(synth_dir: Path, out: Path, regions: set[int]) -> tuple[Path, Path]:
    """Frame and distance files restricted to the sensors of ``regions``."""
    with open(synth_dir / "regions.csv", newline="") as fh:
        keep = [r["node_id"] for r in csv.DictReader(fh) if int(r["region"]) in regions]
    out.mkdir(parents=True, exist_ok=True)
    frame = load_frame(synth_dir / "frame.csv").select_nodes(keep)
    save_frame(frame, out / "frame.csv")
    ks = set(keep)
    write_distances(out / "distances.csv", [d for d in read_distances(synth_dir / "distances.csv")
                                            if d[0] in ks and d[1] in ks])
    return out / "frame.csv", out / "distances.csv"


def run_pipeline(root: Path, regions=3, nodes=8, days=2) -> dict[str, Path]:
    """synth -> build-graph -> partition -> train (2 source regions) -> evaluate/infer on the third."""
    root.mkdir(parents=True, exist_ok=True)
    d = {}
    d["synth"] = run("synth", "--synth.regions", str(regions), "--synth.nodes_per_region", str(nodes),
                     "--synth.days", str(days), "--run-dir", str(root / "synth"))
    src_frame, src_dist = target_inputs(d["synth"], root / "source", set(range(regions - 1)))
    d["graph"] = run("build-graph", "--distances", str(src_dist), "--frame", str(src_frame),
                     "--run-dir", str(root / "graph"))
    d["partition"] = run("partition", "--graph", str(d["graph"] / "graph"), "--partition.k", str(regions - 1),
                         "--run-dir", str(root / "partition"))
    d["train"] = run("train", "--mode", "tl", "--frame", str(src_frame), "--graph", str(d["graph"] / "graph"),
                     "--assignment", str(d["partition"] / "assignment.csv"), *SMALL,
                     "--run-dir", str(root / "train"))
    tgt_frame, tgt_dist = target_inputs(d["synth"], root / "target", {regions - 1})
    d["target_graph"] = run("build-graph", "--distances", str(tgt_dist), "--frame", str(tgt_frame),
                            "--run-dir", str(root / "target_graph"))
    common = ["--frame", str(tgt_frame), "--graph", str(d["target_graph"] / "graph"), "--model", str(d["train"]),
              "--partition.k", "1", *SMALL]
    d["evaluate"] = run("evaluate", *common, "--run-dir", str(root / "evaluate"))
    d["infer"] = run("infer", *common, "--run-dir", str(root / "infer"))
    d["compare"] = run("compare", "--m1", str(d["evaluate"] / "metrics_model.csv"),
                       "--m2", str(d["evaluate"] / "metrics_persistence.csv"), "--name1", "TL",
                       "--name2", "persistence", "--run-dir", str(root / "compare"))
    d["cv"] = run("cv-report", "--frame", str(tgt_frame), "--diffs", str(d["compare"] / "diffs.csv"),
                  "--run-dir", str(root / "cv"))
    return d
