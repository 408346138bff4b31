"""Command-line pipeline: partition -> plan -> train -> report.

Every command is driven by a JSON config and a single 64-bit seed, and
rewrites its artifacts byte-identically on re-runs (sorted keys, no
timestamps).  Exit codes: 0 success, 1 verification failure, 2 bad
input or configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import devices, engine, partition, planner, reference, synth
from .errors import ChunktrainError, ConfigError
from .graph import load_edge_list, load_graph_cache, save_graph_cache

# ======================================================================
# Config
# ======================================================================

_GRAPH_SOURCES = ("edge_list", "synthetic")


@dataclass(eq=False)
class RunConfig:
    """Resolved run configuration (see from_dict for the JSON shape)."""

    graph: dict
    m: int
    n: int
    kind: str
    dims: list
    lr: float = 0.1
    epochs: int = 1
    leaky_slope: float = 0.2
    dtype: str = "float64"
    cost: planner.CostParams = planner.CostParams()
    mode: str = "full"
    reorganize: bool = True
    seed: int = 0
    epsilon: float = 0.1
    mask_fraction: float = 0.3
    out: str = "run"

    # ------------------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {"graph", "m", "n", "model", "cost", "mode", "reorganize",
                 "seed", "epsilon", "mask_fraction", "out"}
        extra = set(doc) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key in ("graph", "m", "n", "model"):
            if key not in doc:
                raise ConfigError(f"config is missing required key {key!r}")

        graph = doc["graph"]
        if (not isinstance(graph, dict)
                or sum(k in graph for k in _GRAPH_SOURCES) != 1
                or set(graph) - set(_GRAPH_SOURCES)):
            raise ConfigError(
                "graph must be an object with exactly one of "
                f"{_GRAPH_SOURCES}")
        if "synthetic" in graph:
            if "seed" in graph["synthetic"]:
                raise ConfigError(
                    "the synthetic spec takes its seed from the top-level "
                    "config seed; remove graph.synthetic.seed")
            synth.SynthSpec.from_dict({**graph["synthetic"], "seed": 0})

        model = doc["model"]
        extra = set(model) - {"kind", "dims", "lr", "epochs", "leaky_slope",
                              "dtype"}
        if extra:
            raise ConfigError(f"unknown model keys: {sorted(extra)}")
        kind = model.get("kind")
        if kind not in engine.KINDS:
            raise ConfigError(f"model.kind must be one of {engine.KINDS}")
        dims = model.get("dims")
        if (not isinstance(dims, list) or len(dims) < 2
                or not all(isinstance(d, int) and d >= 1 for d in dims)):
            raise ConfigError(
                "model.dims must list the feature width, hidden widths and "
                "class count (at least two positive integers)")
        dtype = str(model.get("dtype", "float64"))
        if dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype must be float64 or float32")

        m, n = doc["m"], doc["n"]
        if not (isinstance(m, int) and isinstance(n, int) and m >= 1 and n >= 1):
            raise ConfigError("m and n must be integers >= 1")

        cost_doc = doc.get("cost", {})
        extra = set(cost_doc) - {"t_hd", "t_dd", "t_ru"}
        if extra:
            raise ConfigError(f"unknown cost keys: {sorted(extra)}")
        cost = planner.CostParams(
            t_hd=float(cost_doc.get("t_hd", 25.0)),
            t_dd=float(cost_doc.get("t_dd", 200.0)),
            t_ru=float(cost_doc.get("t_ru", 1300.0)),
        )

        mode = doc.get("mode", "full")
        if mode not in planner.MODES:
            raise ConfigError(f"mode must be one of {planner.MODES}")
        reorganize = doc.get("reorganize", True)
        if not isinstance(reorganize, bool):
            raise ConfigError("reorganize must be true or false")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        epsilon = float(doc.get("epsilon", 0.1))
        if epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        mask_fraction = float(doc.get("mask_fraction", 0.3))

        return cls(
            graph=graph, m=m, n=n, kind=kind, dims=list(dims),
            lr=float(model.get("lr", 0.1)),
            epochs=int(model.get("epochs", 1)),
            leaky_slope=float(model.get("leaky_slope", 0.2)),
            dtype=dtype, cost=cost, mode=mode, reorganize=reorganize,
            seed=seed, epsilon=epsilon, mask_fraction=mask_fraction,
            out=str(doc.get("out", "run")),
        )

    def to_dict(self) -> dict:
        return {
            "graph": self.graph,
            "m": self.m,
            "n": self.n,
            "model": {
                "kind": self.kind,
                "dims": list(self.dims),
                "lr": self.lr,
                "epochs": self.epochs,
                "leaky_slope": self.leaky_slope,
                "dtype": self.dtype,
            },
            "cost": {"t_hd": self.cost.t_hd, "t_dd": self.cost.t_dd,
                     "t_ru": self.cost.t_ru},
            "mode": self.mode,
            "reorganize": self.reorganize,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "mask_fraction": self.mask_fraction,
            "out": self.out,
        }


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})")
    return RunConfig.from_dict(doc)


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ======================================================================
# Pipeline pieces
# ======================================================================


def build_graph(cfg: RunConfig):
    """Materialize the graph source; returns (graph, cluster_of | None)."""
    if "edge_list" in cfg.graph:
        path = cfg.graph["edge_list"]
        if not os.path.exists(path):
            raise ConfigError(f"edge-list file not found: {path}")
        return load_edge_list(path), None
    spec = synth.SynthSpec.from_dict(
        {**cfg.graph["synthetic"], "seed": cfg.seed})
    return synth.synth_graph_with_clusters(spec)


def _artifact(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def _require_artifacts(cfg: RunConfig, names: list) -> None:
    missing = [n for n in names if not os.path.exists(_artifact(cfg, n))]
    if missing:
        raise ConfigError(
            f"missing artifacts in {cfg.out}: {', '.join(missing)} "
            f"(run the earlier pipeline commands first)")


# ======================================================================
# Commands
# ======================================================================


def cmd_partition(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    g, _clusters = build_graph(cfg)
    assign = partition.partition_vertices(
        g, cfg.m, epsilon=cfg.epsilon, seed=cfg.seed)
    p = partition.split_chunks(g, assign, cfg.n)
    save_graph_cache(g, _artifact(cfg, "graph.htg"))
    partition.save_partition(p, g, _artifact(cfg, "partition.json"),
                             epsilon=cfg.epsilon, seed=cfg.seed)
    _write_json(_artifact(cfg, "config.json"), cfg.to_dict())
    alpha = partition.replication_factor(p)
    print(f"partitioned {g.num_vertices} vertices / {g.num_edges} edges "
          f"into m={cfg.m} x n={cfg.n} chunks")
    print(f"replication factor alpha = {alpha:.6f}")
    print(f"edge cut = {partition.edge_cut(g, assign)}")
    print(f"wrote {_artifact(cfg, 'partition.json')}")
    return 0


def cmd_plan(cfg: RunConfig) -> int:
    _require_artifacts(cfg, ["partition.json", "graph.htg"])
    g = load_graph_cache(_artifact(cfg, "graph.htg"))
    p = partition.load_partition(_artifact(cfg, "partition.json"), g)
    plan_id = planner.plan_for_partition(p)
    cost_id = planner.comm_cost(plan_id.volumes, cfg.cost)
    reorg = planner.reorganize(p)
    plan_re = planner.plan_for_partition(reorg.partition)
    cost_re = planner.comm_cost(plan_re.volumes, cfg.cost)
    chosen = ("reorganized" if cfg.reorganize and cost_re <= cost_id
              else "identity")
    chosen_plan = plan_re if chosen == "reorganized" else plan_id
    planner.save_plan(
        _artifact(cfg, "plan.json"), chosen_plan, cfg.cost,
        graph_hash=g.content_hash(),
        partition_hash=partition.partition_content_hash(p),
        cost_identity=cost_id, cost_reorganized=cost_re,
        chosen=chosen, reorg=reorg,
    )
    _write_json(_artifact(cfg, "config.json"), cfg.to_dict())
    v_id, v_re = plan_id.volumes, plan_re.volumes
    print(f"identity ordering:     volumes (v_ori={v_id.v_ori}, "
          f"v_p2p={v_id.v_p2p}, v_ru={v_id.v_ru}), cost {cost_id:.6f}")
    print(f"reorganized ordering:  volumes (v_ori={v_re.v_ori}, "
          f"v_p2p={v_re.v_p2p}, v_ru={v_re.v_ru}), cost {cost_re:.6f}")
    if cfg.cost.t_hd == cfg.cost.t_dd == cfg.cost.t_ru:
        print(f"equal throughputs: cost telescopes to v_ori/T = "
              f"{v_id.v_ori / cfg.cost.t_hd:.6f}")
    print(f"reorganized v_ru <= identity v_ru: "
          f"{v_re.v_ru <= v_id.v_ru}")
    print(f"chosen ordering: {chosen}")
    print(f"wrote {_artifact(cfg, 'plan.json')}")
    return 0


def _verify_tolerance(kind: str) -> float:
    return 1e-10 if kind == "gcn" else 1e-8


def cmd_train(cfg: RunConfig, verify: bool = False) -> int:
    _require_artifacts(cfg, ["partition.json", "graph.htg", "plan.json"])
    if verify and cfg.dtype != "float64":
        raise ConfigError("--verify requires model.dtype = float64")
    g = load_graph_cache(_artifact(cfg, "graph.htg"))
    p = partition.load_partition(_artifact(cfg, "partition.json"), g)
    with open(_artifact(cfg, "plan.json"), "r", encoding="utf-8") as fh:
        plan_doc = json.load(fh)
    if plan_doc.get("graph_hash") != g.content_hash():
        raise ConfigError(
            f"{_artifact(cfg, 'plan.json')}: plan was computed for a "
            f"different graph (stale hash); re-run the plan command")
    if plan_doc.get("partition_hash") != partition.partition_content_hash(p):
        raise ConfigError(
            f"{_artifact(cfg, 'plan.json')}: plan was computed for a "
            f"different partition (stale hash); re-run the plan command")
    chosen = plan_doc.get("chosen_ordering", "identity")
    if chosen == "reorganized":
        p = planner.reorganize(p).partition
    plan = planner.plan_for_partition(p)

    dtype = np.dtype(cfg.dtype)
    _g2, clusters = build_graph(cfg)
    X, y, mask = synth.synth_node_data(
        g.num_vertices, cfg.dims[0], cfg.dims[-1], cfg.seed,
        cluster_of=clusters, mask_fraction=cfg.mask_fraction)
    engine.save_matrix(X, _artifact(cfg, "features.htf"))
    engine.save_labels(y, _artifact(cfg, "labels.htl"))
    engine.save_labels(mask.astype(np.int64), _artifact(cfg, "mask.htl"))

    model = engine.init_model(
        cfg.kind, cfg.dims, cfg.seed, lr=cfg.lr, epochs=cfg.epochs,
        leaky_slope=cfg.leaky_slope, dtype=dtype)
    ref_model = model.copy() if verify else None
    host = devices.HostStore(g.num_vertices, cfg.dims, dtype=dtype)
    host.set_features(X.astype(dtype))
    fleet = devices.DeviceFleet(plan, mode=cfg.mode, dtype=dtype)

    fwd_per_epoch, bwd_per_epoch = engine.comm_passes_per_epoch(model)
    losses = []
    ref_losses = []
    log_path = _artifact(cfg, "train_log.jsonl")
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            result = engine.train_epoch(p, fleet, model, host, y, mask)
            losses.append(result.loss)
            line = {
                "epoch": epoch,
                "loss": result.loss,
                "volumes": {
                    "v_ori": plan.volumes.v_ori,
                    "v_p2p": plan.volumes.v_p2p,
                    "v_ru": plan.volumes.v_ru,
                },
                "predicted_cost_per_layer": planner.comm_cost(
                    plan.volumes, cfg.cost),
            }
            log.write(json.dumps(line, sort_keys=True) + "\n")
            if verify:
                ref_losses.append(reference.reference_train_epoch(
                    g, ref_model, X, y, mask))
            print(f"epoch {epoch}: loss {result.loss:.6f}")

    report = fleet.transfer_report(
        fwd_passes=cfg.epochs * fwd_per_epoch,
        bwd_passes=cfg.epochs * bwd_per_epoch,
        cost_params=cfg.cost)

    verify_doc = None
    exit_code = 0
    if verify:
        tol = _verify_tolerance(cfg.kind)
        loss_delta = max(
            (abs(a - b) / max(abs(b), 1e-30)
             for a, b in zip(losses, ref_losses)), default=0.0)
        param_delta = max(
            float(np.abs(w1 - w2).max()) / max(float(np.abs(w2).max()), 1e-30)
            for w1, w2 in zip(model.weights, ref_model.weights))
        if cfg.kind == "gat":
            param_delta = max(param_delta, max(
                float(np.abs(a1 - a2).max())
                / max(float(np.abs(a2).max()), 1e-30)
                for a1, a2 in zip(model.attn, ref_model.attn)))
        status = "pass" if max(loss_delta, param_delta) <= tol else "fail"
        verify_doc = {
            "status": status,
            "tolerance": tol,
            "max_loss_rel_delta": loss_delta,
            "max_param_rel_delta": param_delta,
        }
        if status == "fail":
            exit_code = 1
        print(f"verification {status}: loss delta {loss_delta:.3e}, "
              f"param delta {param_delta:.3e} (tolerance {tol:.0e})")

    summary = {
        "format": "chunktrain-summary-v1",
        "mode": cfg.mode,
        "model_kind": cfg.kind,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "chosen_ordering": chosen,
        "losses": losses,
        "final_loss": losses[-1] if losses else None,
        "transfer_totals": report["totals"],
        "per_device": report["per_device"],
        "peak_live_slots": report["peak_live_slots"],
        "volumes": report["volumes"],
        "predicted_cost_per_layer": report["predicted_cost_per_layer"],
        "planner_consistent": report.get("planner_consistent"),
        "verify": verify_doc,
    }
    _write_json(_artifact(cfg, "summary.json"), summary)
    _write_json(_artifact(cfg, "config.json"), cfg.to_dict())
    print(f"wrote {_artifact(cfg, 'summary.json')}")
    return exit_code


_REPORT_COLUMNS = [
    "run", "mode", "kind", "epochs", "v_ori", "v_p2p", "v_ru",
    "predicted_cost_per_layer", "h2d_rows", "d2h_rows", "d2d_rows",
    "reuse_rows", "peak_slots", "final_loss", "planner_consistent", "verify",
]

_MODE_ORDER = {"baseline": 0, "p2p": 1, "full": 2}


def _report_row(run_name: str, summary: dict) -> dict:
    totals = summary.get("transfer_totals", {})
    peaks = summary.get("peak_live_slots", [])
    verify = summary.get("verify")
    return {
        "run": run_name,
        "mode": summary.get("mode"),
        "kind": summary.get("model_kind"),
        "epochs": summary.get("epochs"),
        "v_ori": summary.get("volumes", {}).get("v_ori"),
        "v_p2p": summary.get("volumes", {}).get("v_p2p"),
        "v_ru": summary.get("volumes", {}).get("v_ru"),
        "predicted_cost_per_layer": summary.get("predicted_cost_per_layer"),
        "h2d_rows": totals.get("h2d_rows"),
        "d2h_rows": totals.get("d2h_rows"),
        "d2d_rows": totals.get("d2d_rows"),
        "reuse_rows": totals.get("reuse_rows"),
        "peak_slots": max(peaks) if peaks else None,
        "final_loss": summary.get("final_loss"),
        "planner_consistent": summary.get("planner_consistent"),
        "verify": (verify or {}).get("status") if verify else "",
    }


def cmd_report(out_dir: str) -> int:
    if not os.path.isdir(out_dir):
        raise ConfigError(f"run directory not found: {out_dir}")
    candidates = [("", out_dir)] + sorted(
        (name, os.path.join(out_dir, name))
        for name in os.listdir(out_dir)
        if os.path.isdir(os.path.join(out_dir, name))
    )
    rows = []
    for name, path in candidates:
        summary_path = os.path.join(path, "summary.json")
        if not os.path.exists(summary_path):
            continue
        with open(summary_path, "r", encoding="utf-8") as fh:
            summary = json.load(fh)
        rows.append(_report_row(name or os.path.basename(
            os.path.normpath(out_dir)), summary))
    if not rows:
        raise ConfigError(
            f"no completed runs under {out_dir}: expected summary.json "
            f"(plus config.json, partition.json, plan.json, "
            f"train_log.jsonl) in the directory or its subdirectories")

    rows.sort(key=lambda r: (_MODE_ORDER.get(r["mode"], 99), r["run"]))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_REPORT_COLUMNS,
                            lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())

    widths = {c: max(len(c), *(len(str(r[c])) for r in rows))
              for c in _REPORT_COLUMNS}
    header = "  ".join(c.ljust(widths[c]) for c in _REPORT_COLUMNS)
    print(header)
    print("-" * len(header))
    for row in rows:
        print("  ".join(str(row[c]).ljust(widths[c])
                        for c in _REPORT_COLUMNS))
    print(f"wrote {csv_path}")
    return 0


# ======================================================================
# Entry point
# ======================================================================


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if getattr(args, "mode", None):
        if args.mode not in planner.MODES:
            raise ConfigError(f"mode must be one of {planner.MODES}")
        cfg.mode = args.mode
    if getattr(args, "reorganize", None):
        cfg.reorganize = args.reorganize == "on"
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    return cfg


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunktrain",
        description="Partitioned full-graph GNN training simulator: "
                    "partition, plan, train, report.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", required=True,
                        help="JSON run configuration")
        sp.add_argument("--mode", choices=planner.MODES,
                        help="override dedup mode")
        sp.add_argument("--reorganize", choices=("on", "off"),
                        help="override grid reorganization")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", help="override the output directory")

    add_common(sub.add_parser(
        "partition", help="build the two-level partition"))
    add_common(sub.add_parser(
        "plan", help="derive the deduplicated communication plan"))
    train_p = sub.add_parser("train", help="run metered training")
    add_common(train_p)
    train_p.add_argument("--verify", action="store_true",
                         help="check parity against the monolithic trainer")

    report_p = sub.add_parser("report", help="aggregate run artifacts")
    report_p.add_argument("--out", required=True,
                          help="run directory (or parent of run directories)")
    return parser


def main(argv=None) -> int:
    parser = build_arg_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.out)
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "partition":
            return cmd_partition(cfg)
        if args.command == "plan":
            return cmd_plan(cfg)
        if args.command == "train":
            return cmd_train(cfg, verify=args.verify)
        raise ConfigError(f"unknown command {args.command!r}")
    except ChunktrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
