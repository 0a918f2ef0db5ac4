"""Command-line entry point: ``slmil <command> [options]``.

Exit status: 0 on success, 2 configuration, 3 file I/O, 4 invalid data,
5 training divergence. Everything a command writes is plain text; only
``manifest.json`` carries a timestamp.
"""
import argparse
import json
import logging
import sys
import time
from pathlib import Path


from . import __version__
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import apply_overrides, load_config
from .connectome import build_brain_graph
from .errors import CompatibilityError, ConfigError, InputIOError, SlmilError, ValidationError
from .instancegen import BagLayout, instance_count
from .milhead import write_reports
from .synth import generate_cohort, load_cohort, write_cohort
from .training import (BagData, accuracy, attention_reports, auc, cross_validate, predict,
                       topk_occurrence)

log = logging.getLogger("slmil")

TOPK_LEVELS = (1, 2, 3)
SWEEP_COLUMNS = ("i", "K", "params", "auc_mean", "auc_std", "acc_mean", "acc_std")


# ------------------------------------------------------------ output helpers


def _out_dir(path, create=True):
    out = Path(path)
    if not out.is_dir():
        if not create or not out.parent.is_dir():
            raise InputIOError(f"output directory does not exist: {out}")
        out.mkdir()
    return out


def _write(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc}") from exc


def _dump_json(path, obj):
    _write(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def write_manifest(out, command, cfg, extra=None):
    doc = {
        "command": command,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
    }
    doc.update(extra or {})
    _dump_json(Path(out) / "manifest.json", doc)


def _fmt(x):
    return repr(float(x))


def format_topk(labels, ids, counts_by_k):
    rows = ["instance_id,instance," + ",".join(f"top{k}" for k in counts_by_k)]
    for j, (iid, lab) in enumerate(zip(ids, labels)):
        rows.append(f"{iid},{lab}," + ",".join(str(int(c[j])) for c in counts_by_k.values()))
    return "\n".join(rows) + "\n"


def _topk_table(reports, layout):
    k_max = layout.n_instances
    counts = {k: topk_occurrence(reports, k) for k in TOPK_LEVELS if k <= k_max}
    ids = [s.instance_index for s in layout.specs]
    return format_topk(layout.labels(), ids, counts)


def format_sweep_table(rows):
    lines = ["\t".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append("\t".join([str(r["i"]), str(r["K"]), str(r["params"])]
                               + [_fmt(r[c]) for c in SWEEP_COLUMNS[3:]]))
    return "\n".join(lines) + "\n"


def parse_sweep_table(text):
    """Inverse of :func:`format_sweep_table`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or tuple(lines[0].split("\t")) != SWEEP_COLUMNS:
        raise ValidationError("not a sweep table: bad header")
    rows = []
    for n, ln in enumerate(lines[1:], start=2):
        cells = ln.split("\t")
        if len(cells) != len(SWEEP_COLUMNS):
            raise ValidationError(f"sweep table line {n}: expected {len(SWEEP_COLUMNS)} cells")
        row = {c: int(v) for c, v in zip(SWEEP_COLUMNS[:3], cells[:3])}
        row.update({c: float(v) for c, v in zip(SWEEP_COLUMNS[3:], cells[3:])})
        rows.append(row)
    return rows


def _metrics_row(label, n_params, m):
    return (f"{label}\t{n_params}\t{m.auc_mean:.3f} ± {m.auc_std:.3f}"
            f"\t{m.acc_mean:.3f} ± {m.acc_std:.3f}\n")


# ------------------------------------------------------------ data loading


def _load(cohort):
    if cohort is None:
        raise ConfigError("--cohort is required")
    scans, parc = load_cohort(cohort)
    if not scans:
        raise ConfigError(f"cohort {cohort} contains no scans")
    lengths = {s.n_time for s in scans}
    if len(lengths) != 1:
        raise ValidationError(f"scans differ in length: {sorted(lengths)}")
    return scans, parc


def _graphs(scans, parc):
    return [build_brain_graph(s, parc) for s in scans]


def _layout(parc, i):
    if not 1 <= i <= parc.subnet_count:
        raise ConfigError(f"--instance-subnets must lie in [1, {parc.subnet_count}], got {i}")
    return BagLayout(parc, i)


# ------------------------------------------------------------ commands


def cmd_synth(cfg, args):
    out = _out_dir(args.out, create=False)
    scans, parc = generate_cohort(cfg.synth)
    write_cohort(out, scans, parc)
    write_manifest(out, "synth", cfg, {"scans": len(scans), "roi_count": parc.roi_count})
    log.info("wrote %d scans to %s", len(scans), out)
    return 0


def cmd_build_graph(cfg, args):
    scans, parc = _load(args.cohort)
    out = _out_dir(args.out)
    gdir = out / "graphs"
    gdir.mkdir(exist_ok=True)
    index = ["scan_id\tsubject_id\tlabel\tn_roi\tn_time"]
    for s in scans:
        g = build_brain_graph(s, parc)
        text = "\n".join(",".join(_fmt(v) for v in row) for row in g.adjacency) + "\n"
        _write(gdir / f"{s.scan_id}.csv", text)
        index.append(f"{s.scan_id}\t{s.subject_id}\t{s.label}\t{s.n_roi}\t{s.n_time}")
    _write(out / "graphs.tsv", "\n".join(index) + "\n")
    write_manifest(out, "build-graph", cfg, {"scans": len(scans)})
    return 0


def _checkpoint_meta(cfg, parc, i):
    return {"instance_subnets": i, "subnet_names": list(parc.subnet_names),
            "roi_count": parc.roi_count}


def _run_cv(cfg, scans, parc, i, graphs=None):
    layout = _layout(parc, i)

    def progress(j, split):
        log.info("i=%d split %d: auc %.4f acc %.4f best epoch %d", i, j, split.auc,
                 split.accuracy, split.best_epoch)

    res = cross_validate(scans, parc, i, cfg.model, cfg.mil, cfg.train, graphs=graphs,
                         progress=progress)
    return res, layout


def cmd_train(cfg, args):
    scans, parc = _load(args.cohort)
    out = _out_dir(args.out)
    i = cfg.instance_subnets
    res, layout = _run_cv(cfg, scans, parc, i)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "attention").mkdir(exist_ok=True)
    splits, all_reports = [], []
    for j, s in enumerate(res.splits):
        save_checkpoint(out / "checkpoints" / f"split_{j:02d}.json", s.params,
                        _checkpoint_meta(cfg, parc, i))
        write_reports(out / "attention" / f"split_{j:02d}.jsonl", s.reports)
        all_reports.extend(s.reports)
        splits.append({
            "split": j, "auc": s.auc, "accuracy": s.accuracy, "best_epoch": s.best_epoch,
            "val_subjects": list(s.plan.val_subjects), "history": s.history,
        })
    metrics = {
        "instance_subnets": i,
        "instances": layout.n_instances,
        "params": res.n_params,
        "summary": res.metrics.to_dict(),
        "splits": splits,
    }
    _dump_json(out / "metrics.json", metrics)
    _write(out / "metrics.tsv", "method\tparams\tauc\tacc\n"
           + _metrics_row(f"GCTrans-MIL(i={i})", res.n_params, res.metrics))
    _write(out / "topk.csv", _topk_table(all_reports, layout))
    write_manifest(out, "train", cfg, {"params": res.n_params,
                                       "summary": res.metrics.to_dict()})
    m = res.metrics
    print(f"AUC {m.auc_mean:.4f} ± {m.auc_std:.4f}  ACC {m.acc_mean:.4f} ± {m.acc_std:.4f}")
    return 0


def cmd_sweep(cfg, args):
    scans, parc = _load(args.cohort)
    out = _out_dir(args.out)
    levels = args.levels or list(range(1, parc.subnet_count))
    graphs = _graphs(scans, parc)
    rows = []
    for i in levels:
        res, layout = _run_cv(cfg, scans, parc, i, graphs)
        m = res.metrics
        rows.append({"i": i, "K": instance_count(parc.subnet_count, i), "params": res.n_params,
                     "auc_mean": m.auc_mean, "auc_std": m.auc_std,
                     "acc_mean": m.acc_mean, "acc_std": m.acc_std})
    _write(out / "sweep.tsv", format_sweep_table(rows))
    write_manifest(out, "sweep-instances", cfg, {"levels": list(levels)})
    return 0


def _scored(args):
    if args.checkpoint is None:
        raise ConfigError("--checkpoint is required")
    params, meta = load_checkpoint(args.checkpoint)
    scans, parc = _load(args.cohort)
    i = int(meta.get("instance_subnets", 2))
    if args.instance_subnets is not None and args.instance_subnets != i:
        raise CompatibilityError({"instance_subnets": (i, args.instance_subnets)})
    layout = _layout(parc, i)
    check_compatible(meta, scans[0].n_time, layout.n_instances, parc.subnet_names, parc.roi_count)
    graphs = _graphs(scans, parc)
    data = BagData.from_graphs(graphs, layout)
    probs, attn = predict(params, data, layout)
    return graphs, data, layout, probs, attn


def cmd_rank(cfg, args):
    graphs, _, layout, probs, attn = _scored(args)
    out = _out_dir(args.out)
    reports = attention_reports(graphs, probs, attn, layout)
    write_reports(out / "attention.jsonl", reports)
    _write(out / "topk.csv", _topk_table(reports, layout))
    write_manifest(out, "rank", cfg, {"checkpoint": str(args.checkpoint), "scans": len(graphs)})
    return 0


def cmd_eval(cfg, args):
    graphs, data, _, probs, _ = _scored(args)
    out = _out_dir(args.out)
    result = {"scans": len(graphs), "accuracy": accuracy(probs, data.labels)}
    labels = set(data.labels.tolist())
    result["auc"] = auc(probs, data.labels) if len(labels) == 2 else None
    pred = "\n".join(f"{g.scan_id}\t{g.label}\t{_fmt(p)}" for g, p in zip(graphs, probs))
    _write(out / "predictions.tsv", "scan_id\tlabel\tprobability\n" + pred + "\n")
    _dump_json(out / "eval.json", result)
    write_manifest(out, "eval", cfg, {"checkpoint": str(args.checkpoint)})
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "sweep-instances": cmd_sweep,
    "rank": cmd_rank,
    "eval": cmd_eval,
}


def _levels(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None


def build_parser():
    parser = argparse.ArgumentParser(prog="slmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"slmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (default: $SLMIL_CONFIG)")
    common.add_argument("--seed", type=int, help="root seed; overrides the config")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--instance-subnets", type=int, dest="instance_subnets",
                        help="subnets per instance, i")
    common.add_argument("-v", "--verbose", action="store_true")
    helps = {
        "synth": "generate a synthetic cohort",
        "build-graph": "write the FC adjacency of every scan",
        "train": "cross-validated training",
        "sweep-instances": "train once per instance size i",
        "rank": "attention top-K occurrence from a checkpoint",
        "eval": "score a cohort with a checkpoint",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name != "synth":
            p.add_argument("--cohort", help="cohort directory (scans/ + parcellation.csv)")
        if name in ("rank", "eval"):
            p.add_argument("--checkpoint", help="checkpoint JSON written by train")
        if name == "sweep-instances":
            p.add_argument("--levels", type=_levels, help="comma list of i (default 1..S-1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args.seed, args.instance_subnets)
        return COMMANDS[args.command](cfg, args)
    except SlmilError as exc:
        print(f"slmil {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
