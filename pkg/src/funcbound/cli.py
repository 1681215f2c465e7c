"""Command-line front end.

Exit codes: 0 on success, 1 on a domain error (the error class is printed),
2 on a usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .corpus_stats import END_SOURCES, diversity_stats
from .detectors import (HeuristicOptions, PrefixTreeConfig, PrefixTreeModel, heuristic_detect, score_array,
                        sweep_threshold, train_prefix_tree)
from .disasm import linear_sweep
from .errors import FuncboundError, SchemaError
from .evaluation import (EvalReport, compare, delta, evaluate_run, macro_average, micro_average,
                         reports_to_csv)
from .ground_truth import Encoding, convert_encoding, dumps_ground_truth, load_ground_truth
from .padding import PaddingConfig, randomize_padding
from .pe import Machine, image_info, parse_pe
from .synth import CorpusSpec, dumps_spec, generate

log = logging.getLogger("funcbound")

STATS_COLUMNS = ["sample_id", "rva_count", "byte_unique_count", "normalized_unique_count", "prologue_present",
                 "prologue_unique", "prologue_normalized", "padding_instances", "functions_omitted", "end_source"]


class UsageError(Exception):
    pass


# --- output plumbing ----------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Run:
    """Collects input digests and config for the manifests written next to outputs."""

    def __init__(self, args):
        self.args = args
        self.t0 = time.perf_counter()
        self.inputs = {}

    def note_input(self, path):
        self.inputs[str(path)] = sha256_file(path)

    def config(self):
        skip = {"func", "verbose"}
        return {k: v for k, v in sorted(vars(self.args).items()) if k not in skip}

    def emit(self, path, data):
        """Write ``data`` to ``path`` (or stdout for None/-) plus a manifest sidecar."""
        if path in (None, "-"):
            sys.stdout.write(data if isinstance(data, str) else data.decode())
            return
        atomic_write(path, data)
        manifest = {
            "subcommand": self.args.command,
            "output": Path(path).name,
            "output_sha256": hashlib.sha256(data.encode() if isinstance(data, str) else data).hexdigest(),
            "inputs": self.inputs,
            "config": self.config(),
            "seed": getattr(self.args, "seed", None),
            "tool_version": __version__,
            "wall_time": round(time.perf_counter() - self.t0, 6),
        }
        atomic_write(str(path) + ".manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")


def _dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _int(text):
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _hexlist(text):
    try:
        vals = frozenset(int(t, 16) for t in text.replace(" ", "").split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a hex byte list: {text!r}") from None
    if not vals or any(not 0 <= v <= 255 for v in vals):
        raise argparse.ArgumentTypeError(f"padding bytes must be hex values 00..ff: {text!r}")
    return vals


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1]: {text}")
    return v


def _load_pairs(run, pe_paths, gt_paths, need_gt=True):
    pe_paths = pe_paths or []
    gt_paths = gt_paths or []
    if need_gt and len(pe_paths) != len(gt_paths):
        raise UsageError("--input and --ground-truth must be given the same number of times")
    out = []
    for i, p in enumerate(pe_paths):
        run.note_input(p)
        img = parse_pe(Path(p).read_bytes())
        gt = None
        if i < len(gt_paths):
            run.note_input(gt_paths[i])
            gt = load_ground_truth(gt_paths[i], img)
        out.append((p, img, gt))
    return out


def _sample_id(path, gt):
    return gt.sample_id if gt is not None else Path(path).stem


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _output_for(args, sample_id, suffix):
    """Single input writes to --output; several inputs need --output-dir."""
    if getattr(args, "output_dir", None):
        return str(Path(args.output_dir) / f"{sample_id}{suffix}")
    return args.output


# --- subcommands ---------------------------------------------------------------

def cmd_info(args, run):
    reports = []
    for path, img, _ in _load_pairs(run, args.input, [], need_gt=False):
        d = image_info(img)
        d["sample_id"] = Path(path).stem
        reports.append(d)
    reports.sort(key=lambda d: d["sample_id"])
    run.emit(args.output, _dumps(reports[0] if len(reports) == 1 else reports))


def _stats_job(job):
    path, gt_path, padding_values, lookback, end_source = job
    img = parse_pe(Path(path).read_bytes())
    gt = load_ground_truth(gt_path, img)
    cfg = PaddingConfig(lookback=lookback, padding_values=padding_values)
    row = diversity_stats(img, gt, cfg, end_source).to_dict()
    row["sample_id"] = gt.sample_id
    return row


def cmd_stats(args, run):
    if len(args.input or []) != len(args.ground_truth or []):
        raise UsageError("--input and --ground-truth must be given the same number of times")
    for p in args.input + args.ground_truth:
        run.note_input(p)
    jobs = [(p, g, args.padding_bytes, args.lookback, args.end_source)
            for p, g in zip(args.input, args.ground_truth)]
    rows = sorted(_pool_map(_stats_job, jobs, args.jobs), key=lambda r: r["sample_id"])
    if args.format == "csv":
        lines = [",".join(STATS_COLUMNS)] + [",".join(str(r[c]) for c in STATS_COLUMNS) for r in rows]
        run.emit(args.output, "\n".join(lines) + "\n")
    else:
        run.emit(args.output, _dumps(rows))


def cmd_synth(args, run):
    spec = CorpusSpec(machine=args.machine, function_count=args.functions, seed=args.seed,
                      alignment=args.alignment, padding_value=args.padding_value,
                      duplicate_fraction=args.duplicate_fraction,
                      immediate_variant_fraction=args.variant_fraction,
                      unreferenced_fraction=args.unreferenced_fraction,
                      call_density=args.call_density, gt_encoding=Encoding.parse(args.encoding).value)
    spec.validate()
    out = Path(args.output_dir)
    for i in range(args.count):
        sub = CorpusSpec.from_dict({**spec.to_dict(), "seed": args.seed + i})
        sid = f"{args.prefix}{i:04d}"
        sample = generate(sub, sid)
        run.emit(out / f"{sid}.exe", sample.pe_bytes)
        atomic_write(out / f"{sid}.gt.jsonl", dumps_ground_truth(sample.ground_truth))
        atomic_write(out / f"{sid}.spec.json", dumps_spec(sub))
    log.info("wrote %d samples to %s", args.count, out)


def cmd_randomize_padding(args, run):
    [(path, img, gt)] = _load_pairs(run, [args.input], [args.ground_truth])
    cfg = PaddingConfig(args.lookback, args.padding_bytes, args.seed, args.exclude_original)
    res = randomize_padding(img, gt, cfg)
    run.emit(args.output, res.data)
    log_path = args.change_log or str(args.output) + ".changes.json"
    run.emit(log_path, res.dumps_change_log())
    log.info("%d padding bytes changed (%s)", len(res.changes), res.mode)


def cmd_train(args, run):
    pairs = _load_pairs(run, args.input, args.ground_truth)
    cfg = PrefixTreeConfig(args.depth, args.context_window, args.min_support, args.alignment)
    model = train_prefix_tree([(img, gt) for _, img, gt in pairs], cfg)
    run.emit(args.model, model.to_bytes())


def _load_model(run, path):
    run.note_input(path)
    return PrefixTreeModel.load(path)


def cmd_detect(args, run):
    items = _load_pairs(run, args.input, args.ground_truth or [], need_gt=False)
    if len(items) > 1 and not args.output_dir:
        raise UsageError("--output-dir is required with more than one --input")
    if args.detector == "prefix-tree":
        if not args.model:
            raise UsageError("--model is required for the prefix-tree detector")
        model = _load_model(run, args.model)
    opts = HeuristicOptions(args.gap_heuristic, args.prologue_patterns, not args.no_pdata_seeds)
    for path, img, gt in sorted(items, key=lambda it: _sample_id(it[0], it[2])):
        if args.detector == "prefix-tree":
            rvas, scores = score_array(model, img)
            keep = scores > args.threshold
            preds = [{"rva": int(r), "score": float(s)} for r, s in zip(rvas[keep], scores[keep])]
        else:
            preds = [{"rva": r, "score": 1.0} for r in sorted(heuristic_detect(img, opts))]
        run.emit(_output_for(args, _sample_id(path, gt), ".detections.json"), _dumps(preds))


def cmd_sweep(args, run):
    pairs = _load_pairs(run, args.input, args.ground_truth)
    model = _load_model(run, args.model)
    res = sweep_threshold(model, [(img, gt) for _, img, gt in pairs])
    if args.format == "csv":
        cols = ["t", "tp", "fp", "fn", "precision", "recall", "f1"]
        lines = [",".join(cols)] + [",".join(f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                                            for c in cols) for row in res.table]
        run.emit(args.output, "\n".join(lines) + "\n")
    else:
        run.emit(args.output, _dumps({"best_t": res.best_t, "best_f1": res.best_f1,
                                      "degenerate": res.degenerate, "table": res.table}))


def load_predictions(path, threshold=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError(f"{path}: expected a JSON list of {{rva, score}}")
    out = set()
    for i, item in enumerate(data):
        if isinstance(item, int) and not isinstance(item, bool):
            item = {"rva": item}
        if not isinstance(item, dict) or not isinstance(item.get("rva"), int) or item["rva"] < 0:
            raise SchemaError(f"{path}: entry {i} needs an unsigned integer rva")
        score = item.get("score", 1.0)
        if threshold is None or score > threshold:
            out.add(item["rva"])
    return out


def cmd_eval(args, run):
    run.note_input(args.ground_truth)
    run.note_input(args.predictions)
    gt = load_ground_truth(args.ground_truth)
    pred = load_predictions(args.predictions, args.threshold)
    report = evaluate_run(gt.sample_id, gt, pred, args.detector_id, wall_time=args.wall_time,
                          config={"threshold": args.threshold}, tolerance=args.tolerance)
    out = report.to_dict()
    if args.unsafe_accuracy is not None:
        from .evaluation import unsafe_accuracy
        out["unsafe_accuracy"] = unsafe_accuracy(pred, gt.starts, args.unsafe_accuracy)
    if args.baseline:
        run.note_input(args.baseline)
        out["delta"] = delta(EvalReport.loads(Path(args.baseline).read_text()), report)
    if args.format == "csv":
        run.emit(args.output, reports_to_csv([report]))
    else:
        run.emit(args.output, _dumps(out))


def cmd_compare(args, run):
    reports = []
    for p in args.reports:
        run.note_input(p)
        try:
            reports.append(EvalReport.from_dict({k: v for k, v in json.loads(Path(p).read_text()).items()
                                                 if k not in ("delta", "unsafe_accuracy")}))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: {exc}") from exc
    if args.format == "csv":
        run.emit(args.output, reports_to_csv(reports))
        return
    by_det = {}
    for r in reports:
        by_det.setdefault(r.detector_id, []).append(r)
    summary = {d: {"micro": micro_average(rs).to_dict(), "macro": macro_average(rs)}
               for d, rs in sorted(by_det.items())}
    run.emit(args.output, _dumps({"rows": compare(reports), "averages": summary}))


def cmd_external_import(args, run):
    run.note_input(args.input)
    try:
        data = json.loads(Path(args.input).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{args.input}: {exc}") from exc
    if not isinstance(data, list):
        raise SchemaError("external results must be a JSON list of {rva} or {rva, score}")
    enc = Encoding.parse(args.encoding)
    out = {}
    for i, item in enumerate(data):
        if isinstance(item, int) and not isinstance(item, bool):
            item = {"rva": item}
        if not isinstance(item, dict) or not isinstance(item.get("rva"), int) or item["rva"] < 0:
            raise SchemaError(f"entry {i} needs an unsigned integer rva")
        rec = {"rva": item["rva"], "score": float(item.get("score", 1.0))}
        if "end" in item and item["end"] is not None:
            if enc is Encoding.STARTS_ONLY:
                raise SchemaError(f"entry {i} carries an end but the declared encoding is starts_only")
            rec["end"] = item["end"] + (1 if enc is Encoding.INCLUSIVE else 0)
        out[rec["rva"]] = rec
    run.emit(args.output, _dumps([out[k] for k in sorted(out)]))


def cmd_disasm(args, run):
    [(_, img, _)] = _load_pairs(run, [args.input], [], need_gt=False)
    insns = linear_sweep(img, args.start, args.end)
    rows = []
    for i in insns:
        d = {"rva": i.start_address, "length": i.length, "class": i.cls.value,
             "bytes": img.raw_bytes[i.offset:i.offset + i.length].hex()}
        if i.rel_target is not None:
            d["target"] = i.rel_target
        if i.truncated:
            d["truncated"] = True
        rows.append(d)
    run.emit(args.output, _dumps(rows))


def cmd_convert(args, run):
    run.note_input(args.ground_truth)
    gt = convert_encoding(load_ground_truth(args.ground_truth), args.encoding)
    if args.output in (None, "-"):
        sys.stdout.write(dumps_ground_truth(gt))
    else:
        run.emit(args.output, dumps_ground_truth(gt))


# --- parser ----------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="funcbound", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    def out(p, fmt=False):
        p.add_argument("-o", "--output", help="output file (default: stdout)")
        if fmt:
            p.add_argument("--format", choices=("json", "csv"), default="json")

    def padding(p):
        p.add_argument("--padding-bytes", type=_hexlist, default=frozenset({0xCC}), help="e.g. cc,90")
        p.add_argument("--lookback", type=int, default=20)

    p = add("info", cmd_info, "summarize PE headers, sections and .pdata")
    p.add_argument("--input", action="append", required=True)
    out(p)

    p = add("stats", cmd_stats, "dataset diversity statistics per sample")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--ground-truth", action="append", required=True)
    p.add_argument("--end-source", choices=END_SOURCES, default="auto")
    p.add_argument("--jobs", type=int, default=1)
    padding(p)
    out(p, fmt=True)

    p = add("synth", cmd_synth, "generate synthetic PE images with ground truth")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--prefix", default="synth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--machine", choices=[m.value for m in Machine], default="x64")
    p.add_argument("--functions", type=int, default=32)
    p.add_argument("--alignment", type=int, default=16)
    p.add_argument("--padding-value", type=_int, default=0xCC)
    p.add_argument("--duplicate-fraction", type=_unit, default=0.0)
    p.add_argument("--variant-fraction", type=_unit, default=0.0)
    p.add_argument("--unreferenced-fraction", type=_unit, default=0.0)
    p.add_argument("--call-density", type=_unit, default=0.5)
    p.add_argument("--encoding", choices=("exclusive", "inclusive", "starts-only"), default="exclusive")

    p = add("randomize-padding", cmd_randomize_padding, "replace padding before function starts with random bytes")
    p.add_argument("--input", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-original", action="store_true")
    p.add_argument("--change-log")
    padding(p)
    p.add_argument("-o", "--output", required=True)

    p = add("train", cmd_train, "train a prefix-tree model")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--ground-truth", action="append", required=True)
    p.add_argument("--model", required=True, help="model output path")
    p.add_argument("--depth", type=int, default=16)
    p.add_argument("--context-window", type=int, default=0)
    p.add_argument("--min-support", type=int, default=10)
    p.add_argument("--alignment", type=int)

    p = add("detect", cmd_detect, "predict function starts")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--ground-truth", action="append", help="only used to name outputs by sample_id")
    p.add_argument("--detector", choices=("prefix-tree", "heuristic"), default="prefix-tree")
    p.add_argument("--model")
    p.add_argument("--threshold", type=_unit, default=0.5)
    p.add_argument("--gap-heuristic", action="store_true")
    p.add_argument("--prologue-patterns", action="store_true")
    p.add_argument("--no-pdata-seeds", action="store_true")
    p.add_argument("--output-dir")
    out(p)

    p = add("sweep", cmd_sweep, "calibrate the score threshold on validation data")
    p.add_argument("--input", action="append", required=True)
    p.add_argument("--ground-truth", action="append", required=True)
    p.add_argument("--model", required=True)
    out(p, fmt=True)

    p = add("eval", cmd_eval, "score predictions against ground truth")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--detector-id", default="detector")
    p.add_argument("--threshold", type=_unit, help="drop predictions whose score is not above this")
    p.add_argument("--tolerance", type=int, default=0, help="match within +-N bytes (non-default relaxation)")
    p.add_argument("--baseline", help="earlier report; adds a delta row")
    p.add_argument("--unsafe-accuracy", type=int, metavar="TOTAL_BYTES",
                   help="also report byte accuracy (misleading under class imbalance)")
    p.add_argument("--wall-time", type=float, default=0.0,
                   help="detector run time to record (kept out of reports unless given)")
    out(p, fmt=True)

    p = add("compare", cmd_compare, "join reports on sample_id")
    p.add_argument("reports", nargs="+")
    out(p, fmt=True)

    p = add("external-import", cmd_external_import, "normalize third-party detector output")
    p.add_argument("--input", required=True)
    p.add_argument("--encoding", choices=("exclusive", "inclusive", "starts-only"), default="starts-only")
    out(p)

    p = add("disasm", cmd_disasm, "linear-sweep listing of an RVA range")
    p.add_argument("--input", required=True)
    p.add_argument("--start", type=_int, required=True)
    p.add_argument("--end", type=_int, required=True)
    out(p)

    p = add("convert", cmd_convert, "convert a ground-truth file to another end encoding")
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--encoding", choices=("exclusive", "inclusive", "starts-only"), required=True)
    out(p)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    if getattr(args, "lookback", 1) < 1:
        parser.error("--lookback must be >= 1")
    run = Run(args)
    try:
        args.func(args, run)
    except UsageError as exc:
        parser.error(str(exc))
    except FuncboundError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
