"""``ssl-am`` command line.

Every command parses and loads all of its inputs before it creates any
output, and writes outputs through a temporary file that is renamed into
place, so a failing command leaves no partial artifacts behind.

Exit codes: 0 success, 2 usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import tempfile
import zipfile
from dataclasses import replace
from pathlib import Path

from . import featpipe as fp
from . import pipeline as pl
from .data import evaluate
from .distopt import DEFAULT_TAU, BmufConfig, GtcConfig, TrainData, WorkerPool, run_training
from .errors import DataError, SslError
from .experiment import synth_rows
from .manifest import read_manifest, row_labels, write_manifest
from .nncore import ModelParams, ModelSpec, checkpoint_bytes, load_checkpoint
from .schedule import (LABELED, UNLABELED, ScheduleConfig, build_plan, build_supervised_plan, load_plan,
                       plan_to_text, relative_error_reduction)
from .synth import SynthSpec, load_spec
from .targetstore import DEFAULT_K, TargetStore

log = logging.getLogger("ssl_am")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

METRICS_COLUMNS = ("sub_epoch", "frames_seen", "heldout_ce", "heldout_frame_error",
                   "relative_error_reduction_vs_baseline")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# output helpers


@contextlib.contextmanager
def _atomic(path):
    """Yield a temporary path next to ``path``; rename it into place on success."""
    path = Path(path)
    if not path.parent.is_dir():
        raise UsageError(f"output directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _write_text(path, text: str) -> None:
    with _atomic(path) as tmp:
        tmp.write_text(text)


def _write_bytes(path, data: bytes) -> None:
    with _atomic(path) as tmp:
        tmp.write_bytes(data)


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} {p} not found")
    return p


def _layers(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad layer list {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("layer sizes must be positive")
    return sizes


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _offsets(text: str) -> tuple[int, ...]:
    if text == "all":
        return pl.ALL_OFFSETS
    if text in ("0", "1", "2"):
        return (int(text),)
    raise argparse.ArgumentTypeError("offset must be 0, 1, 2 or all")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    if args.spec:
        spec = load_spec(_require_file(args.spec, "synth spec"))
    else:
        spec = SynthSpec()
    utts = dict(spec.utterances)
    for split in ("labeled", "unlabeled", "heldout"):
        n = getattr(args, split)
        if n is not None:
            utts[split] = n
    try:
        spec = replace(spec, seed=args.seed, utterances=utts,
                       num_classes=args.classes or spec.num_classes, mode=args.mode or spec.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = synth_rows(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "corpus.json", spec.to_json())
    with _atomic(out / "manifest.tsv") as tmp:
        write_manifest(tmp, rows)
    print(f"wrote {len(rows)} utterances to {out / 'manifest.tsv'}")


def cmd_features_extract(args) -> None:
    manifest = read_manifest(args.input)
    if args.shards < 1:
        raise UsageError("--shards must be >= 1")
    stats_path = Path(args.stats)
    fit = not stats_path.exists()
    if fit:
        stats = pl.fit_stats(manifest.split("labeled"), manifest.base_dir)
    else:
        try:
            stats = fp.load_stats(stats_path)
        except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
            raise DataError(f"{stats_path}: unreadable stats file ({exc})") from None
    shards = pl.shard_rows(manifest.rows, args.shards)
    seqs = [pl.extract_shard(rows, manifest.base_dir, *stats, offsets=args.offset) for rows in shards]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fit:
        with _atomic(stats_path) as tmp:
            fp.save_stats(tmp, *stats)
    for i, shard in enumerate(seqs):
        with _atomic(out / f"shard-{i:03d}.dfft") as tmp:
            fp.write_feature_file(tmp, shard)
    print(f"wrote {sum(map(len, seqs))} sequences in {args.shards} shards to {out}")


def cmd_plan_build(args) -> None:
    try:
        if args.supervised_epochs is not None:
            plan = build_supervised_plan(args.supervised_epochs, args.full_epochs, args.lr0, args.gamma,
                                         args.chunk_len)
        else:
            plan = build_plan(ScheduleConfig(
                args.sub_epochs, args.interleave, args.lr0, args.gamma, args.labeled_boost,
                args.chunked_until, args.chunk_len, args.sub_epoch_frames, not args.no_trailing_labeled,
            ))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_text(args.out, plan_to_text(plan))
    print(f"{args.out}: {len(plan)} phases ({plan.kinds()})")


def _load_inputs(args, need_store: bool):
    """Manifest, features and plan shared by the training commands."""
    manifest = read_manifest(args.manifest)
    feats = pl.load_features(pl.feature_files(args.features))
    try:
        plan = load_plan(_require_file(args.plan, "plan"))
    except ValueError as exc:
        raise DataError(f"{args.plan}: bad plan file ({exc})") from None
    offsets = sorted({p.offset for p in plan.phases if p.kind == LABELED})
    labeled = pl.labeled_examples(manifest, feats, offsets=offsets) if offsets else {}
    heldout = []
    if manifest.split("heldout"):
        heldout = pl.labeled_examples(manifest, feats, "heldout", (0,))[0]
    store = None
    if need_store and any(p.kind == UNLABELED for p in plan.phases):
        if not args.store:
            raise UsageError("the plan has unlabeled phases; --store is required")
        store = TargetStore(_require_file(args.store, "target store"))
    return manifest, feats, plan, labeled, heldout, store


def _protocol(args):
    if args.protocol == "bmuf":
        return BmufConfig(args.block_size, args.block_momentum, args.block_lr, args.nesterov)
    return GtcConfig(args.tau)


def _init_model(args, dim: int, classes: int, bidirectional: bool) -> ModelParams:
    if getattr(args, "init", None):
        model = load_checkpoint(_require_file(args.init, "initial checkpoint"))
        if model.spec.input_dim != dim:
            raise DataError(f"checkpoint expects {model.spec.input_dim}-dim input, features are {dim}-dim")
        return model
    spec = ModelSpec(dim, args.layers, classes, bidirectional, args.lookahead)
    return ModelParams.init(spec, args.seed)


def _num_classes(manifest, args) -> int:
    if args.classes:
        return args.classes
    top = 0
    for r in manifest.split("labeled"):
        top = max(top, int(row_labels(r, manifest.base_dir).max()) + 1)
    return top


def _write_metrics(path, metrics) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for m in metrics:
        w.writerow([m.sub_epoch, m.frames_seen, _fmt(m.heldout_ce), _fmt(m.heldout_frame_error),
                    _fmt(m.relative_error_reduction)])
    _write_text(path, buf.getvalue())


def _baseline_error(args, heldout) -> float | None:
    if args.baseline_error is not None:
        return args.baseline_error
    if args.baseline:
        if not heldout:
            raise DataError("--baseline needs a heldout split to evaluate on")
        base = load_checkpoint(_require_file(args.baseline, "baseline checkpoint"))
        return evaluate(base, heldout).frame_error
    return None


def _train(args, student: bool) -> None:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    manifest, feats, plan, labeled, heldout, store = _load_inputs(args, need_store=student)
    unlabeled = []
    dim = next(iter(feats.values())).frames.shape[1]
    if store is not None:
        classes = store.num_outputs
        if args.classes and args.classes != classes:
            raise DataError(f"store has D={classes}, --classes is {args.classes}")
        unlabeled = pl.unlabeled_examples(manifest, feats, store, num_outputs=classes)
    else:
        classes = _num_classes(manifest, args)
    model = _init_model(args, dim, classes, bidirectional=not student)
    if model.spec.num_outputs != classes:
        raise DataError(f"model has {model.spec.num_outputs} outputs, data has {classes}")
    baseline = _baseline_error(args, heldout)
    data = TrainData(labeled, unlabeled, heldout)
    with WorkerPool(model, args.workers, seed=args.seed, threaded=args.threaded) as pool:
        final, metrics = run_training(pool, plan, _protocol(args), data, batch_size=args.batch_size,
                                      seed=args.seed, baseline_error=baseline)
    if store is not None:
        store.close()
    _write_bytes(args.out, checkpoint_bytes(final))
    if args.metrics_out:
        _write_metrics(args.metrics_out, metrics)
    if metrics:
        last = metrics[-1]
        print(f"{args.out}: heldout frame error {last.heldout_frame_error:.4f}, ce {last.heldout_ce:.4f}")
    else:
        print(f"wrote {args.out}")


def cmd_teacher_train(args) -> None:
    _train(args, student=False)


def cmd_student_train(args) -> None:
    _train(args, student=True)


def cmd_targets_generate(args) -> None:
    teacher = load_checkpoint(_require_file(args.teacher, "teacher checkpoint"))
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    feats = pl.load_features(pl.feature_files(args.features))
    seqs = [s for s in feats.values() if s.offset in args.offset]
    if args.manifest:
        keep = {r.utterance_id for r in read_manifest(args.manifest).split(args.split)}
        seqs = [s for s in seqs if s.utterance_id in keep]
    if not seqs:
        raise DataError("no feature sequences selected")
    for s in seqs:
        if s.frames.shape[1] != teacher.spec.input_dim:
            raise DataError(f"{s.utterance_id}: {s.frames.shape[1]}-dim features, teacher expects "
                            f"{teacher.spec.input_dim}")
    with _atomic(args.out) as tmp:
        n = pl.write_targets(tmp, teacher, seqs, args.k)
    print(f"wrote top-{min(args.k, teacher.spec.num_outputs)} targets for {n} sequences to {args.out}")


def cmd_targets_inspect(args) -> None:
    with TargetStore(_require_file(args.store, "target store")) as store:
        print(f"store {args.store}: D={store.num_outputs} k={store.k} utterances={len(store)}")
        if args.utt is None:
            for uid in store.ids():
                print(uid)
            return
        idx, val = store.read(args.utt)
        print(f"{args.utt}: {idx.shape[0]} frames")
        for t in range(min(idx.shape[0], args.frames)):
            pairs = " ".join(f"{int(i)}:{float(v):.4g}" for i, v in zip(idx[t], val[t]))
            print(f"  {t:5d}  {pairs}")


def cmd_eval(args) -> None:
    manifest = read_manifest(args.manifest)
    rows = manifest.split(args.split)
    if not rows:
        raise DataError(f"split {args.split!r} is empty")
    if not all(r.has_labels for r in rows):
        raise DataError(f"split {args.split!r} has no labels; cannot evaluate")
    model = load_checkpoint(_require_file(args.model, "checkpoint"))
    base = load_checkpoint(_require_file(args.baseline, "baseline checkpoint")) if args.baseline else None
    feats = pl.load_features(pl.feature_files(args.features))
    examples = pl.labeled_examples(manifest, feats, args.split, (0,))[0]
    res = evaluate(model, examples)
    base_res = evaluate(base, examples) if base is not None else None

    def rer(b_err, m_err):
        if b_err is None:
            return None
        return relative_error_reduction(b_err, m_err) if b_err > 0 else 0.0

    report = {
        "split": args.split, "frames": res.frames, "frame_error": res.frame_error, "ce": res.ce,
        "relative_error_reduction": rer(base_res and base_res.frame_error, res.frame_error),
        "by_condition": {},
    }
    for cond, (err, n) in res.by_condition.items():
        entry = {"frames": n, "frame_error": err / n}
        if base_res is not None:
            b_err, b_n = base_res.by_condition[cond]
            entry["relative_error_reduction"] = rer(b_err / b_n, err / n)
        report["by_condition"][cond] = entry
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write_text(args.out, text)
    lines = [f"{'condition':<12} {'frames':>8} {'frame_err':>10} {'rel_red_%':>10}"]
    for cond, e in [("overall", {"frames": res.frames, "frame_error": res.frame_error,
                                 "relative_error_reduction": report["relative_error_reduction"]})] + \
            sorted(report["by_condition"].items()):
        r = e.get("relative_error_reduction")
        lines.append(f"{cond or '-':<12} {e['frames']:>8d} {e['frame_error']:>10.4f} "
                     f"{'' if r is None else f'{r:.2f}':>10}")
    print("\n".join(lines))


def read_metrics(path) -> list[dict]:
    p = _require_file(path, "metrics CSV")
    with open(p, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise DataError(f"{p}: not a metrics CSV (header {reader.fieldnames})")
        return list(reader)


def cmd_report(args) -> None:
    runs = []
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        runs.append((name, read_metrics(path)))
    if len({n for n, _ in runs}) != len(runs):
        raise UsageError("run names must be distinct; use name=path")
    sub_epochs = sorted({int(r["sub_epoch"]) for _, rows in runs for r in rows})
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(["sub_epoch"] + [f"{n}:{args.value}" for n, _ in runs])
    column = {"reduction": "relative_error_reduction_vs_baseline", "error": "heldout_frame_error",
              "ce": "heldout_ce"}[args.value]
    for s in sub_epochs:
        row = [str(s)]
        for _, rows in runs:
            hit = [r[column] for r in rows if int(r["sub_epoch"]) == s]
            row.append(f"{float(hit[-1]):.4f}" if hit and hit[-1] != "" else "")
        w.writerow(row)
    text = buf.getvalue()
    if args.out:
        _write_text(args.out, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser


def _add_train_args(p: argparse.ArgumentParser, student: bool) -> None:
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, nargs="+", help="feature files or directories")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=_layers, default=(64,), help="comma-separated LSTM widths")
    p.add_argument("--lookahead", type=int, default=3 if student else 0)
    p.add_argument("--classes", type=int, default=0, help="output classes (default: from labels or store)")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--protocol", choices=("gtc", "bmuf"), default="gtc")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threaded", action="store_true", help="run workers on threads (same result)")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--block-momentum", type=float, default=None)
    p.add_argument("--block-lr", type=float, default=1.0)
    p.add_argument("--nesterov", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--metrics-out")
    p.add_argument("--baseline", help="checkpoint whose heldout error is the reduction baseline")
    p.add_argument("--baseline-error", type=float, default=None)
    if student:
        p.add_argument("--store", help="target store covering the unlabeled split")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssl-am", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus and its manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="SynthSpec JSON to start from")
    p.add_argument("--labeled", type=int)
    p.add_argument("--unlabeled", type=int)
    p.add_argument("--heldout", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--mode", choices=("audio", "features"))
    p.set_defaults(func=cmd_synth)

    feats = sub.add_parser("features", help="feature extraction").add_subparsers(dest="action", required=True)
    p = feats.add_parser("extract")
    p.add_argument("--in", dest="input", required=True, help="manifest")
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--offset", type=_offsets, default=pl.ALL_OFFSETS, metavar="{0,1,2,all}")
    p.add_argument("--stats", required=True, help="normalization stats; fitted on the labeled split if absent")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_features_extract)

    plan = sub.add_parser("plan", help="training plans").add_subparsers(dest="action", required=True)
    p = plan.add_parser("build")
    p.add_argument("--sub-epochs", type=int, default=4)
    p.add_argument("--interleave", type=int, default=1)
    p.add_argument("--lr0", type=float, default=0.01)
    p.add_argument("--gamma", type=float, default=0.8)
    p.add_argument("--labeled-boost", type=float, default=1.5)
    p.add_argument("--chunked-until", type=int, default=0)
    p.add_argument("--chunk-len", type=int, default=32)
    p.add_argument("--sub-epoch-frames", type=int, default=0)
    p.add_argument("--no-trailing-labeled", action="store_true")
    p.add_argument("--supervised-epochs", type=int, help="build a labeled-only plan of this many chunked epochs")
    p.add_argument("--full-epochs", type=int, default=0, help="full-sequence epochs after the chunked ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_build)

    teacher = sub.add_parser("teacher", help="teacher training").add_subparsers(dest="action", required=True)
    p = teacher.add_parser("train")
    _add_train_args(p, student=False)
    p.set_defaults(func=cmd_teacher_train)

    tg = sub.add_parser("targets", help="top-k target stores").add_subparsers(dest="action", required=True)
    p = tg.add_parser("generate")
    p.add_argument("--teacher", required=True)
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--offset", type=_offsets, default=pl.ALL_OFFSETS, metavar="{0,1,2,all}")
    p.add_argument("--manifest", help="restrict to one split of this manifest")
    p.add_argument("--split", default="unlabeled")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_targets_generate)
    p = tg.add_parser("inspect")
    p.add_argument("--store", required=True)
    p.add_argument("--utt")
    p.add_argument("--frames", type=int, default=10)
    p.set_defaults(func=cmd_targets_inspect)

    student = sub.add_parser("student", help="student training").add_subparsers(dest="action", required=True)
    for parent, name in ((student, "train"), (sub, "train")):
        p = parent.add_parser(name)
        _add_train_args(p, student=True)
        p.set_defaults(func=cmd_student_train)

    p = sub.add_parser("eval", help="frame error and CE by condition")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, nargs="+")
    p.add_argument("--split", default="heldout")
    p.add_argument("--baseline")
    p.add_argument("--out", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge metrics CSVs into a per-sub-epoch table")
    p.add_argument("--metrics", required=True, nargs="+", help="CSV paths, optionally name=path")
    p.add_argument("--value", choices=("reduction", "error", "ce"), default="reduction")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ssl-am: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SslError, OSError) as exc:
        print(f"ssl-am: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"ssl-am: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
