"""Command-line entry point: synth, degrade, phantoms, train, eval, score, select, benchmark."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import shutil
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .degrade import (KINDS, DegradationError, DegradationSpec, SynthesisConfig,
                      apply_degradation,
                      bin_counts, read_dataset, resample_balanced, synthesize_dataset,
                      write_dataset)
from .losses import LossConfig
from .metrics import MetricSample, evaluate
from .model import EmbeddingProvider, HeadConfig, QualityHead, load_text_embeddings, \
    toy_text_embeddings
from .volume_io import DEFAULT_MARGIN, SLICE_SIZE, VolumeFormatError, load_entry, load_manifest, \
    write_manifest, write_raw_json

log = logging.getLogger("labelqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DEFAULT_THRESHOLD = 0.8


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# output bookkeeping ----------------------------------------------------------------

class Outputs:
    """Tracks files written by a command so a failed run leaves nothing behind."""

    def __init__(self, root: Path, config: dict):
        self.root = root
        self.config = config
        self.created: list[Path] = []
        self._root_existed = root.exists()

    def path(self, name: str) -> Path:
        p = self.root / name
        if p not in self.created:
            self.created.append(p)
        return p

    def open(self):
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def rollback(self):
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        if not self._root_existed and self.root.exists() and not any(self.root.iterdir()):
            self.root.rmdir()

    def finish(self, command: str):
        """Write ``run_<command>.json``: the config plus a digest of every output."""
        files = {}
        for p in self.created:
            for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
                if f.is_file():
                    files[str(f.relative_to(self.root))] = hashlib.sha256(f.read_bytes()).hexdigest()
        run = self.path(f"run_{command}.json")
        run.write_text(json.dumps({"command": command, "version": __version__,
                                   "config": self.config, "outputs": files},
                                  indent=1, sort_keys=True))


def _jsonable(ns: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(ns).items()):
        # where outputs go does not change them
        if k in ("func", "output_dir", "verbose"):
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# providers and heads ----------------------------------------------------------------

def _classes_from(obj) -> dict[int, str]:
    return {int(k): str(v) for k, v in (obj or {}).items()}


def _provider(args, classes: dict[int, str]) -> EmbeddingProvider:
    if getattr(args, "text_embeddings", None):
        text = load_text_embeddings(args.text_embeddings, classes)
    else:
        text = toy_text_embeddings(classes, seed=args.seed)
    return EmbeddingProvider("toy_encoder", text=text, seed=args.seed)


def _load_head(path):
    try:
        return QualityHead.load(path)
    except FileNotFoundError:
        raise DataError(f"head checkpoint not found: {path}") from None


def _head_context(head, args):
    """Provider and ablation flags recorded in a checkpoint."""
    from .training import AblationFlags
    meta = getattr(head, "meta", {}) or {}
    classes = _classes_from(meta.get("classes"))
    ns = argparse.Namespace(seed=int(meta.get("encoder_seed", args.seed)),
                            text_embeddings=getattr(args, "text_embeddings", None)
                            or meta.get("text_embeddings"))
    flags = AblationFlags(**meta["flags"]) if "flags" in meta else AblationFlags()
    return _provider(ns, classes), flags, classes


def _predictor(args):
    from .scoring import make_predictor, oracle_predictor
    if args.oracle:
        return oracle_predictor
    if not args.head:
        raise UsageError("give --head or --oracle")
    head = _load_head(args.head)
    provider, flags, _ = _head_context(head, args)
    prep = head.meta.get("preprocess", {})
    return make_predictor(head, provider, flags, margin=int(prep.get("margin", DEFAULT_MARGIN)),
                          size=int(prep.get("size", SLICE_SIZE)))


# commands ---------------------------------------------------------------------------

def cmd_phantoms(args, out: Outputs):
    """Synthetic CT-like volumes with an optional degraded candidate, plus a manifest."""
    from .synthetic import DEFAULT_CLASSES, make_phantom
    classes = _classes_from(args.classes) if args.classes else DEFAULT_CLASSES
    vol_dir = out.path("volumes")
    vol_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(args.n):
        v = make_phantom(f"phantom{i:03d}", tuple(args.shape), classes, seed=args.seed * 100_003 + i)
        if args.degrade:
            kind, sev = args.degrade
            v.candidate = _degrade_labels(v.ground_truth, kind, float(sev), args.seed, v.id)
        paths.append(write_raw_json(v, vol_dir / f"{v.id}.json"))
    write_manifest(paths, out.path("manifest.json"))
    print(f"wrote {args.n} volumes to {vol_dir}")


def _degrade_labels(labels, kind, severity, seed, vid, class_ids=None):
    from .degrade import cell_seed
    out = np.zeros_like(labels)
    for cid in class_ids or [int(c) for c in np.unique(labels) if c != 0]:
        spec = DegradationSpec(kind, severity, cell_seed(seed, vid, cid, kind, severity))
        m = labels == cid
        if not m.any():
            continue
        out[apply_degradation(m, spec) & (out == 0)] = cid
    return out


def cmd_degrade(args, out: Outputs):
    """Write a copy of each volume whose candidate is the degraded ground truth."""
    entries = load_manifest(args.manifest)
    vol_dir = out.path("volumes")
    vol_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for e in entries:
        v = load_entry(e)
        if v.ground_truth is None:
            raise DataError(f"{v.id}: ground truth required")
        v.candidate = _degrade_labels(v.ground_truth, args.kind, args.severity, args.seed, v.id,
                                      args.class_ids)
        paths.append(write_raw_json(v, vol_dir / f"{v.id}.json"))
    write_manifest(paths, out.path("manifest.json"))
    print(f"degraded {len(paths)} volumes ({args.kind} {args.severity})")


def _synth_config(args) -> SynthesisConfig:
    kw = {"seed": args.seed}
    for k in ("severity_grid", "target_bins", "samples_per_bin", "margin", "size"):
        if getattr(args, k, None) is not None:
            kw[k] = getattr(args, k)
    return SynthesisConfig(**kw)


def cmd_synth(args, out: Outputs):
    cfg = _synth_config(args)
    if args.manifest:
        volumes = [load_entry(e) for e in load_manifest(args.manifest)]
    elif args.phantoms:
        from .synthetic import make_phantoms
        volumes = make_phantoms(args.phantoms, tuple(args.shape), seed=args.seed)
    else:
        raise UsageError("give --manifest or --phantoms")
    pairs = synthesize_dataset(volumes, cfg)
    n_raw = len(pairs)
    if args.resample:
        pairs = resample_balanced(pairs, cfg)
    classes = {}
    for v in volumes:
        classes.update(v.classes)
    ds = out.path("dataset")
    write_dataset(pairs, ds, extra={"config": asdict(cfg), "resample": bool(args.resample),
                                    "classes": {str(k): v for k, v in sorted(classes.items())}})
    hist = bin_counts([p.true_dsc for p in pairs], cfg.target_bins).tolist()
    out.path("synth_log.json").write_text(json.dumps({
        "config": asdict(cfg), "volumes": [v.id for v in volumes], "specs": cfg.specs(),
        "n_generated": n_raw, "n_written": len(pairs), "dsc_histogram": hist},
        indent=1, sort_keys=True))
    print(f"wrote {len(pairs)} slice pairs ({n_raw} generated) to {ds}")


def _training_data(args):
    """Encoded train/val sets, provider and class table from a dataset dir or the toy task."""
    from .synthetic import DEFAULT_CLASSES, toy_task
    from .training import encode_pairs
    if args.data:
        index_path = Path(args.data) / "index.json"
        if not index_path.exists():
            raise DataError(f"no dataset index at {index_path}")
        index = json.loads(index_path.read_text())
        classes = _classes_from(index.get("classes"))
        synth_cfg = index.get("config", {})
        prep = {"margin": int(synth_cfg.get("margin", DEFAULT_MARGIN)),
                "size": int(synth_cfg.get("size", SLICE_SIZE))}
        pairs = read_dataset(args.data)
        for p in pairs:
            classes.setdefault(p.class_id, f"class_{p.class_id}")
        provider = _provider(args, classes)
        return encode_pairs(pairs, provider), None, provider, classes, prep
    classes = dict(DEFAULT_CLASSES)
    provider = _provider(args, classes)
    ids = sorted(classes)
    train = toy_task(args.toy, provider, seed=args.seed * 2 + 1, class_ids=ids,
                     class_dependent=args.toy_class_dependent, skew=args.toy_skew)
    val = toy_task(max(1, args.toy // 4), provider, seed=args.seed * 2 + 2, class_ids=ids,
                   class_dependent=args.toy_class_dependent)
    return train, val, provider, classes, {"margin": DEFAULT_MARGIN, "size": SLICE_SIZE}


def cmd_train(args, out: Outputs):
    from .training import (TABLE1_GRID, AblationFlags, TrainConfig, run_ablation, train,
                           write_ablation_csv, write_log_csv)
    if not args.data and not args.toy:
        raise UsageError("give --data or --toy N")
    data, val, provider, classes, prep = _training_data(args)
    flags = AblationFlags(not args.no_text, args.onehot, not args.no_rank, args.resample)
    head_cfg = HeadConfig(hidden_dim=args.hidden_dim, attn_hidden=args.attn_hidden)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.learning_rate, weight_decay=args.weight_decay,
                      seed=args.seed, flags=flags, head=head_cfg)
    loss = LossConfig(lam=args.lam, margin_xi=args.margin)
    if args.preset == "table1":
        from .training import split_by_volume
        test = val
        if test is None:
            data, test = split_by_volume(data, 0.2, args.seed)
        rows = run_ablation(data, provider, TABLE1_GRID, test, cfg, loss)
        write_ablation_csv(rows, out.path("ablation.csv"))
        print(_table(rows, ("condition", "opt_pair", "resample", "lcc", "srocc", "map5",
                            "map10")))
        return
    res = train(data, provider, cfg, loss, val=val)
    meta = {"classes": {str(k): v for k, v in sorted(classes.items())},
            "encoder_seed": args.seed, "flags": asdict(flags),
            "text_embeddings": args.text_embeddings, "best_epoch": res.best_epoch,
            "preprocess": prep,
            "train_config": {**asdict(cfg), "loss": asdict(loss)}}
    res.head.save(out.path("head.bin"), extra=meta)
    write_log_csv(res.log, out.path("train_log.csv"))
    print(f"best epoch {res.best_epoch}: val srocc {_fmt(res.best_val['srocc'])}")


def cmd_eval(args, out: Outputs):
    """Metrics from a table of (predicted, actual[, class_id]) rows, or a head on a dataset."""
    samples = []
    if args.table:
        with open(args.table, newline="") as fh:
            for r in csv.DictReader(fh):
                try:
                    samples.append(MetricSample(float(r["predicted"]), float(r["actual"]),
                                                int(r.get("class_id") or 0)))
                except (KeyError, ValueError) as exc:
                    raise DataError(f"{args.table}: bad row {r}: {exc}") from None
    elif args.data and args.head:
        from .training import ConditionTable, encode_pairs, predict
        head = _load_head(args.head)
        provider, flags, _ = _head_context(head, args)
        pairs = read_dataset(args.data)
        data = encode_pairs(pairs, provider)
        pred = predict(head, data, ConditionTable(provider, data.class_ids, flags))
        samples = [MetricSample(float(p), float(a), int(c))
                   for p, a, c in zip(pred, data.targets, data.class_ids)]
    else:
        raise UsageError("give --table, or --data with --head")
    if not samples:
        raise DataError("no samples to evaluate")
    m = evaluate(samples)
    row = {"n": len(samples), **m}
    _write_csv(out.path("metrics.csv"), ("n", "lcc", "srocc", "map5", "map10"), [row])
    print(_table([row], ("n", "lcc", "srocc", "map5", "map10")))


def _score(args, manifest):
    from .scoring import score_dataset
    predictor = _predictor(args)
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        entries = load_manifest(manifest)
        with ProcessPoolExecutor(args.jobs) as ex:
            parts = ex.map(score_dataset, [[e] for e in entries], [predictor] * len(entries),
                           [args.n_slices] * len(entries))
            records = [r for p in parts for r in p]
        records.sort(key=lambda r: (r.volume_id, r.class_id))
        return records
    return score_dataset(manifest, predictor, args.n_slices)


def cmd_score(args, out: Outputs):
    from .scoring import write_scores_csv, write_scores_json
    records = _score(args, args.manifest)
    write_scores_csv(records, out.path("scores.csv"))
    write_scores_json(records, out.path("scores.json"), out.config)
    n_err = sum(r.status == "error" for r in records)
    print(f"scored {sum(r.status == 'ok' for r in records)} labels ({n_err} volume errors)")


def _pool_from_file(path):
    from .selection import CandidatePool, PoolRecord
    p = Path(path)
    if p.suffix == ".json":
        payload = json.loads(p.read_text())
        recs = payload["records"] if isinstance(payload, dict) else payload
        if recs and "predicted_dsc" in recs[0]:
            return _pool_from_scores(recs)
        return CandidatePool([PoolRecord(str(r["volume_id"]), dict(r.get("scores", {})),
                                         true_dsc=r.get("true_dsc")) for r in recs])
    with open(p, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and "predicted_dsc" in rows[0]:
        return _pool_from_scores(rows)
    recs = []
    for r in rows:
        vid = r.pop("volume_id")
        t = r.pop("true_dsc", "")
        recs.append(PoolRecord(vid, {k: (float(v) if v != "" else None) for k, v in r.items()},
                               true_dsc=float(t) if t else None))
    return CandidatePool(recs)


def _pool_from_scores(rows):
    """Per-volume segae score: uniform mean of the per-class predicted DSC."""
    from .selection import CandidatePool, PoolRecord
    per = {}
    for r in rows:
        p = r.get("predicted_dsc")
        if p in (None, "") or r.get("status", "ok") != "ok":
            continue
        per.setdefault(str(r["volume_id"]), {})[int(r["class_id"])] = float(p)
    return CandidatePool([PoolRecord(v, {"segae": float(np.mean(list(c.values())))},
                                     {"segae": c}) for v, c in sorted(per.items())])


def cmd_select(args, out: Outputs):
    from .selection import select_active, select_semisup, write_selection_json
    pool = _pool_from_file(args.pool)
    if args.budget > len(pool):
        raise UsageError(f"budget {args.budget} exceeds pool size {len(pool)}")
    fn = select_active if args.mode == "active" else select_semisup
    ids = fn(pool, args.method, args.budget, seed=args.seed)
    write_selection_json(ids, pool, args.method, args.budget, out.path("selection.json"),
                         out.config)
    print("\n".join(ids))


# benchmark report ---------------------------------------------------------------------

@dataclass
class QualityReport:
    dataset: str
    per_class: dict[str, float]
    overall_mean: float
    fraction_below: float
    threshold: float
    n: int

    def rows(self) -> list[dict]:
        rows = [{"dataset": self.dataset, "class": c, "mean_dsc": m} for c, m in
                self.per_class.items()]
        rows.append({"dataset": self.dataset, "class": "overall", "mean_dsc": self.overall_mean,
                     "frac_below": self.fraction_below, "n": self.n})
        return rows


def build_report(records, dataset: str, threshold: float = DEFAULT_THRESHOLD) -> QualityReport:
    """Per-class means, overall mean and low-quality fraction over defined scores."""
    ok = [r for r in records if r.status == "ok" and r.predicted_dsc is not None]
    if not ok:
        raise DataError("no scored labels to report")
    by_class = {}
    for r in ok:
        by_class.setdefault((r.class_id, r.class_name or f"class_{r.class_id}"), []).append(
            r.predicted_dsc)
    per_class = {name: float(np.mean(v)) for (_, name), v in sorted(by_class.items())}
    vals = np.array([r.predicted_dsc for r in ok])
    below = int(np.sum(vals < threshold))
    return QualityReport(dataset, per_class, float(vals.mean()), below / len(vals), threshold,
                         len(vals))


def render_report(rep: QualityReport) -> str:
    rows = [(c, f"{m:.3f}", "") for c, m in rep.per_class.items()]
    rows.append(("overall", f"{rep.overall_mean:.3f}",
                 f"{100 * rep.fraction_below:.1f}%"))
    head = ("class", "mean DSC", f"DSC<{rep.threshold:g}")
    w = [max(len(str(r[i])) for r in rows + [head]) for i in range(3)]
    lines = [f"{rep.dataset}  (n={rep.n})",
             "  ".join(h.ljust(w[i]) if i == 0 else h.rjust(w[i]) for i, h in enumerate(head))]
    lines.append("-" * len(lines[1]))
    for r in rows:
        lines.append("  ".join(str(v).ljust(w[i]) if i == 0 else str(v).rjust(w[i])
                               for i, v in enumerate(r)))
    return "\n".join(lines)


def cmd_benchmark(args, out: Outputs):
    from .scoring import read_scores
    if args.scores:
        records = read_scores(args.scores)
    elif args.manifest:
        if not load_manifest(args.manifest):
            raise DataError("empty manifest")
        records = _score(args, args.manifest)
    else:
        raise UsageError("give --manifest or --scores")
    name = args.dataset or Path(args.manifest or args.scores).stem
    rep = build_report(records, name, args.threshold)
    _write_csv(out.path("report.csv"), ("dataset", "class", "mean_dsc", "frac_below", "n"),
               rep.rows())
    text = render_report(rep)
    out.path("report.txt").write_text(text + "\n")
    print(text)


def _table(rows, cols) -> str:
    cells = [[c for c in cols]] + [[("-" if r.get(c) is None else f"{r[c]:.4f}"
                                      if isinstance(r[c], float) else str(r[c])) for c in cols]
                                   for r in rows]
    w = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(v.rjust(w[i]) for i, v in enumerate(row)) for row in cells)


# parser -------------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", type=Path, help="JSON file of option defaults")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--output-dir", type=Path, default=Path("out"))
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="labelqa", description="Label quality assessment for segmentation masks.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        subs[name] = sp
        return sp

    sp = add("phantoms", cmd_phantoms, "write synthetic CT-like volumes and a manifest")
    sp.add_argument("--n", type=int, default=4)
    sp.add_argument("--shape", type=int, nargs=3, default=[48, 48, 32])
    sp.add_argument("--degrade", nargs=2, metavar=("KIND", "SEVERITY"))
    sp.add_argument("--classes", type=json.loads, help="JSON object id -> name")

    sp = add("degrade", cmd_degrade, "degrade ground truth into candidate labels")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--kind", required=True, choices=KINDS)
    sp.add_argument("--severity", type=float, required=True)
    sp.add_argument("--class-ids", type=int, nargs="*")

    sp = add("synth", cmd_synth, "synthesize a DSC-labelled slice dataset")
    sp.add_argument("--manifest")
    sp.add_argument("--phantoms", type=int, default=0, help="use N built-in phantoms")
    sp.add_argument("--shape", type=int, nargs=3, default=[48, 48, 32])
    sp.add_argument("--resample", action="store_true")
    sp.add_argument("--severity-grid", type=json.loads, help="JSON object kind -> severities")
    sp.add_argument("--target-bins", type=int)
    sp.add_argument("--samples-per-bin", type=int)
    sp.add_argument("--margin", type=int)
    sp.add_argument("--size", type=int)

    sp = add("train", cmd_train, "train a quality head (or the ablation preset)")
    sp.add_argument("--data", help="dataset directory written by synth")
    sp.add_argument("--toy", type=int, default=0, help="train on N toy-task samples instead")
    sp.add_argument("--toy-class-dependent", action="store_true")
    sp.add_argument("--toy-skew", type=float, default=0.0)
    sp.add_argument("--text-embeddings")
    sp.add_argument("--preset", choices=["table1"])
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=128)
    sp.add_argument("--learning-rate", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=0.01)
    sp.add_argument("--hidden-dim", type=int, default=128)
    sp.add_argument("--attn-hidden", type=int, default=256)
    sp.add_argument("--lam", type=float, default=1.0)
    sp.add_argument("--margin", type=float, default=0.05)
    sp.add_argument("--no-text", action="store_true")
    sp.add_argument("--onehot", action="store_true")
    sp.add_argument("--no-rank", action="store_true")
    sp.add_argument("--resample", action="store_true")

    sp = add("eval", cmd_eval, "LCC/SROCC/MAP@k of predictions")
    sp.add_argument("--table", help="CSV with predicted, actual[, class_id]")
    sp.add_argument("--data")
    sp.add_argument("--head")
    sp.add_argument("--text-embeddings")

    for name, func, help in (("score", cmd_score, "score 3D candidate labels"),
                             ("benchmark", cmd_benchmark, "dataset quality report")):
        sp = add(name, func, help)
        sp.add_argument("--manifest", required=name == "score")
        sp.add_argument("--head")
        sp.add_argument("--oracle", action="store_true",
                        help="use per-slice true DSC (needs ground truth)")
        sp.add_argument("--text-embeddings")
        sp.add_argument("--n-slices", type=int, default=10)
    subs["benchmark"].add_argument("--scores", help="reuse a score table")
    subs["benchmark"].add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    subs["benchmark"].add_argument("--dataset")

    sp = add("select", cmd_select, "pick labels for correction or admission")
    sp.add_argument("--pool", required=True, help="score table or pool CSV/JSON")
    sp.add_argument("--method", default="segae",
                    choices=["segae", "entropy", "mc_variance", "random", "oracle"])
    sp.add_argument("--mode", default="semisup", choices=["active", "semisup"])
    sp.add_argument("--budget", type=int, required=True)
    return p, subs


def _apply_config(argv, parser, subs):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        cfg = json.loads(known.config.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise DataError("config must be a JSON object")
    cmd = next((a for a in argv if a in subs), None)
    if cmd is None:
        return
    dests = {a.dest for a in subs[cmd]._actions}
    unknown = sorted(k for k in cfg if k.replace("-", "_") not in dests)
    if unknown:
        raise UsageError(f"unknown config keys for {cmd}: {unknown}")
    subs[cmd].set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        _apply_config(argv, parser, subs)
    except UsageError as exc:
        print(f"labelqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"labelqa: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("labelqa: error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    out = Outputs(args.output_dir, _jsonable(args))
    try:
        out.open()
        args.func(args, out)
        out.finish(args.command)
    except UsageError as exc:
        out.rollback()
        print(f"labelqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, VolumeFormatError, DegradationError, FileNotFoundError, KeyError,
            ValueError, json.JSONDecodeError, OSError) as exc:
        out.rollback()
        print(f"labelqa {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        out.rollback()
        log.exception("internal error")
        print(f"labelqa {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
