"""Command-line entry point.

Subcommands mirror the pipeline stages: phantom -> preprocess -> split ->
train (x2) -> predict -> ensemble -> eval -> correlate, plus gradcheck.
Exit codes: 0 success, 1 validation error (bad flags, configs, inputs),
2 runtime failure. Every result lands in a file; stdout only summarizes.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from . import correlation, metrics, models, phantom, preprocess, trainer, volume_io
from .errors import CytenError, ValidationError
from .tensor import Tensor, grad_check

SCORE_HEADER = ["subject_id", "session_id", "path", "score"]
NET_MODALITY = {"dwinet": "DWI", "adcnet": "ADC"}

CONFIG_SECTIONS = {
    "phantom": phantom.PhantomParams,
    "preprocess": preprocess.PreprocessConfig,
    "split": trainer.SplitSpec,
    "train": trainer.TrainConfig,
    "ensemble": models.EnsembleConfig,
    "dwinet": models.DwiNetConfig,
    "adcnet": models.AdcNetConfig,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _dataclass_from_dict(cls, data, section):
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValidationError("unknown config key", f"section {section!r}: unknown keys {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ValidationError("bad config", f"section {section!r}: {exc}") from exc


def load_run_config(path):
    """Schema-validated run configuration; unknown keys are rejected."""
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError("bad config", f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError("bad config", f"{path}: top level must be an object")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise ValidationError("unknown config key", f"{path}: unknown sections {unknown}")
    out = {}
    for section, payload in doc.items():
        if not isinstance(payload, dict):
            raise ValidationError("bad config", f"{path}: section {section!r} must be an object")
        out[section] = _dataclass_from_dict(CONFIG_SECTIONS[section], payload, section)
    return out


def _network_config(kind, run_config, profile):
    if kind in run_config:
        return run_config[kind]
    cls = models.DwiNetConfig if kind == "dwinet" else models.AdcNetConfig
    return cls.dev() if profile == "dev" else cls()


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scores(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in rows:
            writer.writerow([r["subject_id"], r["session_id"], r["path"], repr(float(r["score"]))])


def read_scores(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValidationError("bad header", f"{path}: score header must be {','.join(SCORE_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValidationError("bad row", f"{path} line {lineno}: expected 4 cells")
            try:
                score = float(row[3])
            except ValueError:
                raise ValidationError("bad row", f"{path} line {lineno}: score is not a number") from None
            rows.append({"subject_id": row[0], "session_id": row[1], "path": row[2], "score": score})
    return rows


def _session_labels(manifest):
    """(subject, session) -> record labels, validated for consistency."""
    out = {}
    for r in manifest.records:
        key = (r.subject_id, r.session_id)
        labels = (r.ce_label, r.aht_label, r.fss_score)
        if key in out and out[key] != labels:
            raise ValidationError("label conflict", f"records of session {key} disagree on labels")
        out[key] = labels
    return out


def _parse_dims(text):
    try:
        dims = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise ValidationError("bad dims", f"dims must be D,H,W integers, got {text!r}") from None
    if len(dims) != 3:
        raise ValidationError("bad dims", f"dims must have three components, got {text!r}")
    return dims


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args):
    run_config = load_run_config(args.config)
    if "phantom" in run_config:
        params = run_config["phantom"]
    else:
        params = phantom.PhantomParams(
            dims=_parse_dims(args.dims),
            spacing_mm=(args.spacing, args.spacing, args.spacing),
            lesion_prevalence=args.prevalence,
            dwi_noise_sigma=args.noise_dwi,
            adc_noise_sigma=args.noise_adc,
        )
    _, summary = phantom.generate_cohort(args.n, params, args.seed, args.out)
    print(f"phantom cohort: {summary['n_subjects']} subjects ({summary['n_positive']} positive), "
          f"{summary['n_records']} records -> {args.out}")
    return 0


def _mask_sibling(path):
    base, ext = os.path.splitext(path)
    return f"{base}.mask{ext}"


def cmd_preprocess(args):
    run_config = load_run_config(args.config)
    if "preprocess" in run_config:
        cfg = run_config["preprocess"]
    else:
        cfg = preprocess.PreprocessConfig(target_spacing_mm=args.spacing,
                                          target_dims=_parse_dims(args.dims),
                                          mask_mode=args.mask)
    manifest = volume_io.read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_records = []
    for r in manifest.records:
        src = r.path if os.path.isabs(r.path) else os.path.join(base_dir, r.path)
        vol = volume_io.read_mvol(src)
        mask = None
        if cfg.mask_mode == "provided":
            mask_path = _mask_sibling(src)
            if not os.path.exists(mask_path):
                raise ValidationError("missing mask", f"mask_mode=provided but {mask_path} does not exist")
            mask = volume_io.read_mvol(mask_path)
        processed, _ = preprocess.preprocess_volume(vol, cfg, mask_volume=mask)
        name = os.path.basename(r.path)
        volume_io.write_mvol(processed, os.path.join(args.out, name))
        out_records.append(volume_io.ScanRecord(subject_id=r.subject_id, session_id=r.session_id,
                                                modality=r.modality, path=name, ce_label=r.ce_label,
                                                aht_label=r.aht_label, fss_score=r.fss_score))
    volume_io.write_manifest(volume_io.CohortManifest(records=out_records),
                             os.path.join(args.out, "manifest.csv"))
    print(f"preprocessed {len(out_records)} volumes -> {args.out}")
    return 0


def cmd_split(args):
    run_config = load_run_config(args.config)
    spec = run_config.get("split") or trainer.SplitSpec(seed=args.seed)
    if "split" not in run_config:
        spec = trainer.SplitSpec(seed=args.seed, folds=args.folds)
    manifest = volume_io.read_manifest(args.manifest)
    split = trainer.split_cohort(manifest, spec, args.fold)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(split.to_json())
    sizes = {p: len(split.subjects(p)) for p in ("train", "val", "test")}
    print(f"fold {args.fold}: {sizes} -> {args.out}")
    return 0


def cmd_train(args):
    run_config = load_run_config(args.config)
    tcfg = run_config.get("train", trainer.TrainConfig(dev=args.profile == "dev"))
    if args.seed is not None:
        tcfg.seed = args.seed
    if args.epochs is not None:
        tcfg.epochs = args.epochs
        tcfg.__post_init__()
    net_cfg = _network_config(args.net, run_config, args.profile)
    network = models.build_network(args.net, config=net_cfg, seed=tcfg.seed)

    manifest = volume_io.read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    with open(args.splits, "r", encoding="utf-8") as fh:
        split = trainer.Split.from_json(fh.read())
    modality = NET_MODALITY[args.net]
    train_set = trainer.load_samples(manifest, modality, base_dir, subjects=split.subjects("train"))
    val_set = trainer.load_samples(manifest, modality, base_dir, subjects=split.subjects("val"))

    warm = volume_io.load_checkpoint(args.warm) if args.warm else None
    result = trainer.train(network, train_set, val_set, tcfg,
                           warm_start=warm, head_only_reset=args.head_only_reset)

    os.makedirs(args.out, exist_ok=True)
    volume_io.save_checkpoint(result.final, os.path.join(args.out, "final.cyck"))
    volume_io.save_checkpoint(result.best, os.path.join(args.out, "best.cyck"))
    with open(os.path.join(args.out, "history.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(result.history.to_jsonl())
    with open(os.path.join(args.out, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.history.to_csv())
    last = result.history.points[-1] if result.history.points else None
    tail = f", last val_acc {last.val_acc:.3f}" if last else ""
    print(f"trained {args.net} for {tcfg.epochs} epochs ({len(train_set)} train / {len(val_set)} val volumes){tail} -> {args.out}")
    return 0


def _rebuild_from_checkpoint(kind, ckpt, profile):
    cfg_dict = ckpt.metadata.get("config")
    cls = models.DwiNetConfig if kind == "dwinet" else models.AdcNetConfig
    if cfg_dict:
        cfg = _dataclass_from_dict(cls, cfg_dict, kind)
    else:
        cfg = cls.dev() if profile == "dev" else cls()
    network = models.build_network(kind, config=cfg, seed=0)
    models.apply_checkpoint(network, ckpt)
    return network


def cmd_predict(args):
    ckpt = volume_io.load_checkpoint(args.ckpt)
    network = _rebuild_from_checkpoint(args.net, ckpt, args.profile)
    manifest = volume_io.read_manifest(args.manifest)
    base_dir = os.path.dirname(os.path.abspath(args.manifest))
    subjects = None
    if args.splits:
        with open(args.splits, "r", encoding="utf-8") as fh:
            split = trainer.Split.from_json(fh.read())
        if args.partition != "all":
            subjects = split.subjects(args.partition)
    samples = trainer.load_samples(manifest, NET_MODALITY[args.net], base_dir,
                                   subjects=subjects, require_labels=False)
    if not samples:
        raise ValidationError("empty selection", "no volumes matched the requested partition/modality")
    rows = []
    if args.slab_depth:
        k = args.slab_depth
        for s in samples:
            d = s.x.shape[1]
            if k > d:
                raise ValidationError("bad slab depth", f"slab depth {k} exceeds volume depth {d}")
            for i in range(d // k):
                slab = np.ascontiguousarray(s.x[:, i * k:(i + 1) * k])
                score = float(network.predict_proba(slab[None, ...])[0])
                rows.append({"subject_id": s.subject_id, "session_id": s.session_id,
                             "path": f"{s.path}#slab{i}", "score": score})
    else:
        xs = np.stack([s.x for s in samples])
        scores = network.predict_proba(xs, batch_size=args.batch_size)
        for s, score in zip(samples, scores):
            rows.append({"subject_id": s.subject_id, "session_id": s.session_id,
                         "path": s.path, "score": float(score)})
    write_scores(rows, args.out)
    print(f"scored {len(rows)} units with {args.net} -> {args.out}")
    return 0


def _join_scores(dwi_rows, adc_rows):
    dwi_by_key = {(r["subject_id"], r["session_id"]): r for r in dwi_rows}
    adc_by_key = {(r["subject_id"], r["session_id"]): r for r in adc_rows}
    if set(dwi_by_key) != set(adc_by_key):
        only_d = sorted(set(dwi_by_key) - set(adc_by_key))[:3]
        only_a = sorted(set(adc_by_key) - set(dwi_by_key))[:3]
        raise ValidationError("unit mismatch", f"score files cover different sessions (dwi-only {only_d}, adc-only {only_a})")
    return [(k, dwi_by_key[k], adc_by_key[k]) for k in sorted(dwi_by_key)]


def cmd_ensemble(args):
    dwi_rows = read_scores(args.dwi)
    adc_rows = read_scores(args.adc)
    joined = _join_scores(dwi_rows, adc_rows)
    fitted = False
    if args.weight is not None:
        w = args.weight
    else:
        if not (args.fit_dwi and args.fit_adc and args.manifest):
            raise ValidationError("missing flags", "ensemble needs --weight or (--fit-dwi, --fit-adc, --manifest)")
        labels = _session_labels(volume_io.read_manifest(args.manifest))
        fit_joined = _join_scores(read_scores(args.fit_dwi), read_scores(args.fit_adc))
        triples = []
        for key, drow, arow in fit_joined:
            if key not in labels or labels[key][0] is None:
                raise ValidationError("missing label", f"no ce_label for session {key}")
            triples.append((drow["score"], arow["score"], labels[key][0]))
        w = models.fit_ensemble_weight(triples, models.EnsembleConfig())
        fitted = True
    cfg = models.EnsembleConfig(w=w)
    out_rows = []
    for key, drow, arow in joined:
        combined = models.ensemble_predict(drow["score"], arow["score"], cfg)
        out_rows.append({"subject_id": key[0], "session_id": key[1],
                         "path": drow["path"], "score": combined})
    write_scores(out_rows, args.out)
    if args.report:
        _json_dump({"weight": w, "fitted": fitted, "n_units": len(out_rows)}, args.report)
    print(f"combined {len(out_rows)} sessions at w={w} -> {args.out}")
    return 0


def cmd_eval(args):
    rows = read_scores(args.scores)
    if not rows:
        raise ValidationError("empty input", f"{args.scores} has no score rows")
    labels_by_session = _session_labels(volume_io.read_manifest(args.manifest))
    scores, labels = [], []
    unit_scores_by_subject = {}
    subject_labels = {}
    for r in rows:
        key = (r["subject_id"], r["session_id"])
        if key not in labels_by_session or labels_by_session[key][0] is None:
            raise ValidationError("missing label", f"no ce_label for session {key}")
        ce = labels_by_session[key][0]
        scores.append(r["score"])
        labels.append(ce)
        unit_scores_by_subject.setdefault(r["subject_id"], []).append(r["score"])
        prev = subject_labels.setdefault(r["subject_id"], ce)
        if prev != ce:
            raise ValidationError("label conflict", f"subject {r['subject_id']} has inconsistent ce labels")
    thresholds = [float(t) for t in args.thresholds.split(",")]
    curve, auc = metrics.roc_auc(scores, labels)  # rejects single-class input
    report = {
        "n_units": len(rows),
        "n_subjects": len(unit_scores_by_subject),
        "auc": auc,
        "roc": {"fpr": curve.fpr, "tpr": curve.tpr},
        "thresholds": thresholds,
        "unit_reports": {},
        "subject_votes": {},
    }
    for t in thresholds:
        report["unit_reports"][f"{t:.2f}"] = metrics.confusion_metrics(scores, labels, t).to_dict()
        votes = metrics.aggregate_subject(unit_scores_by_subject, t)
        subjects = sorted(votes)
        vote_report = metrics.confusion_metrics([float(votes[s]) for s in subjects],
                                                [subject_labels[s] for s in subjects], 0.5)
        report["subject_votes"][f"{t:.2f}"] = {"votes": votes, "report": vote_report.to_dict()}
    _json_dump(report, args.out)
    if args.roc_csv:
        with open(args.roc_csv, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["fpr", "tpr"])
            for f, t in zip(curve.fpr, curve.tpr):
                writer.writerow([repr(f), repr(t)])
    print(f"eval: auc={auc:.4f} over {len(rows)} units -> {args.out}")
    return 0


def cmd_correlate(args):
    rows = read_scores(args.predictions)
    if not rows:
        raise ValidationError("empty input", f"{args.predictions} has no score rows")
    manifest = volume_io.read_manifest(args.manifest)
    by_subject = {}
    for r in rows:
        by_subject.setdefault(r["subject_id"], []).append(r["score"])
    probabilities = {s: float(np.mean(v)) for s, v in by_subject.items()}
    aht, fss = {}, {}
    for rec in manifest.records:
        if rec.subject_id in probabilities:
            if rec.aht_label is not None:
                aht[rec.subject_id] = rec.aht_label
            if rec.fss_score is not None:
                fss[rec.subject_id] = rec.fss_score
    report = correlation.correlate_report(probabilities, aht, fss)
    _json_dump(report, args.out)
    if args.curves_csv:
        with open(args.curves_csv, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["analysis", "x", "p"])
            for name in ("aht", "outcome"):
                for pt in report[name]["curve"]:
                    writer.writerow([name, repr(pt["x"]), repr(pt["p"])])
    print(f"correlate: aht R2={report['aht']['fit']['mcfadden_r2']:.3f}, "
          f"outcome R2={report['outcome']['fit']['mcfadden_r2']:.3f} -> {args.out}")
    return 0


def cmd_gradcheck(args):
    err = models.network_gradient_check(args.net, _parse_dims(args.dims), seed=args.seed,
                                        profile=args.profile, eps=args.eps)
    print(f"{args.net} max relative gradient error: {err:.3e} (tolerance {args.tolerance:.1e})")
    return 0 if err < args.tolerance else 2


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="cyten", description="DWI/ADC mixture-of-experts pipeline")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    parser.add_argument("--deterministic", action="store_true",
                        help="pin the thread pool so repeated runs are byte-identical")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--prevalence", type=float, default=0.5)
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--spacing", type=float, default=1.5)
    p.add_argument("--noise-dwi", type=float, default=0.15)
    p.add_argument("--noise-adc", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("preprocess", help="mask, resample and normalize volumes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=1.5)
    p.add_argument("--dims", default="64,64,64")
    p.add_argument("--mask", choices=["auto", "provided"], default="auto")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="subject-grouped cross-validation split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one expert network")
    p.add_argument("--net", choices=["dwinet", "adcnet"], required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", choices=["default", "dev"], default="default")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--warm", default=None, help="warm-start checkpoint")
    p.add_argument("--head-only-reset", action="store_true",
                   help="restore body tensors only; keep the fresh head")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score volumes with a trained network")
    p.add_argument("--net", choices=["dwinet", "adcnet"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--partition", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--profile", choices=["default", "dev"], default="default")
    p.add_argument("--slab-depth", type=int, default=None,
                   help="score depth-k slabs instead of whole volumes")
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ensemble", help="combine expert scores with a convex weight")
    p.add_argument("--dwi", required=True)
    p.add_argument("--adc", required=True)
    p.add_argument("--weight", type=float, default=None)
    p.add_argument("--fit-dwi", default=None, help="validation DWI scores for weight fitting")
    p.add_argument("--fit-adc", default=None, help="validation ADC scores for weight fitting")
    p.add_argument("--manifest", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="confusion metrics, ROC/AUC and subject voting")
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--thresholds", default="0.4,0.5,0.6")
    p.add_argument("--roc-csv", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("correlate", help="logistic correlation of CE probability with AHT/outcome")
    p.add_argument("--predictions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--curves-csv", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of a network")
    p.add_argument("--net", choices=["dwinet", "adcnet"], required=True)
    p.add_argument("--dims", default="16,16,16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--profile", choices=["default", "dev"], default="dev")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _apply_threads(args):
    if args.threads is not None and args.threads < 1:
        raise ValidationError("bad threads", f"--threads must be >= 1, got {args.threads}")
    if args.threads is not None or args.deterministic:
        from threadpoolctl import threadpool_limits
        limit = args.threads if args.threads is not None else (os.cpu_count() or 1)
        threadpool_limits(limits=limit)


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        _apply_threads(args)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except CytenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
