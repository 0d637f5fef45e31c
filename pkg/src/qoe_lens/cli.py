"""Command-line pipeline: synth, ingest, classify, featurize, label, train,
predict, evaluate, and the end-to-end `pipeline` command.

Configuration precedence is flags > --config JSON > defaults; every stage
writes a manifest (config hash + input digests) so identical runs are
verifiably identical. QOE_LENS_LOG controls the log level.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys

from . import __version__
from .evaluate import per_condition_report, write_report_files
from .featurize import (
    UDP_FEATURES,
    SlotFeatures,
    SlotKey,
    featurize_session,
    read_feature_csv,
    write_feature_csv,
)
from .forest import (
    DEFAULT_GRID,
    ForestModel,
    Hyperparams,
    grid_search,
    predict,
    stratified_folds,
)
from .ground_truth import (
    build_labels,
    read_capture_csv,
    read_labels_csv,
    read_score_csv,
    write_labels_csv,
)
from .pipeline import (
    ALL_TARGETS,
    build_training_table,
    featurize_corpus,
    fit_final_model,
    run_evaluation,
    task_of,
)
from .stream_classify import (
    DEFAULT_THRESHOLD,
    classify_trace,
    optimize_threshold,
)
from .synth import CorpusSpec, default_corpus_spec, generate_session
from .trace_ingest import (
    ConditionKind,
    SessionMeta,
    ip_pair_filter,
    parse_packet_csv,
    parse_pcap,
    write_packet_csv,
)

log = logging.getLogger("qoe_lens")


class ConfigError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, stage: str, config: dict, inputs: list) -> None:
    doc = {
        "stage": stage,
        "version": __version__,
        "config": config,
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "inputs": {str(p): _sha256(p) for p in inputs if os.path.isfile(p)},
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stage}_manifest.json"), "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


SESSIONS_COLUMNS = ["session_id", "condition_kind", "condition_level", "duration"]


def write_sessions_csv(path, sessions) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SESSIONS_COLUMNS)
        for s in sessions:
            writer.writerow([s.session_id,
                             s.condition_kind.value if s.condition_kind else "",
                             s.condition_level or "", repr(s.duration)])


def read_sessions_csv(path) -> list[SessionMeta]:
    sessions = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SESSIONS_COLUMNS:
            raise ConfigError(f"{path}: unexpected sessions header {header}")
        for row in reader:
            sessions.append(SessionMeta(
                session_id=row[0],
                condition_kind=ConditionKind(row[1]) if row[1] else None,
                condition_level=row[2] or None,
                duration=float(row[3])))
    return sessions


PREDICTIONS_COLUMNS = ["session_id", "slot_end", "mode", "target", "prediction"]


def write_predictions_csv(path, predictions) -> None:
    """predictions: {(target, mode): {SlotKey: value}}"""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTIONS_COLUMNS)
        for (target, mode) in sorted(predictions):
            for key in sorted(predictions[(target, mode)],
                              key=lambda k: (k.session_id, k.slot_end)):
                value = predictions[(target, mode)][key]
                writer.writerow([key.session_id, key.slot_end, mode, target,
                                 repr(value) if isinstance(value, float) else value])


def read_predictions_csv(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != PREDICTIONS_COLUMNS:
            raise ConfigError(f"{path}: unexpected predictions header {header}")
        for row in reader:
            key = SlotKey(session_id=row[0], slot_end=int(row[1]))
            target = row[3]
            value = row[4] if task_of(target) == "classification" else float(row[4])
            out.setdefault((target, row[2]), {})[key] = value
    return out


def cmd_synth(args) -> int:
    if args.corpus:
        with open(args.corpus) as fh:
            spec = CorpusSpec.from_json(fh.read())
    else:
        spec = default_corpus_spec(seed=args.seed, duration=args.duration)
    out = args.out_dir
    traces_dir = os.path.join(out, "traces")
    os.makedirs(traces_dir, exist_ok=True)
    sessions = []
    all_labels = []
    for profile in spec.profiles:
        packets, labels, meta = generate_session(profile)
        write_packet_csv(os.path.join(traces_dir, f"{meta.session_id}.csv"), packets)
        sessions.append(meta)
        all_labels.extend(labels)
        log.info("generated %s (%d packets)", meta.session_id, len(packets))
    write_sessions_csv(os.path.join(out, "sessions.csv"), sessions)
    write_labels_csv(os.path.join(out, "labels.csv"), all_labels)
    with open(os.path.join(out, "corpus.json"), "w") as fh:
        fh.write(spec.to_json())
    _write_manifest(out, "synth",
                    {"seed": args.seed, "duration": args.duration,
                     "corpus": args.corpus, "sessions": len(spec.profiles)},
                    [args.corpus] if args.corpus else [])
    print(f"synth: {len(spec.profiles)} sessions -> {out}")
    return 0


def cmd_ingest(args) -> int:
    packet_filter = None
    if args.filter_ip:
        if len(args.filter_ip) != 2:
            raise ConfigError("--filter-ip must be given exactly twice (the IP pair)")
        packet_filter = ip_pair_filter(*args.filter_ip)
    records, meta, summary = parse_pcap(args.pcap, packet_filter)
    write_packet_csv(args.out, records)
    _write_manifest(os.path.dirname(args.out) or ".", "ingest",
                    {"pcap": args.pcap, "filter_ip": args.filter_ip},
                    [args.pcap])
    print(f"ingest: {summary.udp} udp packets "
          f"({summary.skipped} non-udp skipped, {summary.filtered} filtered), "
          f"start={meta.start_time}")
    return 0


def cmd_classify(args) -> int:
    packets = parse_packet_csv(args.trace)
    if args.optimize:
        report = optimize_threshold(packets)
        threshold = report.threshold
        if args.report:
            with open(args.report, "w") as fh:
                fh.write(report.to_json())
            report.write_csv(os.path.splitext(args.report)[0] + ".csv")
        print(f"classify: optimal threshold {threshold} "
              f"(accuracy {report.accuracy:.4f})")
    else:
        threshold = args.threshold
    video, nonvideo, counts = classify_trace(packets, threshold)
    write_packet_csv(args.out, video)
    _write_manifest(os.path.dirname(args.out) or ".", "classify",
                    {"trace": args.trace, "threshold": threshold,
                     "optimize": args.optimize}, [args.trace])
    print(f"classify: {counts.video} video / {counts.nonvideo} non-video "
          f"at threshold {threshold}")
    return 0


def cmd_featurize(args) -> int:
    packets = parse_packet_csv(args.trace)
    slots = featurize_session(packets, duration=args.duration,
                              session_id=args.session_id,
                              T=args.slot_seconds, mode=args.mode)
    write_feature_csv(args.out, slots, args.mode)
    _write_manifest(os.path.dirname(args.out) or ".", "featurize",
                    {"trace": args.trace, "mode": args.mode,
                     "T": args.slot_seconds, "duration": args.duration,
                     "session_id": args.session_id}, [args.trace])
    print(f"featurize: {len(slots)} slots ({args.mode}) -> {args.out}")
    return 0


def cmd_label(args) -> int:
    captures = read_capture_csv(args.captures)
    scores = read_score_csv(args.scores) if args.scores else []
    labels = build_labels(captures, scores, duration=args.duration,
                          session_id=args.session_id, T=args.slot_seconds)
    write_labels_csv(args.out, labels)
    _write_manifest(os.path.dirname(args.out) or ".", "label",
                    {"captures": args.captures, "scores": args.scores,
                     "duration": args.duration, "session_id": args.session_id},
                    [p for p in (args.captures, args.scores) if p])
    print(f"label: {len(labels)} slots -> {args.out}")
    return 0


def _load_table(features_path, labels_path, mode):
    keys, cols, X = read_feature_csv(features_path)
    labels = read_labels_csv(labels_path)
    n_udp = len(UDP_FEATURES)
    slots = []
    for k, row in zip(keys, X):
        udp = row[:n_udp]
        rtp = row[n_udp:] if len(row) > n_udp else None
        slots.append(SlotFeatures(key=k, udp=udp, rtp=rtp))
    return build_training_table(slots, labels, mode)


def cmd_train(args) -> int:
    table = _load_table(args.features, args.labels, args.mode)
    if not table.keys:
        raise ConfigError("no feature rows joined with labels")
    sessions = read_sessions_csv(args.sessions)
    hp = Hyperparams(n_trees=args.n_trees, max_depth=args.max_depth,
                     min_samples_leaf=args.min_samples_leaf)
    if args.grid:
        folds = stratified_folds(sessions, seed=args.seed)
        mask, values = table.rows_for_target(args.target)
        session_ids = [k.session_id for k, m in zip(table.keys, mask) if m]
        hp, results = grid_search(
            table.X[mask], values, session_ids, folds, table.columns,
            task_of(args.target), args.target, grid=DEFAULT_GRID,
            seed=args.seed, n_jobs=args.jobs)
        log.info("grid search selected %s", hp)
    model = fit_final_model(table, args.target, hp, seed=args.seed,
                            n_jobs=args.jobs)
    model.save(args.out)
    _write_manifest(os.path.dirname(args.out) or ".", "train",
                    {"features": args.features, "labels": args.labels,
                     "target": args.target, "mode": args.mode,
                     "grid": args.grid, "seed": args.seed,
                     "hyperparams": hp.to_dict()},
                    [args.features, args.labels, args.sessions])
    print(f"train: {args.target}/{args.mode} forest "
          f"({hp.n_trees} trees) -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model = ForestModel.load(args.model)
    keys, cols, X = read_feature_csv(args.features)
    mode = "udp" if len(cols) == 18 else "rtp"
    preds = predict(model, X, columns=cols)
    out = {(model.target, mode): {
        k: (float(p) if model.task == "regression" else p)
        for k, p in zip(keys, preds)}}
    write_predictions_csv(args.out, out)
    _write_manifest(os.path.dirname(args.out) or ".", "predict",
                    {"model": args.model, "features": args.features},
                    [args.model, args.features])
    print(f"predict: {len(keys)} rows -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    predictions = read_predictions_csv(args.predictions)
    labels = read_labels_csv(args.labels)
    sessions = read_sessions_csv(args.sessions)
    report = per_condition_report(predictions, labels, sessions)
    write_report_files(report, args.out_dir)
    _write_manifest(args.out_dir, "evaluate",
                    {"predictions": args.predictions, "labels": args.labels},
                    [args.predictions, args.labels, args.sessions])
    print(f"evaluate: report -> {args.out_dir}")
    return 0


def cmd_pipeline(args) -> int:
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    if args.corpus:
        with open(args.corpus) as fh:
            spec = CorpusSpec.from_json(fh.read())
    else:
        spec = default_corpus_spec(seed=args.seed, duration=args.duration)

    log.info("pipeline: generating %d sessions", len(spec.profiles))
    traces = {}
    sessions = []
    all_labels = []
    for profile in spec.profiles:
        packets, labels, meta = generate_session(profile)
        traces[meta.session_id] = packets
        sessions.append(meta)
        all_labels.extend(labels)
    write_sessions_csv(os.path.join(out, "sessions.csv"), sessions)
    write_labels_csv(os.path.join(out, "labels.csv"), all_labels)

    log.info("pipeline: featurizing")
    tables = {}
    for mode in ("udp", "rtp"):
        slots = featurize_corpus(traces, sessions, mode, threshold=args.threshold,
                                 T=args.slot_seconds)
        write_feature_csv(os.path.join(out, f"features_{mode}.csv"), slots, mode)
        tables[mode] = build_training_table(slots, all_labels, mode)

    hp = Hyperparams(n_trees=args.n_trees, max_depth=args.max_depth,
                     min_samples_leaf=args.min_samples_leaf)
    log.info("pipeline: cross-validated training (%s)", hp)
    report, predictions = run_evaluation(
        tables, all_labels, sessions, hyperparams=hp, seed=args.seed,
        n_jobs=args.jobs)
    write_predictions_csv(os.path.join(out, "predictions.csv"), predictions)

    models_dir = os.path.join(out, "models")
    os.makedirs(models_dir, exist_ok=True)
    for mode in ("udp", "rtp"):
        for target in ALL_TARGETS:
            model = fit_final_model(tables[mode], target, hp, seed=args.seed,
                                    n_jobs=args.jobs)
            model.save(os.path.join(models_dir, f"{target}_{mode}.json"))

    report_dir = os.path.join(out, "report")
    write_report_files(report, report_dir)
    _write_manifest(out, "pipeline",
                    {"seed": args.seed, "duration": args.duration,
                     "threshold": args.threshold, "T": args.slot_seconds,
                     "hyperparams": hp.to_dict(),
                     "sessions": len(spec.profiles)},
                    [args.corpus] if args.corpus else [])
    print(f"pipeline: report -> {report_dir}")
    for (target, mode), value in sorted(report.overall_mae.items()):
        print(f"  mae {target}/{mode}: {value:.3f}")
    for (target, mode), value in sorted(report.overall_accuracy.items()):
        print(f"  accuracy {target}/{mode}: {value * 100:.1f}%")
    return 0


def _subparsers(parser: argparse.ArgumentParser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            yield from action.choices.values()


def _apply_config_defaults(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    # two-pass parse so --config values sit between defaults and flags
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if known.config:
        try:
            with open(known.config) as fh:
                overrides = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {known.config}: {exc}") from None
        valid = {a.dest for a in parser._actions}
        for sub in _subparsers(parser):
            valid |= {a.dest for a in sub._actions}
        unknown = set(overrides) - valid
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        parser.set_defaults(**overrides)
        for sub in _subparsers(parser):
            sub.set_defaults(**{k: v for k, v in overrides.items()
                                if k in {a.dest for a in sub._actions}})
    return parser.parse_args(argv)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qoe-lens",
        description="QoE metric estimation from encrypted video-call traffic")
    parser.add_argument("--config", help="JSON config file (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=7)
        p.add_argument("--slot-seconds", type=float, default=1.0, dest="slot_seconds")
        p.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--corpus", help="corpus spec JSON (default: built-in 107 sessions)")
    p.add_argument("--duration", type=float, default=240.0)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="pcap -> packet-log CSV")
    p.add_argument("--pcap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter-ip", action="append", dest="filter_ip",
                   help="give twice to keep only one IP pair's traffic")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("classify", help="split a trace into video/non-video")
    common(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="video-stream packet CSV")
    p.add_argument("--optimize", action="store_true",
                   help="sweep for the best threshold using RTP payload types")
    p.add_argument("--report", help="write the threshold report JSON here")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("featurize", help="per-slot feature vectors for one session")
    common(p)
    p.add_argument("--trace", required=True, help="video-stream packet CSV")
    p.add_argument("--session-id", required=True, dest="session_id")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--mode", choices=("udp", "rtp"), default="udp")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("label", help="ground-truth labels from capture/score logs")
    common(p)
    p.add_argument("--captures", required=True)
    p.add_argument("--scores")
    p.add_argument("--session-id", required=True, dest="session_id")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    def train_flags(p):
        p.add_argument("--n-trees", type=int, default=50, dest="n_trees")
        p.add_argument("--max-depth", type=int, default=16, dest="max_depth")
        p.add_argument("--min-samples-leaf", type=int, default=5,
                       dest="min_samples_leaf")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train", help="fit one forest for a target/mode")
    common(p)
    train_flags(p)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--target", choices=ALL_TARGETS, required=True)
    p.add_argument("--mode", choices=("udp", "rtp"), default="udp")
    p.add_argument("--grid", action="store_true", help="grid-search hyperparams")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="apply a saved model to feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="build the evaluation report")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--sessions", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="synth -> featurize -> train -> evaluate")
    common(p)
    train_flags(p)
    p.add_argument("--corpus")
    p.add_argument("--duration", type=float, default=240.0)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("QOE_LENS_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = _apply_config_defaults(parser, argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        command = "?"
        if argv or sys.argv[1:]:
            command = (argv or sys.argv[1:])[0]
        print(f"error: {command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
