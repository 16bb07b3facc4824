"""Command-line driver: run pipelines, evaluate outputs, serve review."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from .collation import DependencyError
from .corpus import CorpusError, ingest_corpus, list_patients
from .evaluation import (
    ALIGNMENT_POLICY,
    AlignmentResult,
    BLBConfig,
    MatchPolicy,
    align_entities,
    blb_ci,
    compute_metrics,
    disagreement_score,
    rank_for_review,
)
from .pipeline import (
    Clients,
    ConfigError,
    PipelineConfig,
    PipelineRunner,
    build_clients,
    load_config,
)
from .schema import (
    PatientRecord,
    SchemaError,
    SchemaRegistry,
    default_registry,
    load_schema,
    record_from_json,
    record_to_json,
)

log = logging.getLogger(__name__)


def _load_registry(schema_path: Optional[str]) -> SchemaRegistry:
    if schema_path is None:
        return default_registry()
    return load_schema(Path(schema_path).read_text("utf-8"))


def _load_pipeline_config(config_path: str, registry: SchemaRegistry) -> PipelineConfig:
    path = Path(config_path)
    return load_config(path.read_text("utf-8"), registry, base_dir=path.parent)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args: argparse.Namespace) -> int:
    try:
        registry = _load_registry(args.schema)
        config = _load_pipeline_config(args.config, registry)
        clients = build_clients(config, mock_fixtures=args.mock_fixtures)
    except (ConfigError, SchemaError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        patients = list_patients(args.corpus_root)
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    audit_dir = output_dir / "audit"
    audit_dir.mkdir(exist_ok=True)
    if not patients:
        print(f"warning: no patient directories under {args.corpus_root}", file=sys.stderr)
        return 0

    runner = PipelineRunner(config, registry, clients)

    def process(patient_id: str) -> tuple[str, bool]:
        corpus = ingest_corpus(args.corpus_root, patient_id, max_chars=config.max_chars)
        record, report = runner.run_patient(corpus)
        (output_dir / f"{patient_id}.json").write_text(record_to_json(record), "utf-8")
        (audit_dir / f"{patient_id}.json").write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
        for message in report.warnings:
            log.warning("%s: %s", patient_id, message)
        return patient_id, not report.entity_errors

    aborted = []
    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(process, patients))
    else:
        results = [process(p) for p in patients]
    for patient_id, clean in results:
        if not clean:
            aborted.append(patient_id)
    print(f"wrote {len(results)} records to {output_dir}")
    if aborted:
        print(f"entity aborts for patients: {', '.join(aborted)}", file=sys.stderr)
        return 0 if args.keep_going else 1
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _read_records(directory: Path, registry: SchemaRegistry) -> dict[str, PatientRecord]:
    records = {}
    for path in sorted(directory.glob("*.json")):
        record = record_from_json(registry, path.read_text("utf-8"))
        records[record.patient_id] = record
    return records


def evaluate_directories(
    pred_dir: Path,
    gt_dir: Path,
    registry: SchemaRegistry,
    metric_policy: MatchPolicy,
    blb: Optional[BLBConfig] = None,
    review_top_n: int = 50,
) -> dict:
    """Aggregate alignment + metrics + DS ranking across patient files."""
    pred = _read_records(pred_dir, registry)
    gt = _read_records(gt_dir, registry)
    patient_ids = sorted(set(pred) | set(gt))
    per_entity: dict[str, AlignmentResult] = {}
    ds_scores: dict[str, int] = {}
    per_patient_f1: list[float] = []
    for patient_id in patient_ids:
        pred_record = pred.get(patient_id) or PatientRecord(patient_id=patient_id)
        gt_record = gt.get(patient_id) or PatientRecord(patient_id=patient_id)
        gt_by_entity = gt_record.by_entity()
        pred_by_entity = pred_record.by_entity()
        patient_alignments: dict[str, AlignmentResult] = {}
        for entity_name in sorted(set(gt_by_entity) | set(pred_by_entity)):
            spec = registry.get(entity_name)
            result = align_entities(
                spec,
                ALIGNMENT_POLICY,
                gt_by_entity.get(entity_name, []),
                pred_by_entity.get(entity_name, []),
            )
            patient_alignments[spec.name] = result
            bucket = per_entity.setdefault(spec.name, AlignmentResult())
            bucket.pairs.extend(result.pairs)
            bucket.unmatched_gt.extend(result.unmatched_gt)
            bucket.unmatched_pred.extend(result.unmatched_pred)
        ds_scores[patient_id] = disagreement_score(
            gt_record, pred_record, registry, metric_policy
        )
        patient_report = compute_metrics(patient_alignments, registry, metric_policy)
        if patient_report.per_entity:
            per_patient_f1.append(patient_report.macro_f1())
    report = compute_metrics(per_entity, registry, metric_policy)
    payload = report.to_json()
    payload["date_tolerance_days"] = metric_policy.date_tolerance_days
    payload["ds_scores"] = dict(sorted(ds_scores.items()))
    payload["review_ranking"] = rank_for_review(ds_scores, n=review_top_n)
    payload["patients_missing_pred"] = sorted(set(gt) - set(pred))
    payload["patients_missing_gt"] = sorted(set(pred) - set(gt))
    if blb is not None and per_patient_f1:
        cfg = blb
        if cfg.subset_size > len(per_patient_f1):
            log.warning(
                "BLB subset size %d exceeds cohort %d; shrinking",
                cfg.subset_size, len(per_patient_f1),
            )
            cfg = BLBConfig(
                subsets=blb.subsets,
                subset_size=len(per_patient_f1),
                replicates=blb.replicates,
                seed=blb.seed,
            )
        payload["macro_f1_ci"] = blb_ci(per_patient_f1, cfg).to_json()
    return payload


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        registry = _load_registry(args.schema)
        tolerance = args.date_tolerance
        if tolerance is None:
            if args.config:
                config = _load_pipeline_config(args.config, registry)
                tolerance = config.evaluation.date_tolerance_days
            else:
                tolerance = 7
    except (ConfigError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    payload = evaluate_directories(
        Path(args.pred_dir),
        Path(args.gt_dir),
        registry,
        MatchPolicy(date_tolerance_days=tolerance),
        blb=BLBConfig(seed=args.seed),
    )
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text, "utf-8")
        print(f"report written to {args.report}")
    print(f"date tolerance: {tolerance}d  macro-F1: {payload['macro_f1']:.4f}")
    for entity, metrics in payload["per_entity"].items():
        print(
            f"  {entity:24s} P={metrics['precision']:.4f} "
            f"R={metrics['recall']:.4f} F1={metrics['f1']:.4f}"
        )
    return 0


# ---------------------------------------------------------------------------
# review-serve / export-tallies
# ---------------------------------------------------------------------------

def cmd_review_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import create_app

    registry = _load_registry(args.schema)
    app = create_app(
        output_dir=args.output_dir,
        corpus_root=args.corpus_root,
        store_path=args.store,
        registry=registry,
        gt_dir=args.gt_dir,
        ui_dir=args.ui_dir,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_export_tallies(args: argparse.Namespace) -> int:
    from .review import ReviewStore

    registry = _load_registry(args.schema)
    store = ReviewStore(args.store, registry)
    payload = {
        "tallies": [
            {
                "patient_id": t.patient_id,
                "entity_type": t.entity_type,
                "n_correct": t.n_correct,
                "n_incorrect": t.n_incorrect,
                "n_missing": t.n_missing,
            }
            for t in store.tallies()
        ],
        "rates": store.rates().to_json(),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text, "utf-8")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oncoextract")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a pipeline over a patient corpus")
    run.add_argument("config")
    run.add_argument("corpus_root")
    run.add_argument("output_dir")
    run.add_argument("--mock-fixtures", default=None)
    run.add_argument("--parallel", type=int, default=1)
    run.add_argument("--keep-going", action="store_true")
    run.add_argument("--schema", default=None)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("pred_dir")
    ev.add_argument("gt_dir")
    ev.add_argument("--config", default=None)
    ev.add_argument("--report", default=None)
    ev.add_argument("--schema", default=None)
    ev.add_argument("--date-tolerance", type=int, default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    serve = sub.add_parser("review-serve", help="serve the adjudication API")
    serve.add_argument("output_dir")
    serve.add_argument("corpus_root")
    serve.add_argument("--store", default="review_store.jsonl")
    serve.add_argument("--gt-dir", default=None)
    serve.add_argument("--ui-dir", default=None)
    serve.add_argument("--schema", default=None)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8700)
    serve.set_defaults(func=cmd_review_serve)

    export = sub.add_parser("export-tallies", help="dump decision tallies and rates")
    export.add_argument("--store", required=True)
    export.add_argument("--output", default=None)
    export.add_argument("--schema", default=None)
    export.set_defaults(func=cmd_export_tallies)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
