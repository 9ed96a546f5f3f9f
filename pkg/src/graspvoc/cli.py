"""Command-line entry point.

Exit codes: 0 ok, 1 I/O, 2 provider failure, 3 validation failure,
4 no compatible grasp.
"""

import argparse
import json
import logging
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import cloud_io
from .errors import GraspvocError, NoCompatibleGrasp, SchemaMismatch
from .evaluation import average_runs, load_ground_truth, metrics_csv, metrics_report, region_metrics
from .object_model import ObjectModel, Vocabulary
from .pipeline import SegmentationParams, segment_object_run
from .providers import ProviderConfig, Providers
from .scoring import (
    ScoreParams,
    TaskCondition,
    load_archive,
    ranked_payload,
    sample_controls,
    score_archive,
    select_optimal,
)
from .viewrender import write_masks_json, write_pgm

log = logging.getLogger("graspvoc")

EXIT_OK, EXIT_IO, EXIT_PROVIDER, EXIT_VALIDATION, EXIT_NO_GRASP = 0, 1, 2, 3, 4


def exit_code_for(exc):
    if isinstance(exc, GraspvocError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_VALIDATION


def dump_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(payload, indent=2) + "\n")


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def slug(text):
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "x"


def _resolve(path, base):
    p = Path(path)
    if p.is_absolute() or base is None:
        return p
    return Path(base) / p


def load_vocabulary(path, cloud_path=None):
    data = read_json(path)
    if cloud_path is None:
        cloud_path = Path(data["cloud_file"])
        if not cloud_path.exists():
            cloud_path = Path(path).parent / data["cloud_file"]
    cloud = cloud_io.read_cloud(cloud_path)
    return Vocabulary.from_dict(data, cloud)


def predicted_region(vocab_data, cond):
    for part in vocab_data["subparts"]:
        if part["label"] == cond.grasp_label:
            return part["point_indices"]
    raise SchemaMismatch(f"condition grasp label {cond.grasp_label!r} is not in the vocabulary")


def evaluate_pair(vocab_data, cond, gt):
    if int(vocab_data["n_points"]) != gt.n_points:
        raise SchemaMismatch(
            f"vocabulary has {vocab_data['n_points']} points, ground truth has {gt.n_points}"
        )
    return region_metrics(predicted_region(vocab_data, cond), gt)


def seg_params_from(args, base=None):
    cfg = dict(SegmentationParams().to_dict())
    cfg.update(base or {})
    for key in ("resolution", "margin_fraction", "splat_radius_px", "depth_quantile", "min_subpart_points"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg["resolution"] = tuple(cfg["resolution"])
    return SegmentationParams(**cfg)


# ------------------------------------------------------------------ commands


def cmd_segment(args):
    cloud = cloud_io.read_cloud(args.cloud)
    providers = Providers.from_config(ProviderConfig.load(args.providers))
    params = seg_params_from(args)
    run = segment_object_run(ObjectModel(args.label, cloud), providers, params, cloud_file=str(args.cloud))
    for path, writer, payload in ((args.debug_render, write_pgm, run.render.image), (args.debug_masks, write_masks_json, run.masks)):
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            writer(path, payload)
    write_text(args.out, run.vocabulary.to_json())
    log.info("wrote %s with subparts %s", args.out, run.vocabulary.labels)
    return EXIT_OK


def cmd_condition(args):
    vocab_data = read_json(args.vocab)
    labels = [p["label"] for p in vocab_data["subparts"]]
    providers = Providers.from_config(ProviderConfig.load(args.providers))
    grasp, task_part = providers.condition(args.task, labels)
    cond = TaskCondition(args.task, grasp, task_part)
    dump_json(args.out, cond.to_dict())
    return EXIT_OK


def rank_payload(archive, cond, vocab, params, fallback, controls, seed):
    selected = select_optimal(archive, cond, vocab, params, fallback_max_force=fallback)
    scored = score_archive(archive, cond, vocab, params)
    sample = sample_controls(archive, cond, vocab, controls, seed, params) if controls else None
    return ranked_payload(scored, cond, params, selected, sample)


def cmd_rank(args):
    archive = load_archive(args.archive)
    vocab = load_vocabulary(args.vocab, args.cloud)
    cond = TaskCondition.from_dict(read_json(args.condition))
    params = ScoreParams(args.k_force, args.k_dist)
    payload = rank_payload(archive, cond, vocab, params, args.fallback_max_force, args.controls, args.seed)
    dump_json(args.out, payload)
    return EXIT_OK


def cmd_eval(args):
    rows = []
    for vocab_path, cond_path, gt_path in args.pair:
        vocab_data = read_json(vocab_path)
        cond = TaskCondition.from_dict(read_json(cond_path))
        gt = load_ground_truth(gt_path)
        runs = [evaluate_pair(vocab_data, cond, gt) for _ in range(args.repeat)]
        rows.append((vocab_data["object_label"], cond.task, average_runs(runs)))
    report = metrics_report(rows)
    report["repeat"] = args.repeat
    if args.out_json:
        dump_json(args.out_json, report)
    csv_text = metrics_csv(rows)
    if args.out_csv:
        write_text(args.out_csv, csv_text)
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


# ------------------------------------------------------------------ manifests


@dataclass
class ManifestEntry:
    object_label: str
    cloud_file: str
    archive_file: str
    tasks: list
    ground_truth: dict = field(default_factory=dict)


@dataclass
class RunManifest:
    entries: list
    provider_config: str
    seed: int
    base_dir: Path
    controls: int = 3
    score: dict = field(default_factory=dict)
    segmentation: dict = field(default_factory=dict)
    repeat: int = 1

    @classmethod
    def load(cls, path):
        path = Path(path)
        data = read_json(path)
        if "seed" not in data:
            raise SchemaMismatch("manifest must set a seed")
        entries = []
        for e in data["entries"]:
            if not e.get("tasks"):
                raise SchemaMismatch(f"entry {e.get('object_label')!r} has no tasks")
            entries.append(
                ManifestEntry(e["object_label"], e["cloud_file"], e["archive_file"], list(e["tasks"]), dict(e.get("ground_truth", {})))
            )
        return cls(
            entries,
            data["provider_config"],
            int(data["seed"]),
            path.parent,
            int(data.get("controls", 3)),
            dict(data.get("score", {})),
            dict(data.get("segmentation", {})),
            int(data.get("repeat", 1)),
        )


def _error_payload(exc):
    return {"error": type(exc).__name__, "message": str(exc), "exit_code": exit_code_for(exc)}


def run_entry(index, entry, manifest, settings, providers, run_dir):
    """Segment, condition, rank (and evaluate) one manifest entry."""
    entry_dir = run_dir / f"{index:02d}_{slug(entry.object_label)}"
    entry_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    failure = None
    base = manifest.base_dir
    try:
        archive = load_archive(_resolve(entry.archive_file, base))
        cloud = cloud_io.read_cloud(_resolve(entry.cloud_file, base))
        obj = ObjectModel(entry.object_label, cloud)
        seg = segment_object_run(obj, providers, settings["segmentation"], cloud_file=entry.cloud_file)
        vocab = seg.vocabulary
        write_text(entry_dir / "vocabulary.json", vocab.to_json())
    except Exception as exc:  # recorded per entry; the run continues
        log.error("entry %s failed: %s", entry.object_label, exc)
        dump_json(entry_dir / "error.json", _error_payload(exc))
        return [(entry_dir.name, entry.object_label, task, "failed", "", "", "", "", "") for task in entry.tasks], exc

    for task in entry.tasks:
        task_dir = entry_dir / slug(task)
        row = [entry_dir.name, entry.object_label, task, "ok", "", "", "", "", ""]
        try:
            grasp, task_part = providers.condition(task, vocab.labels)
            cond = TaskCondition(task, grasp, task_part)
            dump_json(task_dir / "condition.json", cond.to_dict())
            row[4], row[5] = grasp, task_part
            payload = rank_payload(
                archive, cond, vocab, settings["score"], settings["fallback"], settings["controls"], manifest.seed
            )
            dump_json(task_dir / "ranked.json", payload)
            row[6], row[7] = payload["optimal"]["id"], repr(payload["optimal"]["score"])
            gt_file = entry.ground_truth.get(task)
            if gt_file:
                gt = load_ground_truth(_resolve(gt_file, base))
                vocab_data = vocab.to_dict()
                runs = [evaluate_pair(vocab_data, cond, gt)]
                for _ in range(settings["repeat"] - 1):
                    again = segment_object_run(obj, providers, settings["segmentation"], entry.cloud_file)
                    rerun = TaskCondition(task, *providers.condition(task, again.vocabulary.labels))
                    runs.append(evaluate_pair(again.vocabulary.to_dict(), rerun, gt))
                metrics = average_runs(runs)
                dump_json(task_dir / "metrics.json", {"object_label": entry.object_label, "task": task, "runs": len(runs), **metrics.to_dict()})
                row[8] = repr(metrics.weighted_iou)
        except Exception as exc:
            log.error("entry %s task %r failed: %s", entry.object_label, task, exc)
            dump_json(task_dir / "error.json", _error_payload(exc))
            row[3] = "failed"
            failure = failure or exc
        rows.append(tuple(row))
    return rows, failure


def cmd_pipeline(args):
    manifest = RunManifest.load(args.manifest)
    provider_path = Path(args.providers) if args.providers else _resolve(manifest.provider_config, manifest.base_dir)
    provider_cfg = ProviderConfig.load(provider_path)
    providers = Providers.from_config(provider_cfg)
    seed = args.seed if args.seed is not None else manifest.seed
    manifest.seed = seed
    score_cfg = {"k_force": 10.0, "k_dist": 1.0, **manifest.score}
    if args.k_force is not None:
        score_cfg["k_force"] = args.k_force
    if args.k_dist is not None:
        score_cfg["k_dist"] = args.k_dist
    settings = {
        "segmentation": seg_params_from(args, manifest.segmentation),
        "score": ScoreParams(**score_cfg),
        "controls": args.controls if args.controls is not None else manifest.controls,
        "fallback": args.fallback_max_force,
        "repeat": args.repeat if args.repeat is not None else manifest.repeat,
    }
    run_name = args.run_name or time.strftime("run-%Y%m%d-%H%M%S")
    run_dir = Path(args.out_root) / run_name
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_json(
        run_dir / "config.json",
        {
            "manifest": str(args.manifest),
            "providers": provider_cfg.to_dict(),
            "seed": seed,
            "segmentation": settings["segmentation"].to_dict(),
            "score": settings["score"].to_dict(),
            "controls": settings["controls"],
            "fallback_max_force": settings["fallback"],
            "repeat": settings["repeat"],
            "jobs": args.jobs,
        },
    )
    dump_json(run_dir / "run.json", {"started": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "run_dir": str(run_dir)})

    def work(item):
        i, entry = item
        return run_entry(i, entry, manifest, settings, providers, run_dir)

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(work, enumerate(manifest.entries)))

    header = ("entry", "object_label", "task", "status", "grasp_label", "task_label", "optimal_id", "score", "weighted_iou")
    lines = ["\t".join(header)]
    code = EXIT_OK
    for rows, failure in results:
        lines += ["\t".join(r) for r in rows]
        if failure is not None and code == EXIT_OK:
            code = exit_code_for(failure)
    summary = "\n".join(lines) + "\n"
    write_text(run_dir / "summary.tsv", summary)
    sys.stdout.write(summary)
    return code


# ------------------------------------------------------------------ parser


def _add_seg_flags(p):
    p.add_argument("--resolution", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--margin", dest="margin_fraction", type=float)
    p.add_argument("--splat-radius", dest="splat_radius_px", type=int)
    p.add_argument("--depth-quantile", type=float)
    p.add_argument("--min-subpart-points", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="graspvoc", description="Task-conditioned grasp selection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment a point cloud into a labelled vocabulary")
    p.add_argument("cloud")
    p.add_argument("--label", required=True, help="object label, e.g. mug")
    p.add_argument("--providers", required=True, help="provider config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-render", metavar="PGM")
    p.add_argument("--debug-masks", metavar="JSON")
    _add_seg_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("condition", help="pick grasp and task subparts for a task")
    p.add_argument("vocab")
    p.add_argument("--task", required=True)
    p.add_argument("--providers", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_condition)

    p = sub.add_parser("rank", help="score and rank a grasp archive")
    p.add_argument("archive")
    p.add_argument("--vocab", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--cloud", help="override the cloud file named in the vocabulary")
    p.add_argument("--k-force", type=float, default=10.0)
    p.add_argument("--k-dist", type=float, default=1.0)
    p.add_argument("--fallback-max-force", action="store_true")
    p.add_argument("--controls", type=int, default=0, metavar="K")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="grasp-region metrics against ground truth")
    p.add_argument("--pair", nargs=3, action="append", required=True, metavar=("VOCAB", "CONDITION", "GT"))
    p.add_argument("--repeat", type=int, default=1)
    p.add_argument("--out-json")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run a manifest of objects and tasks end to end")
    p.add_argument("manifest")
    p.add_argument("--out-root", default="runs")
    p.add_argument("--run-name")
    p.add_argument("--providers", help="override the manifest's provider config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--controls", type=int)
    p.add_argument("--k-force", type=float)
    p.add_argument("--k-dist", type=float)
    p.add_argument("--repeat", type=int)
    p.add_argument("--fallback-max-force", action="store_true")
    _add_seg_flags(p)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if isinstance(exc, NoCompatibleGrasp):
            msg = f"{exc} (rerun with --fallback-max-force to take the strongest grasp)"
        else:
            msg = str(exc)
        print(f"graspvoc: {type(exc).__name__}: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
