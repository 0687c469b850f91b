"""``ovmap`` command line.

Every failure ends with exit status 1 (2 for usage errors) and a single
line on stderr of the form ``ovmap: error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .config import ABLATIONS, ConfigError, PipelineConfig
from .eval import (
    format_report, gt_targets, map_metrics, predictions_from_map, split_rows, success_rate,
)
from .feature_agg import aggregate_all
from .geometry import GeometryError, write_ply
from .grounding import InstanceMap, LabelTable, ground
from .llm import HttpChatClient, LLMError, ScriptedLLM
from .mapio import MAP_FILE, export_map_ply, instance_color, load_map, save_map
from .merging import run_mapping
from .providers import (
    FileEmbeddingProvider, HashedTokenEmbedder, HttpEmbeddingProvider, ProviderError, SyntheticCropEmbedder,
)
from .scene_io import SceneError, SceneLoadError, SchemaError, load_ground_truth, load_scene
from .synthetic import SceneSpecError, SyntheticSceneSpec, generate_scene

logger = logging.getLogger("ovmap")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # one line instead of argparse's usage block
        raise UsageError(f"{self.prog}: {message}")


def _error_kind(exc: BaseException) -> str:
    for cls, kind in (
        (UsageError, "usage"), (ConfigError, "config"), (SceneSpecError, "config"), (SchemaError, "schema"),
        (SceneLoadError, "scene_load"), (SceneError, "scene"), (GeometryError, "geometry"),
        (ProviderError, "provider"), (LLMError, "llm"), (FileNotFoundError, "not_found"), (OSError, "io"),
        (ValueError, "value"),
    ):
        if isinstance(exc, cls):
            return kind
    return "internal"


def _threads(value: int | None) -> int:
    return value if value else (os.cpu_count() or 1)


def _effective_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if getattr(args, "config", None) else PipelineConfig()
    if getattr(args, "ablate", None):
        cfg = cfg.with_overrides({"ablate": args.ablate})
    return cfg


def _scene_labels(doc: dict[str, Any], explicit: str | None, text_embedder) -> LabelTable | None:
    if explicit:
        return LabelTable.load(explicit, text_embedder)
    scene = doc.get("scene")
    if scene:
        manifest = Path(scene) / "manifest.json"
        if manifest.exists():
            name = json.loads(manifest.read_text()).get("labels")
            if name and (Path(scene) / name).exists():
                return LabelTable.load(Path(scene) / name, text_embedder)
    return None


# -- commands -----------------------------------------------------------------------


def cmd_build_map(args) -> int:
    cfg = _effective_config(args)
    threads = _threads(args.threads)
    t0 = time.perf_counter()
    scene_path = Path(args.scene).resolve()
    scene = load_scene(scene_path, cfg, threads)
    logger.info("loaded %d frames, %d masks (%d dropped)", len(scene.frames), len(scene.masks),
                len(scene.dropped_mask_ids))
    run = run_mapping(scene, cfg, threads)
    extra = {"build": {"schedule": run.schedule, "generations": len(run.generations),
                       "dropped_masks": sorted(int(m) for m in scene.dropped_mask_ids)}}
    out = save_map(args.output, run.instances, cfg, scene_path, extra)
    if args.dump_config:
        Path(args.dump_config).write_text(cfg.dumps())
    logger.info("%d instances after %d generations in %.2fs", len(run.instances), len(run.generations),
                time.perf_counter() - t0)
    print(f"{out / MAP_FILE} instances={len(run.instances)}")
    return 0


def _provider(spec: str, doc: dict[str, Any], scene, cfg: PipelineConfig):
    if spec == "synthetic":
        return SyntheticCropEmbedder({mid: m.feature for mid, m in scene.masks.items()}, seed=cfg.text_embed_seed)
    if spec.startswith("file:"):
        return FileEmbeddingProvider(spec[len("file:"):])
    if spec.startswith("http:") or spec.startswith("https:"):
        url = spec[len("http:"):] if spec.startswith("http:") and not spec.startswith("http://") else spec
        return HttpEmbeddingProvider(url, scene.feature_dim, scene=doc.get("scene"))
    raise UsageError(f"unknown provider {spec!r}; use synthetic, file:<blob> or http:<url>")


def cmd_aggregate(args) -> int:
    instances, cfg, doc = load_map(args.map)
    if not doc.get("scene"):
        raise SchemaError("map does not record its scene directory")
    threads = _threads(args.threads)
    scene = load_scene(args.scene or doc["scene"], cfg, threads)
    provider = _provider(args.provider, doc, scene, cfg)
    aggregate_all(instances, provider, scene, cfg, threads)
    failed = sum("aggregation_failed" in i.flags for i in instances)
    extra = {k: v for k, v in doc.items() if k not in {"format", "version", "scene", "voxel_size", "config", "instances"}}
    extra["aggregation"] = {"provider": args.provider, "failed": failed}
    save_map(args.map, instances, cfg, doc["scene"], extra)
    print(f"aggregated={len(instances) - failed} failed={failed}")
    return 0 if failed < len(instances) or not instances else 1


def _text_embedder(spec: str, dim: int, cfg: PipelineConfig):
    if spec == "hashed":
        return HashedTokenEmbedder(dim, cfg.text_embed_seed)
    if spec.startswith("http"):
        url = spec[len("http:"):] if spec.startswith("http:") and not spec.startswith("http://") else spec
        return HttpEmbeddingProvider(url, dim)
    raise UsageError(f"unknown text embedder {spec!r}; use hashed or http:<url>")


def _trace_name(instruction: str, parsing: bool, selection: bool) -> str:
    digest = hashlib.sha1(instruction.encode("utf-8")).hexdigest()[:12]
    suffix = ("" if parsing else "-noparse") + ("" if selection else "-nosel")
    return f"trace-{digest}{suffix}.json"


def cmd_ground(args) -> int:
    instances, cfg, doc = load_map(args.map)
    if not instances:
        raise SchemaError("map has no instances")
    dim = len(instances[0].aggregated_feature if instances[0].aggregated_feature is not None
              else instances[0].representative_feature)
    embedder = _text_embedder(args.text_embedder, dim, cfg)
    table = _scene_labels(doc, args.labels, embedder)
    imap = InstanceMap(instances, table)
    llm = ScriptedLLM.load(args.mock_llm) if args.mock_llm else HttpChatClient()
    if args.instruction is not None:
        queries = [{"query_id": None, "instruction": args.instruction}]
    else:
        queries = json.loads(Path(args.queries).read_text())
    trace_dir = Path(args.trace_dir) if args.trace_dir else Path(args.map) / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    for q in queries:
        res = ground(q["instruction"], imap, embedder, llm, cfg, parsing=not args.no_parsing,
                     selection=not args.no_selection)
        trace = dict(res.trace, query_id=q.get("query_id"), map=str(Path(args.map).resolve()), config=cfg.to_dict())
        path = trace_dir / _trace_name(q["instruction"], not args.no_parsing, not args.no_selection)
        path.write_text(json.dumps(trace, indent=2, sort_keys=True) + "\n")
        flags = ",".join(res.trace["flags"]) or "-"
        print(f"chosen={res.instance_id} trace={path} flags={flags}")
    return 0


def cmd_eval_map(args) -> int:
    instances, cfg, doc = load_map(args.map)
    gts = load_ground_truth(args.gt)
    targets = gt_targets(gts, cfg.voxel_size)
    rows = []
    if instances:
        dim = len(instances[0].representative_feature)
        table = _scene_labels(doc, args.labels, HashedTokenEmbedder(dim, cfg.text_embed_seed))
        imap = InstanceMap(instances, table)
        rows += [(m, "class_agnostic", v) for m, v in map_metrics(predictions_from_map(imap, False), targets, False).items()]
        if table is not None and all(g.label_id is not None for g in gts):
            splits = None
            if args.splits:
                splits = {int(k): v for k, v in json.loads(Path(args.splits).read_text()).items()}
            rows += split_rows(predictions_from_map(imap, True), targets, splits)
    else:
        rows += [(m, "class_agnostic", 0.0) for m in ("AP", "AP50", "AP25")]
    rows.append(("instances", "count", float(len(instances))))
    rows.append(("gt_instances", "count", float(len(gts))))
    text = format_report(rows, cfg.to_dict())
    _emit(text, args.output)
    return 0


def cmd_eval_retrieval(args) -> int:
    if len(args.paths) < 2:
        raise UsageError("eval retrieval needs one or more trace files followed by the ground-truth queries file")
    *trace_paths, gt_path = args.paths
    gt = {q["instruction"]: q for q in json.loads(Path(gt_path).read_text())}
    retrieved, centers, config = [], [], None
    for tp in trace_paths:
        trace = json.loads(Path(tp).read_text())
        q = gt.get(trace["instruction"])
        if q is None:
            raise SchemaError(f"trace {tp} has no ground-truth query")
        retrieved.append([r["centroid"] for r in trace["retrieved"]])
        centers.append(q["center"])
        config = config or trace.get("config")
    cfg = PipelineConfig.from_dict(config) if config else PipelineConfig()
    sr = success_rate(retrieved, centers, radius=cfg.success_radius)
    rows = [(k, "all", v) for k, v in sr.items()] + [("queries", "count", float(len(retrieved)))]
    _emit(format_report(rows, cfg.to_dict()), args.output)
    return 0


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    sys.stdout.write(text)


def cmd_export_ply(args) -> int:
    src = Path(args.path)
    if (src / MAP_FILE).exists():
        instances, _, _ = load_map(src)
        export_map_ply(args.output, instances)
        print(f"{args.output} instances={len(instances)}")
        return 0
    if (src / "manifest.json").exists():
        scene = load_scene(src, PipelineConfig(), _threads(args.threads))
        pts, cols = [], []
        for mid, m in sorted(scene.masks.items()):
            c = m.cloud.centers()
            pts.append(c)
            cols.append(np.tile(np.asarray(instance_color(mid), dtype=np.uint8), (len(c), 1)))
        write_ply(args.output, np.concatenate(pts) if pts else np.zeros((0, 3)),
                  np.concatenate(cols) if cols else np.zeros((0, 3), dtype=np.uint8))
        print(f"{args.output} masks={len(scene.masks)}")
        return 0
    raise SchemaError(f"{src} is neither a map nor a scene directory")


def cmd_gen_scene(args) -> int:
    if args.spec.startswith("builtin:"):
        from .suites import BUILTIN

        name = args.spec[len("builtin:"):]
        if name not in BUILTIN:
            raise UsageError(f"unknown builtin scene {name!r}; choose from {sorted(BUILTIN)}")
        spec = BUILTIN[name]()
    else:
        spec = SyntheticSceneSpec.load(args.spec)
    out = generate_scene(spec, args.output)
    print(str(out))
    return 0


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ovmap", description="Open-vocabulary 3D instance mapping and grounding.")
    p.add_argument("--log-level", choices=sorted(LOG_LEVELS), default="info")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("build-map", help="fuse a scene's 2D masks into 3D instances")
    b.add_argument("scene")
    b.add_argument("-o", "--output", required=True)
    b.add_argument("--config")
    b.add_argument("--ablate", choices=[a for a in ABLATIONS if a != "none"])
    b.add_argument("--threads", type=int)
    b.add_argument("--dump-config", help="write the effective config here")
    b.set_defaults(func=cmd_build_map)

    a = sub.add_parser("aggregate", help="compute multi-view instance features")
    a.add_argument("map")
    a.add_argument("--provider", required=True, help="synthetic | file:<blob> | http:<url>")
    a.add_argument("--scene", help="scene directory if it moved since build-map")
    a.add_argument("--threads", type=int)
    a.set_defaults(func=cmd_aggregate)

    g = sub.add_parser("ground", help="ground an instruction to an instance")
    g.add_argument("map")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--instruction")
    src.add_argument("--queries", help="JSON list of {instruction, ...} to ground in turn")
    g.add_argument("--mock-llm", help="scripted replies instead of a live chat endpoint")
    g.add_argument("--labels", help="label table JSON (defaults to the scene's labels)")
    g.add_argument("--no-parsing", action="store_true", help="closed-vocabulary round one")
    g.add_argument("--no-selection", action="store_true", help="skip round two; take the top-ranked instance")
    g.add_argument("--text-embedder", default="hashed", help="hashed | http:<url>")
    g.add_argument("--trace-dir")
    g.set_defaults(func=cmd_ground)

    e = sub.add_parser("eval", help="score maps or grounding traces")
    esub = e.add_subparsers(dest="eval_command", required=True, parser_class=_Parser)
    em = esub.add_parser("map", help="instance AP against ground truth")
    em.add_argument("map")
    em.add_argument("gt")
    em.add_argument("--labels")
    em.add_argument("--splits", help="JSON mapping label id -> head/common/tail")
    em.add_argument("-o", "--output")
    em.set_defaults(func=cmd_eval_map)
    er = esub.add_parser("retrieval", help="SR and SR_k from grounding traces")
    er.add_argument("paths", nargs="+", help="trace files followed by the ground-truth queries file")
    er.add_argument("-o", "--output")
    er.set_defaults(func=cmd_eval_retrieval)

    x = sub.add_parser("export-ply", help="write a coloured point cloud of a map or scene")
    x.add_argument("path")
    x.add_argument("-o", "--output", required=True)
    x.add_argument("--threads", type=int)
    x.set_defaults(func=cmd_export_ply)

    s = sub.add_parser("gen-scene", help="render a synthetic scene (spec file or builtin:<name>)")
    s.add_argument("spec")
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_gen_scene)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ovmap: error[usage]: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=LOG_LEVELS[args.log_level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        return int(args.func(args))
    except Exception as exc:  # noqa: BLE001 - the CLI reports every failure on one line
        kind = _error_kind(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        logger.debug("traceback", exc_info=True)
        print(f"ovmap: error[{kind}]: {msg}", file=sys.stderr)
        return 2 if kind == "usage" else 1


if __name__ == "__main__":
    raise SystemExit(main())
