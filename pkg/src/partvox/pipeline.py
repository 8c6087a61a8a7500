"""Dataset-level helpers shared by the command line: training pools, checkpoints, inference, ablation."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .boxcodec import canonicalize
from .config import PipelineConfig
from .datagen import coarsen, load_manifest, load_object, make_pair_s1, make_pair_s2
from .errors import ConfigError, Malformed
from .latents import discard_voxels, inference_tokens, merge_parts, save_parts
from .metrics import EvalConfig, EvalReport, evaluate_object, plan_metrics
from .numerics import load_checkpoint, save_checkpoint
from .planner import PlannerConfig, PlannerExample, PlannerInput, PlannerModel, plan_many, train_planner
from .synth import PartDenoiser, SynthConfig, SynthExample, sample_layouts, train_synthesizer
from .voxels import Aabb, LabelMask2D, SparseVoxelGrid, all_part_aabbs, project_mask

log = logging.getLogger("partvox")

ABLATION_VARIANTS = ("full", "no_mask", "no_coverage")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# --------------------------------------------------------------------------- checkpoints

def _sidecar(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def save_model(model: torch.nn.Module, cfg, kind: str, path: str | Path, config_hash: str, extra: dict | None = None):
    save_checkpoint(model, path)
    doc = {"kind": kind, "config": cfg.to_json(), "config_hash": config_hash}
    doc.update(extra or {})
    _sidecar(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _load_sidecar(path: str | Path, kind: str) -> dict:
    path = Path(path)
    if not path.exists() or not _sidecar(path).exists():
        raise ConfigError(f"missing {kind} checkpoint {path} (or its .json sidecar)")
    doc = json.loads(_sidecar(path).read_text())
    if doc.get("kind") != kind:
        raise ConfigError(f"{path} is a {doc.get('kind')} checkpoint, expected {kind}")
    return doc


def load_planner(path: str | Path) -> PlannerModel:
    doc = _load_sidecar(path, "planner")
    model = PlannerModel(PlannerConfig.from_json(doc["config"]))
    model.load_state_dict(load_checkpoint(path))
    return model.eval()


def load_synth(path: str | Path) -> PartDenoiser:
    doc = _load_sidecar(path, "synth")
    model = PartDenoiser(SynthConfig.from_json(doc["config"]))
    model.load_state_dict(load_checkpoint(path))
    return model.eval()


# --------------------------------------------------------------------------- training pools

def granularity_variants(grid: SparseVoxelGrid, meta: dict) -> list[SparseVoxelGrid]:
    """The grid itself plus every coarser labeling that actually merges parts."""
    out = [grid]
    for g in meta.get("granularity", [])[1:]:
        merged = coarsen(grid, {int(k): int(v) for k, v in g.items()})
        if len(merged.part_ids()) != len(grid.part_ids()):
            out.append(merged)
    return out


def planner_examples(grid: SparseVoxelGrid, meta: dict, K: int) -> list[PlannerExample]:
    out = []
    for g in granularity_variants(grid, meta):
        boxes = canonicalize(list(all_part_aabbs(g).values()))
        out.append(PlannerExample.build(g, project_mask(g, "front", K=K), boxes))
    return out


def planner_pool(data: str | Path, ids: Sequence[str], K: int) -> list[list[PlannerExample]]:
    pool = []
    for oid in ids:
        obj = load_object(data, oid)
        pool.append(planner_examples(obj.grid, obj.meta, K))
    return pool


def synth_examples(data: str | Path, ids: Sequence[str], cfg: SynthConfig) -> list[SynthExample]:
    out = []
    for oid in ids:
        obj = load_object(data, oid)
        pair = make_pair_s2(None, obj.grid, cfg.alpha, cfg.latent_seed, cfg.D)
        out.append(SynthExample.build(obj.grid, pair.targets))
    return out


def train_planner_on(data: str | Path, cfg: PlannerConfig, split: str = "train", log_every: int = 0):
    manifest = load_manifest(data)
    pool = planner_pool(data, manifest["splits"][split], cfg.K)
    return train_planner(cfg, pool, log_every=log_every, log=log.info)


def train_synth_on(data: str | Path, cfg: SynthConfig, split: str = "train", log_every: int = 0):
    manifest = load_manifest(data)
    examples = synth_examples(data, manifest["splits"][split], cfg)
    return train_synthesizer(cfg, examples, log_every=log_every, log=log.info)


# --------------------------------------------------------------------------- inference

def plan_object(model: PlannerModel, grid: SparseVoxelGrid, mask: LabelMask2D) -> list[Aabb]:
    (boxes, truncated), = plan_many(model, [PlannerInput.from_grid(grid, mask)])
    if truncated:
        log.warning("planner hit the box budget without EOS")
    return boxes


def synthesize_object(model: PartDenoiser, grid: SparseVoxelGrid, boxes: Sequence[Aabb], seed: int,
                      steps: int | None = None, beta: float | None = None):
    """Joint generation, voxel discarding and merging for one object."""
    layout, skipped = inference_tokens(grid.unlabeled(), boxes, model.cfg.D)
    if skipped:
        log.warning("skipping %d empty boxes", len(skipped))
    generated = sample_layouts(model, [(grid, layout)], steps, [seed])[0]
    filtered = discard_voxels(generated, model.cfg.beta if beta is None else beta)
    return generated, filtered, merge_parts(filtered, grid.resolution)


@dataclass
class PipelineResult:
    report: EvalReport
    written: list[str]


def run_pipeline(cfg: PipelineConfig, data: str | Path, planner_ckpt: str | Path, synth_ckpt: str | Path,
                 out: str | Path, split: str = "test", limit: int | None = None, oracle: bool = False) -> PipelineResult:
    """Plan, synthesize, discard, merge and evaluate each object; failures are isolated per object."""
    planner = load_planner(planner_ckpt)
    synth = load_synth(synth_ckpt)
    manifest = load_manifest(data)
    ids = list(manifest["splits"][split])[:limit]
    out = Path(out)
    (out / "objects").mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    report = EvalReport(header={
        "config_hash": chash, "seed": cfg.seed, "split": split, "objects": len(ids),
        "manifest": file_digest(Path(data) / "manifest.json"),
        "planner_ckpt": file_digest(planner_ckpt), "synth_ckpt": file_digest(synth_ckpt),
        "beta": cfg.beta, "sample_steps": cfg.sample_steps,
    })
    written = []
    for oid in ids:
        try:
            obj = load_object(data, oid)
            boxes = plan_object(planner, obj.grid, obj.mask)
            generated, filtered, merged = synthesize_object(
                synth, obj.grid, boxes, cfg.seed_for(f"sample:{oid}"), cfg.sample_steps, cfg.beta)
            d = out / "objects" / oid
            d.mkdir(parents=True, exist_ok=True)
            doc = merged.to_json()
            doc["config_hash"] = chash
            (d / "merged.json").write_text(json.dumps(doc))
            (d / "boxes.json").write_text(json.dumps([b.to_json() for b in boxes]))
            save_parts(filtered, d / "parts.json", {"config_hash": chash})
            report.add(oid, plan_metrics(obj.grid, boxes), evaluate_object(merged, obj.grid, EvalConfig(oracle=oracle)))
            written.append(oid)
        except Exception as exc:  # noqa: BLE001 - isolate per-object failures
            log.error("object %s failed: %s", oid, exc)
            report.failed[oid] = f"{type(exc).__name__}: {exc}"
    (out / "report.json").write_text(report.dumps())
    return PipelineResult(report, written)


def evaluate_dirs(pred: str | Path, gt: str | Path, oracle: bool = False, config_hash: str = "") -> EvalReport:
    """Score ``pred/objects/<id>/merged.json`` (and ``boxes.json``) against a dataset directory."""
    pred = Path(pred)
    report = EvalReport(header={"config_hash": config_hash, "oracle": oracle})
    for d in sorted(p for p in (pred / "objects").iterdir() if p.is_dir()):
        oid = d.name
        try:
            obj = load_object(gt, oid)
            merged = SparseVoxelGrid.load(d / "merged.json")
            plan = None
            if (d / "boxes.json").exists():
                boxes = [Aabb.from_json(b) for b in json.loads((d / "boxes.json").read_text())]
                plan = plan_metrics(obj.grid, boxes)
            report.add(oid, plan, evaluate_object(merged, obj.grid, EvalConfig(oracle=oracle)))
        except Exception as exc:  # noqa: BLE001
            report.failed[oid] = f"{type(exc).__name__}: {exc}"
    return report


# --------------------------------------------------------------------------- ablation

def variant_config(cfg: PipelineConfig, variant: str, steps: int | None = None) -> PlannerConfig:
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    over = {}
    if steps is not None:
        over["steps"] = steps
    if variant == "no_mask":
        over["use_mask"] = False
    if variant == "no_coverage":
        over["lam_cov"] = 0.0
    return cfg.planner(**over)


def planning_scores(model: PlannerModel, examples: Sequence[PlannerExample]) -> dict:
    plans = plan_many(model, [e.inputs for e in examples])
    rows = [plan_metrics(e.grid, boxes) for e, (boxes, _) in zip(examples, plans)]
    return {k: float(np.mean([r[k] for r in rows])) for k in ("voxel_recall", "voxel_iou", "bbox_iou")}


def run_ablation(cfg: PipelineConfig, data: str | Path, variants: Sequence[str] = ABLATION_VARIANTS,
                 steps: int | None = None, log_every: int = 0, eval_split: str = "test",
                 models: dict | None = None) -> dict:
    """Train each planner variant with identical seeds and budget; score held-out objects at every granularity.

    Trained models are stored into ``models`` (keyed by variant) when a dict is given.
    """
    manifest = load_manifest(data)
    train = planner_pool(data, manifest["splits"]["train"], cfg.K)
    held = [e for v in planner_pool(data, manifest["splits"][eval_split], cfg.K) for e in v]
    header, table = {}, []
    for name in variants:
        pcfg = variant_config(cfg, name, steps)
        model, hist = train_planner(pcfg, train, log_every=log_every, log=log.info)
        scores = planning_scores(model, held)
        if models is not None:
            models[name] = model
        header[name] = {"lam_cov": pcfg.lam_cov, "use_mask": pcfg.use_mask, "steps": len(hist), "seed": pcfg.seed,
                        "final_loss": hist[-1]["loss"]}
        table.append({"variant": name, **scores})
    comparisons = {}
    full = next((r for r in table if r["variant"] == "full"), None)
    if full is not None:
        for r in table:
            if r["variant"] == "full":
                continue
            gap = full["voxel_recall"] - r["voxel_recall"]
            comparisons[f"full_vs_{r['variant']}"] = {
                "recall_gap": gap, "sign": "+" if gap > 0 else ("-" if gap < 0 else "0"),
                "iou_gap": full["voxel_iou"] - r["voxel_iou"],
            }
    return {"config_hash": cfg.hash(), "eval_split": eval_split, "eval_items": len(held),
            "columns": ["voxel_recall", "voxel_iou", "bbox_iou"],
            "header": header, "table": table, "comparisons": comparisons}


def read_mask(path: str | Path) -> LabelMask2D:
    try:
        return LabelMask2D.from_json(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise Malformed(f"bad mask file {path}: {exc}") from exc
