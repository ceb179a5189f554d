"""End-to-end two-stage refinement over one scene."""

from __future__ import annotations

import itertools
import os
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import RunConfig
from .fusion import (
    PIE_MODES,
    NeighborIndex,
    ProposalFeatures,
    fda_aggregate,
    global_fuse,
    local_fuse,
    model_param_spec,
    pie_encode,
    refine,
    roi_grid_pool,
)
from .geometry import Box7, iou_3d, split_box_grid
from .kernels import ParamStore, init_params, precision
from .metrics import Detection, EvalFrame, evaluate
from .synth import Scene, perturb_boxes
from .voxel import SparseVoxelMap, surrogate_backbone

__all__ = ["RunResult", "ablate", "build_params", "make_proposals", "run_scene", "thread_count"]

THREADS_ENV = "L2GF_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def build_params(cfg: RunConfig, seed: int | None = None) -> ParamStore:
    seed = cfg.generator.param_seed if seed is None else seed
    return init_params(model_param_spec(cfg.voxel, cfg.fusion), seed)


def make_proposals(scene: Scene, cfg: RunConfig) -> list[tuple[Box7, float]]:
    g = cfg.generator
    return perturb_boxes(scene.gt_boxes, g.proposal_seed, g.center_sigma, g.size_sigma, g.heading_sigma)


@dataclass
class RunResult:
    detections: list[Detection]
    proposals: list[tuple[Box7, float]]
    features: list[ProposalFeatures] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def mean_iou(self, gt: Sequence[Box7]) -> tuple[float, float]:
        """Mean 3D IoU to the source GT box, for refined boxes and for proposals."""
        if not gt:
            return 0.0, 0.0
        refined = [iou_3d(d.box, g) for d, g in zip(self.detections, gt)]
        props = [iou_3d(p, g) for (p, _), g in zip(self.proposals, gt)]
        return float(np.mean(refined)), float(np.mean(props))


def run_scene(scene: Scene, cfg: RunConfig, params: ParamStore,
              proposals: list[tuple[Box7, float]] | None = None,
              maps: list[SparseVoxelMap] | None = None, frame: int = 0, threads: int | None = None,
              keep_features: bool = False) -> RunResult:
    """voxelize, backbone, proposals, global fusion, then per-proposal pooling, PIE, local fusion, FDA, refine.

    Detections come back in proposal order; ``detections[i]`` refines
    ``proposals[i]`` and carries the class of the ground truth it came from.
    """
    fcfg = cfg.fusion
    timings: dict[str, float] = defaultdict(float)
    threads = thread_count() if threads is None else threads

    def tick(stage: str, t0: float) -> float:
        now = time.perf_counter()
        timings[stage] += now - t0
        return now

    with precision(cfg.generator.precision):
        t = time.perf_counter()
        if maps is None:
            maps = surrogate_backbone(scene.points, cfg.voxel, params)
        t = tick("backbone", t)
        if proposals is None:
            proposals = make_proposals(scene, cfg)
        t = tick("proposals", t)
        index = None
        if fcfg.enable_gof:
            index = NeighborIndex(global_fuse(maps, scene.feature_maps, scene.cameras, params, fcfg))
        tick("global_fuse", t)

        def one(i: int):
            box = proposals[i][0]
            local_t: dict[str, float] = defaultdict(float)
            t0 = time.perf_counter()
            grid = split_box_grid(box, fcfg.u)
            g_feat, found = None, np.zeros(fcfg.u ** 3, dtype=bool)
            if index is not None:
                g_feat, found = roi_grid_pool(index, grid, params, fcfg)
            t1 = time.perf_counter(); local_t["roi_grid_pool"] += t1 - t0
            p_feat, stats = pie_encode(box, grid, scene.points, params, fcfg)
            t2 = time.perf_counter(); local_t["pie_encode"] += t2 - t1
            l_feat = local_fuse(grid, p_feat, scene.feature_maps, scene.cameras, params, fcfg) if fcfg.enable_lof else None
            t3 = time.perf_counter(); local_t["local_fuse"] += t3 - t2
            pf = ProposalFeatures.build(p_feat, l_feat, g_feat, (stats.counts > 0) | found)
            flat = fda_aggregate(pf, params, fcfg)
            t4 = time.perf_counter(); local_t["fda_aggregate"] += t4 - t3
            conf, refined = refine(flat, box, params)
            local_t["refine"] += time.perf_counter() - t4
            label = scene.gt_classes[i] if i < len(scene.gt_classes) else 0
            return Detection(refined, conf, label, frame), pf, local_t

        if threads > 1 and len(proposals) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                outputs = list(pool.map(one, range(len(proposals))))
        else:
            outputs = [one(i) for i in range(len(proposals))]

    detections = [o[0] for o in outputs]
    for _, _, lt in outputs:
        for k, v in lt.items():
            timings[k] += v
    features = [o[1] for o in outputs] if keep_features else []
    return RunResult(detections, proposals, features, dict(timings))


def evaluate_run(scene: Scene, detections: Sequence[Detection], cfg: RunConfig, frame: int = 0):
    frame_obj = EvalFrame(
        [d for d in detections if d.frame == frame],
        list(zip(scene.gt_boxes, scene.gt_classes)),
        cfg.eval.thresholds(),
    )
    return evaluate([frame_obj])


def ablate(scene: Scene, cfg: RunConfig, params: ParamStore) -> list[dict]:
    """Metrics over every GoF/LoF/FDA toggle combination and both PIE input types."""
    with precision(cfg.generator.precision):
        maps = surrogate_backbone(scene.points, cfg.voxel, params)
    proposals = make_proposals(scene, cfg)
    rows = []
    for gof, lof, fda in itertools.product((False, True), repeat=3):
        for mode in PIE_MODES:
            run_cfg = replace(cfg, fusion=replace(cfg.fusion.with_toggles(gof, lof, fda), pie_mode=mode))
            result = run_scene(scene, run_cfg, params, proposals=proposals, maps=maps)
            metrics = evaluate_run(scene, result.detections, run_cfg)
            present = [m for m in metrics.values() if m["n_gt"] > 0]
            refined_iou, _ = result.mean_iou(scene.gt_boxes)
            rows.append({
                "gof": gof, "lof": lof, "fda": fda, "pie_mode": mode,
                "mAP": float(np.mean([m["AP"] for m in present])) if present else 0.0,
                "mAPH": float(np.mean([m["APH"] for m in present])) if present else 0.0,
                "mean_iou": refined_iou,
                "mean_conf": float(np.mean([d.confidence for d in result.detections])) if result.detections else 0.0,
                "detections": result.detections,
            })
    return rows
