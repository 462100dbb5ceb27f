"""One-shot detection metrics and the trained-model analyses.

AP50 with all-points interpolation under the 5-query protocol: for each
class, the query pool is shuffled per target image id, the first five
patches each produce a detection run, and the five resulting APs are
averaged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from . import synthdata as sd
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    per_class_ap: dict[int, float]
    map_seen: float
    map_unseen: float

    def to_csv(self) -> str:
        lines = ["class,ap"]
        for cid in sorted(self.per_class_ap):
            lines.append(f"{cid},{self.per_class_ap[cid]:.6f}")
        lines.append(f"mAP_seen,{self.map_seen:.6f}")
        lines.append(f"mAP_unseen,{self.map_unseen:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(detections: list[tuple[int, np.ndarray, float]],
                      gt_by_image: dict[int, np.ndarray],
                      iou_thresh: float = 0.5) -> float:
    """All-points-interpolated AP for one class.

    detections: (image_id, box, score) triples, any order. Greedy matching
    in descending score order; each ground-truth box may match once, and
    IoU must strictly exceed the threshold. Duplicates on a matched gt
    count as false positives.
    """
    n_gt = sum(len(g) for g in gt_by_image.values())
    if n_gt == 0:
        log.warning("average_precision: no ground-truth boxes; AP defined as 0")
        return 0.0
    if not detections:
        return 0.0
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i][2], detections[i][0], i))
    matched: dict[int, np.ndarray] = {
        img: np.zeros(len(g), dtype=bool) for img, g in gt_by_image.items()
    }
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box, _score = detections[i]
        gts = gt_by_image.get(img)
        best_iou, best_j = 0.0, -1
        if gts is not None and len(gts):
            ious = det.iou_matrix(np.asarray(box)[None, :], gts)[0]
            best_j = int(np.argmax(ious))
            best_iou = float(ious[best_j])
        if best_iou > iou_thresh and not matched[img][best_j]:
            matched[img][best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    ctp, cfp = np.cumsum(tp), np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # all-points interpolation: integrate the precision envelope over recall
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]).sum())


def evaluate_one_shot(params: dict[str, Tensor], scenes: list[sd.Scene],
                      pools: dict[int, list[sd.QueryPatch]], split: sd.SplitSpec,
                      class_set, cfg: det.DetectorConfig, n_queries: int = 5,
                      threads: int = 1) -> dict[int, float]:
    """Per-class AP averaged over the 5 seeded queries per target image."""

    def run_scene(scene: sd.Scene):
        out = {}
        image = Tensor(scene.image)
        for cid in class_set:
            if cid not in set(scene.class_ids.tolist()) or cid not in pools:
                continue
            queries = sd.test_query_sampler(pools[cid], scene.image_id, n_queries)
            runs = []
            for qp in queries:
                dets = det.detect(image, Tensor(qp.patch), params, cfg)
                runs.append([(scene.image_id, box, score) for box, score in dets])
            out[cid] = runs
        return scene.image_id, out

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            raw = list(ex.map(run_scene, scenes))
    else:
        raw = [run_scene(s) for s in scenes]
    raw.sort(key=lambda t: t[0])  # deterministic reduction order

    per_class: dict[int, float] = {}
    for cid in class_set:
        gt_by_image = {}
        runs_by_q: list[list] = [[] for _ in range(n_queries)]
        hit = False
        for scene in scenes:
            gts = scene.boxes_of(cid)
            if len(gts) == 0:
                continue
            gt_by_image[scene.image_id] = gts
            per_scene = dict(raw)[scene.image_id].get(cid)
            if per_scene is None:
                continue
            hit = True
            for qi, dets in enumerate(per_scene):
                runs_by_q[qi].extend(dets)
        if not hit:
            log.warning("class %d absent from all evaluation scenes; skipped", cid)
            continue
        aps = [average_precision(runs_by_q[qi], gt_by_image, cfg.fg_iou_thresh)
               for qi in range(n_queries)]
        per_class[cid] = float(np.mean(aps))
    return per_class


def eval_result(per_class: dict[int, float], split: sd.SplitSpec) -> EvalResult:
    seen = [per_class[c] for c in split.seen if c in per_class]
    unseen = [per_class[c] for c in split.unseen if c in per_class]
    return EvalResult(per_class_ap=per_class,
                      map_seen=float(np.mean(seen)) if seen else 0.0,
                      map_unseen=float(np.mean(unseen)) if unseen else 0.0)


def proposal_heatmap(boxes: np.ndarray, image_size: int) -> np.ndarray:
    """Per-pixel proposal-coverage counts normalized into a probability map."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] < 1:
        raise ValueError("proposal_heatmap needs at least one box")
    counts = np.zeros((image_size, image_size), dtype=np.float64)
    for x1, y1, x2, y2 in boxes:
        c0 = int(np.clip(np.floor(x1), 0, image_size - 1))
        r0 = int(np.clip(np.floor(y1), 0, image_size - 1))
        c1 = int(np.clip(np.ceil(x2), c0 + 1, image_size))
        r1 = int(np.clip(np.ceil(y2), r0 + 1, image_size))
        counts[r0:r1, c0:c1] += 1.0
    return counts / counts.sum()


def heatmap_mass_in_boxes(heatmap: np.ndarray, boxes: np.ndarray) -> float:
    """Probability mass of the heatmap falling inside the union of boxes."""
    size = heatmap.shape[0]
    mask = np.zeros_like(heatmap, dtype=bool)
    for x1, y1, x2, y2 in np.asarray(boxes).reshape(-1, 4):
        c0 = int(np.clip(np.floor(x1), 0, size - 1))
        r0 = int(np.clip(np.floor(y1), 0, size - 1))
        c1 = int(np.clip(np.ceil(x2), c0 + 1, size))
        r1 = int(np.clip(np.ceil(y2), r0 + 1, size))
        mask[r0:r1, c0:c1] = True
    return float(heatmap[mask].sum())


@dataclass
class CoExStats:
    per_class_mean_w: dict[int, np.ndarray]
    class_ids: list[int]
    distance_matrix: np.ndarray

    def to_csv(self) -> str:
        header = "class," + ",".join(str(c) for c in self.class_ids)
        lines = [header]
        for i, ci in enumerate(self.class_ids):
            row = ",".join(f"{self.distance_matrix[i, j]:.6f}" for j in range(len(self.class_ids)))
            lines.append(f"{ci},{row}")
        return "\n".join(lines) + "\n"


def collect_coexcitation(params: dict[str, Tensor], scenes: list[sd.Scene],
                         pools: dict[int, list[sd.QueryPatch]],
                         cfg: det.DetectorConfig, n_queries: int = 5) -> dict[int, list[np.ndarray]]:
    """Co-excitation vectors w for every test query, grouped by query class."""
    from . import blocks
    from . import tensor as T
    if not cfg.use_co_excitation:
        raise ValueError("co-excitation analysis needs a model with the SCE block")
    vectors: dict[int, list[np.ndarray]] = {}
    with T.no_grad():
        for scene in scenes:
            image = Tensor(scene.image)
            present = sorted({int(c) for c in scene.class_ids})
            for cid in present:
                if cid not in pools:
                    continue
                for qp in sd.test_query_sampler(pools[cid], scene.image_id, n_queries):
                    phi_i = det.backbone_forward(image, params, cfg)
                    phi_p = det.backbone_forward(Tensor(qp.patch), params, cfg)
                    if cfg.use_co_attention:
                        fi, fp = blocks.co_attention_extend(phi_i, phi_p, params)
                    else:
                        fi, fp = phi_i, phi_p
                    w, _, _ = blocks.squeeze_co_excitation(fp, fi, params, cfg.excite_from)
                    vectors.setdefault(cid, []).append(w.data.copy())
    return vectors


def coexcitation_analysis(params: dict[str, Tensor], scenes: list[sd.Scene],
                          pools: dict[int, list[sd.QueryPatch]],
                          cfg: det.DetectorConfig) -> CoExStats:
    """Average w per class and the symmetric pairwise Euclidean distance matrix."""
    vectors = collect_coexcitation(params, scenes, pools, cfg)
    means = {cid: np.mean(vs, axis=0) for cid, vs in vectors.items()}
    ids = sorted(means)
    n = len(ids)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(means[ids[i]] - means[ids[j]]))
            dist[i, j] = dist[j, i] = d
    return CoExStats(per_class_mean_w=means, class_ids=ids, distance_matrix=dist)


ABLATION_ROWS: tuple[tuple[bool, bool, bool], ...] = (
    # (co-attention, co-excitation, margin loss)
    (True, True, True),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (False, False, True),
)


def run_ablation(base_cfg, scenes_fn, registry, split, init_seed: int = 0):
    """Train each toggle row from the same seed and evaluate seen/unseen mAP.

    Returns a list of dicts, one per row, in ABLATION_ROWS order.
    """
    from . import training
    results = []
    for co_att, co_ex, margin in ABLATION_ROWS:
        cfg = training.replace_toggles(base_cfg, co_att, co_ex, margin)
        outcome = training.train(cfg, registry=registry, split=split)
        res = outcome.final_eval
        results.append({
            "co_attention": co_att,
            "co_excitation": co_ex,
            "margin_loss": margin,
            "map_seen": res.map_seen,
            "map_unseen": res.map_unseen,
        })
    return results


def ablation_csv(rows: list[dict]) -> str:
    lines = ["co_attention,co_excitation,margin_loss,map_seen,map_unseen"]
    for r in rows:
        lines.append(f"{int(r['co_attention'])},{int(r['co_excitation'])},"
                     f"{int(r['margin_loss'])},{r['map_seen']:.6f},{r['map_unseen']:.6f}")
    return "\n".join(lines) + "\n"
