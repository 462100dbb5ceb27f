"""End-to-end training: data assembly, per-step objective, SGD schedule,
checkpointing, and CSV logging.

Deterministic given (init_seed, data_seed) under single-threaded execution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint, detector as det, evaluation as ev, losses, synthdata as sd
from . import tensor as T
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig)
    epochs: int = 10
    batch_size: int = 8
    base_lr: float = 0.01
    momentum: float = 0.9
    decay_factor: float = 0.1
    decay_every_epochs: int = 4
    grad_clip: float | None = 1.0
    rpn_weight: float = 0.1
    lambda_mr: float = 3.0
    m_plus: float = 0.7
    m_minus: float = 0.3
    normalize_margin: bool = True
    use_margin_loss: bool = True
    init_seed: int = 0
    data_seed: int = 0
    num_classes: int = 20
    num_unseen: int = 4
    train_scenes: int = 160
    test_scenes: int = 40
    query_scenes: int = 48
    min_objects: int = 2
    max_objects: int = 5
    min_obj_size: float = 16.0
    max_obj_size: float = 30.0
    noise: float = 0.06
    # stand-in for the pretrained backbone assumed by the detection recipe:
    # a short crop-classification phase over seen-class patches, after which
    # the backbone is frozen for detector training
    pretrain_steps: int = 1500
    freeze_backbone: bool = True
    out_dir: str | None = None

    def margin_cfg(self) -> losses.MarginConfig:
        return losses.MarginConfig(self.m_plus, self.m_minus, self.normalize_margin)


def replace_toggles(cfg: TrainConfig, co_att: bool, co_ex: bool, margin: bool) -> TrainConfig:
    return replace(cfg,
                   detector=replace(cfg.detector, use_co_attention=co_att,
                                    use_co_excitation=co_ex),
                   use_margin_loss=margin)


@dataclass
class Dataset:
    registry: list[sd.SynthClass]
    split: sd.SplitSpec
    train: list[sd.Scene]
    test: list[sd.Scene]
    train_pools: dict[int, list[sd.QueryPatch]]
    test_pools: dict[int, list[sd.QueryPatch]]


# test scene ids live in a separate block so train/test pixels never collide
TEST_ID_BASE = 100_000
QUERY_ID_BASE = 200_000


def build_dataset(cfg: TrainConfig, registry=None, split=None) -> Dataset:
    if registry is None or split is None:
        registry, split = sd.make_registry(cfg.num_classes, cfg.data_seed, cfg.num_unseen)
    scfg = sd.SceneConfig(image_size=cfg.detector.image_size, min_objects=cfg.min_objects,
                          max_objects=cfg.max_objects, min_size=cfg.min_obj_size,
                          max_size=cfg.max_obj_size, noise=cfg.noise)
    train_cfg = replace(scfg, class_pool=split.seen)
    all_cfg = replace(scfg, class_pool=tuple(c.class_id for c in registry))
    train = [sd.render_scene(registry, i, train_cfg, cfg.data_seed)
             for i in range(cfg.train_scenes)]
    test = [sd.render_scene(registry, TEST_ID_BASE + i, all_cfg, cfg.data_seed)
            for i in range(cfg.test_scenes)]
    queries = [sd.render_scene(registry, QUERY_ID_BASE + i, all_cfg, cfg.data_seed)
               for i in range(cfg.query_scenes)]
    p = cfg.detector.query_size
    return Dataset(registry=registry, split=split, train=train, test=test,
                   train_pools=sd.build_query_pools(train, p),
                   test_pools=sd.build_query_pools(queries, p))


# ---------------------------------------------------------------------------
# per-pair objective


def _rpn_targets(anchors: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Anchor objectness targets/weights plus positive-row regression targets.

    Positive: IoU > 0.5 with some gt, or best anchor for a gt. Negative:
    max IoU < 0.3. In-between anchors get weight 0. Positives and negatives
    each carry half the total weight, deterministically (no sampling).
    """
    m = det.iou_matrix(anchors, gt)
    best = m.max(axis=1)
    targets = np.zeros(len(anchors))
    pos = best > 0.5
    for j in range(m.shape[1]):
        col = m[:, j]
        if col.max() > 0.1:
            pos[int(np.argmax(col))] = True
    neg = (best < 0.3) & ~pos
    targets[pos] = 1.0
    weights = np.zeros(len(anchors))
    if pos.any():
        weights[pos] = 0.5 / pos.sum()
    if neg.any():
        weights[neg] = (0.5 if pos.any() else 1.0) / neg.sum()
    return targets, weights, pos


def _jitter_boxes(boxes: np.ndarray, image_size: int, rng: sd.XorShift,
                  n_per_box: int = 2) -> np.ndarray:
    """Randomly shifted/rescaled copies of each box, overlap roughly 0.5-0.9.

    Proposals at test time rarely align perfectly with the object, so the
    second stage must be trained on imperfect boxes as well as exact ones.
    """
    out = []
    for b in boxes:
        x1, y1, x2, y2 = b
        w, h = x2 - x1, y2 - y1
        for _ in range(n_per_box):
            dx = (rng.uniform() - 0.5) * 0.6 * w
            dy = (rng.uniform() - 0.5) * 0.6 * h
            sw = w * (0.7 + 0.7 * rng.uniform())
            sh = h * (0.7 + 0.7 * rng.uniform())
            cx, cy = (x1 + x2) / 2 + dx, (y1 + y2) / 2 + dy
            nb = np.array([cx - sw / 2, cy - sh / 2, cx + sw / 2, cy + sh / 2])
            nb[[0, 1]] = np.maximum(nb[[0, 1]], 0.0)
            nb[[2, 3]] = np.minimum(nb[[2, 3]], float(image_size))
            if nb[2] - nb[0] >= 2.0 and nb[3] - nb[1] >= 2.0:
                out.append(nb)
    return np.array(out) if out else np.zeros((0, 4))


def pair_loss(pair: sd.QueryTargetPair, params: dict[str, Tensor],
              cfg: TrainConfig, step_seed: int = 0) -> tuple[Tensor, dict[str, float]]:
    """Eq.-7-style objective for one query/target pair, plus RPN terms."""
    dcfg = cfg.detector
    # splice every annotated box into the proposal set: the query-class ones
    # guarantee foreground rows, the rest act as hard negatives for matching.
    # Jittered copies expose the head to the imperfect overlaps it will see
    # from real proposals at test time.
    jit_rng = sd.XorShift(sd.mix_seed(pair.scene.image_id, pair.query_class, step_seed))
    jittered = _jitter_boxes(pair.scene.boxes, dcfg.image_size, jit_rng)
    spliced = np.concatenate([pair.scene.boxes, jittered], axis=0)
    state = det.forward_pipeline(Tensor(pair.scene.image), Tensor(pair.query), params, dcfg,
                                 extra_boxes=spliced)

    iou_q = det.iou_matrix(state.prop_boxes, pair.gt_boxes).max(axis=1)
    labels = (iou_q > dcfg.fg_iou_thresh).astype(np.float64)
    # partial overlaps are ambiguous: a 0.4-IoU box is mostly object, and
    # calling it background teaches the scorer to reject near-misses that
    # the box regressor could still snap into place. Leave those rows out
    # of both classification and ranking.
    ambiguous = (iou_q > 0.3) & (labels < 0.5)
    # proposals are overwhelmingly background; rebalance so the few
    # foreground rows carry a fixed share of the classification signal.
    # Rows covering objects of a *different* class get their own share:
    # they are the only negatives that teach query/proposal matching rather
    # than plain objectness.
    other = pair.scene.boxes[pair.scene.class_ids != pair.query_class]
    hard = (det.label_proposals(state.prop_boxes, other, dcfg.fg_iou_thresh)
            if len(other) else None)
    weights = losses.balanced_ce_weights(labels, 0.25, hard_mask=hard, hard_fraction=0.4)
    weights[ambiguous] = 0.0
    ce = losses.detection_ce_loss(state.logits, labels, weights)

    gt = pair.gt_boxes
    best_gt = np.argmax(det.iou_matrix(state.prop_boxes, gt), axis=1)
    reg_targets = det.encode_deltas(state.prop_boxes, gt[best_gt])
    # the regressor trains on every row near the query class, including the
    # ambiguous band, so loose test-time proposals get pulled onto the object
    reg = losses.box_regression_loss(state.head_deltas, reg_targets,
                                     (iou_q >= 0.35).astype(np.float64))

    if cfg.use_margin_loss:
        mr = losses.margin_ranking_loss(state.s, labels, cfg.margin_cfg(),
                                        mask=~ambiguous)
    else:
        mr = Tensor(0.0)

    # RPN trains against every annotated box in the scene, not only the
    # query class: proposals must stay class-agnostic.
    all_gt = pair.scene.boxes
    a_targets, a_weights, a_pos = _rpn_targets(state.anchors, all_gt)
    rpn_cls = losses.binary_ce_with_logits(state.rpn_obj, a_targets, a_weights)
    pos_idx = np.nonzero(a_pos)[0]
    if pos_idx.size:
        best = np.argmax(det.iou_matrix(state.anchors[pos_idx], all_gt), axis=1)
        rpn_t = det.encode_deltas(state.anchors[pos_idx], all_gt[best])
        sel = T.make_op(state.rpn_deltas.data[pos_idx], (state.rpn_deltas,),
                        losses._row_select_bwd(state.rpn_deltas, pos_idx), "row-select")
        rpn_reg = T.affine(losses.smooth_l1_sum(sel, rpn_t), 1.0 / pos_idx.size, 0.0)
    else:
        rpn_reg = Tensor(0.0)

    total = losses.total_loss(ce, reg, mr, losses.LossWeights(cfg.lambda_mr))
    # the proposal network converges with a wide margin; keep its large
    # gradients from monopolizing the shared backbone
    total = T.add(total, T.affine(T.add(rpn_cls, rpn_reg), cfg.rpn_weight, 0.0))
    comps = {"lCE": ce.item(), "lReg": reg.item(), "lMR": mr.item(),
             "lRPNcls": rpn_cls.item(), "lRPNreg": rpn_reg.item(), "total": total.item()}
    return total, comps


def train_step(pairs: list[sd.QueryTargetPair], params: dict[str, Tensor],
               opt: T.SGD, cfg: TrainConfig, epoch: int) -> dict[str, float]:
    """One optimizer update over a batch of pairs (gradients averaged)."""
    opt.zero_grad()
    agg: dict[str, float] = {}
    scale = 1.0 / len(pairs)
    for pair in pairs:
        try:
            loss, comps = pair_loss(pair, params, cfg, step_seed=epoch)
        except T.NumericError as e:
            raise T.NumericError(
                f"non-finite loss on scene {pair.scene.image_id} "
                f"(query class {pair.query_class}): {e}") from e
        T.affine(loss, scale, 0.0).backward()
        for k, v in comps.items():
            agg[k] = agg.get(k, 0.0) + v * scale
    opt.step(epoch)
    return agg


@dataclass
class TrainOutcome:
    params: dict[str, Tensor]
    log_rows: list[dict[str, float]]
    final_eval: ev.EvalResult
    dataset: Dataset

    def log_csv(self) -> str:
        cols = ["step", "lCE", "lReg", "lMR", "lRPNcls", "lRPNreg", "total"]
        lines = [",".join(cols)]
        for row in self.log_rows:
            lines.append(",".join(
                str(int(row[c])) if c == "step" else f"{row[c]:.6f}" for c in cols))
        return "\n".join(lines) + "\n"


def pretrain_backbone(params: dict[str, Tensor], ds: Dataset, cfg: TrainConfig) -> float:
    """Crop-classification warm-up for the backbone over seen-class patches.

    Trains backbone weights plus a throwaway linear classifier on the
    training query pool. Returns the accuracy over the final 100 steps.
    Uses only C0 classes, so the unseen split never leaks in.
    """
    seen = list(ds.split.seen)
    index = {cid: i for i, cid in enumerate(seen)}
    crops = [(p.patch, index[cid])
             for cid, pool in sorted(ds.train_pools.items()) if cid in index
             for p in pool]
    # native-resolution crops from the training scenes: the query patch is
    # rescaled to P x P but scene objects are pooled at their own size, so
    # the embedding must be consistent across both scales
    size = cfg.detector.image_size
    for scene in ds.train:
        for box, cid in zip(scene.boxes, scene.class_ids):
            if int(cid) not in index:
                continue
            x1, y1 = int(np.floor(box[0])), int(np.floor(box[1]))
            x2, y2 = int(np.ceil(box[2])), int(np.ceil(box[3]))
            x1, y1 = max(x1, 0), max(y1, 0)
            x2, y2 = min(x2, size), min(y2, size)
            if x2 - x1 >= 8 and y2 - y1 >= 8:
                crops.append((scene.image[:, y1:y2, x1:x2].copy(), index[int(cid)]))
    if not crops or cfg.pretrain_steps <= 0:
        return 0.0
    n = cfg.detector.channels
    rng = np.random.default_rng(sd.mix_seed(cfg.init_seed, 0xBACE) % (2 ** 32))
    w = Tensor(rng.uniform(-1, 1, (len(seen), n)) * np.sqrt(6.0 / n), requires_grad=True)
    b = Tensor(np.zeros(len(seen)), requires_grad=True)
    trainable = {k: v for k, v in params.items() if k.startswith("backbone.")}
    trainable["_aux.w"] = w
    trainable["_aux.b"] = b
    opt = T.SGD(trainable, lr=cfg.base_lr, momentum=cfg.momentum)
    prng = sd.XorShift(sd.mix_seed(cfg.data_seed, 0xC0DE))
    hits: list[int] = []
    for _ in range(cfg.pretrain_steps):
        opt.zero_grad()
        for _ in range(cfg.batch_size):
            patch, y = crops[prng.randint(len(crops))]
            g = T.gap(det.backbone_forward(Tensor(patch), params, cfg.detector))
            logits = T.add(T.matmul(T.reshape(g, (1, n)), T.transpose2d(w)),
                           T.reshape(b, (1, len(seen))))
            row = logits.data[0]
            m = row.max()
            p = np.exp(row - m) / np.exp(row - m).sum()
            p[y] -= 1.0
            T.tsum(T.mul(logits, Tensor(p.reshape(1, -1) / cfg.batch_size))).backward()
            hits.append(int(row.argmax() == y))
        opt.step()
    return float(np.mean(hits[-100:]))


def train(cfg: TrainConfig, registry=None, split=None, dataset: Dataset | None = None,
          progress=None) -> TrainOutcome:
    ds = dataset or build_dataset(cfg, registry, split)
    params = det.init_model_params(cfg.detector, cfg.init_seed)
    if cfg.pretrain_steps > 0:
        acc = pretrain_backbone(params, ds, cfg)
        log.info("backbone warm-up accuracy %.3f", acc)
        if cfg.freeze_backbone:
            for k, p in params.items():
                if k.startswith("backbone."):
                    p.requires_grad = False
    opt = T.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum,
                decay_factor=cfg.decay_factor, decay_every_epochs=cfg.decay_every_epochs,
                clip_norm=cfg.grad_clip)
    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = list(range(len(ds.train)))
        sd.XorShift(sd.mix_seed(cfg.data_seed, 0xE90C, epoch)).shuffle(order)
        pair_rng = sd.XorShift(sd.mix_seed(cfg.data_seed, 0x9A12, epoch))
        batch: list[sd.QueryTargetPair] = []
        for si in order:
            pair = sd.sample_training_pair(ds.train[si], ds.train_pools, ds.split, pair_rng)
            if pair is None:
                continue
            batch.append(pair)
            if len(batch) == cfg.batch_size:
                comps = train_step(batch, params, opt, cfg, epoch)
                comps["step"] = step
                rows.append(comps)
                step += 1
                batch = []
        if batch:
            comps = train_step(batch, params, opt, cfg, epoch)
            comps["step"] = step
            rows.append(comps)
            step += 1
        if out_dir:
            checkpoint.save(params, out_dir / f"epoch_{epoch:03d}.ckpt")
        if progress:
            progress(epoch, rows[-1] if rows else {})

    all_classes = [c.class_id for c in ds.registry]
    per_class = ev.evaluate_one_shot(params, ds.test, ds.test_pools, ds.split,
                                     all_classes, cfg.detector)
    result = ev.eval_result(per_class, ds.split)
    if out_dir:
        checkpoint.save(params, out_dir / "final.ckpt")
    return TrainOutcome(params=params, log_rows=rows, final_eval=result, dataset=ds)
