"""The toy two-stage one-shot detector.

Pipeline: small conv backbone on scene and query patch -> mutual non-local
extension (optional) -> RPN over the scene map -> top-K proposals ->
squeeze-and-co-excitation (optional) -> query vector q and per-proposal
vector r by cropped GAP -> ranking MLP (2N -> 8 -> 2) and box refinement.

Boxes are (x1, y1, x2, y2) in pixel coordinates, as float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import blocks
from . import tensor as T
from .tensor import ShapeError, Tensor, TensorError


@dataclass
class DetectorConfig:
    channels: int = 32
    image_size: int = 64
    query_size: int = 32
    stride: int = 8
    k_proposals: int = 128
    anchor_scales: tuple[float, ...] = (12.0, 20.0, 32.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_nms_iou: float = 0.7
    rpn_pre_nms_top: int = 256
    fg_iou_thresh: float = 0.5
    final_nms_iou: float = 0.5
    score_thresh: float = 0.05
    reduction_ratio: int = 4
    excite_from: str = "query"
    use_co_attention: bool = True
    use_co_excitation: bool = True
    backbone_widths: tuple[int, ...] = (16, 32, 32)

    def __post_init__(self):
        if self.k_proposals < 1:
            raise ValueError("k_proposals must be >= 1")
        if not 0.0 < self.fg_iou_thresh < 1.0:
            raise ValueError("fg_iou_thresh must lie in (0,1)")


# ---------------------------------------------------------------------------
# box geometry


def iou(a, b) -> float:
    """Intersection-over-union of two (x1,y1,x2,y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (M,4) and (K,4) box arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, score-descending.

    Ties are broken by index for determinism; a box is suppressed when its
    IoU with any already-kept box exceeds `thresh`.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    order = np.lexsort((np.arange(scores.size), -scores))
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        ious = inter / (areas[i] + areas[rest] - inter)
        order = rest[ious <= thresh]
    return np.asarray(keep, dtype=np.int64)


def encode_deltas(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Center/size parameterization of `boxes` relative to `anchors`."""
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack([(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -8.0, 8.0))
    h = ah * np.exp(np.clip(deltas[:, 3], -8.0, 8.0))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, size: int) -> np.ndarray:
    return np.clip(boxes, 0.0, float(size))


def generate_anchors(feat_w: int, feat_h: int, stride: int,
                     scales, ratios) -> np.ndarray:
    """Anchors centered on feature-cell centers, one per (cell, scale, ratio).

    Ratio is h/w; each anchor keeps the area scale**2. Order: row-major over
    cells, then scales, then ratios.
    """
    if feat_w < 1 or feat_h < 1:
        raise ValueError("feature grid must be positive")
    out = []
    for r in range(feat_h):
        for c in range(feat_w):
            cx = (c + 0.5) * stride
            cy = (r + 0.5) * stride
            for s in scales:
                for ratio in ratios:
                    w = s / np.sqrt(ratio)
                    h = s * np.sqrt(ratio)
                    out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return np.asarray(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# parameters


def _conv_init(rng: np.random.Generator, out_c: int, in_c: int, k: int) -> np.ndarray:
    # He-style uniform: keeps activation variance steady under relu
    bound = np.sqrt(6.0 / (in_c * k * k))
    return rng.uniform(-bound, bound, size=(out_c, in_c, k, k))


def init_model_params(cfg: DetectorConfig, seed: int) -> dict[str, Tensor]:
    """All trainable tensors, keyed by dotted names used in checkpoints.

    Toggled-off blocks contribute no parameters at all, so an ablated model
    is structurally different, not merely zeroed.
    """
    rng = np.random.default_rng(seed)
    n = cfg.channels
    widths = list(cfg.backbone_widths) + [n]
    params: dict[str, Tensor] = {}
    in_c = 3
    for i, out_c in enumerate(widths):
        params[f"backbone.conv{i}_w"] = Tensor(_conv_init(rng, out_c, in_c, 3), requires_grad=True)
        params[f"backbone.conv{i}_b"] = Tensor(np.zeros(out_c), requires_grad=True)
        in_c = out_c
    if cfg.use_co_attention:
        params.update(blocks.init_non_local_params(n, rng, "nonlocal_ip"))
        params.update(blocks.init_non_local_params(n, rng, "nonlocal_pi"))
    if cfg.use_co_excitation:
        params.update(blocks.init_sce_params(n, cfg.reduction_ratio, rng))
    a = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
    params["rpn.conv_w"] = Tensor(_conv_init(rng, n, n, 3), requires_grad=True)
    params["rpn.conv_b"] = Tensor(np.zeros(n), requires_grad=True)
    params["rpn.obj_w"] = Tensor(_conv_init(rng, a, n, 1), requires_grad=True)
    params["rpn.obj_b"] = Tensor(np.zeros(a), requires_grad=True)
    params["rpn.delta_w"] = Tensor(_conv_init(rng, 4 * a, n, 1), requires_grad=True)
    params["rpn.delta_b"] = Tensor(np.zeros(4 * a), requires_grad=True)
    two_n = 2 * n
    # anti-symmetric halves: each hidden unit starts as a difference
    # detector a.(r - q), biasing the head toward query/proposal comparison
    half = rng.uniform(-1, 1, (8, cfg.channels)) * np.sqrt(6.0 / two_n)
    params["head.fc1_w"] = Tensor(np.concatenate([half, -half], axis=1), requires_grad=True)
    params["head.fc1_b"] = Tensor(np.zeros(8), requires_grad=True)
    params["head.fc2_w"] = Tensor(rng.uniform(-1, 1, (2, 8)) * np.sqrt(6.0 / 8), requires_grad=True)
    params["head.fc2_b"] = Tensor(np.zeros(2), requires_grad=True)
    params["head.reg_w"] = Tensor(rng.uniform(-1, 1, (4, two_n)) * np.sqrt(6.0 / two_n),
                                  requires_grad=True)
    params["head.reg_b"] = Tensor(np.zeros(4), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# network pieces


def backbone_forward(image: Tensor, params: dict[str, Tensor], cfg: DetectorConfig) -> Tensor:
    """Four-stage conv stack; stride-2 on the first three stages (output stride 8)."""
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"backbone expects a (3,S,S) image, got {image.shape}")
    x = image
    n_stages = len(cfg.backbone_widths) + 1
    for i in range(n_stages):
        stride = 2 if i < 3 else 1
        x = T.conv2d(x, params[f"backbone.conv{i}_w"], params[f"backbone.conv{i}_b"],
                     stride=stride, pad=1)
        if i < n_stages - 1:
            # standardization keeps activation scale stable when training
            # from random weights; the last stage skips it so pooled
            # channel levels keep carrying appearance information
            x = T.channel_standardize(x)
        x = T.relu(x)
    return x


def rpn_forward(fi: Tensor, params: dict[str, Tensor], cfg: DetectorConfig) -> tuple[Tensor, Tensor]:
    """Objectness logits (n_anchors,) and deltas (n_anchors, 4) over the scene map."""
    h = T.relu(T.conv2d(fi, params["rpn.conv_w"], params["rpn.conv_b"], stride=1, pad=1))
    a = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
    obj = T.conv2d(h, params["rpn.obj_w"], params["rpn.obj_b"], stride=1, pad=0)     # (A,H,W)
    deltas = T.conv2d(h, params["rpn.delta_w"], params["rpn.delta_b"], stride=1, pad=0)  # (4A,H,W)
    hh, ww = fi.shape[1], fi.shape[2]
    # anchor order is (row, col, anchor); move the anchor axis innermost
    obj_flat = T.reshape(T.permute(obj, (1, 2, 0)), (hh * ww * a,))
    deltas_flat = T.reshape(T.permute(T.reshape(deltas, (a, 4, hh, ww)), (2, 3, 0, 1)),
                            (hh * ww * a, 4))
    return obj_flat, deltas_flat


def decode_and_select(anchors: np.ndarray, objectness: np.ndarray, deltas: np.ndarray,
                      cfg: DetectorConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Decode anchors, NMS, keep top-K by objectness.

    Returns (boxes (K,4), scores (K,), anchor_indices (K,)); pads by
    repeating the last surviving proposal when fewer than K remain.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    if anchors.size == 0:
        raise TensorError("decode_and_select: empty anchor set")
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    boxes = clip_boxes(decode_deltas(anchors, deltas), cfg.image_size)
    # clipping can collapse edge boxes; keep them minimally sized
    boxes[:, 2] = np.minimum(np.maximum(boxes[:, 2], boxes[:, 0] + 1.0), cfg.image_size)
    boxes[:, 3] = np.minimum(np.maximum(boxes[:, 3], boxes[:, 1] + 1.0), cfg.image_size)
    boxes[:, 0] = np.minimum(boxes[:, 0], boxes[:, 2] - 1.0).clip(0.0)
    boxes[:, 1] = np.minimum(boxes[:, 1], boxes[:, 3] - 1.0).clip(0.0)
    order = np.lexsort((np.arange(objectness.size), -objectness))[: cfg.rpn_pre_nms_top]
    keep_rel = nms(boxes[order], objectness[order], cfg.rpn_nms_iou)
    keep = order[keep_rel][: cfg.k_proposals]
    if keep.size < cfg.k_proposals:
        keep = np.concatenate([keep, np.full(cfg.k_proposals - keep.size, keep[-1], dtype=np.int64)])
    return boxes[keep], objectness[keep], keep


def label_proposals(boxes: np.ndarray, gt_boxes: np.ndarray, thresh: float = 0.5) -> np.ndarray:
    """y_i = 1 iff some gt box overlaps proposal i with IoU strictly above thresh."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        import logging
        logging.getLogger(__name__).warning("label_proposals called with no ground-truth boxes")
        return np.zeros(boxes.shape[0], dtype=np.int64)
    best = iou_matrix(boxes, gt).max(axis=1)
    return (best > thresh).astype(np.int64)


def _box_to_cells(box, stride: int, feat_h: int, feat_w: int) -> tuple[int, int, int, int]:
    """Outward-rounded feature-cell window for a pixel box; at least one cell."""
    x1, y1, x2, y2 = box
    c0 = int(np.clip(np.floor(x1 / stride), 0, feat_w - 1))
    r0 = int(np.clip(np.floor(y1 / stride), 0, feat_h - 1))
    c1 = int(np.clip(np.ceil(x2 / stride), c0 + 1, feat_w))
    r1 = int(np.clip(np.ceil(y2 / stride), r0 + 1, feat_h))
    return r0, r1, c0, c1


def roi_gap(feat: Tensor, box, stride: int) -> Tensor:
    """Per-channel mean over the feature cells covered by the (pixel) box."""
    _, fh, fw = feat.shape
    r0, r1, c0, c1 = _box_to_cells(box, stride, fh, fw)
    return T.gap(T.crop(feat, r0, r1, c0, c1))


def multi_roi_gap(feat: Tensor, boxes: np.ndarray, stride: int) -> Tensor:
    """roi_gap over K boxes at once, returning a (K, N) tensor.

    Cells are weighted by the fraction of their area the box covers, so the
    pooled feature varies smoothly with sub-cell box shifts; at this stride
    a box spans only a few cells and hard rounding would make most nearby
    boxes indistinguishable. Single differentiable node.
    """
    n, fh, fw = feat.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    # per-axis overlap between each box and each cell interval [i*s, (i+1)*s)
    cols = np.arange(fw) * stride
    rows = np.arange(fh) * stride
    ox = (np.minimum(boxes[:, 2, None], cols + stride)
          - np.maximum(boxes[:, 0, None], cols)).clip(0.0, stride)  # (K, fw)
    oy = (np.minimum(boxes[:, 3, None], rows + stride)
          - np.maximum(boxes[:, 1, None], rows)).clip(0.0, stride)  # (K, fh)
    w = oy[:, :, None] * ox[:, None, :]                             # (K, fh, fw)
    wsum = w.sum(axis=(1, 2))
    # degenerate boxes fall back to the nearest cell
    bad = wsum <= 0.0
    if bad.any():
        cc = np.clip((0.5 * (boxes[:, 0] + boxes[:, 2]) / stride).astype(int), 0, fw - 1)
        rr = np.clip((0.5 * (boxes[:, 1] + boxes[:, 3]) / stride).astype(int), 0, fh - 1)
        w[bad] = 0.0
        w[bad, rr[bad], cc[bad]] = 1.0
        wsum = w.sum(axis=(1, 2))
    w /= wsum[:, None, None]
    out = np.einsum("khw,nhw->kn", w, feat.data)

    def bwd(g):
        if not feat.requires_grad:
            return
        feat._accum(np.einsum("kn,khw->nhw", g, w))

    return T.make_op(out, (feat,), bwd, "multi-roi-gap")


def head_forward(r: Tensor, q: Tensor,
                 params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Ranking MLP and box refinement for a batch of proposals.

    r is (K, N) proposal features, q is the (N,) query vector. Returns
    (foreground probabilities (K,), logits (K, 2), box deltas (K, 4)).
    """
    if r.shape[-1] != q.shape[0]:
        raise ShapeError(f"head_forward: r has {r.shape[-1]} channels, q has {q.shape[0]}")
    k = r.shape[0]
    q_rep = T.add(Tensor(np.zeros((k, q.shape[0]))), T.reshape(q, (1, q.shape[0])))
    x = T.concat([r, q_rep], axis=1)  # (K, 2N)
    h = T.relu(T.add(T.matmul(x, T.transpose2d(params["head.fc1_w"])),
                     T.reshape(params["head.fc1_b"], (1, 8))))
    logits = T.add(T.matmul(h, T.transpose2d(params["head.fc2_w"])),
                   T.reshape(params["head.fc2_b"], (1, 2)))
    probs = T.softmax(logits, axis=1)
    s = _col(probs, 1)
    deltas = T.add(T.matmul(x, T.transpose2d(params["head.reg_w"])),
                   T.reshape(params["head.reg_b"], (1, 4)))
    return s, logits, deltas


def _col(m: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor, as a (K,) tensor."""
    data = m.data[:, j].copy()

    def bwd(g):
        if m.requires_grad:
            full = np.zeros_like(m.data)
            full[:, j] = g.reshape(-1)
            m._accum(full)

    return T.make_op(data, (m,), bwd, "column")


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class ForwardState:
    """Everything the losses and analyses need from one scene/query forward."""
    phi_i: Tensor
    phi_p: Tensor
    fi: Tensor
    fp: Tensor
    w: Tensor | None
    anchors: np.ndarray
    rpn_obj: Tensor
    rpn_deltas: Tensor
    prop_boxes: np.ndarray
    prop_scores: np.ndarray
    prop_indices: np.ndarray
    q: Tensor
    r: Tensor
    s: Tensor
    logits: Tensor
    head_deltas: Tensor


def forward_pipeline(image: Tensor, query: Tensor, params: dict[str, Tensor],
                     cfg: DetectorConfig,
                     extra_boxes: np.ndarray | None = None) -> ForwardState:
    """Run backbone, attention, RPN, proposal selection, and the ranking head.

    extra_boxes (training only) are spliced over the lowest-scored proposals
    so the head always sees annotated regions; the count of rows stays K.
    """
    phi_i = backbone_forward(image, params, cfg)
    phi_p = backbone_forward(query, params, cfg)
    if cfg.use_co_attention:
        fi, fp = blocks.co_attention_extend(phi_i, phi_p, params)
    else:
        fi, fp = phi_i, phi_p
    rpn_obj, rpn_deltas = rpn_forward(fi, params, cfg)
    hh, ww = fi.shape[1], fi.shape[2]
    anchors = generate_anchors(ww, hh, cfg.stride, cfg.anchor_scales, cfg.anchor_ratios)
    with T.no_grad():
        obj_scores = 1.0 / (1.0 + np.exp(-rpn_obj.data))
    boxes, scores, indices = decode_and_select(anchors, obj_scores, rpn_deltas.data, cfg)
    if extra_boxes is not None and len(extra_boxes):
        n = min(len(extra_boxes), len(boxes))
        boxes = boxes.copy()
        boxes[len(boxes) - n:] = np.asarray(extra_boxes, dtype=np.float64)[:n]
    if cfg.use_co_excitation:
        w, fp_t, fi_t = blocks.squeeze_co_excitation(fp, fi, params, cfg.excite_from)
    else:
        w, fp_t, fi_t = None, fp, fi
    q = blocks.query_embedding(fp_t)
    r = multi_roi_gap(fi_t, boxes, cfg.stride)
    s, logits, head_deltas = head_forward(r, q, params)
    return ForwardState(phi_i=phi_i, phi_p=phi_p, fi=fi, fp=fp, w=w, anchors=anchors,
                        rpn_obj=rpn_obj, rpn_deltas=rpn_deltas, prop_boxes=boxes,
                        prop_scores=scores, prop_indices=indices, q=q, r=r, s=s,
                        logits=logits, head_deltas=head_deltas)


def detect(image: Tensor, query: Tensor, params: dict[str, Tensor],
           cfg: DetectorConfig) -> list[tuple[np.ndarray, float]]:
    """Run the full pipeline; returns [(box, score)] sorted by score descending."""
    with T.no_grad():
        state = forward_pipeline(image, query, params, cfg)
        refined = clip_boxes(decode_deltas(state.prop_boxes, state.head_deltas.data),
                             cfg.image_size)
        scores = state.s.data
        ok = scores >= cfg.score_thresh
        refined, scores = refined[ok], scores[ok]
        valid = (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])
        refined, scores = refined[valid], scores[valid]
        if scores.size == 0:
            return []
        keep = nms(refined, scores, cfg.final_nms_iou)
        return [(refined[i], float(scores[i])) for i in keep]
