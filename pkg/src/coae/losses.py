"""Training objectives: margin-based proposal ranking, two-way cross entropy,
smooth-L1 box regression, and RPN objectness/regression terms.

Default margins m+ = 0.7, m- = 0.3; the ranking term enters the total loss
with weight lambda = 3. Hinge subgradients are taken as 0 exactly at kinks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError, make_op, no_grad


@dataclass
class MarginConfig:
    m_plus: float = 0.7
    m_minus: float = 0.3
    normalize: bool = False

    def __post_init__(self):
        if not (0.0 < self.m_minus < self.m_plus < 1.0):
            raise ValueError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")


@dataclass
class LossWeights:
    lambda_mr: float = 3.0

    def __post_init__(self):
        if self.lambda_mr < 0:
            raise ValueError("lambda_mr must be nonnegative")


def margin_ranking_loss(scores: Tensor, labels: np.ndarray, cfg: MarginConfig,
                        mask: np.ndarray | None = None) -> Tensor:
    """Hinge ranking loss over one image's K scored proposals.

    Unary hinges push foreground scores above m+ and background below m-;
    pairwise hinges (each unordered pair once) cap same-label score gaps at
    m- and force cross-label gaps to at least m+. Unnormalized sum by
    default; cfg.normalize averages each term family separately (foreground
    unary over the foreground count, background unary over the background
    count, same-label pairs over their pair count, cross-label pairs over
    theirs) so the scarce foreground terms are not diluted by the hundred-odd
    background rows. Rows where ``mask`` is False (e.g. ambiguous partial
    overlaps) contribute no unary or pairwise terms.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    s = scores.data.reshape(-1)
    k = s.size
    if y.size != k:
        raise TensorError(f"margin_ranking_loss: {k} scores but {y.size} labels")
    mp, mm = cfg.m_plus, cfg.m_minus
    use = np.ones(k, dtype=bool) if mask is None else np.asarray(mask).reshape(-1).astype(bool)

    pos = (y > 0.5) & use
    unary = use * (y * np.maximum(mp - s, 0.0) + (1.0 - y) * np.maximum(s - mm, 0.0))
    diff = s[:, None] - s[None, :]
    gap = np.abs(diff)
    upper = np.triu(np.outer(use, use), 1)
    same = y[:, None] == y[None, :]
    same_hinge = np.maximum(gap - mm, 0.0)
    cross_hinge = np.maximum(mp - gap, 0.0)
    neg = use & ~pos
    if cfg.normalize:
        w_u = use * np.where(pos, 1.0 / max(int(pos.sum()), 1), 1.0 / max(int(neg.sum()), 1))
        n_same = max(int((upper & same).sum()), 1)
        n_cross = max(int((upper & ~same).sum()), 1)
    else:
        w_u = use.astype(np.float64)
        n_same = n_cross = 1
    total = ((w_u * unary).sum()
             + same_hinge[upper & same].sum() / n_same
             + cross_hinge[upper & ~same].sum() / n_cross)

    def bwd(g):
        if not scores.requires_grad:
            return
        gd = float(g.reshape(()))
        grad = w_u * np.where(pos, -(mp - s > 0.0).astype(np.float64),
                              (s - mm > 0.0).astype(np.float64))
        sign = np.sign(diff)
        act_same = upper & same & (gap > mm)
        act_cross = upper & ~same & (gap < mp)
        # d|s_i - s_j|/ds_i = sign(s_i - s_j); cross hinge carries a minus sign
        m = act_same * sign / n_same - act_cross * sign / n_cross
        grad += m.sum(axis=1) - m.sum(axis=0)
        scores._accum((gd * grad).reshape(scores.shape))

    return make_op(np.asarray(total), (scores,), bwd, "margin-ranking")


def detection_ce_loss(logits: Tensor, labels: np.ndarray,
                      weights: np.ndarray | None = None) -> Tensor:
    """Two-way softmax cross entropy over K proposals; logits are (K, 2).

    With no weights this is the plain mean over rows. A weight vector
    re-balances the average (weights are normalized by their sum).
    """
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    l = logits.data
    if l.ndim != 2 or l.shape[1] != 2 or l.shape[0] != y.size:
        raise TensorError(f"detection_ce_loss: logits {l.shape} vs {y.size} labels")
    k = y.size
    if weights is None:
        w = np.full(k, 1.0 / k)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.size != k:
            raise TensorError("detection_ce_loss: weight length mismatch")
        w = w / max(w.sum(), 1e-300)
    m = l.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l - m).sum(axis=1))
    loss = (w * (lse - l[np.arange(k), y])).sum()

    def bwd(g):
        if not logits.requires_grad:
            return
        p = np.exp(l - lse[:, None])
        p[np.arange(k), y] -= 1.0
        logits._accum(float(g.reshape(())) * w[:, None] * p)

    return make_op(np.asarray(loss), (logits,), bwd, "softmax-ce")


def balanced_ce_weights(labels: np.ndarray, fg_fraction: float = 0.5,
                        hard_mask: np.ndarray | None = None,
                        hard_fraction: float = 0.0) -> np.ndarray:
    """Per-row weights giving foreground rows a fixed share of the average.

    If ``hard_mask`` marks a subset of the negatives (e.g. rows covering
    objects of a different class than the query), those rows collectively
    receive ``hard_fraction`` of the total weight so they are not drowned
    out by the far more numerous easy background rows.
    """
    y = np.asarray(labels).reshape(-1).astype(bool)
    w = np.zeros(y.size)
    hard = np.zeros(y.size, dtype=bool)
    if hard_mask is not None:
        hard = np.asarray(hard_mask).reshape(-1).astype(bool) & ~y
    easy = ~y & ~hard
    shares = [(y, fg_fraction), (hard, hard_fraction),
              (easy, 1.0 - fg_fraction - hard_fraction)]
    shares = [(m, s) for m, s in shares if m.any()]
    total = sum(s for _, s in shares)
    if total <= 0.0:
        shares = [(m, 1.0) for m, _ in shares]
        total = float(len(shares))
    for m, s in shares:
        w[m] = (s / total) / int(m.sum())
    return w


def binary_ce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean sigmoid cross entropy; weights of 0 drop entries entirely."""
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    x = logits.data.reshape(-1)
    if t.size != x.size or w.size != x.size:
        raise TensorError("binary_ce_with_logits: length mismatch")
    denom = max(w.sum(), 1.0)
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    loss = (w * per).sum() / denom

    def bwd(g):
        if not logits.requires_grad:
            return
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        logits._accum((float(g.reshape(())) / denom * w * (sig - t)).reshape(logits.shape))

    return make_op(np.asarray(loss), (logits,), bwd, "sigmoid-ce")


def smooth_l1_sum(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1 (quadratic below beta, linear above), summed."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.shape:
        raise TensorError(f"smooth_l1_sum: target {t.shape} vs pred {pred.shape}")
    r = pred.data - t
    a = np.abs(r)
    loss = np.where(a < beta, 0.5 * r * r / beta, a - 0.5 * beta).sum()

    def bwd(g):
        if not pred.requires_grad:
            return
        pred._accum(float(g.reshape(())) * np.clip(r / beta, -1.0, 1.0))

    return make_op(np.asarray(loss), (pred,), bwd, "smooth-l1")


def box_regression_loss(pred_deltas: Tensor, target_deltas: np.ndarray, labels: np.ndarray) -> Tensor:
    """Smooth-L1 over the 4 coords of each positive proposal, averaged over
    positives; exactly zero (constant) when there are none."""
    y = np.asarray(labels).reshape(-1)
    pos = np.nonzero(y == 1)[0]
    if pos.size == 0:
        return Tensor(0.0)
    from . import tensor as T
    sub = T.make_op(pred_deltas.data[pos],
                    (pred_deltas,),
                    _row_select_bwd(pred_deltas, pos),
                    "row-select")
    total = smooth_l1_sum(sub, np.asarray(target_deltas)[pos])
    return T.affine(total, 1.0 / pos.size, 0.0)


def _row_select_bwd(src: Tensor, rows: np.ndarray):
    def bwd(g):
        if src.requires_grad:
            full = np.zeros_like(src.data)
            full[rows] = g
            src._accum(full)
    return bwd


def total_loss(ce: Tensor, reg: Tensor, mr: Tensor, weights: LossWeights) -> Tensor:
    from . import tensor as T
    return T.add(T.add(ce, reg), T.affine(mr, weights.lambda_mr, 0.0))
