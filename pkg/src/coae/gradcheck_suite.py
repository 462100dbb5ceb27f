"""Finite-difference verification of every differentiable block.

Shared by the `coae gradcheck` command and the acceptance suite: each seed
draws small random shapes and parameters and checks analytic gradients of
the non-local cross block, squeeze-and-co-excitation, the RPN heads, the
ranking MLP, and all loss terms against central differences.
"""

from __future__ import annotations

import numpy as np

from . import blocks, detector as det, losses
from . import tensor as T
from .tensor import Tensor, gradient_check


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, shape), requires_grad=True)


def check_non_local(rng, tol):
    n = 6
    params = blocks.init_non_local_params(n, rng, "nl")
    # exercise the output projection too (zero init would hide its gradient)
    params["nl.out"].data = rng.uniform(-0.5, 0.5, params["nl.out"].data.shape)
    x = _rand(rng, n, 3, 2)
    ref = _rand(rng, n, 2, 2)
    theta, phi, g, out_w = (params["nl.theta"], params["nl.phi"],
                            params["nl.g"], params["nl.out"])

    def f(x_, ref_, th, ph, g_, ow):
        p = {"nl.theta": th, "nl.phi": ph, "nl.g": g_, "nl.out": ow}
        y = blocks.non_local_cross(x_, ref_, p, "nl")
        return T.tsum(T.mul(y, y))

    return gradient_check(f, [x, ref, theta, phi, g, out_w], tol=tol)


def check_sce(rng, tol):
    n, rho = 8, 4
    params = blocks.init_sce_params(n, rho, rng)
    fp = _rand(rng, n, 2, 2)
    fi = _rand(rng, n, 3, 3)
    names = ["sce.fc1_w", "sce.fc1_b", "sce.fc2_w", "sce.fc2_b"]

    def f(fp_, fi_, *ps):
        p = dict(zip(names, ps))
        w, fpt, fit = blocks.squeeze_co_excitation(fp_, fi_, p)
        return T.add(T.tsum(T.mul(fpt, fpt)), T.tsum(T.mul(fit, fit)))

    return gradient_check(f, [fp, fi] + [params[k] for k in names], tol=tol)


def check_rpn(rng, tol):
    cfg = det.DetectorConfig(channels=4, anchor_scales=(12.0,), anchor_ratios=(1.0,),
                             backbone_widths=(4,), use_co_attention=False,
                             use_co_excitation=False)
    params = det.init_model_params(cfg, int(rng.integers(1 << 31)))
    fi = _rand(rng, 4, 2, 2)
    names = ["rpn.conv_w", "rpn.conv_b", "rpn.obj_w", "rpn.obj_b",
             "rpn.delta_w", "rpn.delta_b"]

    def f(fi_, *ps):
        p = dict(zip(names, ps))
        obj, deltas = det.rpn_forward(fi_, p, cfg)
        return T.add(T.tsum(T.mul(obj, obj)), T.tsum(T.mul(deltas, deltas)))

    return gradient_check(f, [fi] + [params[k] for k in names], tol=tol)


def check_head(rng, tol):
    n = 6
    cfg = det.DetectorConfig(channels=n, backbone_widths=(4,),
                             use_co_attention=False, use_co_excitation=False)
    params = det.init_model_params(cfg, int(rng.integers(1 << 31)))
    r = _rand(rng, 4, n)
    q = _rand(rng, n)
    names = ["head.fc1_w", "head.fc1_b", "head.fc2_w", "head.fc2_b",
             "head.reg_w", "head.reg_b"]

    def f(r_, q_, *ps):
        p = dict(zip(names, ps))
        s, logits, deltas = det.head_forward(r_, q_, p)
        return T.add(T.tsum(T.mul(s, s)), T.tsum(T.mul(deltas, deltas)))

    return gradient_check(f, [r, q] + [params[k] for k in names], tol=tol)


def check_losses(rng, tol):
    k = 6
    # scores strictly inside (0,1) and away from hinge kinks
    s = Tensor(rng.uniform(0.05, 0.95, k), requires_grad=True)
    y = (rng.uniform(size=k) > 0.5).astype(np.int64)
    y[0], y[1] = 1, 0  # keep both label groups populated
    mcfg = losses.MarginConfig()
    logits = _rand(rng, k, 2)
    deltas = _rand(rng, k, 4)
    targets = rng.uniform(-1.0, 1.0, (k, 4))
    rpn_logits = _rand(rng, 10)
    rpn_t = (rng.uniform(size=10) > 0.5).astype(np.float64)
    rpn_w = rng.uniform(0.0, 1.0, 10)

    reports = [
        gradient_check(lambda s_: losses.margin_ranking_loss(s_, y, mcfg), [s], tol=tol),
        gradient_check(lambda l: losses.detection_ce_loss(l, y), [logits], tol=tol),
        gradient_check(lambda d: losses.box_regression_loss(d, targets, y), [deltas], tol=tol),
        gradient_check(lambda l: losses.binary_ce_with_logits(l, rpn_t, rpn_w),
                       [rpn_logits], tol=tol),
    ]
    return reports


CHECKS = {
    "non_local_cross": check_non_local,
    "squeeze_co_excitation": check_sce,
    "rpn_heads": check_rpn,
    "ranking_mlp": check_head,
}


def run_suite(seeds: int = 100, tol: float = 1e-4) -> tuple[list[str], bool]:
    """Run all block checks over `seeds` random draws; returns (report, ok)."""
    lines = []
    ok = True
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, fn in CHECKS.items():
            rep = fn(rng, tol)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_err)
            if not rep.ok:
                ok = False
                lines.append(f"FAIL {name} seed={seed} max_rel_err={rep.max_rel_err:.3e}")
        for rep in check_losses(rng, tol):
            worst["losses"] = max(worst.get("losses", 0.0), rep.max_rel_err)
            if not rep.ok:
                ok = False
                lines.append(f"FAIL losses seed={seed} max_rel_err={rep.max_rel_err:.3e}")
    for name in sorted(worst):
        status = "pass" if ok else "see failures above"
        lines.append(f"{name}: max_rel_err={worst[name]:.3e} ({status})")
    lines.append("RESULT: " + ("PASS" if ok else "FAIL"))
    return lines, ok
