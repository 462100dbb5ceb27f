"""Command-line interface.

Subcommands: train, eval, ablate, heatmap, coex, gradcheck, gen-data.
Every artifact-producing command writes a resolved-config snapshot
(config.resolved.txt) into its output directory; figure-producing commands
render matplotlib PNGs alongside the delimited outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod, detector as det, evaluation as ev
from . import synthdata as sd, training
from .tensor import Tensor


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="flat key=value config file")
    parser.add_argument("--out", metavar="DIR", default="out", help="output directory")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override init_seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads for evaluation (default: COAE_THREADS or 1)")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    return max(1, int(os.environ.get("COAE_THREADS", "1")))


def _prep(args) -> tuple[training.TrainConfig, Path]:
    cfg = cfgmod.load_train_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.init_seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfgmod.resolved_snapshot(cfg))
    return cfg, out


def cmd_train(args) -> int:
    from . import plots
    cfg, out = _prep(args)
    cfg.out_dir = str(out)
    outcome = training.train(cfg, progress=lambda e, row: print(
        f"epoch {e}: total={row.get('total', float('nan')):.4f}"))
    (out / "train_log.csv").write_text(outcome.log_csv())
    (out / "eval.csv").write_text(outcome.final_eval.to_csv())
    plots.save_loss_curves(outcome.log_rows, out / "loss_curves.png")
    plots.save_ap_bars(outcome.final_eval.per_class_ap,
                       set(outcome.dataset.split.seen), out / "ap_by_class.png")
    print(f"mAP seen={outcome.final_eval.map_seen:.3f} "
          f"unseen={outcome.final_eval.map_unseen:.3f}")
    return 0


def _load_model(cfg: training.TrainConfig, ckpt_path: str):
    params = det.init_model_params(cfg.detector, cfg.init_seed)
    checkpoint.restore(params, ckpt_path)
    return params


def cmd_eval(args) -> int:
    from . import plots
    cfg, out = _prep(args)
    ds = training.build_dataset(cfg)
    params = _load_model(cfg, args.checkpoint)
    splits = ("seen", "unseen") if args.split == "both" else (args.split,)
    for name in splits:
        classes = ds.split.seen if name == "seen" else ds.split.unseen
        per_class = ev.evaluate_one_shot(params, ds.test, ds.test_pools, ds.split,
                                         list(classes), cfg.detector,
                                         threads=_threads(args))
        result = ev.eval_result(per_class, ds.split)
        (out / f"eval_{name}.csv").write_text(result.to_csv())
        print(f"{name}: mAP={result.map_seen if name == 'seen' else result.map_unseen:.3f}")
        plots.save_ap_bars(per_class, set(ds.split.seen), out / f"ap_{name}.png")
    return 0


def cmd_ablate(args) -> int:
    cfg, out = _prep(args)
    registry, split = sd.make_registry(cfg.num_classes, cfg.data_seed, cfg.num_unseen)
    rows = ev.run_ablation(cfg, None, registry, split)
    (out / "ablation.csv").write_text(ev.ablation_csv(rows))
    print(ev.ablation_csv(rows))
    return 0


def cmd_heatmap(args) -> int:
    from . import plots
    cfg, out = _prep(args)
    ds = training.build_dataset(cfg)
    params = _load_model(cfg, args.checkpoint)
    size = cfg.detector.image_size
    n_pairs = args.pairs
    written = 0
    for scene in ds.test:
        if written >= n_pairs:
            break
        present = sorted({int(c) for c in scene.class_ids if int(c) in ds.test_pools})
        if not present:
            continue
        cid = present[0]
        qp = sd.test_query_sampler(ds.test_pools[cid], scene.image_id, 1)[0]
        image, query = Tensor(scene.image), Tensor(qp.patch)
        from . import tensor as T
        with T.no_grad():
            state_on = det.forward_pipeline(image, query, params, cfg.detector)
            cfg_off = replace(cfg.detector, use_co_attention=False)
            state_off = det.forward_pipeline(image, query, params, cfg_off)
        for tag, state in (("coatt", state_on), ("plain", state_off)):
            hm = ev.proposal_heatmap(state.prop_boxes, size)
            sd.write_pgm(hm, out / f"heatmap_{scene.image_id}_{tag}.pgm")
            plots.save_heatmap_figure(hm, scene.image, scene.boxes_of(cid),
                                      f"proposals ({tag})",
                                      out / f"heatmap_{scene.image_id}_{tag}.png")
        written += 1
    print(f"wrote heatmaps for {written} pairs to {out}")
    return 0


def cmd_coex(args) -> int:
    from . import plots
    cfg, out = _prep(args)
    if not cfg.detector.use_co_excitation:
        print("coex analysis requires use_co_excitation=true", file=sys.stderr)
        return 2
    ds = training.build_dataset(cfg)
    params = _load_model(cfg, args.checkpoint)
    stats = ev.coexcitation_analysis(params, ds.test, ds.test_pools, cfg.detector)
    (out / "coex_distances.csv").write_text(stats.to_csv())
    by_id = {c.class_id: c for c in ds.registry}
    labels = [f"{c}:{by_id[c].shape[:3]}-{by_id[c].color[:3]}-{by_id[c].texture[:3]}"
              for c in stats.class_ids]
    plots.save_distance_matrix_figure(stats.distance_matrix, labels,
                                      out / "coex_distances.png")
    # per-pair probes: distance vs number of shared attribute values
    lines = ["class_a,class_b,shared_attributes,distance"]
    for i, a in enumerate(stats.class_ids):
        for j in range(i + 1, len(stats.class_ids)):
            b = stats.class_ids[j]
            shared = by_id[a].shared_attributes(by_id[b])
            lines.append(f"{a},{b},{shared},{stats.distance_matrix[i, j]:.6f}")
    (out / "coex_pairs.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote co-excitation analysis to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg, out = _prep(args)
    from .gradcheck_suite import run_suite
    report_lines, ok = run_suite(seeds=args.seeds, tol=1e-4)
    text = "\n".join(report_lines) + "\n"
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    cfg, out = _prep(args)
    ds = training.build_dataset(cfg)
    sd.export_scenes(ds.train, out / "train")
    sd.export_scenes(ds.test, out / "test")
    print(f"exported {len(ds.train)} train and {len(ds.test)} test scenes to {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="coae",
                                     description="one-shot co-attention/co-excitation detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and evaluate it")
    _common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("seen", "unseen", "both"), default="both")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the five toggle rows")
    _common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("heatmap", help="proposal-distribution maps with/without co-attention")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", type=int, default=8)
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("coex", help="co-excitation distance analysis")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_coex)

    p = sub.add_parser("gradcheck", help="finite-difference checks over all blocks")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="export the synthetic benchmark scenes")
    _common(p)
    p.set_defaults(fn=cmd_gen_data)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
