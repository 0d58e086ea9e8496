"""fastmap command line: gen, rasterize, forward, loss, fit, eval, viz.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
Every command writes ``<output>.manifest.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .container import ContainerError, atomic_write_text, read_array, write_array, write_named_arrays
from .decoder import DESK_PRIORS, PAPER_PRIORS, DecoderConfig, init_weights, pipeline_forward, random_bev, to_predictions
from .fit import DivergenceError, fit_predictions
from .geometry import (NUM_CLASSES, BevGridSpec, BevRange, MapInstance, PredictionSet, Scene, dumps,
                       predictions_from_dict, predictions_to_dict, scene_from_dict, scene_to_dict)
from .heatmap import DEFAULT_KERNEL, gaussian_weight_field, rasterize_gt
from .losses import (LossWeights, auxiliary_line_kinks, auxiliary_line_loss, classification_loss, class_targets,
                     finite_difference_check, heatmap_focal_loss, point_line_kinks, point_line_loss,
                     points_points_kinks, points_points_loss, prediction_logits, stage_losses, total_loss)
from .matcher import aligned_gt, match_instances
from .metrics import THRESHOLD_SETS, average_precision, diagnostics, format_table, pr_csv, reports_to_json
from .sampler import DEFAULT_TAU
from .svg import render_scene
from .synth import SynthConfig, generate_scene, perturb

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("FASTMAP_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"FASTMAP_SEED must be an integer, got {raw!r}") from None


# -- io helpers ----------------------------------------------------------------

def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def load_scene(path) -> Scene:
    return scene_from_dict(_read_json(path))


def load_predictions(path) -> PredictionSet:
    return predictions_from_dict(_read_json(path))


def _check_writable(path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise UsageError(f"cannot write {path}: directory {path.parent} does not exist")
    return path


def write_text(path, text: str) -> None:
    atomic_write_text(_check_writable(path), text)


def write_manifest(out, args, started: float, inputs=(), outputs=(), seeds=None, extra=None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "command": args.command,
        "version": __version__,
        "config": config,
        "seeds": seeds or {},
        "inputs": [str(p) for p in inputs if p],
        "outputs": [str(p) for p in outputs if p],
        "duration_s": round(time.monotonic() - started, 6),
    }
    if extra:
        doc.update(extra)
    write_text(f"{out}.manifest.json", json.dumps(doc, indent=1, default=str) + "\n")


def _spec(args, rng: BevRange = BevRange()) -> BevGridSpec:
    try:
        return BevGridSpec.from_resolution(args.resolution, rng)
    except ValueError as exc:
        raise UsageError(f"invalid grid: {exc}") from None


def _weights(args) -> LossWeights:
    return LossWeights(alpha_cls=args.alpha_cls, alpha_pl=args.alpha_pl, alpha_pp=args.alpha_pp,
                       alpha_al=args.alpha_al, alpha_heat=args.alpha_heat, gamma=args.gamma, beta=args.beta,
                       alpha_gauss=args.alpha_gauss, beta_gauss=args.beta_gauss)


def _say(args, text: str) -> None:
    if not getattr(args, "quiet", False):
        sys.stdout.write(text)


# -- commands --------------------------------------------------------------------

def cmd_gen(args) -> int:
    started = time.monotonic()
    seed = default_seed() if args.seed is None else args.seed
    cfg = SynthConfig(seed=seed, dividers=args.dividers, crossings=args.crossings, boundaries=args.boundaries,
                      curvature=(0.0, args.max_curvature), noise=args.noise, m=args.m)
    scene = generate_scene(cfg)
    write_text(args.output, dumps(scene_to_dict(scene)))
    outputs = [args.output]
    if args.predictions:
        write_text(args.predictions, dumps(predictions_to_dict(perturb(scene, cfg))))
        outputs.append(args.predictions)
    write_manifest(args.output, args, started, outputs=outputs, seeds={"scene": seed})
    _say(args, f"wrote {len(scene)} instances to {args.output}\n")
    return EXIT_OK


def cmd_rasterize(args) -> int:
    started = time.monotonic()
    scene = load_scene(args.scene)
    spec = _spec(args, scene.range)
    try:
        hm = rasterize_gt(scene, spec, args.kernel, args.sigma)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_array(_check_writable(args.output), hm, b"FMHM")
    outputs = [args.output]
    if args.weight_field:
        write_array(_check_writable(args.weight_field), gaussian_weight_field(spec, args.alpha_gauss, args.beta_gauss))
        outputs.append(args.weight_field)
    if args.svg:
        write_text(args.svg, render_scene(scene.range, gts=scene.instances, heatmap=hm, spec=spec))
        outputs.append(args.svg)
    write_manifest(args.output, args, started, inputs=[args.scene], outputs=outputs,
                   extra={"shape": list(hm.shape), "nonzero_cells": int((hm > 0).sum())})
    _say(args, f"heatmap {hm.shape[0]}x{hm.shape[1]}x{hm.shape[2]}, {(hm > 0).sum()} nonzero cells\n")
    return EXIT_OK


def cmd_forward(args) -> int:
    started = time.monotonic()
    seed = default_seed() if args.seed is None else args.seed
    scene = load_scene(args.scene) if args.scene else None
    rng = scene.range if scene else BevRange()
    spec = _spec(args, rng)
    m = args.m if args.m is not None else (scene.instances[0].m if scene and len(scene) else 8)
    M = PAPER_PRIORS if args.paper_scale else args.priors
    config = DecoderConfig(n=args.n, m=m, d=args.d, heads=args.heads, sample_points=args.points, M=M, seed=seed)
    if args.bev:
        try:
            bev = read_array(args.bev, b"FMHM")
        except (OSError, ContainerError) as exc:
            raise UsageError(f"cannot read BEV features: {exc}") from None
        if bev.shape != (config.d, spec.h, spec.w):
            raise UsageError(f"BEV features {bev.shape} do not match ({config.d}, {spec.h}, {spec.w})")
    else:
        bev = random_bev(spec, config.d, seed)
        if scene is not None:
            # give the features something to find: the scene's gt heatmap on the first channels
            bev[:NUM_CLASSES] += 4.0 * rasterize_gt(scene, spec)
    weights = init_weights(config, bev.shape[0])
    result = pipeline_forward(bev, weights, config, spec, args.tau)
    write_text(args.output, dumps(predictions_to_dict(result.predictions)))
    outputs = [args.output]
    if args.stage1:
        write_text(args.stage1, dumps(predictions_to_dict(to_predictions(result.coarse, spec))))
        outputs.append(args.stage1)
    if args.dump_heatmap:
        write_array(_check_writable(args.dump_heatmap), result.heatmap, b"FMHM")
        outputs.append(args.dump_heatmap)
    if args.dump_priors:
        write_array(_check_writable(args.dump_priors), result.priors.as_rows()[None], b"FMSP")
        sidecar = {"M": len(result.priors), "columns": ["x", "y", "class"] + [f"f{k}" for k in range(bev.shape[0])],
                   "cells": result.priors.cells.tolist(), "classes": result.priors.classes.tolist()}
        write_text(f"{args.dump_priors}.json", json.dumps(sidecar) + "\n")
        outputs.append(args.dump_priors)
    if args.dump_weights:
        write_named_arrays(_check_writable(args.dump_weights), weights.arrays)
        outputs.append(args.dump_weights)
    write_manifest(args.output, args, started, inputs=[args.scene, args.bev], outputs=outputs,
                   seeds={"weights": seed, "bev": None if args.bev else seed})
    _say(args, f"wrote {len(result.predictions)} predictions to {args.output}\n")
    return EXIT_OK


def _gradcheck(preds: PredictionSet, gts: Scene, assignment, eps: float = 1e-6) -> float:
    worst = 0.0
    checks = ((point_line_loss, point_line_kinks), (points_points_loss, points_points_kinks),
              (auxiliary_line_loss, auxiliary_line_kinks))
    for p, g, k in assignment.pairs:
        gt = aligned_gt(gts.instances[g], k)
        x = np.array(preds.instances[p].points)
        for loss, kinks in checks:
            worst = max(worst, finite_difference_check(lambda z: loss(z, gt), x, eps,
                                                       exclude=lambda z, tol: kinks(z, gt, tol)))
    targets = class_targets(len(preds), assignment, [g.cls for g in gts.instances])
    logits = prediction_logits(preds)
    if len(logits):
        worst = max(worst, finite_difference_check(lambda z: classification_loss(z, targets), logits, eps))
    return worst


def cmd_loss(args) -> int:
    started = time.monotonic()
    preds, gts = load_predictions(args.pred), load_scene(args.gt)
    w = _weights(args)
    try:
        stage2 = stage_losses(preds, gts, printed=args.printed_pl)
        stage1 = stage_losses(load_predictions(args.stage1), gts, printed=args.printed_pl) if args.stage1 else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    heat = 0.0
    if args.heatmap:
        pred_hm = read_array(args.heatmap, b"FMHM")
        spec = BevGridSpec.from_resolution(gts.range.y_extent / pred_hm.shape[1], gts.range)
        gt_hm = rasterize_gt(gts, spec, args.kernel)
        try:
            heat, _ = heatmap_focal_loss(pred_hm, gt_hm, gaussian_weight_field(spec, w.alpha_gauss, w.beta_gauss))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    breakdown = total_loss(stage1.values if stage1 else {}, stage2.values, heat, w)
    doc = breakdown.to_dict()
    doc["matching"] = stage2.assignment.to_dict()
    if args.gradcheck:
        doc["gradcheck_max_rel_err"] = _gradcheck(preds, gts, stage2.assignment)
    if not np.isfinite(breakdown.total):
        raise DivergenceError("non-finite total loss")
    text = json.dumps(doc, indent=1) + "\n"
    out = args.output or args.pred
    if args.output:
        write_text(args.output, text)
    if args.dump_matching:
        write_text(args.dump_matching, stage2.assignment.to_json())
    if args.dump_grad:
        grad = w.beta * sum(w.term(t) * stage2.point_grads[t] for t in ("pl", "pp", "al"))
        write_array(_check_writable(args.dump_grad), np.asarray(grad).reshape(1, len(preds), -1), b"FMGR")
    sys.stdout.write(text)
    if args.output:
        write_manifest(out, args, started, inputs=[args.pred, args.gt, args.stage1, args.heatmap],
                       outputs=[args.output, args.dump_matching, args.dump_grad],
                       extra={"weights": w.to_dict()})
    return EXIT_OK


def cmd_fit(args) -> int:
    started = time.monotonic()
    preds, gts = load_predictions(args.pred), load_scene(args.gt)
    try:
        fitted, trace = fit_predictions(preds, gts, args.steps, args.lr, _weights(args), backtrack=not args.no_backtrack)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_text(args.output, dumps(predictions_to_dict(fitted)))
    outputs = [args.output]
    if args.trace:
        write_text(args.trace, "step,loss\n" + "".join(f"{k},{v:.9g}\n" for k, v in enumerate(trace)))
        outputs.append(args.trace)
    write_manifest(args.output, args, started, inputs=[args.pred, args.gt], outputs=outputs,
                   extra={"initial_loss": trace[0], "final_loss": trace[-1]})
    _say(args, f"loss {trace[0]:.6g} -> {trace[-1]:.6g} over {args.steps} steps\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    preds, gts = load_predictions(args.pred), load_scene(args.gt)
    names = ["strict", "standard"] if args.set == "both" else [args.set]
    reports = [average_precision(preds, gts, THRESHOLD_SETS[n], mode=args.ap_mode) for n in names]
    diag = diagnostics(preds, gts, THRESHOLD_SETS[names[-1]])
    _say(args, format_table(reports, diag))
    for rep in reports:
        if rep.excluded:
            _say(args, f"classes absent from ground truth ({rep.name}): {', '.join(rep.excluded)}\n")
    text = reports_to_json(reports, diag)
    sys.stdout.write(text)
    outputs = []
    if args.output:
        write_text(args.output, text)
        outputs.append(args.output)
    if args.pr_csv:
        write_text(args.pr_csv, pr_csv(reports[-1]))
        outputs.append(args.pr_csv)
    if outputs:
        write_manifest(outputs[0], args, started, inputs=[args.pred, args.gt], outputs=outputs)
    return EXIT_OK


def cmd_viz(args) -> int:
    started = time.monotonic()
    gts: list[MapInstance] = []
    preds: list[MapInstance] = []
    rng: Optional[BevRange] = None
    for path in list(args.files) + list(args.gt or []) + list(args.pred or []):
        doc = _read_json(path)
        is_pred = path in (args.pred or []) or (path in args.files and
                                                any("score" in i for i in doc.get("instances", [])))
        try:
            if is_pred:
                ps = predictions_from_dict(doc)
                preds.extend(ps.instances)
                rng = rng or ps.range
            else:
                sc = scene_from_dict(doc)
                gts.extend(sc.instances)
                rng = rng or sc.range
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from None
    rng = rng or BevRange()
    hm = spec = priors = None
    try:
        if args.heatmap:
            hm = read_array(args.heatmap, b"FMHM")
            spec = BevGridSpec.from_resolution(rng.y_extent / hm.shape[1], rng)
        if args.priors:
            rows = read_array(args.priors, b"FMSP")[0]
            priors = rng.denormalize(rows[:, :2])
    except (OSError, ContainerError, ValueError) as exc:
        raise UsageError(f"cannot read overlay: {exc}") from None
    write_text(args.output, render_scene(rng, gts, preds, hm, spec, priors, args.scale))
    write_manifest(args.output, args, started, inputs=list(args.files) + list(args.gt or []) + list(args.pred or []),
                   outputs=[args.output])
    _say(args, f"wrote {args.output} ({len(gts)} gt, {len(preds)} predicted)\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_weight_flags(p) -> None:
    d = LossWeights()
    g = p.add_argument_group("loss weights")
    g.add_argument("--alpha-cls", type=float, default=d.alpha_cls)
    g.add_argument("--alpha-pl", type=float, default=d.alpha_pl)
    g.add_argument("--alpha-pp", type=float, default=d.alpha_pp)
    g.add_argument("--alpha-al", type=float, default=d.alpha_al)
    g.add_argument("--alpha-heat", type=float, default=d.alpha_heat)
    g.add_argument("--gamma", type=float, default=d.gamma, help="stage-1 weight")
    g.add_argument("--beta", type=float, default=d.beta, help="stage-2 weight")
    g.add_argument("--alpha-gauss", type=float, default=d.alpha_gauss)
    g.add_argument("--beta-gauss", type=float, default=d.beta_gauss)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastmap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--quiet", action="store_true", help="suppress human-readable output")
        return p

    p = command("gen", cmd_gen, "generate a synthetic scene")
    p.add_argument("--seed", type=int, default=None, help="default: $FASTMAP_SEED or 0")
    p.add_argument("--dividers", type=int, default=2)
    p.add_argument("--crossings", type=int, default=1)
    p.add_argument("--boundaries", type=int, default=2)
    p.add_argument("--m", type=int, default=20, help="points per instance")
    p.add_argument("--max-curvature", type=float, default=0.03, help="1/m")
    p.add_argument("--predictions", help="also write a perturbed prediction set of the scene")
    p.add_argument("--noise", type=float, default=0.5, help="perturbation half-width in meters")
    p.add_argument("-o", "--output", required=True)

    p = command("rasterize", cmd_rasterize, "rasterize a scene into a gt heatmap")
    p.add_argument("scene")
    p.add_argument("--resolution", type=float, default=0.3, help="meters per cell")
    p.add_argument("--kernel", type=int, default=DEFAULT_KERNEL, help="odd dilation kernel size")
    p.add_argument("--sigma", type=float, default=None, help="kernel sigma in cells (default kernel/3)")
    p.add_argument("--weight-field", help="also write the radial loss-weight field (FMHM, C=1)")
    p.add_argument("--alpha-gauss", type=float, default=LossWeights().alpha_gauss)
    p.add_argument("--beta-gauss", type=float, default=LossWeights().beta_gauss)
    p.add_argument("--svg", help="write an SVG of the heatmap under the gt vectors")
    p.add_argument("-o", "--output", required=True)

    p = command("forward", cmd_forward, "run the decoder forward pass")
    p.add_argument("--scene", help="scene whose gt heatmap is mixed into synthetic BEV features")
    p.add_argument("--bev", help="BEV features (FMHM container, d x H x W)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=10, help="instance queries")
    p.add_argument("--m", type=int, default=None, help="points per instance (default: scene m, else 8)")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--points", type=int, default=4, help="deformable sampling points")
    p.add_argument("--priors", type=int, default=DESK_PRIORS, help="prior count M")
    p.add_argument("--paper-scale", action="store_true", help=f"use M={PAPER_PRIORS}")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--resolution", type=float, default=0.3)
    p.add_argument("--stage1", help="also write the coarse-stage predictions")
    p.add_argument("--dump-heatmap")
    p.add_argument("--dump-priors")
    p.add_argument("--dump-weights")
    p.add_argument("-o", "--output", required=True)

    p = command("loss", cmd_loss, "compute the loss breakdown of predictions against a scene")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--stage1", help="coarse-stage predictions")
    p.add_argument("--heatmap", help="predicted heatmap (FMHM)")
    p.add_argument("--kernel", type=int, default=DEFAULT_KERNEL)
    p.add_argument("--printed-pl", action="store_true", help="use the dot-product form of the point-line term")
    p.add_argument("--gradcheck", action="store_true")
    p.add_argument("--dump-matching")
    p.add_argument("--dump-grad")
    p.add_argument("-o", "--output")
    _add_weight_flags(p)

    p = command("fit", cmd_fit, "gradient descent of predicted points onto a scene")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--no-backtrack", action="store_true", help="plain fixed-step descent")
    p.add_argument("--trace", help="per-step loss CSV")
    p.add_argument("-o", "--output", required=True)
    _add_weight_flags(p)

    p = command("eval", cmd_eval, "chamfer AP and smoothness diagnostics")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("--set", choices=["strict", "standard", "both"], default="both")
    p.add_argument("--ap-mode", choices=["101", "area"], default="101")
    p.add_argument("--pr-csv")
    p.add_argument("-o", "--output")

    p = command("viz", cmd_viz, "render scenes and predictions to SVG")
    p.add_argument("files", nargs="*", help="scene or prediction JSON (predictions carry scores)")
    p.add_argument("--gt", action="append")
    p.add_argument("--pred", action="append")
    p.add_argument("--heatmap")
    p.add_argument("--priors")
    p.add_argument("--scale", type=float, default=10.0, help="pixels per meter")
    p.add_argument("-o", "--output", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except DivergenceError as exc:
        sys.stderr.write(f"fastmap {args.command}: numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except (UsageError, OSError, ContainerError, ValueError, KeyError) as exc:
        sys.stderr.write(f"fastmap {args.command}: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
