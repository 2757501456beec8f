"""Command-line entry points: synth, train, infer, baseline, eval, compare.

Exit codes: 0 success, 1 validation/config/input error, 2 training abort.
Set ``DUALSKIN_DETERMINISTIC=1`` to force deterministic torch kernels.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import config as runconfig
from .baselines import gmm_skin_probability, threshold_classify
from .dataset import load_dataset, load_manifest
from .estimator import MutualGuidanceSegmenter, _jsonable
from .evaluation import EvalReport, binarize, compare_reports, evaluate_method, rows_to_csv
from .network import save_checkpoint
from .exceptions import ConfigError, DualSkinError, InputError, TrainingAbort, ValidationError
from .synthgen import SceneParams, generate_dataset

log = logging.getLogger("dualskin")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _deterministic():
    if os.environ.get("DUALSKIN_DETERMINISTIC", "").lower() in ("1", "true", "yes"):
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _manifest_path(data_dir, split):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.is_file():
        raise InputError(f"no {split}.jsonl manifest in {data_dir}")
    return path


def _prob_png(prob, path):
    Image.fromarray(np.round(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8), "L").save(path)


def _mask_png(mask, path):
    Image.fromarray(mask.astype(np.uint8) * 255, "L").save(path)


def write_prediction(out_dir, sid, task, prob, threshold=0.5, sidecar=False):
    out_dir = Path(out_dir)
    _prob_png(prob, out_dir / f"{sid}_{task}_prob.png")
    _mask_png(binarize(prob, threshold), out_dir / f"{sid}_{task}_mask.png")
    if sidecar:
        np.save(out_dir / f"{sid}_{task}_prob.npy", prob.astype(np.float32))


def read_prediction(pred_dir, sid, task):
    """Probability map for ``sid``; the float sidecar wins over the 8-bit raster."""
    pred_dir = Path(pred_dir)
    npy = pred_dir / f"{sid}_{task}_prob.npy"
    if npy.is_file():
        return np.load(npy).astype(np.float64)
    png = pred_dir / f"{sid}_{task}_prob.png"
    if png.is_file():
        return np.asarray(Image.open(png).convert("L"), dtype=np.float64) / 255.0
    return None


# --- synth -----------------------------------------------------------------

def cmd_synth(args):
    if not 0.0 < args.skin_label_fraction < 1.0:
        raise ConfigError("--skin-label-fraction must be in (0, 1)")
    params = SceneParams(
        image_size=args.size,
        n_figures=args.max_figures,
        background_distractor_rate=args.distractor_rate,
        lighting_tint_strength=args.tint,
        seed=args.seed,
    )
    summary = generate_dataset(params, args.count, args.skin_label_fraction, args.out, args.val_count)
    print(f"wrote {summary['train']} training samples to {summary['dir']}: "
          f"{summary['skin']} skin / {summary['body']} body; {summary['val']} validation (both masks)")
    return 0


# --- train -----------------------------------------------------------------

def _train_config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"training.seed={args.seed}")
    if args.stage1_only:
        overrides.append("training.finetune_epochs=0")
    if args.no_mutual_guidance:
        overrides.append("training.mutual_guidance=false")
    if args.no_crf:
        overrides.append("loss.lambda1=0")
    if args.no_wce:
        overrides.append("loss.lambda2=0")
    if args.no_gradient_stop:
        overrides.append("training.grad_stop=false")
    if args.from_scratch:
        overrides.append("training.from_scratch=true")
    return runconfig.resolve(args.config, overrides)


def cmd_train(args):
    cfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runconfig.write(cfg, out / "config.ini")
    est = MutualGuidanceSegmenter(**runconfig.estimator_params(cfg))
    size = est.input_size
    train = load_dataset(_manifest_path(args.data, "train"), size)
    val = load_dataset(_manifest_path(args.data, "val"), size)

    history_path = out / "history.jsonl"
    history_path.write_text("", encoding="utf-8")

    stage1_end = est.stage1_epochs if est.mutual_guidance and not est.from_scratch else None

    def on_epoch(net, record):
        if record["phase"] == "stage1" and record["epoch"] == stage1_end and est.finetune_epochs > 0:
            save_checkpoint(out / "checkpoint_stage1.ckpt", net, epoch=record["epoch"],
                            seed=est.random_state, phase="stage1",
                            metrics={k: v for k, v in record.items() if k.startswith("val_")},
                            extra={"estimator": _jsonable(est.get_params()), "two_stage": False})
        with open(history_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        if not args.quiet:
            shown = {k: round(v, 4) if isinstance(v, float) else v for k, v in record.items()
                     if k in ("epoch", "phase", "loss_total", "val_skin_iou", "val_body_iou")}
            print(json.dumps(shown), flush=True)

    est.fit(train, validation=val, callback=on_epoch)
    last = est.history_[-1]
    metrics = {k: v for k, v in last.items() if k.startswith("val_")}
    est.save(out / "checkpoint_final.ckpt", metrics=metrics)
    (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True) + "\n", encoding="utf-8")
    print("final " + " ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return 0


# --- infer -----------------------------------------------------------------

def _inputs(path, split):
    """(id, image path) pairs from a single image, a dataset dir or a folder of images."""
    path = Path(path)
    if path.is_file():
        return [(path.stem, path)]
    if not path.is_dir():
        raise InputError(f"{path} does not exist")
    manifest = path / f"{split}.jsonl"
    if manifest.is_file():
        return [(d.id, d.image) for d in load_manifest(manifest)]
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise InputError(f"no images found in {path}")
    return [(p.stem, p) for p in files]


def _resize_prob(prob, hw):
    if prob.shape == tuple(hw):
        return prob
    t = torch.from_numpy(prob)[None, None]
    return F.interpolate(t, size=tuple(hw), mode="bilinear", align_corners=False)[0, 0].numpy()


def cmd_infer(args):
    est = MutualGuidanceSegmenter.from_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = est.input_size
    for sid, img_path in _inputs(args.input, args.split):
        try:
            img = Image.open(img_path).convert("RGB")
        except OSError as exc:
            raise InputError(f"cannot read {img_path}: {exc}") from exc
        hw = (img.size[1], img.size[0])
        x = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
        skin, body = est.predict_proba(x[None])
        for task, prob in (("skin", skin[0]), ("body", body[0])):
            write_prediction(out, sid, task, _resize_prob(prob, hw), args.threshold, args.sidecar)
    print(f"wrote predictions to {out}")
    return 0


# --- baseline --------------------------------------------------------------

def cmd_baseline(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(_manifest_path(args.data, args.split), size=None)
    failures = []
    for s in samples:
        rule = threshold_classify(s.image, args.hsv)
        if args.method == "threshold":
            prob = rule.astype(np.float64)
        else:
            try:
                prob = gmm_skin_probability(s.image, rule, args.components, args.seed)
            except ValidationError as exc:
                failures.append(s.id)
                print(f"{s.id}: GMM skipped ({exc}); using the rule mask", file=sys.stderr)
                prob = rule.astype(np.float64)
        write_prediction(out, s.id, "skin", prob, args.threshold, args.sidecar)
    print(f"{args.method}: wrote {len(samples)} skin maps to {out}"
          + (f" ({len(failures)} GMM fallbacks)" if failures else ""))
    return 0


# --- eval / compare --------------------------------------------------------

def _parse_named(items):
    named = []
    for item in items:
        if "=" in item:
            name, path = item.split("=", 1)
        else:
            name, path = Path(item).name, item
        named.append((name, Path(path)))
    return named


def cmd_eval(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest_path(args.data, args.split)
    samples = load_dataset(manifest, size=None)
    reports = []
    for name, pred_dir in _parse_named(args.predictions):
        if not pred_dir.is_dir():
            raise InputError(f"predictions directory {pred_dir} does not exist")
        preds = {}
        for s in samples:
            entry = {}
            for task in ("skin", "body"):
                p = read_prediction(pred_dir, s.id, task)
                if p is not None:
                    entry[task] = p
            preds[s.id] = entry
        report = evaluate_method(preds, samples, method=name, dataset=str(manifest), threshold=args.threshold)
        report.save(out / f"{name}_report.json")
        for task in report.tasks:
            (out / f"{name}_{task}_curve.csv").write_text(report.curve_csv(task), encoding="utf-8")
        agg = report.tasks["skin"].aggregates if "skin" in report.tasks else None
        if agg:
            print(f"{name}: skin IoU={agg['mean_iou']:.4f} precision={agg['mean_precision']:.4f} "
                  f"recall={agg['mean_recall']:.4f} (n={agg['n']})")
        reports.append(report)
    if len(reports) > 1:
        _write_comparison(reports, out, args.task)
    return 0


def _write_comparison(reports, out, task):
    grid, top1_curve = compare_reports(reports, task)
    (out / "comparison.csv").write_text(
        rows_to_csv(grid, ["method", "iou", "top1", "precision", "recall"]), encoding="utf-8"
    )
    (out / "top1_curve.csv").write_text(
        rows_to_csv(top1_curve, ["threshold"] + [r.method for r in reports]), encoding="utf-8"
    )
    for row in grid:
        print(f"{row['method']:>16}  IoU {100 * row['iou']:6.2f}  Top-1 {row['top1']:6.2f}  "
              f"P {100 * row['precision']:6.2f}  R {100 * row['recall']:6.2f}")


def cmd_compare(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_comparison([EvalReport.load(p) for p in args.reports], out, args.task)
    return 0


def build_parser():
    p = _Parser(prog="dualskin", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=400)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--skin-label-fraction", type=float, default=0.5)
    s.add_argument("--val-count", type=int, default=None)
    s.add_argument("--max-figures", type=int, default=2)
    s.add_argument("--distractor-rate", type=float, default=0.6)
    s.add_argument("--tint", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the dual-task network")
    t.add_argument("--data", required=True, help="directory with train.jsonl and val.jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="INI run configuration")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--stage1-only", action="store_true")
    t.add_argument("--no-mutual-guidance", action="store_true")
    t.add_argument("--no-crf", action="store_true")
    t.add_argument("--no-wce", action="store_true")
    t.add_argument("--no-gradient-stop", action="store_true")
    t.add_argument("--from-scratch", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict skin and body maps")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="image file, image folder or dataset directory")
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="val")
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--sidecar", action="store_true", help="also write float32 .npy maps")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("baseline", help="run a classical skin detector")
    b.add_argument("--method", choices=("threshold", "gmm"), required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--split", default="val")
    b.add_argument("--components", type=int, default=4)
    b.add_argument("--hsv", action="store_true", help="AND the HSV clause into the colour rule")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--sidecar", action="store_true")
    b.set_defaults(func=cmd_baseline)

    e = sub.add_parser("eval", help="score prediction folders against a dataset split")
    e.add_argument("--predictions", nargs="+", required=True, metavar="[NAME=]DIR")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--task", default="skin", choices=("skin", "body"))
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="merge saved reports into a comparison grid")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--task", default="skin", choices=("skin", "body"))
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _deterministic()
    try:
        return args.func(args)
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    except (DualSkinError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
