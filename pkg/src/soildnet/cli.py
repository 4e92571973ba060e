"""``soildnet`` command line: analyze, gen-data, train, eval, quantize.

Exit codes: 0 success, 1 runtime error, 2 validation or lint failure.
"""

import argparse
import json
import os
import sys

from . import analyzer as A
from . import netspec as N
from . import quantizer as Q
from . import synth as S
from . import train as TR
from .errors import DivisibilityError, ShapeError, SoildNetError, SpecError

OUT_ENV = "SOILDNET_OUT"
EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    """Invalid flag values; maps to exit code 2."""


def out_root():
    return os.environ.get(OUT_ENV, "runs")


def _out_dir(args, default):
    d = args.out or os.path.join(out_root(), default)
    os.makedirs(d, exist_ok=True)
    return d


def _write_run_config(d, args):
    # the output directory is where this file lives, so it is left out
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    with open(os.path.join(d, "run_config.json"), "w", newline="\n") as f:
        f.write(json.dumps(cfg, sort_keys=True, indent=1) + "\n")


def _parse_hw(text):
    try:
        h, w = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    return h, w


# -- analyze ------------------------------------------------------------------


def _load_for_analysis(name, scale):
    base = name.removesuffix("-desk")
    if base in N.REFERENCE_NAMES:
        spec = N.resolve_spec(name, scale)
        return spec, N.lint_embedded(spec)
    if not os.path.exists(name):
        raise SpecError(f"unknown spec {name!r}: not a reference name ({', '.join(N.REFERENCE_NAMES)}) or a file")
    with open(name, encoding="utf-8") as f:
        report, spec = N.lint_document(f.read())
    if spec is None:
        raise SpecError(f"{name}: {report.format()}")
    return spec, report


def cmd_analyze(args):
    specs, lint_failed = [], False
    for name in args.specs:
        spec, report = _load_for_analysis(name, args.scale)
        for issue in report:
            print(f"warning: {spec.name}: {issue.rule} at {issue.layer}: {issue.message}", file=sys.stderr)
        lint_failed |= bool(report)
        specs.append(spec)
    hw = args.input_hw or (N.DESK_HW if args.scale == "desk" else N.FULL_HW)
    if len(specs) == 1:
        table = A.ComparisonTable((A.ComparisonRow(A.cost_report(specs[0], hw), 1.0, 1.0, 1.0),), args.precision)
    else:
        table = A.compare_schemes(specs, hw, args.precision)
    if args.format == "csv":
        sys.stdout.write(table.to_csv())
    else:
        print(f"input {hw[0]}x{hw[1]}, {args.precision}")
        sys.stdout.write(table.render())
        base = table.baseline.network
        for row in table.rows[1:]:
            print(f"{row.report.network} uses {A.format_percent(row.params_ratio)} of {base} trainable parameters; "
                  f"model size {A.format_reduction(row.size_ratio)}")
    if lint_failed and args.strict:
        return EXIT_INVALID
    return EXIT_OK


# -- gen-data -----------------------------------------------------------------


def _tally_table(manifest):
    lines = [f"{'camera':<8}{'clean':>10}{'opaque':>10}{'transparent':>13}"]
    for cam, t in manifest.tallies["per_camera"].items():
        lines.append(f"{cam:<8}{t['clean']:>10}{t['opaque']:>10}{t['transparent']:>13}")
    t = manifest.tallies["total"]
    lines.append(f"{'total':<8}{t['clean']:>10}{t['opaque']:>10}{t['transparent']:>13}")
    return "\n".join(lines)


def cmd_gen_data(args):
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    h, w = args.input_hw or (N.DESK_HW if args.scale == "desk" else N.FULL_HW)
    config = S.DatasetConfig.even(args.samples, clean_bias=args.clean_bias, seed=args.seed, width=w, height=h)
    out = _out_dir(args, "data")
    manifest = S.build_dataset(config, out)
    _write_run_config(out, args)
    sp = manifest.tallies["samples_per_split"]
    print(f"wrote {len(manifest.samples)} samples ({w}x{h}) to {out}, seed {args.seed}")
    print(f"splits: train {sp['train']}, val {sp['val']}, test {sp['test']}; "
          f"all-clean samples {manifest.tallies['all_clean_samples']}")
    print(_tally_table(manifest))
    return EXIT_OK


# -- train --------------------------------------------------------------------


def cmd_train(args):
    config = TR.TrainConfig(
        spec=args.spec, data_root=args.data, scale=args.scale, batch_size=args.batch, epochs=args.epochs,
        learning_rate=args.lr, seed=args.seed, lr_decay_every=args.lr_decay_every,
    )
    out = _out_dir(args, "train")
    _write_run_config(out, args)

    def report(rec):
        val = "" if rec.val_accuracy is None else f" val_acc {rec.val_accuracy:.4f}"
        print(f"epoch {rec.epoch:3d} loss {rec.loss:.4f} acc {rec.categorical_accuracy:.4f}{val}", flush=True)

    result = TR.train(config, out, report)
    print(f"checkpoints and log in {out}")
    if result.best_val_accuracy is not None:
        print(f"best val accuracy {result.best_val_accuracy:.4f}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


def cmd_eval(args):
    if args.overlays < 0:
        raise UsageError("--overlays must be >= 0")
    net, meta = TR.load_checkpoint(args.checkpoint)
    data_root = args.data or meta.get("config", {}).get("data_root")
    if data_root is None:
        raise UsageError("--data is required (checkpoint does not record a dataset)")
    manifest = S.load_manifest(data_root)
    y, uv, labels, entries = S.load_split(data_root, args.split, manifest)
    conf, table = TR.evaluate(net, (y, uv, labels))
    out = _out_dir(args, "eval")
    _write_run_config(out, args)
    name = net.spec.name
    with open(os.path.join(out, "metrics.csv"), "w", newline="\n") as f:
        f.write(TR.metrics_csv(name, table))
    with open(os.path.join(out, "metrics_avg.csv"), "w", newline="\n") as f:
        f.write(TR.averaged_csv(name, table))
    if args.overlays:
        pred = TR.predict_tiles(net, y[: args.overlays], uv[: args.overlays])
        odir = os.path.join(out, "overlays")
        os.makedirs(odir, exist_ok=True)
        for i, s in enumerate(entries[: args.overlays]):
            frame = S.load_frame(data_root, manifest, s)
            left = TR.render_grid_overlay(frame, S.TileLabelGrid(pred[i]))
            right = TR.render_grid_overlay(frame, S.TileLabelGrid(labels[i]))
            TR.write_ppm(os.path.join(odir, f"{s.id}.ppm"), TR.side_by_side(left, right))
    base, major = TR.majority_baseline(S.load_split(data_root, "train", manifest)[2], labels)
    print(f"{name} on {args.split}: {conf.total} tiles, accuracy {conf.correct / conf.total:.4f} "
          f"(majority baseline {base:.4f}, class {TR.CLASS_NAMES[major]})")
    sys.stdout.write(TR.metrics_csv(name, table))
    sys.stdout.write(TR.averaged_csv(name, table))
    return EXIT_OK


# -- quantize -----------------------------------------------------------------


def cmd_quantize(args):
    if args.calib < 1:
        raise UsageError("--calib must be >= 1 (calibration needs at least one frame)")
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    net, meta = TR.load_checkpoint(args.checkpoint)
    data_root = args.data or meta.get("config", {}).get("data_root")
    if data_root is None:
        raise UsageError("--data is required (checkpoint does not record a dataset)")
    manifest = S.load_manifest(data_root)
    cy, cuv, _, _ = S.load_split(data_root, "train", manifest)
    model = Q.quantize_network(net, TR.to_inputs(cy[: args.calib], cuv[: args.calib]))
    y, uv, _, _ = S.load_split(data_root, args.split, manifest)
    fy, fuv = TR.to_inputs(y[: args.frames], uv[: args.frames])
    _, report = Q.forward_tiles_quantized(net, fy, fuv, model)
    out = _out_dir(args, "quant")
    _write_run_config(out, args)
    Q.save_model(model, os.path.join(out, "model.sdq"))
    with open(os.path.join(out, "quant_report.csv"), "w", newline="\n") as f:
        f.write(report.to_csv())
    print(f"tile argmax agreement {report.agreement:.4f} over {report.tiles} tiles "
          f"({min(args.frames, len(y))} {args.split} frames), logit max abs error {report.logit_max_abs_error:.3g}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="soildnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--scale", choices=("full", "desk"), default="desk")
        sp.add_argument("--seed", type=int, default=42)
        if out:
            sp.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./runs)")

    a = sub.add_parser("analyze", help="parameter, MAC and size report")
    a.add_argument("specs", nargs="+", help="reference names (net1..net4, soildnet) or spec files")
    a.add_argument("--input-hw", type=_parse_hw)
    a.add_argument("--format", choices=("table", "csv"), default="table")
    a.add_argument("--precision", choices=tuple(A.BYTES_PER_VALUE), default="float32")
    a.add_argument("--strict", action="store_true", help="exit 2 on lint violations")
    a.add_argument("--scale", choices=("full", "desk"), default="full")
    a.set_defaults(func=cmd_analyze)

    g = sub.add_parser("gen-data", help="generate a synthetic soiling dataset")
    common(g)
    g.add_argument("--samples", type=int, default=2000)
    g.add_argument("--clean-bias", type=float, default=0.486)
    g.add_argument("--input-hw", type=_parse_hw)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a network")
    common(t)
    t.add_argument("--spec", default="soildnet")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--lr-decay-every", type=int, default=0, help="epochs per 10x step decay (0 = constant)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-class metrics and overlays")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", choices=S.SPLITS, default="test")
    e.add_argument("--overlays", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="16-bit fixed-point model and agreement report")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--data")
    q.add_argument("--calib", type=int, default=Q.DEFAULT_CALIB_FRAMES)
    q.add_argument("--frames", type=int, default=64)
    q.add_argument("--split", choices=S.SPLITS, default="test")
    q.add_argument("--out")
    q.set_defaults(func=cmd_quantize)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, SpecError, DivisibilityError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (SoildNetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

if __name__ == "__main__":
    sys.exit(main())
