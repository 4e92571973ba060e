"""Desk-scale end-to-end run: synthetic data, training, evaluation, quantization.

    python3 scripts/desk_experiment.py --samples 2000 --out runs/desk

Trains each requested network with the default recipe and prints held-out
accuracy against the majority-class baseline, per-class metrics and 16-bit
agreement.  Reuses an existing dataset in ``<out>/data`` if its manifest is there.
"""

import argparse
import json
import time
from pathlib import Path

from soildnet import quantizer as Q
from soildnet import synth as S
from soildnet import train as TR


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--specs", nargs="+", default=["soildnet", "net4"])
    ap.add_argument("--quant-frames", type=int, default=64)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    t0 = time.perf_counter()
    if (data / "manifest.json").exists():
        print(f"reusing dataset in {data}")
    else:
        S.build_dataset(S.DatasetConfig.even(args.samples, seed=args.seed), data)
        print(f"generated {args.samples} samples in {time.perf_counter() - t0:.0f} s")
    train_labels = S.load_split(data, "train")[2]
    test = S.load_split(data, "test")[:3]
    baseline, major = TR.majority_baseline(train_labels, test[2])
    print(f"majority baseline {baseline:.4f} (class {TR.CLASS_NAMES[major]})")

    summary = {"baseline": baseline}
    for spec in args.specs:
        t1 = time.perf_counter()
        log = lambda r: print(f"  {spec} epoch {r.epoch:3d} loss {r.loss:.4f} val_acc {r.val_accuracy:.4f}", flush=True)
        cfg = TR.TrainConfig(spec=spec, data_root=str(data), epochs=args.epochs, seed=args.seed)
        result = TR.train(cfg, out / spec, on_epoch=log)
        train_s = time.perf_counter() - t1
        conf, table = TR.evaluate(result.net, test)
        acc = conf.correct / conf.total
        (out / spec / "metrics.csv").write_text(TR.metrics_csv(spec, table))
        calib = S.load_split(data, "train")
        k = Q.DEFAULT_CALIB_FRAMES
        model = Q.quantize_network(result.net, TR.to_inputs(calib[0][:k], calib[1][:k]))
        n = args.quant_frames
        _, report = Q.forward_tiles_quantized(result.net, *TR.to_inputs(test[0][:n], test[1][:n]), model)
        Q.save_model(model, out / spec / "model.sdq")
        print(f"{spec}: test accuracy {acc:.4f} ({acc - baseline:+.4f} vs baseline), "
              f"train {train_s / 60:.1f} min, 16-bit agreement {report.agreement:.4f}")
        print(TR.metrics_csv(spec, table), end="")
        summary[spec] = dict(accuracy=acc, train_minutes=train_s / 60, agreement=report.agreement,
                             average={m: None if v is None else float(v) for m, v in table.average().items()})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
