"""Adam training loop, per-class evaluation metrics and tile-grid overlays."""

import csv
import io
import json
import math
import os
import zipfile
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import netspec as N
from . import synth as S
from . import tensor as T
from .errors import TrainingDivergedError

METRICS = ("tpr", "tnr", "fpr", "fnr", "fdr")
CLASS_NAMES = tuple(c.name.lower() for c in S.SoilClass)
UNDEFINED = "—"


@dataclass(frozen=True)
class TrainConfig:
    spec: str = "soildnet"
    data_root: str | None = None
    scale: str = "desk"
    batch_size: int = 16
    epochs: int = 50
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 42
    # step decay is off unless lr_decay_every > 0
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.scale not in ("full", "desk"):
            raise ValueError(f"scale must be 'full' or 'desk', got {self.scale!r}")


def to_inputs(y, uv):
    """uint8 planes to the float range the networks train on."""
    return np.asarray(y, np.float64) / 255.0, np.asarray(uv, np.float64) / 255.0


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m, self.v = {}, {}

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- checkpoints --------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(net, path, meta=None):
    """Zip of .npy members with fixed timestamps, so equal weights give equal bytes."""
    members = {f"param/{k}": v for k, v in net.params.items()}
    members.update({f"buffer/{k}": v for k, v in net.buffers.items()})
    members["spec"] = np.frombuffer(N.dumps(net.spec).encode(), np.uint8)
    members["meta"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), np.uint8)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as z:
        for k in sorted(members):
            info = zipfile.ZipInfo(k + ".npy", date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            z.writestr(info, _npy_bytes(members[k]))


def load_checkpoint(path):
    """Returns (network, meta dict)."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as z:
        spec = N.validate(N.loads(z["spec"].tobytes().decode()))
        meta = json.loads(z["meta"].tobytes().decode())
        params = {k[6:]: z[k].copy() for k in z.files if k.startswith("param/")}
        buffers = {k[7:]: z[k].copy() for k in z.files if k.startswith("buffer/")}
    return N.Network(spec, params, buffers), meta


# -- training -----------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    categorical_accuracy: float
    val_accuracy: float | None


def log_csv(records, seed):
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "loss", "categorical_accuracy", "val_accuracy"))
    for r in records:
        val = "" if r.val_accuracy is None else f"{r.val_accuracy:.6f}"
        w.writerow((r.epoch, f"{r.loss:.6f}", f"{r.categorical_accuracy:.6f}", val))
    return buf.getvalue()


@dataclass
class TrainResult:
    net: N.Network
    log: list
    best_net: N.Network | None
    best_val_accuracy: float | None


def predict_tiles(net, y, uv, batch=16):
    """Argmax class per tile for uint8 planes, shape (N, rows, cols)."""
    out = []
    for i in range(0, len(y), batch):
        fy, fuv = to_inputs(y[i : i + batch], uv[i : i + batch])
        out.append(net.forward(fy, fuv, training=False).argmax(axis=1))
    return np.concatenate(out).astype(np.uint8)


def fit(net, data, config, val=None, on_epoch=None):
    """Train ``net`` in place on ``data`` = (y, uv, labels) uint8 arrays.

    Batches follow one seeded permutation per epoch, so two runs with equal
    seeds are bit-identical.  Returns a :class:`TrainResult`.
    """
    y_all, uv_all, lab_all = data
    n = len(y_all)
    if n == 0:
        raise ValueError("training split is empty")
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.seed)
    log = []
    best, best_acc = None, None
    for epoch in range(1, config.epochs + 1):
        if config.lr_decay_every > 0:
            opt.lr = config.learning_rate * config.lr_decay_factor ** ((epoch - 1) // config.lr_decay_every)
        order = rng.permutation(n)
        loss_sum = correct = tiles = 0.0
        for i in range(0, n, config.batch_size):
            idx = np.sort(order[i : i + config.batch_size])
            fy, fuv = to_inputs(y_all[idx], uv_all[idx])
            labels = lab_all[idx]
            logits = net.forward(fy, fuv, training=True, record=True)
            loss, grad = T.softmax_ce_per_tile(logits, labels)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            opt.step(net.params, net.backward(grad))
            k = labels.size
            loss_sum += loss * k
            correct += int(np.count_nonzero(logits.argmax(axis=1) == labels))
            tiles += k
        val_acc = None
        if val is not None and len(val[0]):
            val_acc = float(np.mean(predict_tiles(net, val[0], val[1]) == val[2]))
            if best_acc is None or val_acc > best_acc:
                best, best_acc = net.copy(), val_acc
        rec = EpochRecord(epoch, loss_sum / tiles, correct / tiles, val_acc)
        log.append(rec)
        if on_epoch:
            on_epoch(rec)
    return TrainResult(net, log, best, best_acc)


def train(config, out_dir=None, on_epoch=None):
    """Train the configured spec on the dataset at ``config.data_root``.

    With ``out_dir`` the log CSV, ``final.ckpt`` and ``best.ckpt`` are written there.
    """
    if config.data_root is None:
        raise ValueError("config.data_root is required")
    manifest = S.load_manifest(config.data_root)
    spec = N.resolve_spec(config.spec, config.scale)
    report = N.lint_embedded(spec)
    if report:
        raise N.SpecError(f"spec fails embedded lint:\n{report.format()}")
    h, w = manifest.height, manifest.width
    y, uv, labels, _ = S.load_split(config.data_root, "train", manifest)
    val = S.load_split(config.data_root, "val", manifest)[:3]
    net = N.build_network(spec, rng_seed=config.seed)
    net._check_inputs(np.zeros((1, 1, h, w)), np.zeros((1, 2, h // 2, w // 2)))
    result = fit(net, (y, uv, labels), config, val, on_epoch)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        meta = dict(config=asdict(config), epochs_run=len(result.log))
        with open(os.path.join(out_dir, "train_log.csv"), "w", newline="\n") as f:
            f.write(log_csv(result.log, config.seed))
        save_checkpoint(result.net, os.path.join(out_dir, "final.ckpt"), dict(meta, kind="final"))
        if result.best_net is not None:
            save_checkpoint(result.best_net, os.path.join(out_dir, "best.ckpt"),
                            dict(meta, kind="best", val_accuracy=result.best_val_accuracy))
    return result


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionSet:
    """Multi-class confusion matrix; rows are truth, columns predictions."""

    matrix: np.ndarray  # (3, 3) int64

    @classmethod
    def from_labels(cls, truth, pred):
        truth = np.asarray(truth).ravel().astype(np.int64)
        pred = np.asarray(pred).ravel().astype(np.int64)
        if truth.shape != pred.shape:
            raise ValueError("truth and prediction sizes differ")
        m = np.bincount(truth * 3 + pred, minlength=9).reshape(3, 3)
        return cls(m)

    def __add__(self, other):
        return ConfusionSet(self.matrix + other.matrix)

    @property
    def total(self):
        return int(self.matrix.sum())

    @property
    def correct(self):
        return int(np.trace(self.matrix))

    def counts(self, c):
        """One-vs-rest (TP, FP, TN, FN) for class ``c``."""
        m = self.matrix
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        return tp, fp, self.total - tp - fp - fn, fn


def _div(a, b):
    return None if b == 0 else Fraction(a, b)


def metrics_from_counts(tp, fp, tn, fn):
    """Exact rational rates; ``None`` where the denominator is zero."""
    return dict(tpr=_div(tp, tp + fn), tnr=_div(tn, tn + fp), fpr=_div(fp, fp + tn),
                fnr=_div(fn, fn + tp), fdr=_div(fp, fp + tp))


@dataclass(frozen=True)
class MetricsTable:
    """``rows[class_name][metric]`` -> number or ``None`` (undefined)."""

    rows: dict

    @classmethod
    def from_confusion(cls, conf):
        return cls({CLASS_NAMES[c]: metrics_from_counts(*conf.counts(c)) for c in range(3)})

    def average(self):
        return average_metrics(self)


def average_metrics(table):
    """Unweighted mean over classes; any undefined class value makes that average undefined."""
    rows = table.rows if isinstance(table, MetricsTable) else table
    out = {}
    for m in METRICS:
        vals = [rows[c][m] for c in rows]
        out[m] = None if any(v is None for v in vals) else sum(vals) / len(vals)
    return out


def evaluate(net, data, batch=16):
    """(ConfusionSet, MetricsTable) for ``data`` = (y, uv, labels) uint8 arrays."""
    y, uv, labels = data[:3]
    if len(y) == 0:
        raise ValueError("cannot evaluate an empty split")
    conf = ConfusionSet(np.zeros((3, 3), np.int64))
    for i in range(0, len(y), batch):
        pred = predict_tiles(net, y[i : i + batch], uv[i : i + batch], batch)
        conf = conf + ConfusionSet.from_labels(labels[i : i + batch], pred)
    return conf, MetricsTable.from_confusion(conf)


def majority_baseline(train_labels, test_labels):
    """Accuracy on ``test_labels`` of always predicting the most common training class."""
    major = np.bincount(np.asarray(train_labels).ravel(), minlength=3).argmax()
    return float(np.mean(np.asarray(test_labels) == major)), int(major)


def fmt_metric(v):
    return UNDEFINED if v is None else f"{float(v):.4f}"


def metrics_csv(network, table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("network", "class") + METRICS)
    for c, row in table.rows.items():
        w.writerow((network, c) + tuple(fmt_metric(row[m]) for m in METRICS))
    return buf.getvalue()


def averaged_csv(network, table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    avg = average_metrics(table)
    w.writerow(("network",) + METRICS)
    w.writerow((network,) + tuple(fmt_metric(avg[m]) for m in METRICS))
    return buf.getvalue()


# -- overlays -----------------------------------------------------------------

CLASS_COLORS = np.array([[0, 255, 0], [0, 255, 255], [0, 0, 255]], np.float64)
TINT = 0.4
BORDER = np.array([0, 0, 0], np.uint8)


def render_grid_overlay(frame, grid, tile=S.TILE):
    """RGB image with each tile tinted toward its class colour and outlined."""
    if (grid.rows * tile, grid.cols * tile) != (frame.height, frame.width):
        raise ValueError(
            f"grid {grid.rows}x{grid.cols} does not cover a {frame.width}x{frame.height} frame with {tile}px tiles"
        )
    rgb = S.yuv420_to_rgb(frame).astype(np.float64)
    color = CLASS_COLORS[np.repeat(np.repeat(grid.labels, tile, 0), tile, 1)]
    out = np.clip(np.floor((1 - TINT) * rgb + TINT * color + 0.5), 0, 255).astype(np.uint8)
    edge = np.zeros(tile, bool)
    edge[[0, -1]] = True
    rows = np.tile(edge, grid.rows)
    cols = np.tile(edge, grid.cols)
    out[rows, :] = BORDER
    out[:, cols] = BORDER
    return out


def side_by_side(left, right, gutter=8):
    if left.shape != right.shape:
        raise ValueError("side-by-side images must match in size")
    h = left.shape[0]
    gap = np.full((h, gutter, 3), 255, np.uint8)
    return np.concatenate([left, gap, right], axis=1)


def ppm_bytes(rgb):
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def write_ppm(path, rgb):
    with open(path, "wb") as f:
        f.write(ppm_bytes(rgb))


# Published per-class results for the five reference schemes, metric -> (clean, opaque, transparent),
# and the class-averaged rows published alongside them.
PUBLISHED_CLASSWISE = {
    "net1": dict(tpr=(0.9607, 0.9157, 0.4939), tnr=(0.8864, 0.9602, 0.9753), fpr=(0.1135, 0.0397, 0.024),
                 fnr=(0.0392, 0.0842, 0.506), fdr=(0.0402, 0.1639, 0.3632)),
    "net2": dict(tpr=(0.9902, 0.8923, 0.3706), tnr=(0.8048, 0.9835, 0.9861), fpr=(0.1951, 0.0164, 0.0138),
                 fnr=(0.0097, 0.1076, 0.6293), fdr=(0.0652, 0.0766, 0.3001)),
    "net3": dict(tpr=(0.9724, 0.921, 0.5413), tnr=(0.9024, 0.9708, 0.9759), fpr=(0.0975, 0.0291, 0.024),
                 fnr=(0.0275, 0.0789, 0.4586), fdr=(0.0343, 0.1249, 0.3371)),
    "net4": dict(tpr=(0.9916, 0.9302, 0.2859), tnr=(0.8136, 0.9739, 0.9934), fpr=(0.1863, 0.026, 0.0065),
                 fnr=(0.0083, 0.0697, 0.714), fdr=(0.0624, 0.1123, 0.2087)),
    "soildnet": dict(tpr=(0.9556, 0.9303, 0.5973), tnr=(0.938, 0.9642, 0.9649), fpr=(0.0619, 0.0357, 0.035),
                     fnr=(0.0443, 0.0696, 0.4026), fdr=(0.0224, 0.1479, 0.4019)),
}
PUBLISHED_AVERAGE = {
    "net1": dict(tpr=0.7901, tnr=0.9406, fpr=0.059, fnr=0.2098, fdr=0.1891),
    "net2": dict(tpr=0.751, tnr=0.9248, fpr=0.0751, fnr=0.2488, fdr=0.1473),
    "net3": dict(tpr=0.8115, tnr=0.9497, fpr=0.0502, fnr=0.1883, fdr=0.1654),
    "net4": dict(tpr=0.7359, tnr=0.9269, fpr=0.0729, fnr=0.264, fdr=0.1278),
    "soildnet": dict(tpr=0.8277, tnr=0.9557, fpr=0.0442, fnr=0.1721, fdr=0.1907),
}


def published_table(network):
    """A :class:`MetricsTable` holding one scheme's published per-class rates."""
    rows = PUBLISHED_CLASSWISE[network]
    return MetricsTable({c: {m: rows[m][i] for m in METRICS} for i, c in enumerate(CLASS_NAMES)})
