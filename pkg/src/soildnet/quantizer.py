"""16-bit fixed-point simulation of the embedded inference path.

Every tensor carries a per-tensor power-of-two scale ``2**exp``.  Batch-norm
is folded into the preceding conv, weights and activations are int16, the
conv accumulates in a wide integer (checked against ``acc_bits``) and each
layer output is requantized once with a rounding shift.
"""

import csv
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import netspec as N
from . import tensor as T
from .errors import AccumulatorOverflowError, QuantizationError

QMIN, QMAX = -32768, 32767
ACC_BITS = 48
MAGIC = b"SDNQ"
VERSION = 1
DEFAULT_CALIB_FRAMES = 128


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_exponent(max_abs):
    """Smallest e with 2**e >= max_abs / 32767; 0 for an all-zero tensor."""
    max_abs = float(max_abs)
    if not math.isfinite(max_abs):
        raise QuantizationError("cannot quantize non-finite values")
    if max_abs == 0.0:
        return 0
    e = math.ceil(math.log2(max_abs / QMAX))
    # log2 can be off by one ulp near exact powers of two; settle it exactly
    while math.ldexp(QMAX, e) < max_abs:
        e += 1
    while math.ldexp(QMAX, e - 1) >= max_abs:
        e -= 1
    return e


@dataclass(frozen=True)
class FixedTensor:
    values: np.ndarray  # int16
    exponent: int

    def __post_init__(self):
        if self.values.dtype != np.int16:
            raise QuantizationError(f"fixed-point values must be int16, got {self.values.dtype}")

    @property
    def scale(self):
        return math.ldexp(1.0, self.exponent)

    @property
    def shape(self):
        return self.values.shape


def quantize(x, exponent=None):
    """Round half away from zero onto the grid ``2**exponent``, saturating.

    Without ``exponent`` the smallest power of two covering ``max|x|`` is used,
    so nothing saturates.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantizationError("cannot quantize non-finite values")
    if exponent is None:
        exponent = scale_exponent(np.abs(x).max() if x.size else 0.0)
    q = round_half_away(np.ldexp(x, -exponent))
    return FixedTensor(np.clip(q, QMIN, QMAX).astype(np.int16), int(exponent))


def dequantize(f):
    return np.ldexp(f.values.astype(np.float64), f.exponent)


def shift_round(acc, shift):
    """``acc * 2**-shift`` rounded half away from zero, in integer arithmetic."""
    acc = np.asarray(acc, dtype=np.int64)
    if shift <= 0:
        return acc << -shift
    mag = (np.abs(acc) + (1 << (shift - 1))) >> shift
    return np.where(acc < 0, -mag, mag)


# -- model preparation --------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    """One conv with everything folded or fused after it up to the next conv."""

    name: str
    conv: N.LayerSpec
    bn: str | None
    relu: bool
    reorders: tuple


def stages(layers, section):
    out = []
    for i, layer in enumerate(layers):
        name = f"{section}.{i}"
        if layer.kind == N.CONV:
            out.append(dict(name=name, conv=layer, bn=None, relu=False, reorders=[]))
            continue
        if not out:
            raise QuantizationError(f"{name}: {layer.kind} before the first conv of {section} cannot be fused")
        cur = out[-1]
        if layer.kind == N.BATCHNORM:
            if cur["bn"] is not None or cur["relu"] or cur["reorders"]:
                raise QuantizationError(f"{name}: BatchNorm must directly follow a conv to be folded")
            cur["bn"] = name
        elif layer.kind == N.RELU:
            cur["relu"] = True
        else:
            cur["reorders"].append(layer.groups)
    return [Stage(s["name"], s["conv"], s["bn"], s["relu"], tuple(s["reorders"])) for s in out]


def fold_batchnorm(net, stage):
    """Float kernel and bias with the stage's batch-norm absorbed."""
    w = net.conv_weights(stage.name)
    k = w.kernel.astype(np.float64)
    b = np.zeros(w.out_channels) if w.bias is None else w.bias.astype(np.float64)
    if stage.bn is not None:
        bn = net.bn_state(stage.bn)
        a = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
        k = k * a[:, None, None, None]
        b = (b - bn.running_mean) * a + bn.beta
    return k, b


def _sections(spec):
    return [(sec, stages(layers, sec)) for sec, layers in spec.sections()]


def _apply_post(x, stage):
    if stage.relu:
        x = np.maximum(x, 0)
    for g in stage.reorders:
        x = T.channel_reorder(x, g)
    return x


def _float_stage(x, k, b, stage):
    y = T.conv2d_forward(x, T.ConvWeights(k, b, stage.conv.groups), stage.conv.stride, stage.conv.pad)
    return _apply_post(y, stage)


def folded_forward(net, y, uv, folded=None, trace=None):
    """Float inference with batch-norm folded; optionally records stage outputs."""
    folded = folded or {s.name: fold_batchnorm(net, s) for _, st in _sections(net.spec) for s in st}
    feats = {}
    for sec, st in _sections(net.spec):
        if sec == "y_stem":
            x = np.asarray(y, dtype=np.float64)
        elif sec == "uv_stem":
            x = np.asarray(uv, dtype=np.float64)
        elif sec == "trunk":
            x = T.concat_channels(feats["y_stem"], feats["uv_stem"])
        else:
            x = feats["trunk"]
        for s in st:
            x = _float_stage(x, *folded[s.name], s)
            if trace is not None:
                trace[s.name] = x
        feats[sec] = x
    return feats["head"]


@dataclass
class QuantLayer:
    name: str
    weight: np.ndarray  # int16, conv kernel shape
    weight_exp: int
    bias: np.ndarray  # int32 at the accumulator exponent (input_exp + weight_exp)
    out_exp: int


@dataclass
class QuantizedModel:
    spec: N.NetworkSpec
    input_exps: tuple  # (y, uv)
    layers: dict = field(default_factory=dict)  # name -> QuantLayer, spec order

    def layer_list(self):
        return list(self.layers.values())


def calibrate(net, frames, batch=16):
    """Max |activation| at the inputs and every stage output over ``frames``.

    ``frames`` is a (y, uv) pair of stacked batches.  Max is order-independent,
    so batching does not change the result.
    """
    y_all, uv_all = frames
    if len(y_all) < 1:
        raise QuantizationError("calibration needs at least one frame")
    folded = {s.name: fold_batchnorm(net, s) for _, st in _sections(net.spec) for s in st}
    maxima = {"input.y": 0.0, "input.uv": 0.0}
    for i in range(0, len(y_all), batch):
        y, uv = y_all[i : i + batch], uv_all[i : i + batch]
        maxima["input.y"] = max(maxima["input.y"], float(np.abs(y).max()))
        maxima["input.uv"] = max(maxima["input.uv"], float(np.abs(uv).max()))
        trace = {}
        folded_forward(net, y, uv, folded, trace)
        for k, v in trace.items():
            maxima[k] = max(maxima.get(k, 0.0), float(np.abs(v).max()))
    return maxima


def quantize_network(net, frames, batch=16):
    """Fold, calibrate on ``frames`` and quantize every conv stage."""
    maxima = calibrate(net, frames, batch)
    secs = _sections(net.spec)
    out_exp = {s.name: scale_exponent(maxima[s.name]) for _, st in secs for s in st}
    if not dict(secs)["y_stem"] or not dict(secs)["uv_stem"]:
        raise QuantizationError("both stems need at least one conv to set the concat exponent")
    # both stems feed one concatenated tensor, so they share its exponent
    stem_ends = [dict(secs)["y_stem"][-1].name, dict(secs)["uv_stem"][-1].name]
    shared = max(out_exp[n] for n in stem_ends)
    for n in stem_ends:
        out_exp[n] = shared
    in_exps = (scale_exponent(maxima["input.y"]), scale_exponent(maxima["input.uv"]))
    model = QuantizedModel(net.spec, in_exps)
    section_in = {"y_stem": in_exps[0], "uv_stem": in_exps[1], "trunk": shared}
    e = shared
    for sec, st in secs:
        # the head reads whatever the trunk produced last
        e = section_in.get(sec, e)
        for s in st:
            k, b = fold_batchnorm(net, s)
            wq = quantize(k)
            bq = round_half_away(np.ldexp(b, -(e + wq.exponent)))
            if np.abs(bq).max(initial=0) > 2**31 - 1:
                raise AccumulatorOverflowError(s.name, 32)
            model.layers[s.name] = QuantLayer(s.name, wq.values, wq.exponent, bq.astype(np.int32), out_exp[s.name])
            e = out_exp[s.name]
    return model


# -- integer inference --------------------------------------------------------


def _int_conv(xq, layer, stage, acc_bits):
    conv = stage.conv
    cg_k2 = layer.weight.shape[1] * layer.weight.shape[2] * layer.weight.shape[3]
    # float64 sums of int16 x int16 products stay exact below 2**53
    assert cg_k2 * 2**30 < 2**53
    acc = T.conv2d_forward(
        xq.astype(np.float64), T.ConvWeights(layer.weight.astype(np.float64), None, conv.groups), conv.stride, conv.pad
    )
    acc = acc.astype(np.int64) + layer.bias.astype(np.int64)[None, :, None, None]
    if np.abs(acc).max(initial=0) >= 2 ** (acc_bits - 1):
        raise AccumulatorOverflowError(stage.name, acc_bits)
    return acc


def run_quantized(model, y, uv, acc_bits=ACC_BITS, trace=None):
    """Integer forward pass; returns the head output as a FixedTensor.

    Returns saturation counts per stage through ``trace`` when given, along
    with the dequantized stage outputs.
    """
    yq = quantize(y, model.input_exps[0])
    uvq = quantize(uv, model.input_exps[1])
    feats = {}
    for sec, st in _sections(model.spec):
        if sec == "y_stem":
            x, e = yq.values.astype(np.int64), yq.exponent
        elif sec == "uv_stem":
            x, e = uvq.values.astype(np.int64), uvq.exponent
        elif sec == "trunk":
            (a, ea), (b, eb) = feats["y_stem"], feats["uv_stem"]
            assert ea == eb
            x, e = T.concat_channels(a, b), ea
        else:
            x, e = feats["trunk"]
        for s in st:
            layer = model.layers[s.name]
            acc = _int_conv(x, layer, s, acc_bits)
            q = shift_round(acc, layer.out_exp - (e + layer.weight_exp))
            sat = int(np.count_nonzero((q < QMIN) | (q > QMAX)))
            q = np.clip(q, QMIN, QMAX)
            x, e = _apply_post(q, s), layer.out_exp
            if trace is not None:
                trace[s.name] = (np.ldexp(x.astype(np.float64), e), sat)
        feats[sec] = (x, e)
    x, e = feats["head"]
    return FixedTensor(x.astype(np.int16), e)


@dataclass(frozen=True)
class LayerError:
    name: str
    max_abs_error: float
    saturated: int


@dataclass(frozen=True)
class QuantReport:
    layers: tuple
    logit_max_abs_error: float
    agreement: float
    tiles: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("layer", "max_abs_error", "saturated"))
        for l in self.layers:
            w.writerow((l.name, f"{l.max_abs_error:.9g}", l.saturated))
        w.writerow(("logits", f"{self.logit_max_abs_error:.9g}", ""))
        w.writerow(("agreement", f"{self.agreement:.6f}", self.tiles))
        return buf.getvalue()


def forward_tiles_quantized(net, y, uv, model=None, acc_bits=ACC_BITS, batch=16):
    """Quantized tile logits alongside the float path, with divergence report.

    Without a prepared ``model`` the inputs themselves serve as calibration
    frames.
    """
    y = np.asarray(y, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    if model is None:
        model = quantize_network(net, (y, uv), batch)
    folded = {s.name: fold_batchnorm(net, s) for _, st in _sections(net.spec) for s in st}
    errs, sats = {}, {}
    agree = tiles = 0
    logit_err = 0.0
    outs = []
    for i in range(0, len(y), batch):
        yb, uvb = y[i : i + batch], uv[i : i + batch]
        ref_trace, q_trace = {}, {}
        folded_forward(net, yb, uvb, folded, ref_trace)
        ref = net.forward(yb, uvb, training=False)
        q = dequantize(run_quantized(model, yb, uvb, acc_bits, q_trace))
        for name, (v, sat) in q_trace.items():
            errs[name] = max(errs.get(name, 0.0), float(np.abs(v - ref_trace[name]).max()))
            sats[name] = sats.get(name, 0) + sat
        logit_err = max(logit_err, float(np.abs(q - ref).max()))
        agree += int(np.count_nonzero(q.argmax(axis=1) == ref.argmax(axis=1)))
        tiles += ref.shape[0] * ref.shape[2] * ref.shape[3]
        outs.append(q)
    layers = tuple(LayerError(n, errs[n], sats[n]) for n in model.layers)
    return np.concatenate(outs), QuantReport(layers, logit_err, agree / tiles, tiles)


# -- file format --------------------------------------------------------------
# MAGIC | u16 version | u16 layer count | u32 spec length | spec text |
# i8 y exponent | i8 uv exponent | per layer: i8 weight exponent, i8 output
# exponent, u32 weight count, int16 weights, u32 bias count, int32 biases.
# Everything little-endian.


def dumps_model(model):
    spec = N.dumps(model.spec).encode()
    parts = [MAGIC, struct.pack("<HHI", VERSION, len(model.layers), len(spec)), spec,
             struct.pack("<bb", *model.input_exps)]
    for layer in model.layers.values():
        w = layer.weight.astype("<i2").tobytes()
        b = layer.bias.astype("<i4").tobytes()
        parts += [struct.pack("<bbI", layer.weight_exp, layer.out_exp, layer.weight.size), w,
                  struct.pack("<I", layer.bias.size), b]
    return b"".join(parts)


def loads_model(data):
    if data[:4] != MAGIC:
        raise QuantizationError("not a quantized model file (bad magic)")
    version, n_layers, spec_len = struct.unpack_from("<HHI", data, 4)
    if version != VERSION:
        raise QuantizationError(f"unsupported quantized model version {version}")
    pos = 12
    spec = N.validate(N.loads(data[pos : pos + spec_len].decode()))
    pos += spec_len
    in_exps = struct.unpack_from("<bb", data, pos)
    pos += 2
    model = QuantizedModel(spec, tuple(in_exps))
    conv_layers = [s for _, st in _sections(spec) for s in st]
    if len(conv_layers) != n_layers:
        raise QuantizationError(f"file lists {n_layers} layers, spec has {len(conv_layers)} convs")
    for s in conv_layers:
        we, oe, nw = struct.unpack_from("<bbI", data, pos)
        pos += 6
        w = np.frombuffer(data, "<i2", nw, pos).astype(np.int16)
        pos += 2 * nw
        (nb,) = struct.unpack_from("<I", data, pos)
        pos += 4
        b = np.frombuffer(data, "<i4", nb, pos).astype(np.int32)
        pos += 4 * nb
        cg = nw // (s.conv.out_channels * s.conv.kernel * s.conv.kernel)
        model.layers[s.name] = QuantLayer(
            s.name, w.reshape(s.conv.out_channels, cg, s.conv.kernel, s.conv.kernel), we, b, oe
        )
    if pos != len(data):
        raise QuantizationError(f"{len(data) - pos} trailing bytes in quantized model file")
    return model


def save_model(model, path):
    with open(path, "wb") as f:
        f.write(dumps_model(model))


def load_model(path):
    with open(path, "rb") as f:
        return loads_model(f.read())
