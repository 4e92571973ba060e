"""Declarative network specs, the embedded-constraint linter, and the built network.

A network takes the Y plane and the interleaved UV planes of a YUV420 frame
through two stems, concatenates them along channels once both streams reach
the same resolution, and runs a single trunk down to one logit vector per
64x64 tile.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import DivisibilityError, ShapeError, SpecError, StrideArithmeticError

CONV, BATCHNORM, RELU, REORDER = "Conv", "BatchNorm", "ReLU", "ChannelReorder"
LAYER_KINDS = (CONV, BATCHNORM, RELU, REORDER)
POOLING_KINDS = {"pool", "maxpool", "avgpool", "averagepool", "globalpool", "globalaveragepool", "pooling"}
RESIDUAL_KINDS = {"add", "residual", "skip", "shortcut", "sum"}

TILE = 64
NUM_CLASSES = 3
Y_CHANNELS, UV_CHANNELS = 1, 2
FULL_HW = (768, 1280)
DESK_HW = (192, 320)
STATIC_GROUPS = 4
DYNAMIC_GROUPS = (16, 4, 16, 4, 16)
REFERENCE_NAMES = ("net1", "net2", "net3", "net4", "soildnet")

_FULL_WIDTHS = {"stem": 32, "trunk": (64, 64, 64, 64, 256)}
_WIDTH_DIVISOR = {"full": 1, "desk": 4}


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int | None = None
    kernel: int = 5
    stride: int = 1
    groups: int = 1
    bias: bool = True
    padding: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV:
            if self.out_channels is None or self.out_channels < 1:
                raise SpecError("Conv needs out_channels >= 1")
            if self.kernel < 1 or self.stride < 1:
                raise SpecError("Conv kernel and stride must be >= 1")
            if self.padding is not None and self.padding < 0:
                raise SpecError("Conv padding must be >= 0")
        if self.groups < 1:
            raise DivisibilityError(f"groups must be >= 1, got {self.groups}")

    @property
    def pad(self):
        return self.kernel // 2 if self.padding is None else self.padding

    def to_dict(self):
        if self.kind == CONV:
            d = dict(kind=CONV, out_channels=self.out_channels, kernel=self.kernel,
                     stride=self.stride, groups=self.groups, bias=self.bias)
            if self.padding is not None:
                d["padding"] = self.padding
            return d
        if self.kind == REORDER:
            return dict(kind=REORDER, groups=self.groups)
        return dict(kind=self.kind)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {kind!r}")
        allowed = {CONV: {"out_channels", "kernel", "stride", "groups", "bias", "padding"},
                   REORDER: {"groups"}}.get(kind, set())
        extra = set(d) - allowed
        if extra:
            raise SpecError(f"{kind} layer has unexpected fields {sorted(extra)}")
        return cls(kind=kind, **d)


def conv(out_channels, stride=1, groups=1, kernel=5, bias=True):
    return LayerSpec(CONV, out_channels=out_channels, kernel=kernel, stride=stride, groups=groups, bias=bias)


def conv_block(out_channels, stride=1, groups=1, reorder=False, kernel=5):
    """Conv -> BatchNorm -> ReLU, optionally followed by a channel reorder."""
    layers = [conv(out_channels, stride, groups, kernel), LayerSpec(BATCHNORM), LayerSpec(RELU)]
    if reorder and groups > 1:
        layers.append(LayerSpec(REORDER, groups=groups))
    return layers


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    y_stem: tuple
    uv_stem: tuple
    trunk: tuple
    head: LayerSpec

    def __post_init__(self):
        for sec in ("y_stem", "uv_stem", "trunk"):
            object.__setattr__(self, sec, tuple(getattr(self, sec)))

    def sections(self):
        """(section name, layers) pairs in execution order."""
        return [("y_stem", self.y_stem), ("uv_stem", self.uv_stem), ("trunk", self.trunk), ("head", (self.head,))]

    def named_layers(self):
        for sec, layers in self.sections():
            for i, layer in enumerate(layers):
                yield f"{sec}.{i}", layer

    def to_dict(self):
        return dict(
            name=self.name,
            y_stem=[l.to_dict() for l in self.y_stem],
            uv_stem=[l.to_dict() for l in self.uv_stem],
            trunk=[l.to_dict() for l in self.trunk],
            head=self.head.to_dict(),
        )

    @classmethod
    def from_dict(cls, d):
        missing = {"name", "y_stem", "uv_stem", "trunk", "head"} - set(d)
        if missing:
            raise SpecError(f"spec missing fields {sorted(missing)}")
        return cls(
            name=str(d["name"]),
            y_stem=[LayerSpec.from_dict(l) for l in d["y_stem"]],
            uv_stem=[LayerSpec.from_dict(l) for l in d["uv_stem"]],
            trunk=[LayerSpec.from_dict(l) for l in d["trunk"]],
            head=LayerSpec.from_dict(d["head"]),
        )

    def without_reorder(self):
        keep = lambda ls: [l for l in ls if l.kind != REORDER]
        return replace(self, y_stem=keep(self.y_stem), uv_stem=keep(self.uv_stem), trunk=keep(self.trunk))


def dumps(spec):
    """Canonical text form: sorted keys, compact separators, trailing LF."""
    return json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecError(f"spec is not valid JSON: {e}") from e
    return NetworkSpec.from_dict(doc)


def load_spec(path):
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


# -- structural validation -------------------------------------------------


def _walk(layers, channels, where):
    """Propagate channel count and cumulative stride through a layer list."""
    stride = 1
    for i, layer in enumerate(layers):
        if layer.kind == CONV:
            if channels % layer.groups:
                raise DivisibilityError(f"{where}.{i}: input channels {channels} not divisible by groups {layer.groups}")
            if layer.out_channels % layer.groups:
                raise DivisibilityError(
                    f"{where}.{i}: out_channels {layer.out_channels} not divisible by groups {layer.groups}"
                )
            channels = layer.out_channels
            stride *= layer.stride
        elif layer.kind == REORDER:
            if channels % layer.groups:
                raise DivisibilityError(f"{where}.{i}: reorder groups {layer.groups} do not divide {channels} channels")
    return channels, stride


def validate(spec):
    """Check divisibility and stride arithmetic; returns ``spec`` unchanged."""
    cy, sy = _walk(spec.y_stem, Y_CHANNELS, "y_stem")
    cuv, suv = _walk(spec.uv_stem, UV_CHANNELS, "uv_stem")
    if sy != 2 * suv:
        raise StrideArithmeticError(f"y_stem stride {sy} must be twice uv_stem stride {suv}")
    if spec.head.kind != CONV:
        raise SpecError("head must be a Conv layer")
    c, st = _walk(spec.trunk, cy + cuv, "trunk")
    c, sh = _walk((spec.head,), c, "head")
    total = sy * st * sh
    if total != TILE:
        raise StrideArithmeticError(f"total downsampling is {total}, must be {TILE}")
    if c != NUM_CLASSES:
        raise SpecError(f"head produces {c} channels, must be {NUM_CLASSES}")
    return spec


def layer_shapes(spec, input_hw):
    """Yield (name, layer, in_shape, out_shape) with shapes as (C, H, W)."""
    h, w = input_hw
    if h % TILE or w % TILE:
        raise ShapeError(f"input {h}x{w} not divisible by tile size {TILE}", dim="height" if h % TILE else "width")
    out = []

    def run(sec, layers, shape):
        for i, layer in enumerate(layers):
            c, hh, ww = shape
            if layer.kind == CONV:
                ho, wo = T.conv_output_hw(hh, ww, (layer.kernel, layer.kernel), layer.stride, layer.pad)
                new = (layer.out_channels, ho, wo)
            else:
                new = shape
            out.append((f"{sec}.{i}", layer, shape, new))
            shape = new
        return shape

    ys = run("y_stem", spec.y_stem, (Y_CHANNELS, h, w))
    uvs = run("uv_stem", spec.uv_stem, (UV_CHANNELS, h // 2, w // 2))
    if ys[1:] != uvs[1:]:
        raise ShapeError(f"stems disagree at concat: {ys} vs {uvs}", dim="height")
    shape = run("trunk", spec.trunk, (ys[0] + uvs[0], ys[1], ys[2]))
    run("head", (spec.head,), shape)
    return out


def receptive_radius(spec):
    """Half-width, in Y pixels, of the input window that can influence one tile logit."""
    def walk(layers, jump, radius):
        for layer in layers:
            if layer.kind == CONV:
                radius += (layer.kernel // 2) * jump
                jump *= layer.stride
        return jump, radius

    jy, ry = walk(spec.y_stem, 1, 0)
    juv, ruv = walk(spec.uv_stem, 2, 0)
    r0 = max(ry, ruv)
    _, r = walk(list(spec.trunk) + [spec.head], jy, r0)
    return r


# -- embedded-constraint lint ---------------------------------------------


@dataclass(frozen=True)
class LintIssue:
    rule: str
    layer: str
    message: str
    severity: str = "error"


@dataclass
class LintReport:
    issues: list = field(default_factory=list)

    def __bool__(self):
        return bool(self.issues)

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)

    @property
    def errors(self):
        return [i for i in self.issues if i.severity == "error"]

    def format(self):
        return "\n".join(f"[{i.severity}] {i.rule} at {i.layer}: {i.message}" for i in self.issues)


def lint_embedded(spec):
    """Check a spec against the target CNN accelerator's rules.

    5x5 kernels only, no pooling, spatial reduction only through stride (so
    'same' padding everywhere), and no residual connections.  The last two
    cannot be expressed by ``LayerSpec``; :func:`lint_document` catches them
    in raw spec files.
    """
    report = LintReport()
    for name, layer in spec.named_layers():
        if layer.kind != CONV:
            continue
        if layer.kernel != 5:
            report.issues.append(LintIssue(
                "kernel-5x5", name, f"kernel {layer.kernel}x{layer.kernel}; the CNN core needs 5x5 for full utilization"))
        if layer.pad != layer.kernel // 2:
            report.issues.append(LintIssue(
                "stride-only-reduction", name,
                f"padding {layer.pad} shrinks the map beyond its stride; use padding {layer.kernel // 2}"))
    return report


def lint_document(doc):
    """Lint a raw spec document (text or parsed JSON) before it is parsed.

    Pooling and residual layers cannot be represented, so they surface here
    as error-severity issues instead of parse exceptions.  Returns
    ``(report, spec)`` where ``spec`` is ``None`` if parsing failed.
    """
    report = LintReport()
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            report.issues.append(LintIssue("parse", "-", f"invalid JSON: {e}"))
            return report, None
    if not isinstance(doc, dict):
        report.issues.append(LintIssue("parse", "-", "spec document must be an object"))
        return report, None

    for sec in ("y_stem", "uv_stem", "trunk", "head"):
        layers = doc.get(sec, [])
        if isinstance(layers, dict):
            layers = [layers]
        for i, layer in enumerate(layers):
            where = f"{sec}.{i}" if sec != "head" else "head.0"
            kind = str(layer.get("kind", "")).lower() if isinstance(layer, dict) else ""
            if kind in POOLING_KINDS or "pool" in kind:
                report.issues.append(LintIssue("no-pooling", where, f"pooling layer {layer.get('kind')!r}; downsample with stride"))
            elif kind in RESIDUAL_KINDS or (isinstance(layer, dict) and ({"skip", "residual", "shortcut"} & set(layer))):
                report.issues.append(LintIssue("no-residual", where, "residual/skip connection is not allowed"))
    if report:
        return report, None
    try:
        spec = validate(NetworkSpec.from_dict(doc))
    except (SpecError, DivisibilityError) as e:
        report.issues.append(LintIssue("parse", "-", str(e)))
        return report, None
    report.issues.extend(lint_embedded(spec).issues)
    return report, spec


# -- reference family -------------------------------------------------------


def reference_spec(name, scale="full"):
    """One of the five reference schemes, at full or desk scale.

    net1 is ungrouped; net2 uses four groups on every trunk conv and net3
    adds a channel reorder after each; net4 alternates 16 and 4 groups and
    soildnet adds the reorders to that schedule.  Desk scale keeps every
    group count and layer, with all widths divided by four.
    """
    if name not in REFERENCE_NAMES:
        raise SpecError(f"unknown reference spec {name!r}; choose from {', '.join(REFERENCE_NAMES)}")
    if scale not in _WIDTH_DIVISOR:
        raise SpecError(f"unknown scale {scale!r}")
    div = _WIDTH_DIVISOR[scale]
    stem = _FULL_WIDTHS["stem"] // div
    widths = [c // div for c in _FULL_WIDTHS["trunk"]]
    groups = {
        "net1": (1,) * 5,
        "net2": (STATIC_GROUPS,) * 5,
        "net3": (STATIC_GROUPS,) * 5,
        "net4": DYNAMIC_GROUPS,
        "soildnet": DYNAMIC_GROUPS,
    }[name]
    reorder = name in ("net3", "soildnet")
    trunk = []
    for c, g in zip(widths, groups):
        trunk += conv_block(c, stride=2, groups=g, reorder=reorder)
    suffix = "" if scale == "full" else "-desk"
    spec = NetworkSpec(
        name=name + suffix,
        y_stem=conv_block(stem, stride=2),
        uv_stem=conv_block(stem, stride=1),
        trunk=trunk,
        head=conv(NUM_CLASSES, stride=1),
    )
    return validate(spec)


def resolve_spec(name_or_path, scale="full"):
    """A reference name (``soildnet``, ``net2``...) or a path to a spec file."""
    base = name_or_path.removesuffix("-desk")
    if base in REFERENCE_NAMES:
        return reference_spec(base, "desk" if name_or_path.endswith("-desk") else scale)
    return validate(load_spec(name_or_path))


# -- built network ------------------------------------------------------------

HEAD_INIT_GAIN = 0.01


class Network:
    """Weights and batch-norm statistics bound to a spec.

    ``params`` holds trainable arrays and ``buffers`` the running statistics,
    both keyed ``"<section>.<index>.<field>"``.  Training-mode forward passes
    update ``buffers``; everything else treats the network as read-only.
    """

    def __init__(self, spec, params, buffers, dtype=np.float64):
        self.spec = spec
        self.params = params
        self.buffers = buffers
        self.dtype = np.dtype(dtype)
        self._layers = dict(spec.named_layers())
        self._tape = None

    def conv_weights(self, name):
        bias = self.params.get(f"{name}.bias")
        return T.ConvWeights(
            self.params[f"{name}.kernel"].astype(self.dtype, copy=False),
            None if bias is None else bias.astype(self.dtype, copy=False),
            self._layers[name].groups,
        )

    def bn_state(self, name):
        return T.BatchNormState(
            gamma=self.params[f"{name}.gamma"], beta=self.params[f"{name}.beta"],
            running_mean=self.buffers[f"{name}.running_mean"], running_var=self.buffers[f"{name}.running_var"],
        )

    def checksum(self):
        """SHA-256 over every parameter and buffer, stable across processes."""
        h = hashlib.sha256()
        for k in sorted(self.params) + sorted(self.buffers):
            arr = self.params.get(k, self.buffers.get(k))
            h.update(k.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def copy(self):
        return Network(self.spec, {k: v.copy() for k, v in self.params.items()},
                       {k: v.copy() for k, v in self.buffers.items()}, self.dtype)

    # forward / backward

    def _run(self, sec, layers, x, training, tape):
        i = 0
        while i < len(layers):
            layer = layers[i]
            name = f"{sec}.{i}"
            fused = layer.kind == BATCHNORM and i + 1 < len(layers) and layers[i + 1].kind == RELU
            if layer.kind == CONV:
                w = self.conv_weights(name)
                ho, wo = T.conv_output_hw(x.shape[2], x.shape[3], w.kernel_size, layer.stride, layer.pad)
                xph = T.phase_split(x, layer.pad, layer.stride)
                saved = (xph, x.shape)
                x = T.conv2d_forward_phased(xph, w, layer.stride, (ho, wo))
            elif layer.kind == BATCHNORM:
                bn = T.batchnorm_relu_forward if fused else T.batchnorm_forward
                x, state, saved = bn(x, self.bn_state(name), training)
                if training:
                    self.buffers[f"{name}.running_mean"] = state.running_mean
                    self.buffers[f"{name}.running_var"] = state.running_var
            elif layer.kind == RELU:
                saved = x > 0
                x = np.where(saved, x, 0).astype(x.dtype, copy=False)
            else:
                saved = None
                x = T.channel_reorder(x, layer.groups)
            if tape is not None:
                tape.append((name, layer, saved, fused))
            i += 2 if fused else 1
        return x

    def forward(self, y, uv, training=False, record=False):
        y, uv = self._check_inputs(y, uv)
        tapes = {sec: [] for sec, _ in self.spec.sections()} if record else {}
        fy = self._run("y_stem", self.spec.y_stem, y, training, tapes.get("y_stem"))
        fuv = self._run("uv_stem", self.spec.uv_stem, uv, training, tapes.get("uv_stem"))
        x = T.concat_channels(fy, fuv)
        x = self._run("trunk", self.spec.trunk, x, training, tapes.get("trunk"))
        logits = self._run("head", (self.spec.head,), x, training, tapes.get("head"))
        if record:
            self._tape = (tapes, fy.shape[1])
        return logits

    def backward(self, grad_logits):
        """Gradients of the recorded forward pass, keyed like ``params``."""
        if self._tape is None:
            raise RuntimeError("backward() needs a preceding forward(..., record=True)")
        tapes, split = self._tape
        self._tape = None
        grads = {}
        g = self._back(tapes["head"], np.asarray(grad_logits, dtype=self.dtype), grads)
        g = self._back(tapes["trunk"], g, grads)
        gy, guv = T.split_channels(g, split)
        self._back(tapes["y_stem"], np.ascontiguousarray(gy), grads, input_grad=False)
        self._back(tapes["uv_stem"], np.ascontiguousarray(guv), grads, input_grad=False)
        return grads

    def _back(self, tape, g, grads, input_grad=True):
        for idx in range(len(tape) - 1, -1, -1):
            name, layer, saved, fused = tape[idx]
            if layer.kind == CONV:
                xph, x_shape = saved
                w = self.conv_weights(name)
                need = input_grad or idx > 0
                g, gk, gb = T.conv2d_backward_phased(xph, x_shape, w, layer.stride, layer.pad, g, input_grad=need)
                grads[f"{name}.kernel"] = gk
                if gb is not None:
                    grads[f"{name}.bias"] = gb
            elif layer.kind == BATCHNORM:
                bn_back = T.batchnorm_relu_backward if fused else T.batchnorm_backward
                g, gg, gbeta = bn_back(g, saved)
                grads[f"{name}.gamma"] = gg
                grads[f"{name}.beta"] = gbeta
            elif layer.kind == RELU:
                g = np.where(saved, g, 0).astype(g.dtype, copy=False)
            else:
                g = T.channel_reorder_backward(g, layer.groups)
        return g

    def _check_inputs(self, y, uv):
        y = T.check_tensor4(y, "y")
        uv = T.check_tensor4(uv, "uv")
        b, cy, h, w = y.shape
        if cy != Y_CHANNELS:
            raise ShapeError(f"channels: y must have 1 channel, got {cy}", dim="channels")
        if h % TILE or w % TILE:
            raise ShapeError(f"input {h}x{w} not divisible by tile size {TILE}", dim="height" if h % TILE else "width")
        if uv.shape != (b, UV_CHANNELS, h // 2, w // 2):
            raise ShapeError(f"uv shape {uv.shape} != {(b, UV_CHANNELS, h // 2, w // 2)}", dim="uv")
        return y.astype(self.dtype, copy=False), uv.astype(self.dtype, copy=False)


def build_network(spec, rng_seed=42, dtype=np.float64):
    """Fresh network with He-normal conv weights drawn from a seeded generator.

    Fan-in counts only the input channels each output actually sees
    (in_channels / groups * k * k).  The head is drawn at 1% scale so an
    untrained network predicts near-uniform tile probabilities.
    """
    validate(spec)
    rng = np.random.default_rng(rng_seed)
    params, buffers = {}, {}
    channels = {"y_stem": Y_CHANNELS, "uv_stem": UV_CHANNELS}
    for sec, layers in spec.sections():
        c = channels.get(sec)
        if sec == "trunk":
            c = channels["y_out"] + channels["uv_out"]
        elif sec == "head":
            c = channels["trunk_out"]
        for i, layer in enumerate(layers):
            name = f"{sec}.{i}"
            if layer.kind == CONV:
                cg = c // layer.groups
                fan_in = cg * layer.kernel * layer.kernel
                std = math.sqrt(2.0 / fan_in) * (HEAD_INIT_GAIN if sec == "head" else 1.0)
                params[f"{name}.kernel"] = rng.normal(0.0, std, size=(layer.out_channels, cg, layer.kernel, layer.kernel))
                if layer.bias:
                    params[f"{name}.bias"] = np.zeros(layer.out_channels)
                c = layer.out_channels
            elif layer.kind == BATCHNORM:
                params[f"{name}.gamma"] = np.ones(c)
                params[f"{name}.beta"] = np.zeros(c)
                buffers[f"{name}.running_mean"] = np.zeros(c)
                buffers[f"{name}.running_var"] = np.ones(c)
        key = {"y_stem": "y_out", "uv_stem": "uv_out", "trunk": "trunk_out"}.get(sec)
        if key:
            channels[key] = c
    return Network(spec, params, buffers, dtype)


def forward_tiles(net, y, uv, mode="inference"):
    """Per-tile class logits, shape (batch, 3, H/64, W/64)."""
    if mode not in ("training", "inference"):
        raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
    return net.forward(y, uv, training=mode == "training")
