"""Static cost accounting: parameters, multiply-accumulates and serialized size.

Batch-norm and ReLU cost zero MACs (batch-norm folds into the preceding
conv at inference).  Batch-norm contributes 2C trainable values (gamma,
beta) and 4C stored values (plus running mean and variance).
"""

import csv
import io
from dataclasses import dataclass, field

from .netspec import BATCHNORM, CONV, layer_shapes, validate

HEADER_BYTES = 64
BYTES_PER_VALUE = {"float32": 4, "fixed16": 2}
KIB = 1024
CSV_COLUMNS = ("network", "gmacs", "params_trainable", "params_total", "size_kb")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    macs: int
    params_trainable: int
    params_total: int


def layer_cost(name, layer, in_shape, out_shape):
    """Cost of one layer given its (C, H, W) input and output shapes."""
    if layer.kind == CONV:
        c_in = in_shape[0]
        per_out = (c_in // layer.groups) * layer.kernel * layer.kernel
        weights = layer.out_channels * per_out + (layer.out_channels if layer.bias else 0)
        macs = out_shape[1] * out_shape[2] * layer.out_channels * per_out
        return LayerCost(name, layer.kind, macs, weights, weights)
    if layer.kind == BATCHNORM:
        c = in_shape[0]
        return LayerCost(name, layer.kind, 0, 2 * c, 4 * c)
    return LayerCost(name, layer.kind, 0, 0, 0)


@dataclass(frozen=True)
class CostReport:
    """Per-layer and total cost of one network at one input resolution.

    Rows built from published figures have no layers, and the fields that
    were not published are ``None``.
    """

    network: str
    macs: int
    params_trainable: int
    params_total: int | None
    input_hw: tuple | None = None
    layers: tuple = field(default=(), repr=False)
    published_size_bytes: float | None = None

    @property
    def gmacs(self):
        return self.macs / 1e9

    def model_bytes(self, precision="float32"):
        if self.published_size_bytes is not None:
            if precision != "float32":
                return None
            return self.published_size_bytes
        return model_bytes_for(self.params_total, precision)

    def size_kb(self, precision="float32"):
        b = self.model_bytes(precision)
        return None if b is None else b / KIB

    @classmethod
    def published(cls, network, gmacs, params, size_kb):
        """A row carrying externally reported figures instead of a spec."""
        return cls(network, round(gmacs * 1e9), params, None, published_size_bytes=size_kb * KIB)


def model_bytes_for(params_total, precision="float32"):
    if precision not in BYTES_PER_VALUE:
        raise ValueError(f"precision must be one of {sorted(BYTES_PER_VALUE)}, got {precision!r}")
    return params_total * BYTES_PER_VALUE[precision] + HEADER_BYTES


def cost_report(spec, input_hw):
    validate(spec)
    layers = tuple(layer_cost(*row) for row in layer_shapes(spec, input_hw))
    return CostReport(
        network=spec.name,
        macs=sum(l.macs for l in layers),
        params_trainable=sum(l.params_trainable for l in layers),
        params_total=sum(l.params_total for l in layers),
        input_hw=tuple(input_hw),
        layers=layers,
    )


def count_params(spec):
    """(trainable, total); resolution-independent."""
    # parameter counts do not depend on spatial size, any tile-aligned size works
    r = cost_report(spec, (64, 64))
    return r.params_trainable, r.params_total


def count_macs(spec, input_hw):
    return cost_report(spec, input_hw).macs


def model_size(spec, precision="float32"):
    """Serialized size in bytes: every stored value plus the fixed header."""
    return model_bytes_for(count_params(spec)[1], precision)


# -- comparison ---------------------------------------------------------------


def _ratio(a, b):
    if a is None or b is None or b == 0:
        return None
    return a / b


@dataclass(frozen=True)
class ComparisonRow:
    report: CostReport
    params_ratio: float | None
    gmacs_ratio: float | None
    size_ratio: float | None


@dataclass(frozen=True)
class ComparisonTable:
    """Reports plus ratios of each row to the first (the baseline)."""

    rows: tuple
    precision: str = "float32"

    @property
    def baseline(self):
        return self.rows[0].report

    def row(self, network):
        for r in self.rows:
            if r.report.network == network:
                return r
        raise KeyError(network)

    def render(self):
        return render_table(self)

    def to_csv(self):
        return render_csv(self)


def compare_schemes(schemes, input_hw=None, precision="float32"):
    """Compare specs and/or ready-made :class:`CostReport` rows.

    Ratios are row / baseline, using trainable parameters.
    """
    schemes = list(schemes)
    if len(schemes) < 2:
        raise ValueError("compare_schemes needs at least two schemes")
    reports = []
    for s in schemes:
        if isinstance(s, CostReport):
            reports.append(s)
        else:
            if input_hw is None:
                raise ValueError("input_hw is required when comparing specs")
            reports.append(cost_report(s, input_hw))
    base = reports[0]
    rows = tuple(
        ComparisonRow(
            r,
            _ratio(r.params_trainable, base.params_trainable),
            _ratio(r.macs, base.macs),
            _ratio(r.model_bytes(precision), base.model_bytes(precision)),
        )
        for r in reports
    )
    return ComparisonTable(rows, precision)


def format_percent(ratio):
    """0.09724 -> '9.72%'."""
    return "n/a" if ratio is None else f"{100 * ratio:.2f}%"


def format_reduction(ratio):
    """Size ratio row/baseline as a factor: 478/3569 -> '7.5× smaller'."""
    if ratio is None:
        return "n/a"
    if ratio == 1:
        return "1.0× (same)"
    if ratio < 1:
        return f"{1 / ratio:.1f}× smaller"
    return f"{ratio:.1f}× larger"


def _fmt(v, spec):
    return "n/a" if v is None else format(v, spec)


def render_table(table):
    p = table.precision
    head = ("network", "gmacs", "params_trainable", "params_total", "size_kb", "params_vs_base", "size_vs_base")
    body = []
    for r in table.rows:
        rep = r.report
        body.append((
            rep.network,
            f"{rep.gmacs:.4f}",
            f"{rep.params_trainable:,}",
            _fmt(rep.params_total, ","),
            _fmt(rep.size_kb(p), ",.1f"),
            format_percent(r.params_ratio),
            format_reduction(r.size_ratio),
        ))
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def render_csv(table):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in table.rows:
        rep = r.report
        size = rep.size_kb(table.precision)
        w.writerow([
            rep.network,
            f"{rep.gmacs:.6f}",
            rep.params_trainable,
            "" if rep.params_total is None else rep.params_total,
            "" if size is None else f"{size:.3f}",
        ])
    return buf.getvalue()


# Published figures for the reference schemes: GMACS, trainable parameters, model size KB.
PUBLISHED_COSTS = (
    ("net1", 4.203, 900_849, 3_569),
    ("net2", 1.236, 228_401, 965),
    ("net3", 1.236, 228_401, 965),
    ("net4", 0.6672, 87_601, 478),
    ("soildnet", 0.6672, 87_601, 478),
)


def published_reports():
    return [CostReport.published(*row) for row in PUBLISHED_COSTS]
