import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from soildnet import analyzer as A
from soildnet import netspec as N


# -- brute-force oracle ----------------------------------------------------------


def weight_mask(out_c, in_c, k, groups):
    """Every weight element a grouped conv stores, as a boolean array."""
    mask = np.zeros((out_c, in_c, k, k), dtype=bool)
    og, cg = out_c // groups, in_c // groups
    for o in range(out_c):
        g = o // og
        mask[o, g * cg : (g + 1) * cg] = True
    return mask


def oracle(spec, hw):
    """(trainable, total, macs) by enumerating weights and looping over output positions."""
    trainable = total = macs = 0

    def run(layers, c, h, w):
        nonlocal trainable, total, macs
        for layer in layers:
            if layer.kind == N.CONV:
                stored = int(weight_mask(layer.out_channels, c, layer.kernel, layer.groups).sum())
                stored += layer.out_channels if layer.bias else 0
                trainable += stored
                total += stored
                ho = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                wo = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                inputs_per_output = c // layer.groups
                for _y in range(ho):
                    for _x in range(wo):
                        for _o in range(layer.out_channels):
                            macs += inputs_per_output * layer.kernel * layer.kernel
                c, h, w = layer.out_channels, ho, wo
            elif layer.kind == N.BATCHNORM:
                trainable += 2 * c
                total += 4 * c
        return c, h, w

    cy, h, w = run(spec.y_stem, 1, *hw)
    cuv, _, _ = run(spec.uv_stem, 2, hw[0] // 2, hw[1] // 2)
    c, h, w = run(spec.trunk, cy + cuv, h, w)
    run((spec.head,), c, h, w)
    return trainable, total, macs


@st.composite
def small_spec(draw):
    stem = draw(st.sampled_from([2, 4, 6]))
    n = draw(st.integers(1, 4))
    strides = [2] * n
    strides[-1] = 32 // 2 ** (n - 1)
    c_in = 2 * stem
    trunk = []
    for s in strides:
        out = draw(st.sampled_from([4, 8, 12]))
        divisors = [g for g in (1, 2, 4) if c_in % g == 0 and out % g == 0]
        g = draw(st.sampled_from(divisors))
        k = draw(st.sampled_from([1, 3, 5]))
        trunk += N.conv_block(out, stride=s, groups=g, reorder=draw(st.booleans()), kernel=k)
        c_in = out
    return N.validate(N.NetworkSpec(
        "rand",
        N.conv_block(stem, 2, kernel=draw(st.sampled_from([3, 5]))),
        N.conv_block(stem, 1, kernel=draw(st.sampled_from([3, 5]))),
        trunk,
        N.conv(3, kernel=draw(st.sampled_from([1, 5])), bias=draw(st.booleans())),
    ))


@given(small_spec(), st.sampled_from([(64, 64), (64, 128), (128, 64)]))
def test_counts_match_oracle(spec, hw):
    rep = A.cost_report(spec, hw)
    assert (rep.params_trainable, rep.params_total, rep.macs) == oracle(spec, hw)
    assert A.count_params(spec) == oracle(spec, hw)[:2]


def test_reference_desk_counts_match_oracle():
    for name in N.REFERENCE_NAMES:
        spec = N.reference_spec(name, "desk")
        rep = A.cost_report(spec, (64, 128))
        assert (rep.params_trainable, rep.params_total, rep.macs) == oracle(spec, (64, 128))


# -- examples ------------------------------------------------------------------


def test_single_conv_params():
    layer = N.conv(8, kernel=5)
    assert A.layer_cost("c", layer, (3, 64, 64), (8, 64, 64)).params_trainable == 608
    assert int(weight_mask(8, 3, 5, 1).sum()) + 8 == 608


def test_grouped_conv_params():
    c1 = A.layer_cost("c", N.conv(8, groups=1), (4, 8, 8), (8, 8, 8)).params_trainable
    c2 = A.layer_cost("c", N.conv(8, groups=2), (4, 8, 8), (8, 8, 8)).params_trainable
    assert c2 == 408
    assert c2 - 8 == (c1 - 8) // 2


def test_strided_conv_macs():
    layer = N.conv(8, stride=2, kernel=5)
    assert layer.pad == 2
    assert A.layer_cost("c", layer, (3, 64, 64), (8, 32, 32)).macs == 614_400


def test_doubling_groups_halves_macs():
    a = A.layer_cost("c", N.conv(16, groups=2), (16, 8, 8), (16, 8, 8)).macs
    b = A.layer_cost("c", N.conv(16, groups=4), (16, 8, 8), (16, 8, 8)).macs
    assert b * 2 == a


def test_batchnorm_relu_reorder_costs():
    bn = A.layer_cost("b", N.LayerSpec(N.BATCHNORM), (7, 4, 4), (7, 4, 4))
    assert (bn.macs, bn.params_trainable, bn.params_total) == (0, 14, 28)
    for layer in (N.LayerSpec(N.RELU), N.LayerSpec(N.REORDER, groups=7)):
        c = A.layer_cost("x", layer, (7, 4, 4), (7, 4, 4))
        assert (c.macs, c.params_trainable, c.params_total) == (0, 0, 0)


@pytest.mark.parametrize("a,b", [("net2", "net3"), ("net4", "soildnet")])
def test_reorder_pairs_cost_the_same(a, b):
    ra, rb = A.cost_report(N.reference_spec(a), N.FULL_HW), A.cost_report(N.reference_spec(b), N.FULL_HW)
    assert (ra.macs, ra.params_trainable, ra.params_total) == (rb.macs, rb.params_trainable, rb.params_total)


def test_reference_full_scale_values():
    # hand totals for the documented reference configs
    p = {n: A.count_params(N.reference_spec(n))[0] for n in N.REFERENCE_NAMES}
    assert p == {"net1": 842_531, "net2": 228_131, "net3": 228_131, "net4": 112_931, "soildnet": 112_931}
    assert A.count_macs(N.reference_spec("soildnet"), N.FULL_HW) == A.count_macs(N.reference_spec("net4"), N.FULL_HW)


def test_net1_over_soildnet_size_exceeds_seven():
    ratio = A.model_size(N.reference_spec("net1")) / A.model_size(N.reference_spec("soildnet"))
    assert ratio > 7


# -- invariants ------------------------------------------------------------------


@given(small_spec())
def test_reorder_insertion_changes_nothing(spec):
    bare = spec.without_reorder()
    a, b = A.cost_report(spec, (64, 64)), A.cost_report(bare, (64, 64))
    assert (a.macs, a.params_trainable, a.params_total) == (b.macs, b.params_trainable, b.params_total)
    costly = lambda r: [(l.macs, l.params_total) for l in r.layers if l.kind != N.REORDER]
    assert costly(a) == costly(b)


@given(st.sampled_from([4, 8, 16, 32]), st.sampled_from([1, 3, 5]))
def test_groups_monotone(c, k):
    costs = []
    for g in [g for g in range(1, c + 1) if c % g == 0]:
        lc = A.layer_cost("c", N.conv(c, groups=g, kernel=k), (c, 8, 8), (c, 8, 8))
        costs.append((lc.params_trainable, lc.macs))
    assert costs == sorted(costs, reverse=True)
    assert costs[-1] == min(costs)


@given(small_spec())
def test_concat_seam_no_double_counting(spec):
    hw = (64, 128)
    rep = A.cost_report(spec, hw)
    by_section = {}
    for l in rep.layers:
        sec = l.name.split(".")[0]
        by_section[sec] = by_section.get(sec, 0) + l.macs
    assert sum(by_section.values()) == rep.macs
    assert set(by_section) == {"y_stem", "uv_stem", "trunk", "head"}
    # each stem on its own is a plain single-input chain
    y_only = sum(A.layer_cost(*r).macs for r in N.layer_shapes(spec, hw) if r[0].startswith("y_stem"))
    assert by_section["y_stem"] == y_only


@given(st.integers(0, 10**7), st.integers(1, 1000))
def test_model_bytes_strictly_increasing(n, d):
    for p in A.BYTES_PER_VALUE:
        assert A.model_bytes_for(n + d, p) > A.model_bytes_for(n, p)


def test_header_only_and_fixed16_half():
    assert A.model_bytes_for(0) == A.HEADER_BYTES
    spec = N.reference_spec("soildnet")
    f32, f16 = A.model_size(spec, "float32"), A.model_size(spec, "fixed16")
    assert (f16 - A.HEADER_BYTES) * 2 == f32 - A.HEADER_BYTES
    with pytest.raises(ValueError):
        A.model_bytes_for(1, "int8")


def test_kib_is_1024():
    rep = A.cost_report(N.reference_spec("net1"), N.FULL_HW)
    assert rep.size_kb() == rep.model_bytes() / 1024


# -- comparison ----------------------------------------------------------------


def test_published_ratios_render():
    table = A.compare_schemes(A.published_reports())
    row = table.row("soildnet")
    assert row.params_ratio == pytest.approx(87_601 / 900_849)
    assert A.format_percent(row.params_ratio) == "9.72%"
    assert A.format_reduction(row.size_ratio) == "7.5× smaller"
    assert "9.72%" in table.render()


def test_self_comparison_all_ones():
    spec = N.reference_spec("soildnet")
    table = A.compare_schemes([spec, spec], N.FULL_HW)
    for r in table.rows:
        assert (r.params_ratio, r.gmacs_ratio, r.size_ratio) == (1.0, 1.0, 1.0)
    assert A.format_reduction(1.0) == "1.0× (same)"


def test_compare_needs_two():
    with pytest.raises(ValueError):
        A.compare_schemes([N.reference_spec("net1")], N.FULL_HW)


def test_csv_columns_and_values():
    specs = [N.reference_spec(n) for n in ("net1", "soildnet")]
    text = A.compare_schemes(specs, N.FULL_HW).to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(A.CSV_COLUMNS)
    name, gmacs, pt, ptot, kb = lines[2].split(",")
    rep = A.cost_report(specs[1], N.FULL_HW)
    assert name == "soildnet" and int(pt) == rep.params_trainable and int(ptot) == rep.params_total
    assert float(gmacs) == pytest.approx(rep.gmacs, abs=1e-6)
    assert float(kb) == pytest.approx(rep.size_kb(), abs=1e-3)


def test_published_rows_leave_unknown_columns_blank():
    text = A.compare_schemes(A.published_reports(), precision="fixed16").to_csv()
    assert text.splitlines()[1] == "net1,4.203000,900849,,"
