import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from soildnet import analyzer as A
from soildnet import netspec as N
from soildnet import tensor as T
from soildnet.errors import DivisibilityError, ShapeError, SpecError, StrideArithmeticError


def tiny_spec(name="tiny", trunk_groups=2, reorder=True, k=3):
    """Small 3x3 network: downsamples by 64 with only a handful of channels."""
    trunk = [N.conv(4, stride=4, groups=trunk_groups, kernel=k), N.LayerSpec(N.BATCHNORM), N.LayerSpec(N.RELU)]
    if reorder:
        trunk.append(N.LayerSpec(N.REORDER, groups=trunk_groups))
    trunk += [N.conv(4, stride=8, kernel=k), N.LayerSpec(N.BATCHNORM), N.LayerSpec(N.RELU)]
    return N.validate(N.NetworkSpec(
        name=name,
        y_stem=[N.conv(2, stride=2, kernel=k), N.LayerSpec(N.BATCHNORM), N.LayerSpec(N.RELU)],
        uv_stem=[N.conv(2, stride=1, kernel=k), N.LayerSpec(N.BATCHNORM), N.LayerSpec(N.RELU)],
        trunk=trunk,
        head=N.conv(3, kernel=1),
    ))


def inputs(rng, b, h, w):
    return rng.uniform(size=(b, 1, h, w)), rng.uniform(size=(b, 2, h // 2, w // 2))


# -- validation ------------------------------------------------------------------


def test_reference_specs_validate_and_lint_clean():
    for scale in ("full", "desk"):
        for name in N.REFERENCE_NAMES:
            spec = N.reference_spec(name, scale)
            N.validate(spec)
            assert not N.lint_embedded(spec), (name, scale)


def test_stride_product_32_rejected():
    spec = N.reference_spec("net1")
    trunk = list(spec.trunk)
    trunk[0] = N.conv(trunk[0].out_channels, stride=1)
    with pytest.raises(StrideArithmeticError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))


def test_stem_strides_must_match():
    spec = N.reference_spec("net1")
    with pytest.raises(StrideArithmeticError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, N.conv_block(32, stride=2), spec.trunk, spec.head))


def test_head_must_emit_three_channels():
    spec = N.reference_spec("net1")
    with pytest.raises(SpecError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, spec.trunk, N.conv(4)))


def test_groups_must_divide_input_channels():
    spec = N.reference_spec("net1")
    trunk = list(spec.trunk)
    trunk[0] = N.conv(60, stride=2, groups=5)  # 64 input channels
    with pytest.raises(DivisibilityError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))
    with pytest.raises(DivisibilityError):
        N.build_network(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))


def test_groups_must_divide_out_channels():
    spec = N.reference_spec("net1")
    trunk = list(spec.trunk)
    trunk[0] = N.conv(66, stride=2, groups=4)
    with pytest.raises(DivisibilityError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))


def test_reorder_groups_must_divide_channels():
    spec = tiny_spec()
    trunk = list(spec.trunk)
    trunk[3] = N.LayerSpec(N.REORDER, groups=3)
    with pytest.raises(DivisibilityError):
        N.validate(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))


def test_unknown_reference_name():
    with pytest.raises(SpecError):
        N.reference_spec("net5")


def test_unknown_layer_kind_and_fields():
    with pytest.raises(SpecError):
        N.LayerSpec.from_dict({"kind": "Dense"})
    with pytest.raises(SpecError):
        N.LayerSpec.from_dict({"kind": "ReLU", "groups": 2})


# -- serialisation -------------------------------------------------------------


@pytest.mark.parametrize("name", N.REFERENCE_NAMES)
def test_round_trip_is_byte_identical(name):
    text = N.dumps(N.reference_spec(name))
    assert N.dumps(N.loads(text)) == text
    assert text.endswith("\n") and "\r" not in text and ": " not in text


@given(st.lists(st.sampled_from([1, 2, 4]), min_size=1, max_size=4), st.booleans(), st.sampled_from([1, 3, 5]))
def test_round_trip_random_specs(groups, reorder, k):
    strides = [2] * len(groups)
    strides[-1] = 32 // 2 ** (len(groups) - 1)
    trunk = []
    for g, s in zip(groups, strides):
        trunk += N.conv_block(8, stride=s, groups=g, reorder=reorder, kernel=k)
    spec = N.NetworkSpec("r", N.conv_block(4, 2, kernel=k), N.conv_block(4, 1, kernel=k), trunk, N.conv(3, kernel=k))
    N.validate(spec)
    text = N.dumps(spec)
    assert N.loads(text) == spec
    assert N.dumps(N.loads(text)) == text


def test_padding_field_only_serialised_when_set():
    assert "padding" not in N.conv(4).to_dict()
    layer = N.LayerSpec.from_dict({"kind": "Conv", "out_channels": 4, "stride": 1, "padding": 0})
    assert layer.pad == 0 and layer.to_dict()["padding"] == 0


def test_invalid_json():
    with pytest.raises(SpecError):
        N.loads("{not json")


# -- reference family ---------------------------------------------------------------


def test_references_differ_only_in_groups_and_reorders():
    specs = {n: N.reference_spec(n) for n in N.REFERENCE_NAMES}
    convs = {n: [l for l in s.trunk if l.kind == N.CONV] for n, s in specs.items()}
    for n in N.REFERENCE_NAMES:
        assert specs[n].y_stem == specs["net1"].y_stem and specs[n].uv_stem == specs["net1"].uv_stem
        assert specs[n].head == specs["net1"].head
        assert [c.out_channels for c in convs[n]] == [c.out_channels for c in convs["net1"]]
    assert all(c.groups == 1 for c in convs["net1"])
    assert all(c.groups == N.STATIC_GROUPS for c in convs["net2"])
    assert specs["net3"].without_reorder().trunk == specs["net2"].trunk
    assert specs["soildnet"].without_reorder().trunk == specs["net4"].trunk
    assert not any(l.kind == N.REORDER for n in ("net1", "net2", "net4") for l in specs[n].trunk)


@pytest.mark.parametrize("name", ["net3", "soildnet"])
def test_reorder_follows_each_grouped_relu(name):
    trunk = N.reference_spec(name).trunk
    kinds = [l.kind for l in trunk]
    for i, l in enumerate(trunk):
        if l.kind == N.CONV and l.groups > 1:
            assert kinds[i + 1 : i + 4] == [N.BATCHNORM, N.RELU, N.REORDER]
            assert trunk[i + 3].groups == l.groups


@pytest.mark.parametrize("name", ["net4", "soildnet"])
def test_dynamic_schedule_alternates(name):
    groups = [l.groups for l in N.reference_spec(name).trunk if l.kind == N.CONV and l.groups > 1]
    low = min(groups)
    assert any(g > low for g in groups)
    for a, b in zip(groups, groups[1:]):
        assert not (a > low and b > low)


def test_reference_parameter_relations():
    p = {n: A.count_params(N.reference_spec(n)) for n in N.REFERENCE_NAMES}
    assert p["net2"] == p["net3"]
    assert p["net4"] == p["soildnet"]
    assert p["net4"] < p["net2"] < p["net1"]


def test_desk_variants_keep_schedule():
    for name in N.REFERENCE_NAMES:
        full, desk = N.reference_spec(name), N.reference_spec(name, "desk")
        assert desk.name == name + "-desk"
        for a, b in zip(full.trunk, desk.trunk):
            assert (a.kind, a.groups, a.stride, a.kernel) == (b.kind, b.groups, b.stride, b.kernel)
            if a.kind == N.CONV:
                assert b.out_channels * 4 == a.out_channels
        assert len(full.trunk) == len(desk.trunk)


def test_resolve_spec_names_and_files(tmp_path):
    assert N.resolve_spec("net2-desk") == N.reference_spec("net2", "desk")
    path = tmp_path / "s.json"
    path.write_text(N.dumps(tiny_spec()))
    assert N.resolve_spec(str(path)) == tiny_spec()


# -- lint ----------------------------------------------------------------------


def test_one_3x3_trunk_conv_is_one_violation():
    spec = N.reference_spec("soildnet")
    trunk = list(spec.trunk)
    i = next(i for i, l in enumerate(trunk) if l.kind == N.CONV)
    trunk[i] = N.conv(trunk[i].out_channels, stride=2, groups=trunk[i].groups, kernel=3)
    report = N.lint_embedded(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))
    assert len(report) == 1
    issue = next(iter(report))
    assert issue.rule == "kernel-5x5" and issue.layer == f"trunk.{i}"


def test_shrinking_padding_flagged():
    spec = N.reference_spec("net1")
    trunk = list(spec.trunk)
    trunk[0] = N.LayerSpec(N.CONV, out_channels=64, stride=2, padding=0)
    report = N.lint_embedded(N.NetworkSpec(spec.name, spec.y_stem, spec.uv_stem, trunk, spec.head))
    assert [i.rule for i in report] == ["stride-only-reduction"]


def test_pooling_document_rejected_with_error_severity():
    doc = N.reference_spec("net1").to_dict()
    doc["trunk"].insert(2, {"kind": "MaxPool", "size": 2})
    report, spec = N.lint_document(json.dumps(doc))
    assert spec is None
    assert [(i.rule, i.severity, i.layer) for i in report] == [("no-pooling", "error", "trunk.2")]


def test_residual_document_rejected():
    doc = N.reference_spec("net1").to_dict()
    doc["trunk"].append({"kind": "Add", "from": "trunk.0"})
    report, spec = N.lint_document(doc)
    assert spec is None and report.errors[0].rule == "no-residual"


def test_clean_document_parses():
    report, spec = N.lint_document(N.dumps(N.reference_spec("soildnet")))
    assert not report and spec == N.reference_spec("soildnet")


def test_bad_json_document():
    report, spec = N.lint_document("[1, 2")
    assert spec is None and report.errors


# -- shapes --------------------------------------------------------------------


def test_layer_shapes_full_resolution_ends_at_12x20():
    shapes = list(N.layer_shapes(N.reference_spec("soildnet"), N.FULL_HW))
    assert shapes[-1][3] == (3, 12, 20)
    name, layer, _, out = next(s for s in shapes if s[0] == "y_stem.0")
    assert out == (32, 384, 640)


@pytest.mark.slow
def test_forward_full_resolution_tiles():
    net = N.build_network(N.reference_spec("soildnet"))
    y, uv = inputs(np.random.default_rng(0), 1, *N.FULL_HW)
    out = N.forward_tiles(net, y, uv)
    assert out.shape == (1, 3, 12, 20)
    assert out.shape[2] * out.shape[3] == 240


def test_forward_desk_resolution_tiles(rng):
    net = N.build_network(N.reference_spec("soildnet", "desk"))
    y, uv = inputs(rng, 2, *N.DESK_HW)
    out = N.forward_tiles(net, y, uv)
    assert out.shape == (2, 3, 3, 5)
    np.testing.assert_allclose(T.softmax_channels(out).sum(axis=1), 1.0)


def test_forward_rejects_bad_shapes(rng):
    net = N.build_network(tiny_spec())
    y, uv = inputs(rng, 1, 64, 64)
    with pytest.raises(ShapeError):
        N.forward_tiles(net, rng.uniform(size=(1, 1, 64, 96)), rng.uniform(size=(1, 2, 32, 48)))
    with pytest.raises(ShapeError) as e:
        N.forward_tiles(net, y, uv[:, :, :16])
    assert e.value.dim == "uv"
    with pytest.raises(ValueError):
        N.forward_tiles(net, y, uv, mode="eval")


def test_build_is_deterministic():
    spec = N.reference_spec("soildnet")
    a, b = N.build_network(spec, 42), N.build_network(spec, 42)
    assert a.checksum() == b.checksum()
    assert N.build_network(spec, 43).checksum() != a.checksum()


def test_he_init_uses_grouped_fan_in():
    spec = N.reference_spec("soildnet")
    net = N.build_network(spec, 0)
    name = "trunk.0"
    k = net.params[f"{name}.kernel"]
    fan_in = k.shape[1] * k.shape[2] * k.shape[3]
    assert k.shape[1] == 64 // spec.trunk[0].groups
    assert k.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)


def test_receptive_field_locality():
    spec = tiny_spec()
    radius = N.receptive_radius(spec)
    # uv stem 1*2, trunk 1*2 + 1*8, 1x1 head adds nothing
    assert radius == 12
    net = N.build_network(spec, 3)
    rng = np.random.default_rng(7)
    y, uv = inputs(rng, 1, 256, 512)
    r0, c0 = 1, 3
    y2 = y.copy()
    y2[:, :, 64 * r0 : 64 * r0 + 64, 64 * c0 : 64 * c0 + 64] = rng.uniform(size=(64, 64))
    a, b = N.forward_tiles(net, y, uv), N.forward_tiles(net, y2, uv)
    changed = np.any(a != b, axis=(0, 1))
    assert changed[r0, c0]
    for r in range(a.shape[2]):
        for c in range(a.shape[3]):
            # the output at tile (r, c) is anchored at pixel (64r, 64c) and sees +-radius
            near_r = 64 * r + radius >= 64 * r0 and 64 * r - radius <= 64 * r0 + 63
            near_c = 64 * c + radius >= 64 * c0 and 64 * c - radius <= 64 * c0 + 63
            if not (near_r and near_c):
                assert not changed[r, c], (r, c)
    assert not changed.all()


def test_network_backward_matches_finite_differences():
    spec = tiny_spec()
    net = N.build_network(spec, 5)
    for k in net.params:
        if k.endswith("gamma") or k.endswith("beta") or k.endswith("bias"):
            net.params[k] = net.params[k] + np.random.default_rng(len(k)).normal(0, 0.3, net.params[k].shape)
    net.params["head.0.kernel"] *= 100
    rng = np.random.default_rng(11)
    y, uv = inputs(rng, 2, 64, 128)
    out = net.forward(y, uv, training=True, record=True)
    r = rng.normal(size=out.shape)
    grads = net.backward(r)
    assert set(grads) == set(net.params)
    loss = lambda: float((net.forward(y, uv, training=True) * r).sum())
    for key in ("y_stem.0.kernel", "uv_stem.1.gamma", "trunk.0.kernel", "trunk.1.beta", "trunk.4.kernel", "head.0.bias"):
        assert rel_error(grads[key], numeric_grad(loss, net.params[key], h=1e-5)) < 1e-4, key


def test_backward_without_record():
    net = N.build_network(tiny_spec())
    with pytest.raises(RuntimeError):
        net.backward(np.zeros((1, 3, 1, 1)))


def test_training_forward_updates_only_buffers(rng):
    net = N.build_network(tiny_spec())
    before = {k: v.copy() for k, v in net.params.items()}
    bufs = {k: v.copy() for k, v in net.buffers.items()}
    N.forward_tiles(net, *inputs(rng, 2, 64, 64), mode="training")
    assert all(np.array_equal(before[k], net.params[k]) for k in before)
    assert any(not np.array_equal(bufs[k], net.buffers[k]) for k in bufs)
    bufs = {k: v.copy() for k, v in net.buffers.items()}
    N.forward_tiles(net, *inputs(rng, 2, 64, 64))
    assert all(np.array_equal(bufs[k], net.buffers[k]) for k in bufs)
