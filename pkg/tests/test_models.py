import numpy as np
import pytest

from gmattrib import models as M
from gmattrib.nn import BatchNorm2d, Conv2d, ShapeError
from gmattrib.preprocess import SpectrumStats


def test_primary_structure():
    g = M.build_primary("pixel", 128)
    convs = [l for l in g.layers if isinstance(l, Conv2d)]
    assert [c.out_ch for c in convs] == list(M.PRIMARY_WIDTHS)
    assert [c.stride for c in convs] == list(M.PRIMARY_STRIDES)
    bn_after = [isinstance(g.layers[g.layers.index(c) + 1], BatchNorm2d) for c in convs]
    assert bn_after == [False] + [True] * 7
    assert [c.use_bias for c in convs] == [True] + [False] * 7
    assert g.head == "gap_cam" and g.decision == "sigmoid"
    # branch after the fourth conv block
    assert sum(isinstance(l, Conv2d) for l in g.layers[:g.branch_layer]) == 4
    final = g.shapes()[-3]
    assert final == (M.PRIMARY_WIDTHS[-1], 8, 8)


def test_primary_parameter_budget_and_ordering():
    p = M.build_primary("pixel", 128).n_params()
    assert 1.2e5 <= p <= 1.8e5
    assert M.build_primary("pixel", 256).n_params() == p
    dct = M.build_baseline("gandct-conv", input_size=128).n_params()
    fp = M.build_baseline("ganfp-postpool", input_size=128).n_params()
    assert p < dct < fp < 9e6
    assert 2.5 <= fp / p <= 3.5


def test_dct_primary_head():
    g = M.build_primary("dct", 64)
    assert g.input_shape == (1, 64, 64) and g.head == "flatten_dense"
    assert g.forward(np.zeros((2, 1, 64, 64))).shape == (2, 1)


@pytest.mark.parametrize("kwargs", [{"representation": "wavelet"}, {"input_size": 100}])
def test_primary_rejects_bad_args(kwargs):
    with pytest.raises(ValueError):
        M.build_primary(**kwargs)


def test_gap_model_resolution_independent():
    g = M.build_primary("pixel", 64, seed=1)
    rng = np.random.default_rng(0)
    for s in (16, 64, 128, 256):
        out = g.forward(rng.normal(size=(1, 3, s, s)))
        assert out.shape == (1, 1) and np.isfinite(out).all()


def test_secondary_shapes_and_fresh_weights():
    p = M.build_primary("pixel", 128)
    s = M.build_secondary(p, "gm0")
    assert s.input_shape == (32, 32, 32) == M.branch_shape(p)
    assert s.forward(np.zeros((1, 32, 32, 32))).shape == (1, 1)
    tail = [l for l in p.layers[p.branch_layer:] if isinstance(l, Conv2d)]
    mine = [l for l in s.layers if isinstance(l, Conv2d)]
    assert [(l.in_ch, l.out_ch, l.stride) for l in mine] == [(l.in_ch, l.out_ch, l.stride) for l in tail]
    assert not any(np.array_equal(a.params["weight"], b.params["weight"]) for a, b in zip(mine, tail))
    s2 = M.build_secondary(p, "gm1", seed=7)
    assert s2.digest() != s.digest()
    assert [a.shape for a in s.state_dict().values()] == [a.shape for a in s2.state_dict().values()]


def test_secondary_on_64_input():
    p = M.build_primary("pixel", 64)
    assert M.branch_shape(p) == (32, 16, 16)


def test_bundle_shape_checks():
    p = M.build_primary("pixel", 64)
    other = M.build_secondary(M.build_primary("pixel", 128), "x")
    with pytest.raises(ShapeError):
        M.ModelBundle(p, {"x": other})
    b = M.ModelBundle(p, {"a": M.build_secondary(p, "a")})
    with pytest.raises(ValueError):
        b.add_secondary("a", M.build_secondary(p, "a"))


def test_feature_reuse_equivalence():
    p = M.build_primary("pixel", 64, dtype=np.float32)
    secs = {k: M.build_secondary(p, k, seed=i) for i, k in enumerate(("gm0", "gm1", "gm2"))}
    b = M.ModelBundle(p, secs)
    x = np.random.default_rng(0).normal(size=(5, 3, 64, 64)).astype(np.float32)
    primary, scores = b.probe_scores(x)
    from gmattrib.nn import sigmoid
    np.testing.assert_array_equal(primary, sigmoid(p.forward(x))[:, 0])
    for k, s in secs.items():
        feats = p.forward(x, stop=p.branch_layer)
        np.testing.assert_array_equal(scores[k], sigmoid(s.forward(feats))[:, 0])


def test_baselines():
    fp = M.build_baseline("ganfp-postpool", input_size=128)
    first_conv = next(i for i, l in enumerate(fp.layers) if isinstance(l, Conv2d))
    assert fp.shapes()[first_conv] == (3, 32, 32)
    assert [l.out_ch for l in fp.layers if isinstance(l, Conv2d)] == [32, 32, 64, 64, 128, 128]
    dc = M.build_baseline("gandct-conv", input_size=64)
    assert [l.out_ch for l in dc.layers if isinstance(l, Conv2d)] == [8, 16, 32, 64]
    sm = M.build_baseline("gandct-conv", "softmax", n_classes=5, input_size=64)
    assert sm.forward(np.zeros((2, 3, 64, 64))).shape == (2, 5)
    with pytest.raises(ValueError):
        M.build_baseline("resnet")
    with pytest.raises(ValueError):
        M.build_baseline("gandct-conv", "softmax", n_classes=1)


def _bundle():
    p = M.build_primary("dct", 64, seed=3, dtype=np.float32)
    secs = {k: M.build_secondary(p, k, seed=i) for i, k in enumerate(("gm0", "gm1", "gm2"))}
    rng = np.random.default_rng(1)
    stats = SpectrumStats(rng.normal(size=(64, 64)), rng.uniform(1, 2, size=(64, 64)), 10)
    return M.ModelBundle(p, secs, stats)


def test_bundle_round_trip_bitwise(tmp_path):
    b = _bundle()
    path = M.save_bundle(b, tmp_path / "m.gmb")
    assert path.read_bytes()[:8] == M.MAGIC
    back = M.load_bundle(path)
    assert list(back.secondaries) == ["gm0", "gm1", "gm2"]
    for name, g in [("primary", b.primary)] + list(b.secondaries.items()):
        g2 = back.primary if name == "primary" else back.secondaries[name]
        for k, v in g.state_dict().items():
            np.testing.assert_array_equal(v.astype(np.float32), g2.state_dict()[k])
        assert g2.branch_layer == g.branch_layer and g2.head == g.head
    np.testing.assert_array_equal(back.stats.mean.astype(np.float32), b.stats.mean.astype(np.float32))
    assert M.bundle_digest(back) == M.bundle_digest(b)
    assert M.save_bundle(back, tmp_path / "n.gmb").read_bytes() == path.read_bytes()


def test_bundle_load_errors(tmp_path):
    raw = M.bundle_bytes(_bundle())
    corrupt = bytearray(raw)
    corrupt[len(raw) // 2] ^= 0xFF
    with pytest.raises(M.BundleDigestError):
        M.parse_bundle(bytes(corrupt))
    with pytest.raises(M.BundleMagicError):
        M.parse_bundle(b"NOTABUND" + raw[8:])
    bad_version = bytearray(raw)
    bad_version[8] = 9
    with pytest.raises(M.BundleVersionError):
        M.parse_bundle(bytes(bad_version))
    with pytest.raises(M.BundleTruncatedError):
        M.parse_bundle(raw[:-100])
    with pytest.raises(M.BundleTruncatedError):
        M.parse_bundle(raw[:10])
    with pytest.raises(M.BundleError):
        M.load_bundle(tmp_path / "missing.gmb")
