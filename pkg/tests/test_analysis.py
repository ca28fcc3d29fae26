import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from atxf import analysis as A
from atxf import tensor as T
from atxf.errors import ContractError, GeometryError
from atxf.vit import LayerOverride, ViTConfig, init_params, vit_forward

LN2 = np.log(2.0)


def _maps(rng, shape, temp=1.0):
    return T.softmax_array(temp * rng.standard_normal(shape))


# ----------------------------------------------------------------------
# CKA
# ----------------------------------------------------------------------
def _cka_hsic_oracle(x, y):
    # kernel form with an explicit centering matrix
    n = len(x)
    Hc = np.eye(n) - np.ones((n, n)) / n
    K, L = Hc @ x @ x.T @ Hc, Hc @ y @ y.T @ Hc
    return np.sum(K * L) / np.sqrt(np.sum(K * K) * np.sum(L * L))


def test_cka_matches_kernel_form(rng):
    x, y = rng.standard_normal((40, 5)), rng.standard_normal((40, 7))
    assert A.linear_cka(x, y) == pytest.approx(_cka_hsic_oracle(x, y), abs=1e-12)
    # wide branch
    x, y = rng.standard_normal((6, 20)), rng.standard_normal((6, 30))
    assert A.linear_cka(x, y) == pytest.approx(_cka_hsic_oracle(x, y), abs=1e-12)


def test_cka_self_and_invariance(rng):
    x = rng.standard_normal((64, 12))
    assert abs(A.linear_cka(x, x) - 1) <= 1e-9
    R = ortho_group.rvs(12, random_state=3)
    assert abs(A.linear_cka(x, -2.5 * x @ R) - 1) <= 1e-9
    y = rng.standard_normal((64, 8))
    base = A.linear_cka(x, y)
    assert abs(A.linear_cka(x @ R * 7.0, y) - base) <= 1e-9


def test_cka_symmetric_and_bounded(rng):
    for _ in range(20):
        x, y = rng.standard_normal((30, 4)), rng.standard_normal((30, 9))
        c = A.linear_cka(x, y)
        assert 0 <= c <= 1
        assert abs(c - A.linear_cka(y, x)) < 1e-12


def test_cka_independent_gaussians_low():
    for seed in range(10):
        r = np.random.default_rng(seed)
        assert A.linear_cka(r.standard_normal((256, 32)), r.standard_normal((256, 32))) < 0.2


def test_debiased_cka_near_zero_for_independent(rng):
    x, y = rng.standard_normal((256, 32)), rng.standard_normal((256, 32))
    assert abs(A.linear_cka(x, y, debiased=True)) < A.linear_cka(x, y)
    assert A.linear_cka(x, x, debiased=True) == pytest.approx(1.0, abs=1e-12)


def test_cka_errors(rng):
    with pytest.raises(ContractError, match="zero-variance"):
        A.linear_cka(np.ones((5, 3)), rng.standard_normal((5, 3)))
    with pytest.raises(ContractError):
        A.linear_cka(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)))
    with pytest.raises(ContractError):
        A.linear_cka(rng.standard_normal((4, 3)), rng.standard_normal((5, 3)))


def test_feature_stack_and_layer_cka(small_cfg, small_model, rng, tmp_path):
    x = rng.standard_normal((10, 3, 8, 8))
    cls = A.feature_stack(small_model, x, "cls", batch_size=4)
    mean = A.feature_stack(small_model, x, "mean")
    assert len(cls) == 2 and cls[0].shape == (10, 8)
    _, rec = vit_forward(x, small_model)
    np.testing.assert_array_equal(cls[1], rec.features[1].data[:, 0])
    np.testing.assert_allclose(mean[0], rec.features[0].data[:, 1:].mean(axis=1), atol=1e-15)
    scores = A.cka_by_layer(cls, cls)
    np.testing.assert_allclose(scores, 1.0, atol=1e-9)
    A.write_cka_csv(tmp_path / "cka.csv", scores, "self")
    rows = list(csv.DictReader(open(tmp_path / "cka.csv")))
    assert [r["layer"] for r in rows] == ["0", "1"]


# ----------------------------------------------------------------------
# JSD
# ----------------------------------------------------------------------
def test_jsd_extended_precision():
    from mpmath import log, mp, mpf
    mp.dps = 40
    p, q = [mpf("0.5"), mpf("0.5")], [mpf(1), mpf(0)]
    m = [(a + b) / 2 for a, b in zip(p, q)]
    kl = lambda a, b: sum(ai * log(ai / bi) for ai, bi in zip(a, b) if ai > 0)
    want = float(kl(p, m) / 2 + kl(q, m) / 2)
    assert abs(A.jsd([0.5, 0.5], [1.0, 0.0]) - want) < 1e-12


def test_jsd_extremes():
    assert A.jsd([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert A.jsd([1.0, 0.0, 0.0], [0.0, 0.5, 0.5]) == pytest.approx(LN2, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 9), st.floats(0.1, 10.0))
def test_jsd_symmetric_bounded(seed, n, temp):
    r = np.random.default_rng(seed)
    p, q = _maps(r, (3, n), temp), _maps(r, (3, n), temp)
    a, b = A.jsd(p, q), A.jsd(q, p)
    assert np.all(np.abs(a - b) <= 1e-12)
    assert np.all((a >= 0) & (a <= LN2))
    assert np.all(np.abs(A.jsd(p, p)) <= 1e-12)


def test_jsd_rejects_non_distribution():
    with pytest.raises(ContractError):
        A.jsd([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ContractError):
        A.jsd([1.5, -0.5], [0.5, 0.5])


def test_head_jsd_matrix_direct_definition(rng):
    a, b = _maps(rng, (2, 3, 4, 4)), _maps(rng, (2, 3, 4, 4))
    M = A.head_jsd_matrix(a, b)
    for i in range(3):
        for j in range(3):
            vals = [A.jsd(a[n, i, r], b[n, j, r]) for n in range(2) for r in range(4)]
            assert M[i, j] == pytest.approx(np.mean(vals), abs=1e-15)


# ----------------------------------------------------------------------
# head matching
# ----------------------------------------------------------------------
def test_brute_force_oracle_on_known_cost():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    perm, total = A.brute_force_assignment(cost)
    assert perm == (1, 0, 2) and total == 5.0


def test_bipartite_equals_exhaustive_search(rng):
    for _ in range(30):
        H = int(rng.integers(2, 6))
        maps_a, maps_b = _maps(rng, (2, 2, H, 4, 4)), _maps(rng, (2, 2, H, 4, 4))
        s = A.match_heads(maps_a, maps_b, 1, "bipartite")
        _, best = A.brute_force_assignment(A.head_jsd_matrix(maps_a[1], maps_b[1]))
        assert s.total == pytest.approx(best, abs=1e-12)
        assert sorted(j for _, j in s.pairs) == list(range(H))


def test_strategy_ordering_on_random_pairs(rng):
    for _ in range(100):
        a, b = _maps(rng, (2, 2, 4, 5, 5), 2.0), _maps(rng, (2, 2, 4, 5, 5), 2.0)
        for layer in range(2):
            d = A.match_heads(a, b, layer, "direct").total
            bp = A.match_heads(a, b, layer, "bipartite").total
            mn = A.match_heads(a, b, layer, "minimum").total
            assert bp <= d + 1e-15
            assert mn <= bp + 1e-15


def test_bipartite_recovers_permutation(rng):
    a = _maps(rng, (3, 1, 4, 6, 6), 3.0)
    perm = np.array([2, 0, 3, 1])
    b = a[:, :, perm]
    s = A.match_heads(a, b, 0, "bipartite")
    # head i of A lives at position argsort(perm)[i] in B
    assert [j for _, j in s.pairs] == list(np.argsort(perm))
    assert s.total < 1e-9


def test_averaged_and_minimum(rng):
    a, b = _maps(rng, (1, 2, 3, 4, 4)), _maps(rng, (1, 2, 3, 4, 4))
    s = A.match_heads(a, b, 0, "averaged")
    assert s.pairs == [(-1, -1)]
    assert s.total == pytest.approx(np.mean(A.jsd(a[0].mean(axis=1), b[0].mean(axis=1))))
    m = A.match_heads(a, b, 0, "minimum")
    cost = A.head_jsd_matrix(a[0], b[0])
    assert [j for _, j in m.pairs] == list(np.argmin(cost, axis=1))


def test_match_errors(rng):
    with pytest.raises(GeometryError):
        A.match_heads(_maps(rng, (1, 1, 2, 3, 3)), _maps(rng, (1, 1, 3, 3, 3)), 0, "direct")
    with pytest.raises(ContractError):
        A.match_heads(_maps(rng, (1, 1, 2, 3, 3)), _maps(rng, (1, 1, 2, 3, 3)), 0, "greedy")


def test_report_csv_and_records(small_model, small_cfg, rng, tmp_path):
    x = rng.standard_normal((3, 3, 8, 8))
    _, ra = vit_forward(x, small_model)
    _, rb = vit_forward(x, init_params(small_cfg, 99))
    rep = A.head_match_report(ra, rb, "bipartite")
    assert len(rep.layers) == 2 and rep.layer_means().shape == (2,)
    rep.write_csv(tmp_path / "jsd.csv")
    rows = list(csv.DictReader(open(tmp_path / "jsd.csv")))
    assert len(rows) == 4 and rows[0]["strategy"] == "bipartite"
    assert all(0 <= float(r["jsd"]) <= LN2 for r in rows)


# ----------------------------------------------------------------------
# ensembles and counting
# ----------------------------------------------------------------------
def test_self_ensemble_exact(rng):
    p = _maps(rng, (50, 4))
    y = rng.integers(0, 4, 50)
    assert A.ensemble_eval(p, p, y) == A.accuracy(p, y)


def test_ties_go_to_lowest_class():
    p = np.array([[0.4, 0.4, 0.2]])
    assert A.accuracy(p, [0]) == 1.0 and A.accuracy(p, [1]) == 0.0


def test_complementary_ensemble_by_enumeration():
    # 10 examples, label 0; A right on 0-5, B right on 4-9; confident when right
    n = 10
    y = np.zeros(n, dtype=int)
    right, wrong = np.array([0.9, 0.1]), np.array([0.4, 0.6])
    pa = np.array([right if i < 6 else wrong for i in range(n)])
    pb = np.array([right if i >= 4 else wrong for i in range(n)])
    assert A.accuracy(pa, y) == A.accuracy(pb, y) == 0.6
    expected = np.mean([np.argmax(pa[i] + pb[i]) == 0 for i in range(n)])
    assert expected == 1.0
    assert A.ensemble_eval(pa, pb, y) == expected


def test_activation_counts():
    big = ViTConfig(image_size=224, patch_size=16, depth=24, heads=16, dim=1024, num_classes=1000)
    assert A.count_transferred_activations(big, "qk_sizes") == 24 * 16 * 197 * 64 * 2 == 9_682_944
    assert A.count_transferred_activations(big, "map_size") == 24 * 16 * 197 * 197
    kw = dict(depth=1, heads=1, tokens=2, head_dim=1)
    assert A.count_transferred_activations(accounting="qk_sizes", **kw) == 4
    assert A.count_transferred_activations(accounting="map_size", **kw) == 4
    assert isinstance(A.count_transferred_activations(big), int)


# ----------------------------------------------------------------------
# overlays
# ----------------------------------------------------------------------
def _identity_record(cfg, x, params):
    N = cfg.num_tokens
    eye = np.broadcast_to(np.eye(N), (1, cfg.heads, N, N)).copy()
    return vit_forward(x, params, [LayerOverride(map=eye) for _ in range(cfg.depth)])[1]


def test_identity_attention_gives_zero_patch_grid(small_cfg, small_model, rng):
    rec = _identity_record(small_cfg, rng.standard_normal((1, 3, 8, 8)), small_model)
    assert rec.maps[0][0, :, 0, 0].tolist() == [1.0, 1.0]
    np.testing.assert_array_equal(A.cls_attention_grid(rec, 0, 0, small_cfg.grid), 0.0)


def test_uniform_attention_flat_gray(small_cfg, small_model, rng, tmp_path):
    N = small_cfg.num_tokens
    uni = np.full((1, small_cfg.heads, N, N), 1.0 / N)
    x = rng.standard_normal((1, 3, 8, 8))
    _, rec = vit_forward(x, small_model, [LayerOverride(map=uni)] * small_cfg.depth)
    paths = A.export_cls_attention(rec, x[0], [0], tmp_path, small_cfg)
    px = A.read_pnm(paths[0])
    assert px.shape == (8, 8) and np.all(px == px[0, 0])


def test_exported_pixels_match_recomputation(rng, tmp_path):
    cfg = ViTConfig(image_size=16, patch_size=4, depth=2, heads=3, dim=12)
    params = init_params(cfg, 1)
    N = cfg.num_tokens
    maps = [_maps(rng, (1, 3, N, N), 3.0) for _ in range(2)]
    x = rng.standard_normal((1, 3, 16, 16))
    _, rec = vit_forward(x, params, [LayerOverride(map=m) for m in maps])
    paths = A.export_cls_attention(rec, x[0], [1], tmp_path, cfg, prefix="t")
    assert [p.name for p in paths] == ["t_layer1.pgm", "t_layer1_overlay.ppm"]
    row = maps[1][0, :, 0, 1:].mean(axis=0).reshape(4, 4)
    norm = (row - row.min()) / (row.max() - row.min())
    expect = np.kron(255.0 * (1.0 - norm), np.ones((4, 4)))
    got = A.read_pnm(paths[0]).astype(float)
    assert np.max(np.abs(got - expect)) <= 0.5 + 1e-9
    assert int(got.min()) == 0 and int(got.max()) == 255
    assert A.read_pnm(paths[1]).shape == (16, 16, 3)
    assert paths[0].read_bytes()[:2] == b"P5" and paths[1].read_bytes()[:2] == b"P6"


def test_export_requires_cls(rng, tmp_path):
    cfg = ViTConfig(image_size=8, patch_size=4, depth=1, heads=1, dim=4, use_cls_token=False)
    _, rec = vit_forward(rng.standard_normal((1, 3, 8, 8)), init_params(cfg, 0))
    with pytest.raises(ContractError):
        A.export_cls_attention(rec, np.zeros((3, 8, 8)), [0], tmp_path, cfg)
