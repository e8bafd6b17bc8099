import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from latrot.dataio import EmbeddingSet
from latrot.exceptions import ConfigError, DataError, NumericalError
from latrot.pairing import PairSet, build_pair_set
from latrot.rotation import (
    LatentRotation, Projector, bce_loss_grad, build_projector, dominant_axis, fit_delta_classifier,
    fit_rotation, mean_protocol_offset, residual_directions, split,
)
from latrot.synth import SynthConfig, generate


def _bce(w, b, X, y, l2):
    s = X @ w + b
    return np.mean(np.logaddexp(0, s) - y * s) + 0.5 * l2 * w @ w


@pytest.mark.parametrize("point", range(20))
def test_bce_gradient_finite_differences(point):
    rng = np.random.default_rng(point)
    m = 6
    X, y = rng.standard_normal((32, m)), rng.integers(0, 2, 32).astype(float)
    w, b, l2 = rng.standard_normal(m), float(rng.standard_normal()), 0.3
    loss, gw, gb = bce_loss_grad(w, b, X, y, l2)
    assert loss == pytest.approx(_bce(w, b, X, y, l2), rel=1e-12)
    h = 1e-6
    num = np.array([(_bce(w + h * e, b, X, y, l2) - _bce(w - h * e, b, X, y, l2)) / (2 * h) for e in np.eye(m)])
    np.testing.assert_allclose(gw, num, rtol=1e-5, atol=1e-9)
    num_b = (_bce(w, b + h, X, y, l2) - _bce(w, b - h, X, y, l2)) / (2 * h)
    assert gb == pytest.approx(num_b, rel=1e-5, abs=1e-9)


def test_separable_toy():
    X = np.concatenate([np.ones(100), -np.ones(100)])[:, None]
    y = np.concatenate([np.ones(100), np.zeros(100)])
    clf = fit_delta_classifier(X, y, epochs=50, lr=1e-2, batch_size=16, val_fraction=0.0)
    assert clf.train_accuracy == 1.0


def test_random_labels_chance():
    rng = np.random.default_rng(0)
    X, y = rng.standard_normal((10_000, 5)), rng.integers(0, 2, 10_000)
    clf = fit_delta_classifier(X, y, epochs=5, batch_size=256)
    assert 0.40 <= clf.val_accuracy <= 0.60


def test_loss_history_monotone_and_deterministic(small_synth):
    emb, _ = small_synth
    pairs = build_pair_set(emb, 400, rank_lo=2, rank_hi=10, neighbors=11)
    a = fit_delta_classifier(pairs, epochs=40, batch_size=64, l2=0.1, seed=3)
    b = fit_delta_classifier(pairs, epochs=40, batch_size=64, l2=0.1, seed=3)
    h = np.array(a.loss_history)
    assert np.all(np.isfinite(h)) and len(h) == 40
    assert np.all(np.diff(h) <= 1e-3)
    assert np.array_equal(a.w, b.w) and a.b == b.b
    assert 0 <= a.val_accuracy <= 1 and 0 <= a.train_accuracy <= 1


def test_classifier_errors():
    X = np.ones((10, 2))
    with pytest.raises(DataError, match="single class"):
        fit_delta_classifier(X, np.ones(10))
    with pytest.raises(NumericalError, match=r"epoch \d+"), np.errstate(all="ignore"):
        fit_delta_classifier(np.full((10, 2), 1e308) * np.array([1, -1]), np.arange(10) % 2, lr=1e308, val_fraction=0)


def test_dominant_axis():
    w = np.array([3.0, 4.0, 0.0, 0.0])
    np.testing.assert_allclose(dominant_axis(w), [0.6, 0.8, 0, 0])
    np.testing.assert_allclose(dominant_axis(10 * w), dominant_axis(w), atol=1e-15)
    with pytest.raises(NumericalError):
        dominant_axis(np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(w=st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=8), c=st.floats(1e-3, 1e6))
def test_dominant_axis_scaling_property(w, c):
    w = np.array(w)
    if np.linalg.norm(w) < 1e-6:
        return
    v = dominant_axis(w)
    assert abs(np.linalg.norm(v) - 1) < 1e-12
    np.testing.assert_allclose(dominant_axis(c * w), v, atol=1e-12)


def test_residual_parallel_is_rank_zero():
    v = np.array([1.0, 0, 0])
    X = np.outer(np.linspace(1, 2, 10), v)
    with pytest.raises(NumericalError, match="rank 0"):
        residual_directions(X, v, 1, source="all")


def test_residual_single_forced_direction(rng):
    m = 5
    v = np.eye(m)[0]
    X = np.outer(rng.standard_normal(50), v) + np.outer(rng.standard_normal(50), np.eye(m)[1])
    V = residual_directions(X, v, 1, source="all")
    assert abs(abs(V[1, 0]) - 1) < 1e-10


def test_residual_matches_dense_eigendecomposition(rng):
    m = 12
    X = rng.standard_normal((5000, m)) * np.linspace(3, 0.5, m)
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    V = residual_directions(X, v, 8, source="all")
    R = X - np.outer(X @ v, v)
    evals, evecs = np.linalg.eigh(np.cov(R, rowvar=False))
    oracle = evecs[:, ::-1][:, :8]
    oracle *= np.sign(np.sum(oracle * V, axis=0))
    np.testing.assert_allclose(V, oracle, atol=1e-6)
    assert np.max(np.abs(V.T @ V - np.eye(8))) < 1e-8
    assert np.max(np.abs(v @ V)) < 1e-8


def test_residual_positive_source_uses_label_one(rng):
    X = rng.standard_normal((100, 4))
    y = np.r_[np.ones(50), np.zeros(50)]
    v = np.eye(4)[0]
    np.testing.assert_allclose(residual_directions(X, v, 2, labels=y), residual_directions(X[:50], v, 2, source="all"))
    with pytest.raises(ConfigError):
        residual_directions(X, v, 4, source="all")


def _offset_fixture(deltas):
    n = len(deltas)
    m = deltas.shape[1]
    # records 0..n-1 under p0, n..2n-1 under p1
    vectors = np.zeros((2 * n, m))
    emb = EmbeddingSet(np.arange(2 * n), vectors, [f"a{k}" for k in range(n)] * 2, ["p0"] * n + ["p1"] * n,
                       ["x"] * (2 * n))
    return emb


def test_mean_offset_constant_and_orientation():
    c = np.array([1.0, -2.0, 0.5])
    emb = _offset_fixture(np.zeros((2, 3)))
    pairs = PairSet(np.array([c, -c]), [1, 1], i=[0, 3], j=[2, 1])
    v, order = mean_protocol_offset(pairs, emb)
    np.testing.assert_allclose(v, c)
    assert order == ("p0", "p1")
    v2, _ = mean_protocol_offset(pairs, emb, ("p1", "p0"))
    np.testing.assert_allclose(v2, -c)


def test_mean_offset_oracle(rng):
    D = rng.standard_normal((1000, 6))
    emb = _offset_fixture(D)
    flip = rng.random(1000) < 0.5
    i = np.where(flip, np.arange(1000) + 1000, np.arange(1000))
    j = np.where(flip, np.arange(1000), np.arange(1000) + 1000)
    pairs = PairSet(np.where(flip[:, None], -D, D), np.ones(1000), i, j)
    v, _ = mean_protocol_offset(pairs, emb, ("p0", "p1"))
    np.testing.assert_allclose(v, D.mean(axis=0), atol=1e-12)


def test_mean_offset_errors():
    emb = _offset_fixture(np.zeros((2, 3)))
    pairs = PairSet(np.ones((1, 3)), [0], [0], [1])
    with pytest.raises(DataError, match="no positive pairs"):
        mean_protocol_offset(pairs, emb)
    with pytest.raises(DataError, match="absent"):
        mean_protocol_offset(PairSet(np.ones((1, 3)), [1], [0], [99]), emb)


def _assert_orthonormal(P):
    assert np.max(np.abs(P.T @ P - np.eye(P.shape[1]))) < 1e-10


def test_projector_orthonormal_inputs():
    E = np.eye(8)
    proj = build_projector(E[:, 0], E[:, 1:4], E[:, 4], 5)
    np.testing.assert_allclose(np.abs(proj.P), E[:, :5], atol=1e-12)
    assert proj.provenance["v_diff_included"] and proj.r == 5


def test_projector_dependent_offset_backfills():
    E = np.eye(8)
    proj = build_projector(E[:, 0], E[:, 1:3], E[:, 0], 4, backfill=E[:, 5:6])
    assert not proj.provenance["v_diff_included"] and proj.provenance["backfilled"] == 1
    np.testing.assert_allclose(np.abs(proj.P[:, 3]), E[:, 5])
    with pytest.raises(NumericalError, match="insufficient"):
        build_projector(E[:, 0], E[:, 1:3], E[:, 0], 4)


def test_projector_random_span(rng):
    m, r = 20, 10
    S = rng.standard_normal((m, r))
    proj = build_projector(S[:, 0], S[:, 1:9], S[:, 9], r)
    _assert_orthonormal(proj.P)
    assert np.max(subspace_angles(proj.P, S)) < 1e-8


def test_capacity_rule():
    rng = np.random.default_rng(0)
    m = 10
    E = np.eye(m)
    # technical rows span e0, e1, e2 strongly; offset sits almost on e0
    rows = rng.standard_normal((500, 3)) @ np.diag([3.0, 2.0, 1.0]) @ E[:3] + 0.01 * rng.standard_normal((500, m))
    offset = E[0] + 0.05 * E[5]
    keep = build_projector(E[:, 0], E[:, 1:2], offset, 3, backfill=E[:, 2:3])
    assert keep.provenance["v_diff_included"]
    fill = build_projector(E[:, 0], E[:, 1:2], offset, 3, backfill=E[:, 2:3], technical=rows)
    assert fill.provenance["backfilled"] == 1
    np.testing.assert_allclose(np.abs(fill.P[:, 2]), E[:, 2], atol=1e-12)
    # a backfill direction at the noise floor never displaces the offset
    weak = build_projector(E[:, 0], E[:, 1:2], offset, 3, backfill=E[:, 7:8], technical=rows)
    assert weak.provenance["v_diff_included"]


def test_projector_errors():
    E = np.eye(5)
    with pytest.raises(ConfigError):
        build_projector(E[:, 0], np.zeros((5, 0)), E[:, 1], 1)
    with pytest.raises(ConfigError):
        build_projector(E[:, 0], E[:, 1:4], E[:, 4], 5)
    with pytest.raises(ConfigError, match="r-2"):
        build_projector(E[:, 0], E[:, 1:2], E[:, 4], 4)


def test_projector_round_trip(tmp_path, rng):
    S = rng.standard_normal((9, 4))
    proj = build_projector(S[:, 0], S[:, 1:3], S[:, 3], 4)
    proj.save(tmp_path / "p.bin")
    back = Projector.load(tmp_path / "p.bin")
    assert back.P.tobytes() == proj.P.tobytes() and back.provenance == proj.provenance
    proj.to_csv(tmp_path / "p.csv")
    np.testing.assert_allclose(np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1), proj.P, rtol=1e-16)


@pytest.fixture(scope="module")
def projector():
    S = np.random.default_rng(1).standard_normal((16, 5))
    return build_projector(S[:, 0], S[:, 1:4], S[:, 4], 5)


def test_split_in_span_and_orthogonal(projector, rng):
    P = projector.P
    z = P @ rng.standard_normal(5)
    zt, zb = split(z, projector)
    assert np.linalg.norm(zb) < 1e-10 * np.linalg.norm(z)
    w = rng.standard_normal(16)
    w -= P @ (P.T @ w)
    zt, zb = split(w, projector)
    assert np.linalg.norm(zt) < 1e-10 * np.linalg.norm(w)


def test_split_decomposition_1000(projector, rng):
    Z = rng.standard_normal((1000, 16)) * 10 ** rng.uniform(-3, 3, (1000, 1))
    zt, zb = split(Z, projector)
    norms = np.linalg.norm(Z, axis=1)
    assert np.all(np.linalg.norm(Z - zt - zb, axis=1) <= 1e-12 * norms)
    assert np.all(np.abs(np.sum(zt * zb, axis=1)) <= 1e-10 * norms ** 2)
    zt2, _ = split(zb, projector)
    assert np.all(np.linalg.norm(zt2, axis=1) <= 1e-10 * norms)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e6))
def test_split_properties(projector, seed, scale):
    z = np.random.default_rng(seed).standard_normal(16) * scale
    zt, zb = split(z, projector)
    n = np.linalg.norm(z)
    assert np.linalg.norm(z - zt - zb) <= 1e-12 * n
    assert abs(zt @ zb) <= 1e-10 * n * n
    assert np.linalg.norm(split(zb, projector)[0]) <= 1e-10 * n


def test_split_dimension_mismatch(projector):
    with pytest.raises(DataError, match="dimension"):
        split(np.ones(3), projector)


@pytest.fixture(scope="module")
def tech_set():
    cfg = SynthConfig(m=64, n_anatomy=40, n_patients=20, d_bio=10, d_tech=5, noise_sigma=0.01, tech_strength=3.0, seed=1)
    emb, gt = generate(cfg)
    return emb, gt, build_pair_set(emb, 4000, seed=1)


def test_fit_rotation_recovers_technical_span(tech_set):
    emb, gt, pairs = tech_set
    proj = fit_rotation(emb, pairs, r=10, epochs=200, batch_size=128, seed=1)
    _assert_orthonormal(proj.P)
    assert np.degrees(np.max(subspace_angles(proj.P, gt.T_basis))) < 10
    assert 0.5 < proj.provenance["val_accuracy"] <= 1.0


def test_fit_rotation_deterministic_and_r1(tech_set):
    emb, _, pairs = tech_set
    a = fit_rotation(emb, pairs, r=4, epochs=20, batch_size=256, seed=2)
    b = fit_rotation(emb, pairs, r=4, epochs=20, batch_size=256, seed=2)
    assert a.P.tobytes() == b.P.tobytes()
    with pytest.raises(ConfigError, match="r=1"):
        fit_rotation(emb, pairs, r=1)


@pytest.mark.parametrize("seed", [1, 2])
def test_zero_noise_projector_inside_technical_span(seed):
    # ground-truth sized run: r = d_tech and enough pairs to pin the axis
    cfg = SynthConfig(m=64, n_anatomy=40, n_patients=50, d_bio=10, d_tech=5, noise_sigma=0.0, seed=seed)
    emb, gt = generate(cfg)
    pairs = build_pair_set(emb, 20000, seed=seed)
    proj = fit_rotation(emb, pairs, r=5, epochs=60, batch_size=128, seed=seed)
    assert np.degrees(np.max(subspace_angles(proj.P, gt.T_basis))) < 1.0


def test_estimator_api(tech_set):
    from sklearn.base import clone

    emb, gt, pairs = tech_set
    est = LatentRotation(r=6, epochs=30, batch_size=256)
    assert clone(est).get_params() == est.get_params()
    est.fit(pairs.deltas, pairs.labels)
    zb = est.transform(emb.vectors)
    zt = est.transform_technical(emb.vectors)
    np.testing.assert_allclose(zb + zt, emb.vectors, atol=1e-12)
    assert est.components_.shape == (6, 64)
    with pytest.raises(DataError):
        est.transform(np.ones((2, 3)))
