import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from latrot.dataio import EmbeddingSet
from latrot.exceptions import ConfigError, DataError
from latrot.metrics import (
    ari, contingency, coregistered_pairs, dice_matched, nmi, stability_reports, stability_sweep, subspace_classifier_eval,
    summarize, write_stability_csv,
)
from latrot.rotation import Projector
from latrot.synth import SynthConfig, generate


def ari_pairs(a, b):
    # Hubert-Arabie form from direct pair counting
    n11 = n10 = n01 = n00 = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        sa, sb = a[i] == a[j], b[i] == b[j]
        n11 += sa and sb
        n10 += sa and not sb
        n01 += sb and not sa
        n00 += not sa and not sb
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    return 1.0 if den == 0 else 2.0 * (n11 * n00 - n10 * n01) / den


def nmi_direct(a, b):
    n = len(a)
    la, lb = sorted(set(a)), sorted(set(b))
    pa = {x: sum(1 for v in a if v == x) / n for x in la}
    pb = {y: sum(1 for v in b if v == y) / n for y in lb}
    ha = -sum(p * np.log(p) for p in pa.values())
    hb = -sum(p * np.log(p) for p in pb.values())
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    mi = 0.0
    for x in la:
        for y in lb:
            pxy = sum(1 for u, v in zip(a, b) if u == x and v == y) / n
            if pxy > 0:
                mi += pxy * np.log(pxy / (pa[x] * pb[y]))
    return mi / ((ha + hb) / 2)


def dice_brute(a, b, k):
    a, b = np.asarray(a), np.asarray(b)
    used = max(len(set(a.tolist())), len(set(b.tolist())))
    best = 0.0
    for perm in itertools.permutations(range(k)):
        total = 0.0
        for c in range(k):
            A, B = a == c, b == perm[c]
            s = A.sum() + B.sum()
            total += 2 * np.sum(A & B) / s if s else 0.0
        best = max(best, total)
    return best / used


REF8 = np.array([0, 0, 1, 1, 1, 2, 2, 0])


def test_ari_exhaustive_8_points():
    for lab in itertools.product(range(3), repeat=8):
        lab = np.array(lab)
        assert abs(ari(REF8, lab) - ari_pairs(REF8, lab)) < 1e-12


def test_nmi_small_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 12))
        a, b = rng.integers(0, 3, n), rng.integers(0, 4, n)
        assert abs(nmi(a, b) - nmi_direct(a.tolist(), b.tolist())) < 1e-12


def test_against_sklearn(rng):
    for _ in range(20):
        a, b = rng.integers(0, 5, 300), rng.integers(0, 4, 300)
        assert ari(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)
        assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(a, b), abs=1e-12)


def test_identity_and_renaming():
    a = np.array([0, 0, 1, 2, 2, 1, 3])
    renamed = np.array([7, 9, 4, 5])[a]
    assert ari(a, a) == 1.0 and ari(a, renamed) == pytest.approx(1.0)
    assert nmi(a, a) == pytest.approx(1.0) and nmi(a, renamed) == pytest.approx(1.0)


def test_nmi_conventions():
    assert nmi([1, 1, 1], [2, 2, 2]) == 1.0
    assert nmi([1, 1, 1], [0, 1, 2]) == 0.0


def test_nmi_independent_large():
    rng = np.random.default_rng(1)
    assert nmi(rng.integers(0, 4, 100_000), rng.integers(0, 4, 100_000)) < 0.01


def test_length_mismatch():
    for f in (ari, nmi):
        with pytest.raises(DataError, match="length"):
            f([0, 1], [0, 1, 1])
    with pytest.raises(DataError, match="length"):
        dice_matched([0], [0, 1], 2)


def test_dice_examples():
    a = np.array([0, 0, 1, 1, 2])
    assert dice_matched(a, a, 3) == 1.0
    assert dice_matched(a, np.array([2, 2, 0, 0, 1]), 3) == 1.0
    # a single cluster against a split into two: best match covers half
    assert dice_matched([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx((2 * 2 / 6) / 2)


def test_dice_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(300):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(1, 11))
        a, b = rng.integers(0, k, n), rng.integers(0, k, n)
        assert dice_matched(a, b, k) == pytest.approx(dice_brute(a, b, k), abs=1e-12)


def test_dice_identity_matches_plain_dice():
    a = np.array([0, 1, 1, 2, 0, 2, 2])
    b = np.array([0, 1, 2, 2, 0, 2, 1])
    plain = np.mean([2 * np.sum((a == c) & (b == c)) / (np.sum(a == c) + np.sum(b == c)) for c in range(3)])
    assert dice_matched(a, b, 3) == pytest.approx(plain)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=40),
       st.permutations(range(5)))
def test_metric_properties(pairs, perm):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    pa = np.array(perm)[a]
    assert -1 - 1e-12 <= ari(a, b) <= 1 + 1e-12
    assert 0 <= nmi(a, b) <= 1
    assert 0 <= dice_matched(a, b, 5) <= 1 + 1e-12
    assert ari(pa, b) == pytest.approx(ari(a, b), abs=1e-12)
    assert nmi(pa, b) == pytest.approx(nmi(a, b), abs=1e-12)
    assert dice_matched(pa, b, 5) == pytest.approx(dice_matched(a, b, 5), abs=1e-12)
    assert dice_matched(a, b, 5) == pytest.approx(dice_matched(b, a, 5), abs=1e-12)
    assert ari(a, b) == pytest.approx(ari(b, a), abs=1e-12)


def test_contingency():
    np.testing.assert_array_equal(contingency([0, 0, 5], ["x", "y", "y"]), [[1, 1], [0, 1]])


@pytest.fixture(scope="module")
def zero_noise():
    cfg = SynthConfig(m=24, n_anatomy=20, n_protocols=2, n_patients=6, d_bio=6, d_tech=3, noise_sigma=0.0, seed=5)
    return generate(cfg)


def test_coregistered_pairs(zero_noise):
    emb, _ = zero_noise
    i, j = coregistered_pairs(emb, "p0", "p1")
    assert i.size == 120
    assert np.all(emb.anatomy_id[i] == emb.anatomy_id[j]) and np.all(emb.patient_id[i] == emb.patient_id[j])


def test_ground_truth_projector_is_perfectly_stable(zero_noise):
    emb, gt = zero_noise
    reports = stability_sweep(emb, Projector(gt.T_basis, {}), k_values=[2, 5, 10, 20], seed=0)
    zb = [r for r in reports if r.embedding == "zB"]
    assert len(zb) == 4
    for r in zb:
        assert r.ari == pytest.approx(1.0) and r.nmi == pytest.approx(1.0) and r.dice == pytest.approx(1.0)
    s = summarize(reports)
    assert s["zB"]["ari"] > s["z"]["ari"]


def test_raw_embedding_unstable_under_strong_technical_shift():
    emb, gt = generate(SynthConfig(m=24, n_anatomy=20, n_patients=6, d_bio=6, d_tech=3, noise_sigma=0.01,
                                   tech_strength=10.0, seed=1))
    reports = stability_sweep(emb, Projector(gt.T_basis, {}), k_values=[5, 10], seed=0)
    s = summarize(reports)
    assert s["z"]["ari"] < s["zB"]["ari"] - 0.3


def test_stability_errors(zero_noise):
    emb, _ = zero_noise
    with pytest.raises(ConfigError, match="outside"):
        stability_reports(emb.vectors, emb, "z", k_values=[1])
    with pytest.raises(ConfigError, match="outside"):
        stability_reports(emb.vectors, emb, "z", k_values=[10_000])
    one = emb.subset(emb.protocol_id == "p0")
    with pytest.raises(DataError, match="two protocols"):
        stability_reports(one.vectors, one, "z")
    # two protocols with disjoint anatomy: nothing co-registered
    mask = ((emb.protocol_id == "p0") & (emb.anatomy_id < "a010")) | ((emb.protocol_id == "p1") & (emb.anatomy_id >= "a010"))
    part = emb.subset(mask)
    with pytest.raises(DataError, match="co-registered"):
        stability_reports(part.vectors, part, "z", k_values=[2])


def test_stability_csv(tmp_path, zero_noise):
    emb, _ = zero_noise
    reports = stability_sweep(emb, None, k_values=[3], seed=0)
    write_stability_csv(reports, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "k,metric,ari,nmi,dice,embedding" and lines[1].startswith("3,euclidean,")


def _protocol_set(X, protocols):
    n = len(protocols)
    return EmbeddingSet(np.arange(n), X, ["a"] * n, protocols, ["x"] * n)


def test_classifier_chance():
    rng = np.random.default_rng(0)
    n = 10_000
    prot = [f"p{k}" for k in rng.integers(0, 2, 2 * n)]
    emb = _protocol_set(rng.standard_normal((2 * n, 6)), prot)
    tr, te = emb.subset(np.arange(n)), emb.subset(np.arange(n, 2 * n))
    P = Projector(np.eye(6)[:, :2], {})
    res = subspace_classifier_eval(tr, te, P)
    for key in ("acc_zT", "acc_z", "acc_zB"):
        assert 0.40 <= res[key] <= 0.60


def test_classifier_indicator():
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 2, 400)
    X = np.column_stack([codes, rng.standard_normal((400, 3))]).astype(float)
    emb = _protocol_set(X, [f"p{c}" for c in codes])
    tr, te = emb.subset(np.arange(200)), emb.subset(np.arange(200, 400))
    res = subspace_classifier_eval(tr, te, Projector(np.eye(4)[:, :1], {}))
    assert res["acc_zT"] == 1.0 and res["acc_z"] == 1.0
    assert set(res["per_class_zT"]) == {"p0", "p1"}


def test_classifier_single_class():
    emb = _protocol_set(np.random.default_rng(0).standard_normal((10, 3)), ["p0"] * 10)
    with pytest.raises(DataError, match="two classes"):
        subspace_classifier_eval(emb, emb, Projector(np.eye(3)[:, :1], {}))
