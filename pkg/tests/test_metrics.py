import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navdiff.metrics import (
    EpisodeRecord,
    EvalReport,
    default_extractor,
    frechet_distance_from_moments,
    frechet_feature_distance,
    perceptual_distance,
    psnr,
    spl,
)


def frechet_2d_closed_form(mu_a, cov_a, mu_b, cov_b):
    """For 2x2 PSD matrices Tr((A B)^1/2) = sqrt(tr(AB) + 2 sqrt(det A det B))."""
    mu_a, mu_b, a, b = map(np.asarray, (mu_a, mu_b, cov_a, cov_b))
    cross = math.sqrt(np.trace(a @ b) + 2.0 * math.sqrt(np.linalg.det(a) * np.linalg.det(b)))
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(a) + np.trace(b) - 2.0 * cross)


@pytest.mark.parametrize(
    "success,shortest,actual,expected",
    [(True, 3.0, 3.0, 1.0), (False, 3.0, 3.0, 0.0), (True, 4.0, 8.0, 0.5), (True, 4.0, 2.0, 1.0), (False, 2.0, 9.0, 0.0)],
)
def test_spl_hand_values(success, shortest, actual, expected):
    assert spl(success, shortest, actual) == expected


@pytest.mark.parametrize("shortest,actual", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5)])
def test_spl_rejects_bad_lengths(shortest, actual):
    with pytest.raises(ValueError):
        spl(True, shortest, actual)


@given(st.booleans(), st.floats(0.01, 100), st.floats(0, 100))
def test_spl_bounded_by_success(success, shortest, actual):
    v = spl(success, shortest, actual)
    assert 0.0 <= v <= float(success)


def test_psnr_hand_values():
    z = np.zeros((4, 4, 3))
    assert psnr(z, z) == 100.0
    assert psnr(z, np.ones_like(z)) == 0.0
    assert psnr(z, np.full_like(z, 0.1)) == pytest.approx(20.0, abs=1e-12)
    assert psnr(z, np.full_like(z, 0.5)) == pytest.approx(10 * math.log10(4), abs=1e-12)
    with pytest.raises(ValueError):
        psnr(z, np.zeros((4, 4, 1)))


def test_frechet_identical_and_shifted():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 3)) @ np.diag([1.0, 0.5, 2.0])
    assert abs(frechet_feature_distance(a, a)) < 1e-6
    delta = np.array([0.3, -1.0, 2.0])
    assert frechet_feature_distance(a, a + delta) == pytest.approx(float(delta @ delta), abs=1e-6)


def test_frechet_moments_diagonal_closed_form():
    mu_a, mu_b = np.array([0.0, 1.0]), np.array([1.0, -1.0])
    va, vb = np.array([1.0, 4.0]), np.array([9.0, 0.25])
    expected = 5.0 + float(((np.sqrt(va) - np.sqrt(vb)) ** 2).sum())
    assert frechet_distance_from_moments(mu_a, np.diag(va), mu_b, np.diag(vb), eps=0.0) == pytest.approx(expected, abs=1e-9)
    # The default eps*I regularizer enters the closed form through both covariances.
    reg = 5.0 + float(((np.sqrt(va + 1e-6) - np.sqrt(vb + 1e-6)) ** 2).sum())
    assert frechet_distance_from_moments(mu_a, np.diag(va), mu_b, np.diag(vb)) == pytest.approx(reg, abs=1e-9)


def test_frechet_sampled_matches_analytic():
    mu_a, cov_a = np.array([0.0, 0.0]), np.array([[1.0, 0.0], [0.0, 2.0]])
    mu_b, cov_b = np.array([1.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]])
    rng = np.random.default_rng(7)
    a = rng.multivariate_normal(mu_a, cov_a, size=10_000)
    b = rng.multivariate_normal(mu_b, cov_b, size=10_000)
    analytic = frechet_2d_closed_form(mu_a, cov_a, mu_b, cov_b)
    assert abs(frechet_feature_distance(a, b) - analytic) / analytic < 0.05


def test_frechet_symmetric_and_validates():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(50, 4)), rng.normal(1.0, 2.0, size=(60, 4))
    assert frechet_feature_distance(a, b) == pytest.approx(frechet_feature_distance(b, a), rel=1e-9)
    with pytest.raises(ValueError):
        frechet_feature_distance(a[:4], b)
    with pytest.raises(ValueError):
        frechet_feature_distance(a, b[:, :3])


def test_frechet_degenerate_covariance_is_finite():
    a = np.zeros((10, 3))
    a[:, 0] = np.arange(10)
    assert math.isfinite(frechet_feature_distance(a, a + 1.0))


def test_perceptual_distance_properties():
    ext = default_extractor(0)
    rng = np.random.default_rng(3)
    img = rng.random((32, 32, 3)).astype(np.float32)
    other = rng.random((32, 32, 3)).astype(np.float32)
    assert perceptual_distance(ext, img, img) == 0.0
    assert perceptual_distance(ext, img, other) == pytest.approx(perceptual_distance(ext, other, img), rel=1e-6)
    base = np.tile(np.linspace(0, 1, 32, dtype=np.float32)[None, :, None], (32, 1, 3))
    noisy = [np.clip(base + rng.normal(0, s, base.shape), 0, 1).astype(np.float32) for s in (0.02, 0.1, 0.3)]
    p = [psnr(base, n) for n in noisy]
    d = [perceptual_distance(ext, base, n) for n in noisy]
    assert p[0] > p[1] > p[2]
    assert d[0] < d[1] < d[2]


def _records(flags):
    return [EpisodeRecord(f"ep{i:03d}", s, 10, 2.0 + i % 3, 2.0) for i, s in enumerate(flags)]


def test_report_aggregates_and_orders():
    recs = _records([True, False, True, True])
    rep = EvalReport.from_records(recs)
    assert rep.sr == 0.75
    assert rep.spl == pytest.approx(np.mean([r.spl for r in recs]))
    assert rep.spl <= rep.sr
    shuffled = EvalReport.from_records(list(reversed(recs)))
    assert shuffled.to_json() == rep.to_json()
    with pytest.raises(ValueError):
        EvalReport.from_records([])


def test_report_json_round_trip_and_schema():
    rep = EvalReport.from_records(_records([True, False, True]), {"k": 5})
    doc = json.loads(rep.to_json())
    assert set(doc) == {"format", "sr", "spl", "n_episodes", "records", "config"}
    assert set(doc["records"][0]) == {"id", "success", "steps", "path_length", "shortest_length", "spl"}
    back = EvalReport.from_json(rep.to_json())
    assert back.to_json() == rep.to_json()
    bad = dict(doc, format="other")
    with pytest.raises(ValueError):
        EvalReport.from_json(json.dumps(bad))


@settings(max_examples=30)
@given(st.lists(st.booleans(), min_size=1, max_size=20), st.randoms())
def test_report_permutation_invariant(flags, rnd):
    recs = _records(flags)
    perm = list(recs)
    rnd.shuffle(perm)
    a, b = EvalReport.from_records(recs), EvalReport.from_records(perm)
    assert (a.sr, a.spl) == (b.sr, b.spl)
