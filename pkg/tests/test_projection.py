import numpy as np
import pytest
from sklearn.metrics import silhouette_score

from metriclab import data, projection


def two_blobs(seed=0, per=10, gap=40.0):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(0.0, 1.0, (per, 5)),
                     rng.normal(gap, 1.0, (per, 5))])
    labels = np.array([0] * per + [1] * per)
    return pts, labels


# ------------------------------------------------------------------- config

def test_config_defaults():
    cfg = projection.TsneConfig(seed=1)
    assert cfg.perplexity == 30.0
    assert cfg.iterations == 1000
    assert cfg.learning_rate == 200.0
    assert cfg.early_exaggeration == 12.0


@pytest.mark.parametrize("kwargs", [
    {"perplexity": 1.0},
    {"perplexity": 0.5},
    {"iterations": 249},
    {"learning_rate": 0.0},
    {"early_exaggeration": 0.5},
])
def test_config_rejects(kwargs):
    with pytest.raises(projection.ProjectionError):
        projection.TsneConfig(seed=0, **kwargs)


# -------------------------------------------------------------- calibration

def test_calibration_equidistant_is_flat():
    row = np.full(7, 4.0)
    beta, ok = projection.perplexity_calibration(row, 7.0)
    assert ok
    probs, entropy = projection._row_distribution(row, beta)
    assert np.allclose(probs, 1.0 / 7.0)
    assert 2.0 ** entropy == pytest.approx(7.0, abs=1e-4)


def test_calibration_small_target_concentrates():
    row = np.array([0.01, 100.0, 100.0, 100.0])
    beta, ok = projection.perplexity_calibration(row, 1.05)
    assert ok
    probs, _ = projection._row_distribution(row, beta)
    assert probs[0] > 0.99


def test_calibration_hits_target():
    rng = np.random.default_rng(4)
    for _ in range(10):
        row = rng.uniform(0.1, 20.0, size=25)
        target = float(rng.uniform(2.0, 8.0))
        beta, ok = projection.perplexity_calibration(row, target)
        assert ok
        _, entropy = projection._row_distribution(row, beta)
        assert abs(2.0 ** entropy - target) < 1e-4


def test_calibration_unreachable_flags():
    # 5 entries cap the perplexity at 5, target 50 cannot be hit
    row = np.arange(1.0, 6.0)
    beta, ok = projection.perplexity_calibration(row, 50.0)
    assert not ok
    assert np.isfinite(beta) and beta > 0


def test_calibration_input_checks():
    with pytest.raises(projection.ProjectionError):
        projection.perplexity_calibration([1.0], 2.0)
    with pytest.raises(projection.ProjectionError):
        projection.perplexity_calibration([1.0, np.nan, 2.0], 2.0)


# ---------------------------------------------------------------- affinities

def test_affinity_matrix_invariants():
    pts, _ = two_blobs(seed=2)
    p = projection.joint_affinities(pts, 5.0)
    assert np.allclose(p, p.T, atol=1e-15)
    assert p.min() >= 0.0
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diag(p) == 0.0)


def test_affinity_favors_neighbors():
    pts, _ = two_blobs(seed=3)
    p = projection.joint_affinities(pts, 5.0)
    within = p[:10, :10].sum() + p[10:, 10:].sum()
    across = p[:10, 10:].sum() + p[10:, :10].sum()
    assert within > 100 * across


# ---------------------------------------------------------------- projection

def test_output_shape_and_trace_length():
    pts, _ = two_blobs()
    cfg = projection.TsneConfig(perplexity=5.0, iterations=300, seed=0)
    coords, trace = projection.tsne_project(pts, cfg)
    assert coords.shape == (20, 2)
    assert trace.shape == (300,)
    assert np.all(np.isfinite(coords))
    assert np.all(np.isfinite(trace)) and np.all(trace >= 0.0)


def test_deterministic_per_seed():
    pts, _ = two_blobs(seed=5)
    cfg = projection.TsneConfig(perplexity=5.0, iterations=300, seed=9)
    a, ta = projection.tsne_project(pts, cfg)
    b, tb = projection.tsne_project(pts, cfg)
    assert np.array_equal(a, b)
    assert np.array_equal(ta, tb)
    other = projection.TsneConfig(perplexity=5.0, iterations=300, seed=10)
    c, _ = projection.tsne_project(pts, other)
    assert not np.array_equal(a, c)


def test_separated_blobs_keep_silhouette():
    pts, labels = two_blobs(seed=0)
    cfg = projection.TsneConfig(perplexity=5.0, iterations=1000, seed=0)
    coords, _ = projection.tsne_project(pts, cfg)
    assert silhouette_score(coords, labels) > 0.5


def test_duplicated_rows_land_together():
    ds = data.gen_blobs(class_count=3, per_class=20, dim=8,
                        separation=8.0, seed=3)
    pts = np.vstack([ds.samples, ds.samples[:3]])
    cfg = projection.TsneConfig(perplexity=10.0, iterations=1000, seed=2)
    coords, _ = projection.tsne_project(pts, cfg)
    for a, b in [(0, 60), (1, 61), (2, 62)]:
        assert np.linalg.norm(coords[a] - coords[b]) < 1e-3


def test_kl_non_increasing_after_exaggeration():
    ds = data.gen_blobs(class_count=3, per_class=20, dim=8,
                        separation=8.0, seed=7)
    cfg = projection.TsneConfig(perplexity=10.0, iterations=1000, seed=7)
    _, trace = projection.tsne_project(ds.samples, cfg)
    assert np.all(np.diff(trace[-500:]) <= 0.0)


def test_kl_decreases_overall():
    pts, _ = two_blobs(seed=8)
    cfg = projection.TsneConfig(perplexity=5.0, iterations=600, seed=1)
    _, trace = projection.tsne_project(pts, cfg)
    assert trace[-1] < trace[250]


def test_rejects_small_or_bad_input():
    cfg = projection.TsneConfig(perplexity=5.0, seed=0)
    with pytest.raises(projection.ProjectionError):
        projection.tsne_project(np.zeros((4, 3)), cfg)
    bad = np.zeros((20, 3))
    bad[3, 1] = np.nan
    with pytest.raises(projection.ProjectionError):
        projection.tsne_project(bad, cfg)


def test_rejects_infeasible_perplexity():
    pts = np.random.default_rng(0).normal(size=(12, 3))
    cfg = projection.TsneConfig(perplexity=4.0, seed=0)  # needs N > 12
    with pytest.raises(projection.ProjectionError):
        projection.tsne_project(pts, cfg)
