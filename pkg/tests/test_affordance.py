import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from staformer.affordance import (
    AffordanceConfig,
    AffordanceDistribution,
    AffordanceSample,
    ZoneRecord,
    bag_of_words,
    build_database,
    kmeans,
    load_database,
    query_affordances,
    refine_predictions,
    refine_probs,
    samples_from_json,
    samples_to_json,
    save_database,
    sparse_cosine,
)
from staformer.errors import ConfigurationError, DimensionError, ValidationError
from staformer.head import STAPrediction

from oracles import kmeans_oracle, topk_affordance_oracle


def simplex(rng, n):
    x = rng.random(n) + 1e-3
    return x / x.sum()


def random_db(rng, n_zones=7, d=5, nouns=4, verbs=3, vocab=("a", "b", "c", "d", "e")):
    zones = []
    for z in range(n_zones):
        words = list(rng.choice(vocab, size=3))
        emb = rng.standard_normal(d)
        zones.append(ZoneRecord(z, emb / np.linalg.norm(emb), rng.integers(0, 5, nouns), rng.integers(0, 5, verbs),
                                bag_of_words(words)))
    return zones


def test_bag_of_words_is_unit_and_hashes_consistently():
    v = bag_of_words(["Cup", "cup", "table"])
    assert np.isclose(sum(x * x for x in v.values()), 1.0)
    assert bag_of_words([]) == {}
    assert sparse_cosine(bag_of_words(["x", "y"]), bag_of_words(["y", "x"])) == pytest.approx(1.0)


def test_kmeans_matches_loop_oracle():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        pts = np.concatenate([rng.normal(c, 0.3, size=(12, 3)) for c in rng.normal(0, 3, size=(4, 3))])
        cents, assign = kmeans(pts, 4, seed, 20)
        ref_c, ref_a = kmeans_oracle(pts, 4, seed, 20)
        assert np.array_equal(assign, ref_a)
        assert np.allclose(cents, ref_c, atol=1e-9)


def test_kmeans_handles_duplicate_points():
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]])
    cents, assign = kmeans(pts, 3, 0, 10)
    assert np.all(np.isfinite(cents))
    assert assign.shape == (6,)


def test_kmeans_too_many_zones():
    with pytest.raises(ConfigurationError):
        kmeans(np.zeros((2, 3)), 3, 0)


def test_query_matches_topk_oracle():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        db = random_db(rng)
        cfg = AffordanceConfig(top_k=int(rng.integers(1, 9)), tau=float(rng.uniform(0.05, 1.0)),
                               beta=float(rng.uniform(0, 1)))
        q = rng.standard_normal(5)
        bow = bag_of_words(list(rng.choice(["a", "b", "z"], size=2))) if seed % 3 else {}
        got = query_affordances(q, bow, db, cfg)
        nouns, verbs, ids, weights = topk_affordance_oracle(q, bow, db, cfg.top_k, cfg.tau, cfg.beta)
        assert got.support_zone_ids == ids
        assert np.allclose(got.weights, weights, atol=1e-9)
        assert np.allclose(got.noun_probs, nouns, atol=1e-9)
        assert np.allclose(got.verb_probs, verbs, atol=1e-9)


def test_query_ties_prefer_lower_zone_id():
    emb = np.array([1.0, 0.0])
    db = [ZoneRecord(z, emb, np.array([z + 1, 0]), np.array([1]), {}) for z in (4, 1, 3)]
    got = query_affordances(emb, None, db, AffordanceConfig(top_k=2))
    assert got.support_zone_ids == [1, 3]


def test_query_width_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionError):
        query_affordances(np.ones(3), None, random_db(rng), AffordanceConfig())
    with pytest.raises(ValidationError):
        query_affordances(np.ones(3), None, [], AffordanceConfig())


def test_refine_lambda_zero_is_exact_identity():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = simplex(rng, 6)
        assert np.array_equal(refine_probs(p, simplex(rng, 6), 0.0), p / p.sum())


@given(st.integers(2, 8), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_refined_distributions_are_simplices(n, lam, seed):
    rng = np.random.default_rng(seed)
    a = simplex(rng, n)
    a[rng.integers(n)] = 0.0  # zero-count classes are allowed
    out = refine_probs(simplex(rng, n), a, lam)
    assert np.all(out >= 0) and abs(out.sum() - 1.0) <= 1e-9


@given(st.integers(2, 8), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_uniform_affordance_keeps_argmax(n, lam, seed):
    p = simplex(np.random.default_rng(seed), n)
    out = refine_probs(p, np.full(n, 1.0 / n), lam)
    # the model's top class is never overtaken; at lam=1 the model is
    # discarded and every class ties
    assert out[p.argmax()] == out.max()
    if lam <= 0.99:
        assert out.argmax() == p.argmax()


def test_refine_lambda_one_returns_affordance():
    a = np.array([0.2, 0.5, 0.3])
    assert np.allclose(refine_probs(np.array([0.9, 0.05, 0.05]), a, 1.0), a, atol=1e-7)


def test_refine_shape_and_lambda_errors():
    with pytest.raises(DimensionError):
        refine_probs(np.ones(3) / 3, np.ones(4) / 4, 0.5)
    with pytest.raises(ConfigurationError):
        refine_probs(np.ones(3) / 3, np.ones(3) / 3, 1.5)


def test_refine_predictions_only_touches_distributions():
    p = STAPrediction((0.1, 0.1, 0.3, 0.3), np.array([0.6, 0.4]), np.array([0.3, 0.7]), 0.9, 0.8, (0, 0, 0))
    dist = AffordanceDistribution(np.array([0.0, 1.0]), np.array([0.5, 0.5]), [0], [1.0])
    (q,) = refine_predictions([p], dist, 0.5)
    assert q.noun == 1 and q.verb == 1
    assert q.box == p.box and q.score == p.score and q.ttc == p.ttc


def samples(rng, n=40, d=6):
    centres = rng.standard_normal((4, d)) * 3
    out = []
    for i in range(n):
        k = i % 4
        out.append(AffordanceSample(centres[k] + rng.normal(0, 0.1, d), noun=k, verb=k % 3,
                                    narration=[f"scene{k}", "hand"]))
    return out


def test_build_database_partitions_samples():
    rng = np.random.default_rng(3)
    db = build_database(samples(rng), 4, 3, AffordanceConfig(num_zones=4, seed=1))
    assert sum(int(z.noun_counts.sum()) for z in db) == 40
    assert sum(int(z.verb_counts.sum()) for z in db) == 40
    for z in db:
        assert np.isclose(np.linalg.norm(z.embedding), 1.0)


def test_over_clustered_zones_are_pure():
    # with more zones than planted clusters no zone can straddle two clusters
    rng = np.random.default_rng(3)
    db = build_database(samples(rng), 4, 3, AffordanceConfig(num_zones=8, seed=1))
    for z in db:
        assert np.count_nonzero(z.noun_counts) == 1


def test_build_database_deterministic():
    data = samples(np.random.default_rng(3))
    cfg = AffordanceConfig(num_zones=5, seed=2)
    a, b = build_database(data, 4, 3, cfg), build_database(data, 4, 3, cfg)
    for za, zb in zip(a, b):
        assert np.array_equal(za.embedding, zb.embedding) and np.array_equal(za.noun_counts, zb.noun_counts)


def test_build_database_validates_inputs():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        build_database([], 4, 3, AffordanceConfig())
    bad = samples(rng, n=8)
    bad[0] = AffordanceSample(np.ones(3), 0, 0)
    with pytest.raises(DimensionError):
        build_database(bad, 4, 3, AffordanceConfig(num_zones=2))
    with pytest.raises(ValidationError):
        build_database([AffordanceSample(np.ones(3), 9, 0)], 4, 3, AffordanceConfig(num_zones=1))


def test_database_and_samples_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    data = samples(rng)
    cfg = AffordanceConfig(num_zones=4, seed=1)
    db = build_database(data, 4, 3, cfg)
    save_database(db, tmp_path / "db", cfg, 4, 3)
    back, cfg2, nn, nv = load_database(tmp_path / "db")
    assert (nn, nv) == (4, 3) and cfg2 == cfg
    for za, zb in zip(db, back):
        assert za.zone_id == zb.zone_id
        assert np.array_equal(za.embedding, zb.embedding)
        assert np.array_equal(za.verb_counts, zb.verb_counts)
        assert za.narration_bow == zb.narration_bow
    again = samples_from_json(samples_to_json(data))
    assert all(np.array_equal(a.embedding, b.embedding) for a, b in zip(data, again))
