import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canobody import rng
from canobody.reid import (EvalReport, FeatureSet, ScoreMatrix, cosine_scores, evaluate,
                           evaluate_features, fuse)


def featset(vectors, subjects, roles=None, outfits=None):
    n = len(vectors)
    return FeatureSet(
        rec_ids=np.arange(n, dtype=np.uint32),
        subjects=np.asarray(subjects, dtype=np.uint32),
        outfits=np.asarray(outfits if outfits is not None else np.zeros(n), dtype=np.uint32),
        roles=np.asarray(roles if roles is not None else ["query"] * n, dtype=object),
        vectors=np.asarray(vectors, dtype=np.float32))


def brute_force_eval(scores, q_subj, g_subj, gallery_ids, max_rank):
    """Definition-level oracle: explicit sort, precision@k at positive ranks."""
    cmc = np.zeros(max_rank)
    aps = []
    for i in range(len(q_subj)):
        order = sorted(range(len(g_subj)), key=lambda j: (-scores[i, j], gallery_ids[j]))
        hits = [g_subj[j] == q_subj[i] for j in order]
        if not any(hits):
            continue
        first = hits.index(True)
        if first < max_rank:
            cmc[first:] += 1
        precs = []
        seen = 0
        for rank, h in enumerate(hits, start=1):
            if h:
                seen += 1
                precs.append(seen / rank)
        aps.append(float(np.mean(precs)))
    return cmc / len(aps), float(np.mean(aps))


def test_cosine_basics():
    q = featset([[1.0, 0.0], [0.0, 2.0]], [0, 1])
    g = featset([[3.0, 0.0], [0.0, 1.0]], [0, 1], roles=["gallery"] * 2)
    s = cosine_scores(q, g).scores
    assert s[0, 0] == pytest.approx(1.0)   # identical direction (v vs 3v)
    assert s[0, 1] == pytest.approx(0.0)   # orthogonal
    assert s[1, 1] == pytest.approx(1.0)


def test_cosine_zero_vector_names_record():
    q = featset([[0.0, 0.0]], [0])
    g = featset([[1.0, 0.0]], [0], roles=["gallery"])
    with pytest.raises(ValueError, match="record 0"):
        cosine_scores(q, g)


def test_perfect_scores_rank1():
    scores = ScoreMatrix(scores=np.eye(3), query_ids=np.arange(3),
                         gallery_ids=np.arange(3))
    rep = evaluate(scores, np.arange(3), np.arange(3), max_rank=3)
    assert rep.cmc[0] == 1.0 and rep.map_score == 1.0


def test_single_query_positive_ranked_second():
    scores = ScoreMatrix(scores=np.array([[0.9, 0.8, 0.2, 0.1]]),
                         query_ids=np.array([0]), gallery_ids=np.arange(4))
    rep = evaluate(scores, np.array([7]), np.array([1, 7, 2, 3]), max_rank=4)
    assert rep.per_query_ap == [0.5]
    np.testing.assert_allclose(rep.cmc, [0.0, 1.0, 1.0, 1.0])


def test_random_scores_near_chance():
    # 20 subjects, one gallery each: expected Rank1 = 1/20
    rank1 = []
    for seed in range(20):
        g = rng.stream(seed, "chance")
        scores = ScoreMatrix(scores=g.normal(size=(40, 20)),
                             query_ids=np.arange(40), gallery_ids=np.arange(20))
        q_subj = np.repeat(np.arange(20), 2)
        rep = evaluate(scores, q_subj, np.arange(20), max_rank=5)
        rank1.append(rep.cmc[0])
    assert abs(np.mean(rank1) - 0.05) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_evaluate_matches_bruteforce(seed):
    g = rng.stream(seed, "bf")
    n_q, n_g = 5, 8
    scores = g.normal(size=(n_q, n_g))
    q_subj = g.integers(0, 4, size=n_q)
    g_subj = np.concatenate([np.arange(4), g.integers(0, 4, size=n_g - 4)])
    sm = ScoreMatrix(scores=scores, query_ids=np.arange(n_q), gallery_ids=np.arange(n_g))
    rep = evaluate(sm, q_subj, g_subj, max_rank=n_g)
    cmc, m = brute_force_eval(scores, q_subj, g_subj, np.arange(n_g), n_g)
    np.testing.assert_allclose(rep.cmc, cmc, atol=1e-12)
    assert rep.map_score == pytest.approx(m, abs=1e-12)


def test_cmc_monotone_and_rank_invariance():
    g = rng.stream(3, "mono")
    scores = g.normal(size=(10, 12))
    q_subj = g.integers(0, 6, size=10)
    g_subj = np.concatenate([np.arange(6), g.integers(0, 6, size=6)])
    sm = ScoreMatrix(scores=scores, query_ids=np.arange(10), gallery_ids=np.arange(12))
    rep = evaluate(sm, q_subj, g_subj, max_rank=12)
    assert np.all(np.diff(rep.cmc) >= -1e-12)

    # strictly increasing per-row transform preserves everything
    warped = ScoreMatrix(scores=np.tanh(scores) * 3.0 + 1.0,
                         query_ids=sm.query_ids, gallery_ids=sm.gallery_ids)
    rep2 = evaluate(warped, q_subj, g_subj, max_rank=12)
    np.testing.assert_allclose(rep.cmc, rep2.cmc)
    assert rep.map_score == pytest.approx(rep2.map_score)


def test_cloth_change_protocol_filters_same_outfit_queries():
    # subject 0 gallery wears outfit 1 -> queries of subject 0 outfit 1 drop
    q = featset([[1, 0], [0.9, 0.1], [0, 1]], [0, 0, 1], roles=["query"] * 3,
                outfits=[1, 0, 0])
    g = featset([[1, 0], [0, 1]], [0, 1], roles=["gallery"] * 2, outfits=[1, 1])
    sm = cosine_scores(q, g)
    rep = evaluate(sm, q.subjects, g.subjects, protocol="cloth-change",
                   q_outfits=q.outfits, g_outfits=g.outfits, max_rank=2)
    assert rep.n_queries == 2 and rep.n_excluded == 1


def test_fuse_modes_and_errors():
    a = ScoreMatrix(scores=np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
                    query_ids=np.array([0, 1]), gallery_ids=np.array([0, 1, 2]))
    zero = ScoreMatrix(scores=np.zeros((2, 3)), query_ids=a.query_ids,
                       gallery_ids=a.gallery_ids)
    np.testing.assert_array_equal(fuse(a, zero, "sum").scores, a.scores)
    doubled = fuse(a, a, "sum")
    np.testing.assert_array_equal(doubled.scores, 2 * a.scores)

    b = ScoreMatrix(scores=np.array([[0.5, 0.25, 0.0], [1.0, 0.0, 0.5]]),
                    query_ids=a.query_ids, gallery_ids=a.gallery_ids)
    np.testing.assert_allclose(fuse(a, b, "sum").scores, a.scores + b.scores)

    mismatch = ScoreMatrix(scores=np.zeros((2, 3)), query_ids=np.array([0, 9]),
                           gallery_ids=a.gallery_ids)
    with pytest.raises(ValueError, match="index 1"):
        fuse(a, mismatch, "sum")
    with pytest.raises(ValueError):
        fuse(a, ScoreMatrix(scores=np.zeros((3, 3)), query_ids=np.arange(3),
                            gallery_ids=a.gallery_ids), "sum")


def test_znorm_sum_preserves_equal_rankings():
    g = rng.stream(4, "zn")
    a = ScoreMatrix(scores=g.normal(size=(4, 6)), query_ids=np.arange(4),
                    gallery_ids=np.arange(6))
    fused = fuse(a, a, "znorm-sum")
    assert np.array_equal(np.argsort(-fused.scores, axis=1),
                          np.argsort(-a.scores, axis=1))


def test_feature_file_roundtrip(tmp_path):
    g = rng.stream(5, "ff")
    fs = featset(g.normal(size=(6, 8)), g.integers(0, 3, size=6),
                 roles=["gallery" if i % 3 == 0 else "query" for i in range(6)],
                 outfits=g.integers(0, 2, size=6))
    path = tmp_path / "f.bin"
    fs.save(path)
    assert path.read_bytes()[:8] == b"IAKFEAT1"
    back = FeatureSet.load(path)
    assert np.array_equal(back.vectors, fs.vectors)
    assert list(back.roles) == list(fs.roles)
    assert np.array_equal(back.subjects, fs.subjects)


def test_report_json(tmp_path):
    rep = EvalReport(cmc=np.array([0.5, 1.0]), map_score=0.75, per_query_ap=[0.5, 1.0],
                     protocol="standard", n_queries=2, n_excluded=0)
    rep.save(tmp_path / "r.json")
    import json
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["mAP"] == 0.75 and d["cmc"] == [0.5, 1.0] and d["protocol"] == "standard"


def test_extract_features_never_touches_3d(tmp_path):
    from canobody import render, skinning
    from canobody.encoder import ImageEncoder
    from canobody.config import ModelConfig
    from canobody.reid import extract_features
    from canobody.synth import generate_image_set

    generate_image_set(tmp_path / "d", n_subjects=2, n_outfits=2, n_poses=2, seed=21,
                       scan_points=0)
    enc = ImageEncoder(ModelConfig(), rng=rng.stream(21, "enc"))
    before = (skinning.CALL_COUNTS["canonical_correspondence"],
              render.CALL_COUNTS["render"])
    feats = extract_features(enc, tmp_path / "d", head="id")
    after = (skinning.CALL_COUNTS["canonical_correspondence"],
             render.CALL_COUNTS["render"])
    assert before == after
    assert feats.vectors.shape == (8, ModelConfig().dim_id)

    # identical inputs give identical features
    feats2 = extract_features(enc, tmp_path / "d", head="id")
    assert np.array_equal(feats.vectors, feats2.vectors)
