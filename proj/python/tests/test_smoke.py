import itertools
import math

import numpy as np
import pytest

import fvit


@pytest.fixture(scope="module")
def toy():
    return fvit.generate_synthetic(identities=6, per_id=4, queries_per_id=2, sigma=0.3, grid=4, dim=16, seed=5)


def test_generator_shapes_and_determinism(toy):
    gallery, queries = toy
    assert len(gallery) == 24
    assert len(queries) == 12
    rec = gallery[0]
    assert rec.patches.shape == (16, 16)
    assert rec.patches.dtype == np.float64
    np.testing.assert_allclose(rec.image_vec, rec.patches.mean(axis=0), atol=1e-15)
    again, _ = fvit.generate_synthetic(identities=6, per_id=4, queries_per_id=2, sigma=0.3, grid=4, dim=16, seed=5)
    assert again == gallery
    assert gallery[-1] == gallery[23]


def test_gallery_bytes_and_file_round_trip(toy, tmp_path):
    gallery, _ = toy
    assert fvit.Gallery.from_bytes(gallery.to_bytes()) == gallery
    path = tmp_path / "g.fveb"
    gallery.save(path)
    assert fvit.Gallery.load(path) == gallery
    with pytest.raises(fvit.FormatError):
        fvit.Gallery.from_bytes(b"nope")


def test_stage1_matches_numpy_cosine(toy):
    gallery, queries = toy
    q = queries[0]
    ranked = fvit.stage1_rank(q, gallery)
    vecs = np.stack([gallery[i].image_vec for i in range(len(gallery))])
    cos = vecs @ q.image_vec / (np.linalg.norm(vecs, axis=1) * np.linalg.norm(q.image_vec))
    assert [i for i, _ in ranked] == list(np.argsort(-cos, kind="stable"))
    np.testing.assert_allclose([s for _, s in ranked], np.sort(cos)[::-1], atol=1e-12)


def test_sinkhorn_against_oracle_and_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        cost = rng.uniform(0.0, 2.0, size=(4, 4))
        brute = min(sum(cost[i, p[i]] for i in range(4)) / 4 for p in itertools.permutations(range(4)))
        assert fvit.exact_assignment_oracle(cost) == pytest.approx(brute, abs=1e-15)
        r = fvit.sinkhorn(cost, epsilon=1e-3, max_iters=100000, tol=1e-9)
        assert abs(r["distance"] - brute) < 1e-2
        smooth = fvit.sinkhorn(cost, epsilon=0.5, max_iters=100000, tol=1e-6)
        assert smooth["converged"]
        assert np.abs(smooth["flow"].sum(axis=1) - 0.25).sum() < 1e-6
        assert np.abs(smooth["flow"].sum(axis=0) - 0.25).sum() < 1e-6


def test_pipeline_and_metrics(toy):
    gallery, queries = toy
    st1 = fvit.evaluate(fvit.run_pipeline(queries, gallery), gallery)
    results = fvit.run_pipeline(queries, gallery, reranker="emd", k=len(gallery), alpha=0.0)
    assert fvit.evaluate(results, gallery) == st1
    assert all(len(r.order) == len(gallery) for r in results)
    assert fvit.retrieval_metrics([True, False, True], 2) == (1.0, 0.5, 0.5)
    with pytest.raises(fvit.ConfigError):
        fvit.run_pipeline(queries, gallery, reranker="h2l")


def test_model_training_and_h2l_rerank(toy):
    gallery, queries = toy
    model = fvit.init_model({"variant": "H2L", "depth": 1, "heads": 1, "dim": 16, "grid": 4, "out_dim": 16}, seed=1)
    assert model.config["variant"] == "h2l"
    trained, history = fvit.train(model, gallery, {"epochs": 2, "pairs_per_epoch": 40, "heldout_pairs": 20})
    assert len(history["epochs"]) == 2
    assert history["grad_check_error"] < 1e-4
    assert trained.flat() != model.flat()
    s = fvit.score_pair_h2l(gallery[0], gallery[1], trained)
    assert -1.0 <= s <= 1.0 and math.isfinite(s)
    results = fvit.run_pipeline(queries, gallery, reranker="h2l", k=8, weights=trained)
    assert len(results) == len(queries)


def test_weights_round_trip(tmp_path):
    model = fvit.init_model({"variant": "H1", "dim": 16, "grid": 4, "out_dim": 16}, seed=3)
    path = tmp_path / "w.fvwt"
    model.save(path)
    assert fvit.ModelWeights.load(path).flat() == model.flat()


def test_arcface_zero_margin_is_softmax_cross_entropy():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    labels = [0, 3, 1]
    loss, df, dw = fvit.arcface_loss(f, labels, w, margin=0.0, scale=1.0)
    cos = (f / np.linalg.norm(f, axis=1, keepdims=True)) @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
    ref = np.mean(np.log(np.exp(cos).sum(axis=1)) - cos[np.arange(3), labels])
    assert loss == pytest.approx(ref, abs=1e-12)
    assert df.shape == f.shape and dw.shape == w.shape


def test_heatmap_and_errors(toy):
    gallery, _ = toy
    ab, ba = fvit.cc_heatmap(gallery[0], gallery[1])
    assert ab.shape == (4, 4) and ba.shape == (4, 4)
    expected = gallery[0].patches @ gallery[1].patches.mean(axis=0)
    np.testing.assert_allclose(ab.ravel(), expected, atol=1e-12)
    with pytest.raises(fvit.DimensionError):
        fvit.FaceRecord(np.ones((5, 3)))
    with pytest.raises(fvit.NumericError):
        fvit.FaceRecord(np.full((4, 3), np.nan))
    assert fvit.fit_loglog_slope([16, 64, 256], [1.0, 4.0, 16.0]) == pytest.approx(1.0)
