import numpy as np
import pytest

from memstream.analysis import recall_at_k, self_similarity
from memstream.compression import CompressionStrategy
from memstream.encoder import encode_stream
from memstream.errors import ShapeError
from memstream.kv_store import TieredCacheStore
from memstream.retrieval import external_scores, retrieve
from memstream.toy_model import (
    SEPARABLE_MARGIN,
    ToyModelConfig,
    external_encode,
    gen_benchmark,
    project_frame,
    project_question,
    random_clues,
)

SMALL = ToyModelConfig(layers=3, heads=2, head_dim=8, grid=(3, 3), input_dim=32, ext_dim=16)


class TestProjections:
    def test_deterministic_and_shapes(self, rng):
        x = rng.standard_normal(32)
        a = project_frame(x, 1, SMALL)
        b = project_frame(x.copy(), 1, ToyModelConfig.from_dict(SMALL.to_dict()))
        for m, n in zip(a, b):
            assert m.shape == (9, 16) and m.dtype == np.float32
            assert m.tobytes() == n.tobytes()

    def test_layers_differ(self, rng):
        x = rng.standard_normal(32)
        assert not np.array_equal(project_frame(x, 0, SMALL)[1], project_frame(x, 1, SMALL)[1])

    def test_seed_changes_weights(self, rng):
        x = rng.standard_normal(32)
        other = ToyModelConfig(**{**SMALL.to_dict(), "grid": (3, 3), "seed": 1})
        assert not np.array_equal(project_frame(x, 0, SMALL)[1], project_frame(x, 0, other)[1])

    def test_question_tokens(self, rng):
        Q, K, V = project_question(rng.standard_normal(32), 2, SMALL)
        assert Q.shape == (SMALL.question_tokens, 16)

    def test_external_unit_norm(self, rng):
        assert np.linalg.norm(external_encode(rng.standard_normal(32), SMALL)) == pytest.approx(1.0, abs=1e-6)

    def test_bad_input(self):
        with pytest.raises(ShapeError):
            project_frame(np.ones(5), 0, SMALL)
        with pytest.raises(IndexError):
            project_frame(np.ones(32), 3, SMALL)

    def test_grid_schedule(self):
        cfg = ToyModelConfig(grid=(2, 2), grid_schedule=((2, 2), (3, 1)))
        assert [cfg.grid_for(t) for t in range(3)] == [(2, 2), (3, 1), (2, 2)]


class TestBenchmark:
    def test_same_seed_same_benchmark(self):
        a = gen_benchmark(20, [[3, 4]], seed=9, config=SMALL)
        b = gen_benchmark(20, [[3, 4]], seed=9, config=SMALL)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.concepts.tobytes() == b.concepts.tobytes()

    def test_redundancy_one_gives_constant_frames(self):
        bench = gen_benchmark(10, [], redundancy=1.0, config=SMALL)
        np.testing.assert_allclose(self_similarity(bench.frames), np.ones((10, 10)), atol=1e-6)

    def test_low_redundancy_decorrelates(self):
        hi = self_similarity(gen_benchmark(50, [], redundancy=0.99, config=SMALL).frames)
        lo = self_similarity(gen_benchmark(50, [], redundancy=0.1, config=SMALL).frames)
        assert np.mean(np.diag(hi, 1)) > np.mean(np.diag(lo, 1))

    def test_planted_external_argmax(self):
        clues = random_clues(120, 5, 3, seed=2)
        bench = gen_benchmark(120, clues, margin=SEPARABLE_MARGIN, seed=2, config=SMALL)
        emb = bench.external_embeddings()
        for qid, clue in zip(bench.question_ids, clues):
            assert int(np.argmax(external_scores(emb, qid))) in clue

    def test_random_clues_disjoint(self):
        clues = random_clues(40, 6, 4, seed=0)
        flat = [f for c in clues for f in c]
        assert len(flat) == len(set(flat)) == 24
        assert all(c == list(range(c[0], c[0] + 4)) for c in clues)
        with pytest.raises(ValueError):
            random_clues(10, 3, 4, seed=0)

    def test_bad_clue(self):
        with pytest.raises(ValueError):
            gen_benchmark(5, [[7]], config=SMALL)


def test_end_to_end_recall():
    cfg = ToyModelConfig(layers=2, heads=2, head_dim=16, grid=(4, 4), input_dim=64, ext_dim=64)
    clues = random_clues(100, 4, 4, seed=3)
    bench = gen_benchmark(100, clues, margin=4.0, seed=3, config=cfg)
    store = TieredCacheStore(cfg.layers, cfg.heads, cfg.head_dim, window_tokens=160)
    encode_stream(bench.frame_inputs(), store, CompressionStrategy("aks"))
    emb = bench.external_embeddings()
    for j, clue in enumerate(bench.clues):
        for mode in ("internal", "external", "moe"):
            res = retrieve(store, bench.question_features(j), mode=mode, budget=16, emb=emb)
            assert all(recall_at_k(layer, clue) == 1.0 for layer in res.layers), (mode, j)
