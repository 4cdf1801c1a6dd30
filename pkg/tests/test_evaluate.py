import numpy as np
import pytest

from more import evaluate as E
from more.formats import read_tsv
from oracles import auprc_thresholds, auroc_pairwise, precision_at_k_sorted, random_fixture


# -- auroc ----------------------------------------------------------------------------------
def test_auroc_example():
    assert E.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


@pytest.mark.parametrize("ties", [False, True])
def test_auroc_matches_pairwise(ties):
    rng = np.random.default_rng(int(ties))
    for _ in range(50):
        s, y = random_fixture(rng, ties=ties)
        assert E.auroc(s, y) == auroc_pairwise(s.tolist(), y.tolist())


def test_auroc_invariances():
    rng = np.random.default_rng(3)
    s, y = random_fixture(rng, 30)
    assert E.auroc(np.exp(s), y) == E.auroc(s, y)
    assert abs(E.auroc(s, y) + E.auroc(-s, y) - 1.0) < 1e-15
    assert E.auroc(np.zeros(6), [0, 1, 0, 1, 1, 0]) == 0.5


def test_auroc_single_class():
    with pytest.raises(E.MetricError):
        E.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        E.auroc([0.1, np.nan], [0, 1])


# -- auprc ----------------------------------------------------------------------------------
def test_auprc_examples():
    assert E.auprc([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert E.auprc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    with pytest.raises(E.MetricError):
        E.auprc([0.3, 0.2], [0, 0])


@pytest.mark.parametrize("ties", [False, True])
def test_auprc_matches_threshold_sweep(ties):
    rng = np.random.default_rng(10 + ties)
    for _ in range(50):
        s, y = random_fixture(rng, ties=ties)
        assert abs(E.auprc(s, y) - auprc_thresholds(s.tolist(), y.tolist())) < 1e-12


# -- precision@k and retrieval --------------------------------------------------------------
def test_precision_at_k_matches_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, c = rng.normal(size=(6, 5)), rng.normal(size=(30, 5))
        ql, cl = rng.integers(0, 3, 6), rng.integers(0, 3, 30)
        k = int(rng.integers(1, 11))
        got = E.precision_at_k(q, c, ql, cl, k)
        assert abs(got - precision_at_k_sorted(q.tolist(), c.tolist(), ql.tolist(), cl.tolist(), k)) < 1e-12


def test_precision_at_k_rotation_invariant():
    rng = np.random.default_rng(1)
    q, c = rng.normal(size=(5, 4)), rng.normal(size=(20, 4))
    ql, cl = rng.integers(0, 2, 5), rng.integers(0, 2, 20)
    Q = np.linalg.qr(rng.normal(size=(4, 4)))[0]
    assert E.precision_at_k(q @ Q, c @ Q, ql, cl, 5) == E.precision_at_k(q, c, ql, cl, 5)


def test_precision_at_k_errors():
    with pytest.raises(ValueError):
        E.precision_at_k(np.ones((1, 2)), np.ones((3, 2)), [0], [0, 0, 0], 0)
    with pytest.raises(ValueError):
        E.precision_at_k(np.ones((1, 2)), np.ones((3, 2)), [0], [0, 0, 0], 4)


def test_retrieve_brute_force():
    rng = np.random.default_rng(2)
    corpus, query = rng.normal(size=(100, 8)), rng.normal(size=8)
    ids = [f"c{i}" for i in range(100)]
    got = E.retrieve(query, corpus, 10, ids)
    cos = corpus @ query / (np.linalg.norm(corpus, axis=1) * np.linalg.norm(query))
    assert [i for i, _ in got] == [ids[j] for j in np.argsort(-cos)[:10]]
    assert all(abs(s - cos[int(i[1:])]) < 1e-12 for i, s in got)
    perm = rng.permutation(100)
    again = E.retrieve(query, corpus[perm], 10, [ids[j] for j in perm])
    assert [i for i, _ in again] == [i for i, _ in got]
    assert len(E.retrieve(query, corpus[:3], 10)) == 3


# -- zero-shot and fusion -------------------------------------------------------------------
def bank_from(vectors):
    classes = list(vectors)
    emb = {c: np.asarray(v, dtype=float) / np.linalg.norm(v, axis=-1, keepdims=True) for c, v in vectors.items()}
    return E.PromptBank(classes, {c: [f"Finding of {c}"] * len(np.atleast_2d(emb[c])) for c in classes}, emb)


def test_zero_shot_scores():
    bank = bank_from({"a": [[1.0, 0.0]], "b": [[0.0, 1.0], [1.0, 1.0]]})
    s = E.zero_shot_classify(np.array([[2.0, 0.0], [0.0, 3.0]]), bank)
    assert np.allclose(s, [[1.0, np.sqrt(0.5)], [0.0, 1.0]], atol=1e-15)
    assert np.argmax(s, axis=1).tolist() == [0, 1]


def test_prompt_bank_validation():
    with pytest.raises(ValueError):
        E.PromptBank([], {})
    with pytest.raises(ValueError):
        E.PromptBank(["a"], {"a": ["p"]}, {"a": np.array([[2.0, 0.0]])})
    with pytest.raises(ValueError):
        E.PromptBank(["a"], {"a": []})


def test_fused_inference():
    x, e = np.array([0.2, 0.9]), np.array([0.6, 0.1])
    assert np.array_equal(E.fused_inference(x, e, 1.0), x)
    assert np.array_equal(E.fused_inference(x, e, 0.0), e)
    assert abs(E.fused_inference(0.2, 0.6) - 0.4) < 1e-15
    with pytest.raises(E.UnmatchedPairError):
        E.fused_inference(x, e, gap_days=[1, 4])
    with pytest.raises(E.UnmatchedPairError):
        E.fused_inference(x, e[:1])
    with pytest.raises(ValueError):
        E.fused_inference(x, e, 1.5)


def test_per_class_auroc():
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.4], [0.1, 0.6]])
    out = E.per_class_auroc(scores, np.array([0, 1, 0, 1]), ["a", "b"])
    assert out == {"a": 1.0, "b": 1.0}


def test_tsv_writers(tmp_path):
    E.write_metrics_tsv(tmp_path / "m.tsv", [("auroc", "a", 0.5)])
    header, rows = read_tsv(tmp_path / "m.tsv")
    assert header == ["metric", "class", "value"] and rows == [{"metric": "auroc", "class": "a", "value": "0.5"}]
    E.write_retrieval_tsv(tmp_path / "r.tsv", [("q", 1, "c3", 0.25, True)])
    header, rows = read_tsv(tmp_path / "r.tsv")
    assert header[-1] == "label_match" and rows[0]["label_match"] == "1"
