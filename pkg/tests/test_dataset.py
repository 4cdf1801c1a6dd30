import numpy as np
import pytest

from more import dataset as D
from more.dataset import StudyRecord


def rec(subject, study, modality, date, **kw):
    return StudyRecord(subject, study, modality, float(date), **kw)


# -- matching ------------------------------------------------------------------------
def test_all_permutations():
    xs = [rec("s1", f"x{i}", "xray", 10) for i in range(2)]
    es = [rec("s1", f"e{i}", "ecg", 10) for i in range(3)]
    pairs = D.match_pairs(xs, es)
    assert len(pairs) == 6
    assert [(p.study_id_x, p.study_id_e) for p in pairs] == [(x, e) for x in ("x0", "x1") for e in ("e0", "e1", "e2")]


def test_gap_boundary():
    xs = [rec("s1", "x", "xray", 0)]
    assert len(D.match_pairs(xs, [rec("s1", "e", "ecg", 60)])) == 1
    assert D.match_pairs(xs, [rec("s1", "e", "ecg", 61)]) == []
    assert D.match_pairs(xs, [rec("s1", "e", "ecg", 4)], max_gap_days=3) == []


def test_missing_modality_yields_nothing():
    assert D.match_pairs([rec("s1", "x", "xray", 0)], [rec("s2", "e", "ecg", 0)]) == []


def test_match_pairs_brute_force():
    rng = np.random.default_rng(0)
    xs, es = [], []
    for s in range(50):
        for j in range(rng.integers(0, 4)):
            xs.append(rec(f"s{s:02d}", f"x{s}_{j}", "xray", rng.integers(0, 200)))
        for j in range(rng.integers(0, 4)):
            es.append(rec(f"s{s:02d}", f"e{s}_{j}", "ecg", rng.integers(0, 200)))
    rng.shuffle(xs)
    rng.shuffle(es)
    expected = []
    for x in xs:
        for e in es:
            if x.subject_id == e.subject_id and abs(x.study_date - e.study_date) <= 60:
                expected.append((x.subject_id, x.study_id, e.study_id))
    got = [(p.subject_id, p.study_id_x, p.study_id_e) for p in D.match_pairs(xs, es)]
    assert got == sorted(expected)


# -- notes ---------------------------------------------------------------------------
def test_synthesize_note():
    assert D.synthesize_note({"Cardiomegaly": 1}) == "Finding of Cardiomegaly"
    assert D.synthesize_note({"Edema": -1}) == "Uncertain Finding of Edema"
    assert (
        D.synthesize_note({"Pleural Effusion": -1, "Cardiomegaly": 1})
        == "Finding of Cardiomegaly, Uncertain Finding of Pleural Effusion"
    )
    with pytest.raises(D.EmptyNoteError):
        D.synthesize_note({"Edema": 0})


def test_clean_report_xray():
    raw = "FINDINGS: Clear lungs.\n\nIMPRESSION:  No acute disease."
    assert D.clean_report(raw, "xray") == "Clear lungs. No acute disease."
    assert D.clean_report("HISTORY: cough\nIMPRESSION: Normal @@@ study.", "xray") == "Normal study."


def test_clean_report_ecg_first_seven_fields():
    fields = [f"field{i}" for i in range(1, 10)]
    assert D.clean_report(fields, "ecg") == " ".join(fields[:7])
    assert D.clean_report("\n".join(fields), "ecg") == " ".join(fields[:7])


# -- tokenizer -----------------------------------------------------------------------
def test_tokenizer_rules():
    tok = D.build_tokenizer(["a a b"], min_freq=2)
    assert "a" in tok.stoi and "b" not in tok.stoi
    assert tok.encode("b") == [tok.unk_id]
    tok = D.build_tokenizer(["Finding of Edema. sinus rhythm"])
    text = "Finding of Edema . sinus rhythm"
    assert tok.decode(tok.encode("Finding of  Edema. sinus rhythm")) == text
    with pytest.raises(ValueError):
        D.build_tokenizer([])


def test_tokenizer_stable_and_serialisable():
    corpus = ["b a c", "a d"]
    a, b = D.build_tokenizer(corpus), D.build_tokenizer(corpus)
    assert a.itos == b.itos
    assert D.Tokenizer.from_text(a.to_text()).itos == a.itos


def test_join_reports():
    tok = D.build_tokenizer(["a b"])
    assert D.join_reports("a", "b", tok) == [tok.cls_id, tok.stoi["a"], tok.sep_id, tok.stoi["b"], tok.sep_id]
    assert D.join_reports("a", "", tok) == [tok.cls_id, tok.stoi["a"], tok.sep_id, tok.sep_id]
    ids = D.join_reports(" ".join(["a"] * 400), " ".join(["b"] * 200), tok)
    assert len(ids) == 512 and ids.count(tok.sep_id) == 2 and ids[-1] == tok.sep_id


def test_pad_batch():
    ids, valid = D.pad_batch([[5, 6, 7], [8]])
    assert ids.tolist() == [[5, 6, 7], [8, 0, 0]]
    assert valid.tolist() == [[True, True, True], [True, False, False]]


# -- synthetic generator -------------------------------------------------------------
@pytest.fixture(scope="module")
def synth():
    return D.gen_synthetic_triples(3, 100, seed=0)


def test_synthetic_counts(synth):
    assert len(synth) == 300
    assert np.bincount(synth.labels).tolist() == [100, 100, 100]
    s = synth.samples[0]
    assert s.image.pixels.shape == (64, 64) and s.ecg.leads.shape == (12, 5000)
    assert synth.classes[s.label] in s.xray_note and synth.classes[s.label] in s.ecg_note


def test_synthetic_deterministic(synth):
    other = D.gen_synthetic_triples(3, 100, seed=0)
    for a, b in zip(synth.samples[:20], other.samples[:20]):
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.ecg.leads, b.ecg.leads, equal_nan=True)
        assert a.xray_note == b.xray_note and a.ecg_note == b.ecg_note


def test_synthetic_images_linearly_separable(synth):
    X = np.stack([s.image.pixels.ravel() for s in synth.samples])
    X = np.hstack([X, np.ones((len(X), 1))])
    Y = np.eye(3)[synth.labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    assert np.mean(np.argmax(X @ W, axis=1) == synth.labels) > 0.95


def test_motif_masks_are_class_specific(synth):
    # jitter is at most 3 px while the mask radius is about 6 px, so the nominal centre is always covered
    for i, s in enumerate(synth.samples):
        for k in range(3):
            cy, cx = D.motif_center(k, 64)
            assert synth.motif_masks[i][cy, cx] == (k == s.label)


def test_manifest_round_trip(tmp_path, synth):
    samples = synth.samples[:6]
    path = D.save_dataset(tmp_path, samples)
    back = D.read_manifest(path)
    for a, b in zip(samples, back):
        assert (a.xray_note, a.ecg_note, a.labels, a.gap_days, a.subject_id) == (
            b.xray_note, b.ecg_note, b.labels, b.gap_days, b.subject_id,
        )
        assert np.array_equal(a.image.pixels, b.image.pixels)
        assert np.array_equal(a.ecg.leads, b.ecg.leads, equal_nan=True)


def test_synthetic_gaps(synth):
    gaps = np.array([s.gap_days for s in synth.samples])
    assert gaps.min() >= 0 and gaps.max() <= D.DEFAULT_MAX_GAP_DAYS
    near = np.mean(gaps <= D.FUSED_MAX_GAP_DAYS)
    assert 0.4 < near < 0.6
