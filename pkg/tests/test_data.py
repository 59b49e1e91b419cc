import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from capkit.data import (
    ACTORS,
    ACTIONS,
    CAUSES,
    MEASURES,
    FeatureClip,
    RawAnnotation,
    SynthConfig,
    read_annotations_jsonl,
    read_features,
    read_samples_jsonl,
    restructure,
    synth_corpus,
    template_caption,
    template_signal,
    validate_dataset,
    write_features,
    write_samples_jsonl,
)
from capkit.errors import (
    BadMagic,
    BadVersion,
    DuplicateId,
    MissingField,
    NonFiniteValue,
    TruncatedFile,
    UnknownField,
)
from capkit.metrics import build_idf, cider_corpus
from capkit.textproc import normalize


# ---------------------------------------------------------------------------
# restructure

def _raw(i="c1", texts="lead vehicle stops", causes="short braking distance", measures="keep distance"):
    return RawAnnotation(id=i, texts=texts, causes=causes, measures=measures)


def test_restructure_merges_fields():
    (s,) = restructure([_raw()])
    assert s.description.raw == "lead vehicle stops; short braking distance"
    assert s.avoidance.raw == "keep distance"
    assert s.description.role == "description"
    assert s.avoidance.role == "avoidance"


def test_restructure_empty_measures_allowed():
    (s,) = restructure([_raw(measures="")])
    assert s.avoidance.raw == ""
    assert s.avoidance.tokens == ()


def test_restructure_duplicate_id():
    with pytest.raises(DuplicateId):
        restructure([_raw(), _raw()])


def test_restructure_preserves_order():
    out = restructure([_raw(i="b"), _raw(i="a")])
    assert [s.id for s in out] == ["b", "a"]


@given(st.text(max_size=20), st.text(max_size=20), st.text(max_size=20))
def test_restructure_lossless(texts, causes, measures):
    (s,) = restructure([_raw(texts=texts, causes=causes, measures=measures)])
    assert s.description.raw == texts + "; " + causes
    assert s.avoidance.raw == measures


def test_annotation_missing_field():
    with pytest.raises(MissingField):
        RawAnnotation.from_dict({"id": "x", "texts": "t", "causes": "c"})


def test_annotation_unknown_field():
    with pytest.raises(UnknownField):
        RawAnnotation.from_dict(
            {"id": "x", "texts": "t", "causes": "c", "measures": "m", "Texts": "t"}
        )


def test_annotation_empty_id():
    with pytest.raises(MissingField):
        RawAnnotation.from_dict({"id": "", "texts": "t", "causes": "c", "measures": "m"})


# ---------------------------------------------------------------------------
# feature files

def _clip(data=None, cid="clip0"):
    if data is None:
        data = np.arange(12, dtype=np.float32).reshape(3, 4)
    return FeatureClip(id=cid, data=np.asarray(data, dtype=np.float32))


def test_feature_round_trip(tmp_path):
    path = os.path.join(tmp_path, "c.avdf")
    clip = _clip()
    write_features(clip, path)
    back = read_features(path)
    assert back.id == clip.id
    assert back.T == 3 and back.D == 4
    assert back.data.tobytes() == clip.data.tobytes()


def test_feature_round_trip_subnormals(tmp_path):
    tiny = np.float32(1e-45)  # smallest subnormal float32
    clip = _clip(np.full((2, 2), tiny))
    path = os.path.join(tmp_path, "c.avdf")
    write_features(clip, path)
    assert read_features(path).data.tobytes() == clip.data.tobytes()


def test_feature_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "c.avdf")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 20)
    with pytest.raises(BadMagic):
        read_features(path)


def test_feature_bad_version(tmp_path):
    path = os.path.join(tmp_path, "c.avdf")
    write_features(_clip(), path)
    blob = bytearray(open(path, "rb").read())
    blob[4] = 9
    open(path, "wb").write(bytes(blob))
    with pytest.raises(BadVersion):
        read_features(path)


def test_feature_truncated(tmp_path):
    path = os.path.join(tmp_path, "c.avdf")
    write_features(_clip(), path)
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-5])
    with pytest.raises(TruncatedFile):
        read_features(path)


def test_feature_nonfinite_write():
    clip = _clip(np.array([[np.nan, 1.0]], dtype=np.float32))
    with pytest.raises(NonFiniteValue):
        write_features(clip, os.devnull)


def test_feature_nonfinite_read(tmp_path):
    path = os.path.join(tmp_path, "c.avdf")
    write_features(_clip(np.ones((1, 1))), path)
    blob = bytearray(open(path, "rb").read())
    blob[-4:] = np.array([np.inf], dtype="<f4").tobytes()
    open(path, "wb").write(bytes(blob))
    with pytest.raises(NonFiniteValue):
        read_features(path)


# ---------------------------------------------------------------------------
# synthetic corpus

def test_synth_noiseless_features_deterministic_by_template():
    corpus = synth_corpus(SynthConfig(n_clips=60, noise_std=0.0, seed=1))
    by_factors = {}
    for cid, fac in corpus.factors.items():
        key = fac
        data = corpus.clips[cid].data
        if key in by_factors:
            assert np.array_equal(by_factors[key], data)
        else:
            by_factors[key] = data


def test_synth_same_seed_identical():
    a = synth_corpus(SynthConfig(n_clips=30, seed=5))
    b = synth_corpus(SynthConfig(n_clips=30, seed=5))
    assert a.split == b.split
    assert [s.description.raw for s in a.samples] == [s.description.raw for s in b.samples]
    for cid in a.clips:
        assert np.array_equal(a.clips[cid].data, b.clips[cid].data)


def test_synth_caption_vocabulary_closed():
    allowed = set()
    for phrase in ACTORS + ACTIONS + CAUSES + MEASURES + ("the", "should"):
        allowed.update(normalize(phrase))
    corpus = synth_corpus(SynthConfig(n_clips=100, seed=2))
    for s in corpus.samples:
        assert set(s.description.tokens) <= allowed
        assert set(s.avoidance.tokens) <= allowed


def test_synth_split_disjoint_and_covering():
    corpus = synth_corpus(SynthConfig(n_clips=100, seed=3))
    tr, va, te = (set(corpus.split[k]) for k in ("train", "val", "test"))
    assert len(tr) == 80 and len(va) == 10 and len(te) == 10
    assert not (tr & va) and not (tr & te) and not (va & te)
    assert tr | va | te == {s.id for s in corpus.samples}


def test_synth_template_lookup_oracle_solves_noiseless_corpus():
    """Nearest one-hot template decoding reaches CIDEr-D >= 9.5 with no noise."""
    corpus = synth_corpus(SynthConfig(n_clips=120, noise_std=0.0, seed=4))
    refs = [s.description.tokens for s in corpus.samples]
    idf = build_idf(refs)
    templates = [
        (a, b, c)
        for a in range(len(ACTORS))
        for b in range(len(ACTIONS))
        for c in range(len(CAUSES))
    ]
    signals = np.array([template_signal(*t, 16) for t in templates])
    hyps = []
    for s in corpus.samples:
        pooled = corpus.clips[s.id].data.mean(axis=0)
        best = int(np.argmin(((signals - pooled) ** 2).sum(axis=1)))
        desc, _ = template_caption(*templates[best])
        hyps.append(tuple(normalize(desc)))
    assert cider_corpus(hyps, refs, idf) >= 9.5


# ---------------------------------------------------------------------------
# validation + jsonl

def _write_corpus(tmp_path, n=5):
    corpus = synth_corpus(SynthConfig(n_clips=n, seed=0))
    os.makedirs(os.path.join(tmp_path, "features"), exist_ok=True)
    index = {}
    for cid, clip in corpus.clips.items():
        rel = f"features/{cid}.avdf"
        write_features(clip, os.path.join(tmp_path, rel))
        index[cid] = rel
    return corpus, index


def test_validate_consistent(tmp_path):
    corpus, index = _write_corpus(tmp_path)
    rep = validate_dataset(corpus.samples, index, base_dir=str(tmp_path))
    assert rep.missing_features == rep.empty_captions == rep.nonfinite_features == 0
    assert rep.ok


def test_validate_missing_file(tmp_path):
    corpus, index = _write_corpus(tmp_path)
    os.remove(os.path.join(tmp_path, index[corpus.samples[0].id]))
    rep = validate_dataset(corpus.samples, index, base_dir=str(tmp_path))
    assert rep.missing_features == 1
    assert not rep.ok


def test_validate_nonfinite(tmp_path):
    corpus, index = _write_corpus(tmp_path)
    path = os.path.join(tmp_path, index[corpus.samples[0].id])
    blob = bytearray(open(path, "rb").read())
    blob[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    open(path, "wb").write(bytes(blob))
    rep = validate_dataset(corpus.samples, index, base_dir=str(tmp_path))
    assert rep.nonfinite_features == 1
    assert rep.ok  # still readable; only missing files fail validation


def test_samples_jsonl_round_trip(tmp_path):
    corpus, _ = _write_corpus(tmp_path)
    path = os.path.join(tmp_path, "samples.jsonl")
    write_samples_jsonl(corpus.samples, path)
    back = read_samples_jsonl(path)
    assert [s.id for s in back] == [s.id for s in corpus.samples]
    assert [s.description.raw for s in back] == [s.description.raw for s in corpus.samples]


def test_annotations_jsonl(tmp_path):
    path = os.path.join(tmp_path, "ann.jsonl")
    with open(path, "w") as f:
        f.write(json.dumps({"id": "a", "texts": "t", "causes": "c", "measures": "m"}) + "\n")
    (raw,) = read_annotations_jsonl(path)
    assert raw == RawAnnotation(id="a", texts="t", causes="c", measures="m")
