import numpy as np
import pytest

from amd_motion.conditioning import embed_text
from amd_motion.corpus import (CorpusError, MOTIFS, MotifSpec, all_texts, chains, corpus_fingerprint,
                               generate_corpus, load_corpus, parse_text, save_corpus, split_corpus)
from amd_motion.motion_repr import CONTACT, ROT6D, detect_foot_contacts, recover_positions, validate_clip


def test_deterministic():
    a, b = generate_corpus(8, seed=1), generate_corpus(8, seed=1)
    assert corpus_fingerprint(a) == corpus_fingerprint(b)
    assert corpus_fingerprint(a) != corpus_fingerprint(generate_corpus(8, seed=2))


def test_pair_fraction_count():
    assert sum(r.prev_id is not None for r in generate_corpus(8, seed=1).records) == 4
    assert sum(r.prev_id is not None for r in generate_corpus(100, seed=3).records) == 50


def test_clips_valid_and_contacts_reproduce(small_corpus):
    for r in small_corpus.records:
        validate_clip(r.clip)
        pose = recover_positions(r.clip)
        np.testing.assert_array_equal(r.clip.frames[:, CONTACT], detect_foot_contacts(pose, fps=small_corpus.fps))
        assert r.n_frames % 4 == 0 and 40 <= r.n_frames <= 200


def test_contacts_are_informative(small_corpus):
    c = np.concatenate([r.clip.frames[:, CONTACT] for r in small_corpus.records])
    assert 0.05 < c.mean() < 0.95


def test_kick_matches_analytic_burst():
    corpus = generate_corpus(60, seed=7, motifs=["kick_left", "wave"])
    kicks = [r for r in corpus.records if r.motif == "kick_left" and r.prev_id is None]
    assert kicks
    for r in kicks:
        n = r.n_frames
        u = np.arange(n) / (n - 1)
        theta = -1.2 * r.amplitude * np.sin(np.pi * u) ** 2
        # left hip is joint 1; its local rotation is a pure pitch, so the second column of the
        # rotation matrix is (0, cos, sin)
        six = r.clip.frames[:, ROT6D.start:ROT6D.start + 6]
        np.testing.assert_allclose(six[:, 4], np.cos(theta), atol=1e-6)
        np.testing.assert_allclose(six[:, 5], np.sin(theta), atol=1e-6)
        np.testing.assert_allclose(six[:, :3], np.tile([1, 0, 0], (n, 1)), atol=1e-6)


def test_texts_identify_motif(small_corpus):
    for r in small_corpus.records:
        assert parse_text(r.text)[0] == r.motif
    texts = all_texts()
    assert len(set(texts)) == len(texts) == len(MOTIFS) * 9
    emb = np.stack([embed_text(t) for t in texts])
    cos = emb @ emb.T
    np.fill_diagonal(cos, 0)
    assert cos.max() < 0.99


def test_motif_spec_validation():
    with pytest.raises(ValueError):
        MotifSpec("x", 42, 1.0, 1.0, (1,))
    with pytest.raises(ValueError):
        MotifSpec("x", 40, 0.0, 1.0, (1,))
    with pytest.raises(ValueError):
        MotifSpec("x", 40, 1.0, 1.0, ())


def test_generate_errors():
    with pytest.raises(ValueError):
        generate_corpus(8, motifs=[])
    with pytest.raises(ValueError):
        generate_corpus(1)


def test_save_load_roundtrip(tmp_path, small_corpus):
    save_corpus(small_corpus, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert corpus_fingerprint(back) == corpus_fingerprint(small_corpus)
    for a, b in zip(small_corpus.records, back.records):
        assert (a.id, a.text, a.prev_id, a.motif, a.amplitude) == (b.id, b.text, b.prev_id, b.motif, b.amplitude)
        assert a.clip == b.clip
    assert len(list((tmp_path / "c" / "clips").iterdir())) == len(small_corpus)


def test_truncated_clip_names_record(tmp_path, small_corpus):
    d = save_corpus(small_corpus, tmp_path / "c")
    victim = small_corpus.records[3].id
    p = d / "clips" / f"{victim}.amdm"
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CorpusError, match=victim):
        load_corpus(d)
    p.unlink()
    with pytest.raises(CorpusError, match=victim):
        load_corpus(d)


def test_malformed_meta(tmp_path, small_corpus):
    d = save_corpus(small_corpus, tmp_path / "c")
    (d / "corpus.meta").write_text("not json\n")
    with pytest.raises(CorpusError):
        load_corpus(d)


def test_refuses_to_clobber_other_dirs(tmp_path, small_corpus):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "keep.txt").write_text("hi")
    with pytest.raises(CorpusError):
        save_corpus(small_corpus, tmp_path / "x")


def test_split_sizes_default_ratio():
    c = generate_corpus(100, seed=3)
    s = split_corpus(c)
    assert (len(s.train), len(s.test), len(s.validation)) == (85, 10, 5)
    assert set(s.train) | set(s.test) | set(s.validation) == {r.id for r in c.records}
    assert not (set(s.train) & set(s.test)) and not (set(s.train) & set(s.validation))


def test_split_rejects_zero_ratio(small_corpus):
    with pytest.raises(ValueError):
        split_corpus(small_corpus, ratios=(1, 0, 0))


def test_split_too_small():
    with pytest.raises(ValueError):
        split_corpus(generate_corpus(4, seed=0))


def test_pairs_never_straddle():
    c = generate_corpus(100, seed=3)
    for seed in range(100):
        s = split_corpus(c, seed=seed)
        where = {i: k for k, ids in enumerate((s.train, s.test, s.validation)) for i in ids}
        for r in c.records:
            if r.prev_id:
                assert where[r.id] == where[r.prev_id]


def test_split_deterministic(small_corpus):
    assert split_corpus(small_corpus, seed=4) == split_corpus(small_corpus, seed=4)


def test_chains_cover_records(small_corpus):
    ids = [i for g in chains(small_corpus) for i in g]
    assert sorted(ids) == sorted(r.id for r in small_corpus.records)
