import json

import numpy as np
import pytest

from cuprosody.corpus import (
    Corpus, Lexicon, ManifestRecord, PhonemeInventory, SyntheticSpec, context_blind_floor,
    g2p, generate_synthetic, parse_manifest, split, write_manifest,
)
from cuprosody.errors import InvalidInputError, NotFoundError


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def test_parse_three_records(tmp_path):
    rows = [{"paragraph_id": "p", "sentence_index": i, "text": f"s{i}"} for i in (2, 0, 1)]
    write_jsonl(tmp_path / "m.jsonl", rows)
    corpus = parse_manifest(tmp_path / "m.jsonl")
    assert [r.sentence_index for r in corpus.paragraph("p")] == [0, 1, 2]
    assert [r.text for r in corpus.paragraph("p")] == ["s0", "s1", "s2"]


def test_parse_gap_rejected(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [{"paragraph_id": "p", "sentence_index": i, "text": "x"} for i in (0, 2)])
    with pytest.raises(InvalidInputError):
        parse_manifest(tmp_path / "m.jsonl")


def test_parse_duplicate_rejected(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [{"paragraph_id": "p", "sentence_index": 0, "text": "x"}] * 2)
    with pytest.raises(InvalidInputError):
        parse_manifest(tmp_path / "m.jsonl")


def test_parse_missing_field(tmp_path):
    write_jsonl(tmp_path / "m.jsonl", [{"paragraph_id": "p", "text": "x"}])
    with pytest.raises(InvalidInputError):
        parse_manifest(tmp_path / "m.jsonl")


def test_manifest_round_trip_bytes(tmp_path):
    rows = [
        {"paragraph_id": "a", "sentence_index": 0, "text": "Who called Mary?", "language": "en"},
        {"paragraph_id": "a", "sentence_index": 1, "text": "Tom called Mary.", "language": "en",
         "audio_path": "wav/a1.wav"},
        {"paragraph_id": "b", "sentence_index": 0, "text": "你好", "language": "zh"},
    ]
    write_jsonl(tmp_path / "in.jsonl", rows)
    write_manifest(parse_manifest(tmp_path / "in.jsonl"), tmp_path / "once.jsonl")
    write_manifest(parse_manifest(tmp_path / "once.jsonl"), tmp_path / "twice.jsonl")
    assert (tmp_path / "once.jsonl").read_bytes() == (tmp_path / "twice.jsonl").read_bytes()


def test_unknown_paragraph():
    with pytest.raises(NotFoundError):
        Corpus([ManifestRecord("p", 0, "x")]).paragraph("q")


def big_corpus(n=450):
    return Corpus([ManifestRecord(f"p{i // 5}", i % 5, f"t{i}") for i in range(n)])


def test_split_sizes_and_disjoint():
    train, val, test = split(big_corpus(), seed=7)
    assert (len(val), len(test), len(train)) == (100, 100, 250)
    assert not (set(train) & set(val) or set(train) & set(test) or set(val) & set(test))


def test_split_deterministic():
    c = big_corpus()
    assert split(c, 3) == split(c, 3)
    assert split(c, 3) != split(c, 4)


def test_split_insufficient():
    with pytest.raises(InvalidInputError, match="insufficient"):
        split(big_corpus(150), 0)


# -- G2P -------------------------------------------------------------------

LEX = Lexicon({"tom": ("T", "AA1", "M"), "called": ("K", "AO1", "L", "D")})


def test_g2p_lexicon():
    assert g2p("tom", LEX).symbols == ("T", "AA1", "M")


def test_g2p_oov_letters():
    assert g2p("zzq", LEX).symbols == ("z", "z", "q")


def test_g2p_mixed_sentence():
    # hand application: lowercase, strip punctuation, lexicon hit / letter fallback per word
    assert g2p("Tom called Zed!", LEX).symbols == ("T", "AA1", "M", "K", "AO1", "L", "D", "z", "e", "d")


def test_g2p_mandarin_tones_distinct():
    lex = Lexicon({"妈": ("ma1",), "骂": ("ma4",), "中国": ("zhong1", "guo2")}, language="zh")
    assert g2p("妈", lex).symbols == ("m", "a1")
    assert g2p("骂", lex).symbols == ("m", "a4")
    seq = g2p("中国", lex)
    assert seq.symbols == ("zh", "ong1", "g", "uo2") and seq.tone_augmented
    inv = PhonemeInventory.from_lexicon(lex)
    assert inv.encode(g2p("妈", lex)) != inv.encode(g2p("骂", lex))


def test_g2p_empty_rejected():
    with pytest.raises(InvalidInputError):
        g2p("?!", LEX)


def test_lexicon_file_round_trip(tmp_path):
    LEX.save(tmp_path / "lex.txt")
    assert (tmp_path / "lex.txt").read_text().splitlines()[0] == "tom\tT AA1 M"
    assert Lexicon.load(tmp_path / "lex.txt").entries == LEX.entries


def test_inventory_rejects_unknown():
    with pytest.raises(InvalidInputError):
        PhonemeInventory(["A"]).encode(g2p("tom", LEX))


# -- synthetic corpus ------------------------------------------------------

def test_synthetic_k1_noiseless_equals_base():
    spec = SyntheticSpec.default(n_classes=1, noise_sigma=0.0)
    corpus = generate_synthetic(spec, 3, seed=0)
    for rec in corpus.records:
        phones = g2p(rec.text, spec.lexicon).symbols
        want = np.repeat(np.stack([spec.base_profiles[p] for p in phones]), spec.frames_per_phoneme, 0)
        np.testing.assert_array_equal(corpus.targets[rec.key], want.astype(np.float32))


def test_synthetic_k2_differs_by_shift_delta():
    spec = SyntheticSpec.default(n_classes=2, noise_sigma=0.0)
    corpus = generate_synthetic(spec, 40, seed=1)
    by_text = {}
    for rec in corpus.records:
        by_text.setdefault((rec.text, rec.neighbor_class), corpus.targets[rec.key])
    text = next(t for t, c in by_text if (t, 1 - c) in by_text)
    delta = by_text[(text, 1)].astype(np.float64) - by_text[(text, 0)]
    np.testing.assert_allclose(delta, np.broadcast_to(spec.class_shifts[1] - spec.class_shifts[0], delta.shape),
                               atol=1e-6)


def test_neighbor_class_is_previous_sentence_class():
    spec = SyntheticSpec.default()
    corpus = generate_synthetic(spec, 20, seed=2)
    cls = dict(zip(spec.sentences, spec.sentence_classes))
    for pid in corpus.paragraph_ids:
        recs = corpus.paragraph(pid)
        for prev, cur in zip(recs, recs[1:]):
            assert cur.neighbor_class == cls[prev.text]


def test_floor_matches_monte_carlo():
    """Empirical within-text variance of targets across neighbour classes."""
    spec = SyntheticSpec.default(noise_sigma=0.05)
    corpus = generate_synthetic(spec, 3000, seed=5)
    groups = {}
    for rec in corpus.records:
        groups.setdefault(rec.text, []).append(corpus.targets[rec.key].astype(np.float64))
    sq = n = 0
    for arrs in groups.values():
        stack = np.stack(arrs)
        sq += ((stack - stack.mean(0)) ** 2).sum()
        n += stack.size
    assert abs(sq / n - context_blind_floor(spec)) / context_blind_floor(spec) < 0.01


def test_floor_positive_iff_shifts_differ():
    assert context_blind_floor(SyntheticSpec.default(n_classes=1, noise_sigma=0.0)) == 0.0
    assert context_blind_floor(SyntheticSpec.default(n_classes=2, noise_sigma=0.0)) > 0.0


def test_synthetic_deterministic():
    spec = SyntheticSpec.default()
    a, b = generate_synthetic(spec, 5, seed=9), generate_synthetic(spec, 5, seed=9)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a.targets[k], b.targets[k]) for k in a.keys())


def test_spec_json_round_trip():
    spec = SyntheticSpec.default(n_classes=3)
    again = SyntheticSpec.from_json(spec.to_json())
    np.testing.assert_array_equal(again.class_shifts, spec.class_shifts)
    assert again.sentences == spec.sentences
    assert context_blind_floor(again) == context_blind_floor(spec)


def test_spec_rejects_duplicate_shifts():
    spec = SyntheticSpec.default()
    with pytest.raises(InvalidInputError):
        SyntheticSpec(np.zeros((2, 80)), spec.base_profiles, 2, 0.1, spec.sentences,
                      spec.sentence_classes, spec.lexicon)
