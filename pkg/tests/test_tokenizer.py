import pytest

from mdrg.tokenizer import (
    BASE_VOCAB,
    DST,
    EOS,
    PAD,
    SEP,
    TokenizerError,
    Vocab,
    train_vocab,
)

A = 4 + ord("a")
B = 4 + ord("b")


def test_first_merge_is_most_frequent_pair():
    # "aaab" has pairs (a,a) x2 and (a,b) x1 per line; two lines double that.
    v = train_vocab(["aaab", "aaab"], BASE_VOCAB + 1)
    assert v.merges == [(A, A)]


def test_no_merges_when_target_is_base_size():
    v = train_vocab(["x"], BASE_VOCAB)
    assert v.merges == []


def test_training_stops_when_no_pair_repeats():
    # Every pair occurs once; no merge is allowed even with head room.
    v = train_vocab(["abc"], BASE_VOCAB + 8)
    assert v.merges == []


def test_tie_breaks_lexicographically():
    # (a,b) and (b,a) both occur twice in "abab"; "ab" < "ba".
    v = train_vocab(["abab"], BASE_VOCAB + 1)
    assert v.merges == [(A, B)]


def test_determinism_byte_identical():
    corpus = ["the cat sat", "the dog sat", "a cat ran"]
    v1 = train_vocab(corpus, 300)
    v2 = train_vocab(corpus, 300)
    assert v1.to_json() == v2.to_json()


def test_round_trip_on_training_corpus():
    corpus = ["hello world", "hej världen", "你好", "mixed 123 !?"]
    v = train_vocab(corpus, 300)
    for line in corpus:
        assert v.decode(v.encode(line)) == line


def test_encode_empty_is_empty():
    v = train_vocab(["abc"], BASE_VOCAB)
    assert v.encode("") == []


def test_special_ids_never_come_from_raw_text():
    v = train_vocab(["[DST] [SEP] [EOS] [PAD]"] * 3, 280)
    ids = v.encode("[DST] [SEP] [EOS] [PAD]")
    assert all(i >= 4 for i in ids)
    assert v.decode(ids) == "[DST] [SEP] [EOS] [PAD]"


def test_decode_specials_render_as_markers():
    v = train_vocab(["abc"], BASE_VOCAB)
    assert v.decode([]) == ""
    assert v.decode([SEP]) == "[SEP]"
    assert v.decode([DST]) == "[DST]"
    assert v.decode([EOS]) == "[EOS]"
    assert v.decode([PAD]) == ""
    assert v.decode([SEP, A, PAD, B]) == "[SEP]ab"


def test_decode_rejects_out_of_range():
    v = train_vocab(["abc"], BASE_VOCAB)
    with pytest.raises(TokenizerError):
        v.decode([v.size])


def test_empty_corpus_rejected():
    with pytest.raises(TokenizerError):
        train_vocab([], 300)


def test_target_below_base_rejected():
    with pytest.raises(TokenizerError):
        train_vocab(["abc"], BASE_VOCAB - 1)


def test_json_round_trip(tmp_path):
    corpus = ["the cat sat on the mat"] * 4
    v = train_vocab(corpus, 280)
    path = tmp_path / "vocab.json"
    v.save(str(path))
    v2 = Vocab.load(str(path))
    assert v2.to_json() == v.to_json()
    assert v2.encode("the cat") == v.encode("the cat")


def test_json_schema_fields(tmp_path):
    import json

    v = train_vocab(["aaab"] * 2, BASE_VOCAB + 1)
    doc = json.loads(v.to_json())
    assert doc["version"] == 1
    assert doc["alphabet_size"] == 256
    assert doc["specials"] == ["[SEP]", "[DST]", "[EOS]", "[PAD]"]
    assert doc["merges"] == [[A, A]]


def test_json_version_and_specials_validated():
    v = train_vocab(["abc"], BASE_VOCAB)
    import json

    doc = json.loads(v.to_json())
    doc["version"] = 9
    with pytest.raises(TokenizerError):
        Vocab.from_json(json.dumps(doc))


def test_merges_apply_in_training_order():
    # After training, re-encoding a corpus line reproduces the fully merged
    # sequence the trainer ended with.
    corpus = ["aaaa aaaa", "aaaa aaaa"]
    v = train_vocab(corpus, 280)
    ids = v.encode("aaaa aaaa")
    assert v.decode(ids) == "aaaa aaaa"
    # merged tokens should compress the run of 'a's
    assert len(ids) < len("aaaa aaaa")
