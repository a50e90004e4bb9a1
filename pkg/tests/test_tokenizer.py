import functools
import json

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from neural_reserve.tokenizer import (
    VocabError,
    build_vocab,
    byte_level_vocab,
    bytes_to_unicode,
    load_vocab,
)

from helpers import DATA

TOK = DATA / "tokenizer"


@pytest.fixture(scope="module")
def vocab():
    return load_vocab(TOK / "tiny-vocab.json", TOK / "tiny-merges.txt")


@pytest.fixture(scope="module")
def golden():
    with open(TOK / "golden.jsonl", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


@pytest.fixture(scope="module")
def reference():
    tokenizers = pytest.importorskip("tokenizers")
    from tokenizers import decoders, models, pre_tokenizers

    tok = tokenizers.Tokenizer(models.BPE.from_file(str(TOK / "tiny-vocab.json"),
                                                    str(TOK / "tiny-merges.txt")))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False, use_regex=True)
    tok.decoder = decoders.ByteLevel()
    return tok


def test_golden_corpus_has_100_sentences(golden):
    assert len(golden) == 100


def test_matches_golden_encodings(vocab, golden):
    mismatched = [r["text"] for r in golden if vocab.encode(r["text"]) != r["ids"]]
    assert mismatched == []


@settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.text(max_size=60))
def test_matches_reference_on_random_text(vocab, reference, text):
    assert vocab.encode(text) == reference.encode(text).ids


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=80))
def test_roundtrip_random_unicode(text):
    v = _shared_vocab()
    assert v.decode(v.encode(text)) == text


@functools.lru_cache(maxsize=1)
def _shared_vocab():
    return load_vocab(TOK / "tiny-vocab.json", TOK / "tiny-merges.txt")


def test_roundtrip_cleaned_transcript_text(vocab):
    text = "the boy is taking a cookie . she's washing the plate . water on the floor ?"
    assert vocab.decode(vocab.encode(text)) == text


def test_empty(vocab):
    assert vocab.encode("") == []
    assert vocab.decode([]) == ""


def test_decode_out_of_range(vocab):
    with pytest.raises(IndexError):
        vocab.decode([vocab.size])
    with pytest.raises(IndexError):
        vocab.decode([-1])


def test_end_of_text_is_not_special(vocab):
    ids = vocab.encode("<|endoftext|>")
    assert vocab.eos_id not in ids
    assert vocab.decode(ids) == "<|endoftext|>"


def test_byte_table_is_bijection():
    table = bytes_to_unicode()
    assert sorted(table) == list(range(256))
    assert len(set(table.values())) == 256


def test_no_merges_gives_byte_singletons():
    v = byte_level_vocab()
    text = "héllo 🍪"
    assert v.encode(text) == list(text.encode("utf-8"))


def test_pre_split_contractions_and_spaces():
    import regex

    from neural_reserve.tokenizer import GPT2_SPLIT_PATTERN

    assert regex.findall(GPT2_SPLIT_PATTERN, "she's  here 42!") == ["she", "'s", " ", " here", " 42", "!"]


def _base_encoder():
    return {c: i for i, c in enumerate(bytes_to_unicode().values())}


def test_duplicate_id_rejected():
    enc = _base_encoder()
    enc["ab"] = 0
    with pytest.raises(VocabError, match="duplicate id"):
        build_vocab(enc, [])


def test_duplicate_key_rejected(tmp_path):
    body = ", ".join(f"{json.dumps(k)}: {v}" for k, v in _base_encoder().items())
    (tmp_path / "v.json").write_text("{" + body + ', "a": 5}', encoding="utf-8")
    (tmp_path / "m.txt").write_text("#version: 0.2\n", encoding="utf-8")
    with pytest.raises(VocabError):
        load_vocab(tmp_path / "v.json", tmp_path / "m.txt")


def test_malformed_json_rejected(tmp_path):
    (tmp_path / "v.json").write_text("{not json", encoding="utf-8")
    (tmp_path / "m.txt").write_text("", encoding="utf-8")
    with pytest.raises(VocabError, match="malformed"):
        load_vocab(tmp_path / "v.json", tmp_path / "m.txt")


def test_merge_with_unknown_symbol_rejected():
    enc = _base_encoder()
    with pytest.raises(VocabError, match="unknown symbol"):
        build_vocab(enc, [("a", "b")])


def test_merge_header_skipped(tmp_path):
    enc = _base_encoder()
    enc["ab"] = len(enc)
    (tmp_path / "v.json").write_text(json.dumps(enc), encoding="utf-8")
    (tmp_path / "m.txt").write_text("#version: 0.2\na b\n", encoding="utf-8")
    v = load_vocab(tmp_path / "v.json", tmp_path / "m.txt")
    assert v.encode("ab") == [enc["ab"]]
