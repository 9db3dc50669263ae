import json

import pytest

from copyforge.exceptions import CorpusParseError, SlotIndexError
from copyforge.vocab import (
    BOS,
    EOS,
    PAD,
    UNK,
    Vocabulary,
    build_vocab,
    collate,
    copy_candidate_ratio,
    decode_ids,
    encode_example,
    load_jsonl,
    tokenize,
    vocab_coverage,
)


class TestTokenize:
    """Test the corpus tokenizer"""

    def test_score_kept_whole_and_period_split(self):
        assert tokenize("The Hawks won 142-139.") == ["the", "hawks", "won", "142-139", "."]

    def test_empty(self):
        assert tokenize("") == []

    def test_whitespace_collapse(self):
        assert tokenize("A  b") == ["a", "b"]

    def test_punctuation_standalone(self):
        assert tokenize('he said: "no" (twice)!') == ["he", "said", ":", '"', "no", '"', "(", "twice", ")", "!"]

    def test_hyphenated_name_single_token(self):
        assert tokenize("kalo-mizu scored 12 points") == ["kalo-mizu", "scored", "12", "points"]


class TestBuildVocab:
    """Test vocabulary construction"""

    def test_frequency_order(self):
        vocab = build_vocab([["a", "a", "b"]], max_size=6)
        assert vocab.lookup("a") == 4
        assert vocab.lookup("b") == 5

    def test_truncation(self):
        vocab = build_vocab([["a", "a", "b"]], max_size=5)
        assert "a" in vocab
        assert "b" not in vocab
        assert vocab.lookup("b") == UNK

    def test_empty_corpus_specials_only(self):
        vocab = build_vocab([], max_size=10)
        assert vocab.size == 4

    def test_ties_broken_lexicographically(self):
        vocab = build_vocab([["c", "b", "a"]], max_size=10)
        assert [vocab.token(i) for i in range(4, 7)] == ["a", "b", "c"]

    def test_min_freq(self):
        vocab = build_vocab([["a", "a", "b"]], max_size=10, min_freq=2)
        assert "a" in vocab
        assert "b" not in vocab

    def test_specials_fixed(self):
        vocab = Vocabulary(["x"])
        assert [vocab.token(i) for i in (PAD, UNK, BOS, EOS)] == ["<pad>", "<unk>", "<bos>", "<eos>"]
        assert "<unk>" not in vocab

    def test_save_load(self, tmp_path, toy_vocab):
        path = tmp_path / "vocab.txt"
        toy_vocab.save(path)
        assert path.read_text(encoding="utf-8") == "alpha\nbeta\ngamma\n"
        loaded = Vocabulary.load(path)
        assert loaded.id_to_token == toy_vocab.id_to_token


class TestEncodeExample:
    """Test extended-vocabulary encoding"""

    def test_worked_example(self):
        vocab = Vocabulary(["is", "new", "spreads"])
        ex = encode_example("covid spreads", "covid is new", vocab)
        spreads = vocab.lookup("spreads")
        assert ex.src_ids == [UNK, spreads]
        assert ex.oov_list == ["covid"]
        assert ex.src_ext_ids == [vocab.size, spreads]
        assert ex.copy_candidate == [True, False, False]
        assert ex.in_vocab == [False, True, True]
        assert ex.tgt_ext_ids == [BOS, vocab.size, vocab.lookup("is"), vocab.lookup("new"), EOS]
        assert ex.tgt_ids[0] == BOS and ex.tgt_ids[-1] == EOS

    def test_doubly_unknown_target(self, toy_vocab):
        ex = encode_example("alpha", "omega", toy_vocab)
        assert ex.tgt_ext_ids[1] == UNK
        assert ex.copy_candidate == [False]
        assert ex.in_vocab == [False]

    def test_identity_all_candidates(self, toy_vocab):
        ex = encode_example("alpha zeta beta", "alpha zeta beta", toy_vocab)
        assert all(ex.copy_candidate)

    def test_duplicate_source_oov_shares_id(self, toy_vocab):
        ex = encode_example("zeta alpha zeta eta", "eta", toy_vocab)
        assert ex.oov_list == ["zeta", "eta"]
        assert ex.src_ext_ids[0] == ex.src_ext_ids[2] == toy_vocab.size
        assert ex.src_ext_ids[3] == toy_vocab.size + 1
        assert ex.ext_size == toy_vocab.size + 2

    def test_three_case_partition_exhaustive(self, toy_vocab):
        ex = encode_example("alpha zeta beta", "zeta beta gamma omega alpha", toy_vocab)
        for t in range(len(ex.tgt_tokens)):
            assert ex.copy_candidate[t] or ex.in_vocab[t] or ex.tgt_ext_ids[t + 1] == UNK
            if ex.in_vocab[t]:
                assert ex.tgt_ext_ids[t + 1] == ex.tgt_ids[t + 1]

    def test_truncation(self, toy_vocab):
        ex = encode_example("alpha beta gamma", "alpha beta gamma", toy_vocab, max_src_len=2, max_tgt_len=1)
        assert ex.src_tokens == ["alpha", "beta"]
        assert ex.tgt_tokens == ["alpha"]
        assert ex.n_steps == 2


class TestDecodeIds:
    """Test extended ids back to tokens"""

    def test_oov_slot(self, toy_vocab):
        ids = [toy_vocab.lookup("alpha"), toy_vocab.size]
        assert decode_ids(ids, toy_vocab, ["covid"]) == ["alpha", "covid"]

    def test_bos_eos(self, toy_vocab):
        assert decode_ids([BOS, EOS], toy_vocab, []) == []

    def test_stops_at_eos(self, toy_vocab):
        assert decode_ids([toy_vocab.lookup("beta"), EOS, toy_vocab.lookup("alpha")], toy_vocab, []) == ["beta"]

    def test_out_of_range(self, toy_vocab):
        with pytest.raises(SlotIndexError):
            decode_ids([toy_vocab.size + 1], toy_vocab, ["covid"])

    def test_round_trip(self, toy_vocab):
        ex = encode_example("zeta beta", "beta zeta alpha", toy_vocab)
        assert decode_ids(ex.tgt_ext_ids, toy_vocab, ex.oov_list) == tokenize("beta zeta alpha")


class TestLoadJsonl:
    """Test corpus ingestion"""

    def test_one_line(self, tmp_path, toy_vocab):
        path = tmp_path / "c.jsonl"
        path.write_text(json.dumps({"src": "a b", "tgt": "a"}) + "\n", encoding="utf-8")
        examples = list(load_jsonl(path, toy_vocab))
        assert len(examples) == 1
        assert examples[0].src_tokens == ["a", "b"]

    def test_empty_file(self, tmp_path, toy_vocab):
        path = tmp_path / "c.jsonl"
        path.write_text("", encoding="utf-8")
        assert list(load_jsonl(path, toy_vocab)) == []

    def test_order_preserved(self, tmp_path, toy_vocab):
        path = tmp_path / "c.jsonl"
        lines = [json.dumps({"src": f"s{i}", "tgt": f"t{i}"}) for i in range(3)]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert [ex.tgt_tokens for ex in load_jsonl(path, toy_vocab)] == [["t0"], ["t1"], ["t2"]]

    def test_malformed_line_reports_number(self, tmp_path, toy_vocab):
        path = tmp_path / "c.jsonl"
        path.write_text('{"src": "a", "tgt": "b"}\n{"src": 1}\n', encoding="utf-8")
        stream = load_jsonl(path, toy_vocab)
        next(stream)
        with pytest.raises(CorpusParseError) as exc_info:
            next(stream)
        assert exc_info.value.line_number == 2

    def test_invalid_json(self, tmp_path, toy_vocab):
        path = tmp_path / "c.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        with pytest.raises(CorpusParseError):
            list(load_jsonl(path, toy_vocab))


class TestBatchHelpers:
    """Test padding and corpus statistics"""

    def test_collate_pads_and_masks(self, toy_vocab):
        short = encode_example("alpha", "alpha", toy_vocab)
        long = encode_example("alpha beta gamma", "beta", toy_vocab)
        batch = collate([short, long])
        assert batch[0].src_ids == [toy_vocab.lookup("alpha"), PAD, PAD]
        assert batch[0].mask == [True, False, False]
        assert batch[1].mask == [True, True, True]
        assert collate([]) == []

    def test_coverage(self, toy_vocab):
        type_cov, oov_rate = vocab_coverage(toy_vocab, [["alpha", "zeta"], ["alpha", "beta"]])
        assert type_cov == pytest.approx(100.0 * 2 / 3)
        assert oov_rate == pytest.approx(25.0)

    def test_copy_candidate_ratio(self, toy_vocab):
        examples = [encode_example("alpha beta", "alpha gamma", toy_vocab)]
        assert copy_candidate_ratio(examples) == 0.5
