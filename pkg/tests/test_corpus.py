import struct

import numpy as np
import pytest

from ocds.corpus import TOKEN_MAGIC, Vocabulary, load_corpus, read_token_file, write_token_file
from ocds.errors import ConfigError


class TestVocabulary:
    def test_encode_decode_whitespace(self):
        v = Vocabulary(["a", "b", "c"])
        ids = v.encode("a c b  a")
        np.testing.assert_array_equal(ids, [0, 2, 1, 0])
        assert v.decode(ids) == "a c b a"

    def test_char_mode(self):
        v = Vocabulary(["x", "y"])
        np.testing.assert_array_equal(v.encode("xyyx", mode="char"), [0, 1, 1, 0])

    def test_unknown_without_unk(self):
        with pytest.raises(ConfigError):
            Vocabulary(["a"]).encode("a z")

    def test_unknown_maps_to_unk(self):
        v = Vocabulary(["a", "<unk>"])
        np.testing.assert_array_equal(v.encode("a z"), [0, 1])

    def test_duplicates_rejected(self):
        with pytest.raises(ConfigError):
            Vocabulary(["a", "a"])

    def test_file_round_trip(self, tmp_path):
        v = Vocabulary(["the", "cat", "sat"])
        v.save(tmp_path / "vocab.txt")
        assert Vocabulary.load(tmp_path / "vocab.txt").tokens == v.tokens


class TestTokenFile:
    def test_round_trip(self, tmp_path):
        seqs = [np.array([0, 1, 2]), np.array([3]), np.array([2, 2, 0, 1])]
        write_token_file(tmp_path / "c.bin", seqs, 4)
        back, V = read_token_file(tmp_path / "c.bin")
        assert V == 4
        for a, b in zip(seqs, back):
            np.testing.assert_array_equal(a, b)

    def test_layout(self, tmp_path):
        write_token_file(tmp_path / "c.bin", [np.array([1, 2])], 5)
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == TOKEN_MAGIC
        assert struct.unpack("<IIII", raw[8:]) == (5, 2, 1, 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTMAGIC" + bytes(8))
        with pytest.raises(ConfigError):
            read_token_file(tmp_path / "c.bin")

    def test_truncated(self, tmp_path):
        write_token_file(tmp_path / "c.bin", [np.array([1, 2, 3])], 5)
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-2])
        with pytest.raises(ConfigError):
            read_token_file(tmp_path / "c.bin")

    def test_id_exceeds_vocab(self, tmp_path):
        with pytest.raises(ConfigError):
            write_token_file(tmp_path / "c.bin", [np.array([7])], 5)


class TestLoadCorpus:
    def test_text(self, tmp_path):
        Vocabulary(["a", "b"]).save(tmp_path / "v.txt")
        (tmp_path / "c.txt").write_text("a b\nb b a\n")
        data, V = load_corpus(tmp_path / "c.txt", tmp_path / "v.txt")
        assert V == 2 and len(data) == 2
        np.testing.assert_array_equal(data[1].payload, [1, 1, 0])

    def test_binary_detected(self, tmp_path):
        write_token_file(tmp_path / "c.bin", [np.array([0, 1])], 3)
        data, V = load_corpus(tmp_path / "c.bin", role="proxy")
        assert V == 3 and data.role == "proxy"

    def test_text_needs_vocab(self, tmp_path):
        (tmp_path / "c.txt").write_text("a b\n")
        with pytest.raises(ConfigError):
            load_corpus(tmp_path / "c.txt")
