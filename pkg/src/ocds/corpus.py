"""Token corpus readers and writers.

Two on-disk formats are supported:

* newline-delimited UTF-8 text plus a vocabulary file (one token per line,
  line number = id), tokenized by whitespace or by character;
* a binary token file: magic ``OCDSTOK1``, uint32 LE vocab size, then records
  of (uint32 LE length, length x uint32 LE token ids).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ocds.errors import ConfigError
from ocds.model import Dataset

TOKEN_MAGIC = b"OCDSTOK1"
UNK = "<unk>"


class Vocabulary:
    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise ConfigError(f"duplicate vocabulary entry {tok!r} at line {i + 1}")
            self.index[tok] = i

    def __len__(self):
        return len(self.tokens)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    def encode(self, line: str, mode: str = "whitespace") -> np.ndarray:
        if mode == "whitespace":
            pieces = line.split()
        elif mode == "char":
            pieces = list(line)
        else:
            raise ConfigError(f"unknown tokenizer mode {mode!r}")
        ids = []
        unk = self.index.get(UNK)
        for p in pieces:
            i = self.index.get(p, unk)
            if i is None:
                raise ConfigError(f"token {p!r} not in vocabulary and no {UNK} entry")
            ids.append(i)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids, mode: str = "whitespace") -> str:
        sep = " " if mode == "whitespace" else ""
        return sep.join(self.tokens[i] for i in ids)


def read_text_corpus(path, vocab: Vocabulary, mode: str = "whitespace", role: str = "corpus") -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Dataset.from_payloads([vocab.encode(line, mode) for line in lines], role=role)


def write_token_file(path, sequences, vocab_size: int) -> None:
    buf = bytearray(TOKEN_MAGIC)
    buf += struct.pack("<I", vocab_size)
    for seq in sequences:
        arr = np.asarray(seq, dtype="<u4")
        if arr.size and int(arr.max()) >= vocab_size:
            raise ConfigError("token id exceeds declared vocabulary size")
        buf += struct.pack("<I", arr.size)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def read_token_file(path) -> tuple[list[np.ndarray], int]:
    raw = Path(path).read_bytes()
    if raw[:8] != TOKEN_MAGIC:
        raise ConfigError(f"{path}: bad magic, expected {TOKEN_MAGIC!r}")
    if len(raw) < 12:
        raise ConfigError(f"{path}: truncated header")
    (vocab_size,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    seqs = []
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise ConfigError(f"{path}: truncated record header at byte {pos}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        end = pos + 4 * n
        if end > len(raw):
            raise ConfigError(f"{path}: truncated record at byte {pos}")
        arr = np.frombuffer(raw, dtype="<u4", count=n, offset=pos).astype(np.int64)
        if n and arr.max() >= vocab_size:
            raise ConfigError(f"{path}: token id {arr.max()} >= vocab size {vocab_size}")
        seqs.append(arr)
        pos = end
    return seqs, vocab_size


def load_corpus(path, vocab_path=None, mode: str = "whitespace", role: str = "corpus") -> tuple[Dataset, int]:
    """Load either format; returns ``(dataset, vocab_size)``.

    Binary files are recognised by their magic; anything else needs a vocabulary.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == TOKEN_MAGIC:
        seqs, v = read_token_file(path)
        return Dataset.from_payloads(seqs, role=role), v
    if vocab_path is None:
        raise ConfigError(f"{path} is a text corpus; a vocabulary file is required")
    vocab = Vocabulary.load(vocab_path)
    return read_text_corpus(path, vocab, mode=mode, role=role), len(vocab)
