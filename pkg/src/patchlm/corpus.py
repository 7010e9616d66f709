"""Document loading, character-level noising, and byte-budget batch packing."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

logger = logging.getLogger(__name__)

PAD_BYTE = 0x00

NOISE_STRATEGIES = ("antspeak", "drop", "random_case", "repeat", "upper_case")

# Default per-character rates for the rate-driven strategies.
DEFAULT_NOISE_RATES = {"drop": 0.10, "random_case": 0.50, "repeat": 0.20}


class CorpusError(Exception):
    """Unreadable path or malformed record."""


@dataclass
class Document:
    """A unit of processing: an id plus raw UTF-8 bytes.

    ``char_offsets``, when present, holds the byte index of each character
    start (strictly increasing, first entry 0).
    """

    id: str
    data: np.ndarray  # uint8
    char_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.char_offsets is not None:
            off = np.asarray(self.char_offsets, dtype=np.int64)
            if len(off) and (off[0] != 0 or np.any(np.diff(off) <= 0)):
                raise ValueError("char_offsets must start at 0 and be strictly increasing")
            self.char_offsets = off

    def __len__(self) -> int:
        return len(self.data)

    @classmethod
    def from_text(cls, doc_id: str, text: str, with_char_offsets: bool = False) -> "Document":
        raw = text.encode("utf-8")
        offsets = None
        if with_char_offsets:
            arr = np.frombuffer(raw, dtype=np.uint8)
            # Character starts are every byte that is not a UTF-8 continuation byte.
            starts = np.nonzero((arr & 0xC0) != 0x80)[0]
            offsets = starts.astype(np.int64)
        return cls(doc_id, np.frombuffer(raw, dtype=np.uint8), offsets)


@dataclass
class DocumentSet:
    docs: list[Document] = field(default_factory=list)
    skipped: int = 0

    def __iter__(self) -> Iterator[Document]:
        return iter(self.docs)

    def __len__(self) -> int:
        return len(self.docs)

    def total_bytes(self) -> int:
        return sum(len(d) for d in self.docs)


def load_corpus(path: str | Path, format: str = "plain-text", strict: bool = False) -> DocumentSet:
    """Load one document per line (plain-text) or per JSONL record with a ``text`` field.

    Bytes are the raw UTF-8 encoding of the text; no normalization is applied.
    Malformed JSONL records are reported with their line number and either
    skipped (default) or fatal (``strict=True``). Empty records are skipped.
    """
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus path does not exist: {path}")
    if format not in ("plain-text", "jsonl"):
        raise CorpusError(f"unknown corpus format: {format!r}")

    out = DocumentSet()
    with open(path, "rb") as fh:
        raw_lines = fh.read().split(b"\n")
    # A trailing newline produces one empty tail entry, not an empty document.
    if raw_lines and raw_lines[-1] == b"":
        raw_lines.pop()

    for lineno, raw in enumerate(raw_lines, start=1):
        if format == "plain-text":
            if not raw:
                out.skipped += 1
                continue
            out.docs.append(Document(f"{path.name}:{lineno}", np.frombuffer(raw, dtype=np.uint8)))
        else:
            try:
                rec = json.loads(raw.decode("utf-8"))
                text = rec["text"]
                if not isinstance(text, str):
                    raise TypeError("text field is not a string")
            except Exception as exc:
                msg = f"{path.name}:{lineno}: malformed record ({exc})"
                if strict:
                    raise CorpusError(msg) from exc
                logger.warning("%s -- skipped", msg)
                out.skipped += 1
                continue
            if not text:
                out.skipped += 1
                continue
            doc_id = str(rec.get("id", f"{path.name}:{lineno}"))
            out.docs.append(Document.from_text(doc_id, text))

    if not out.docs:
        logger.warning("no documents loaded from %s", path)
    return out


# ---------------------------------------------------------------------------
# Character-level noising
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    """Which noiser to run, how hard, and on which side of a prompt/completion pair."""

    strategy: str
    rate: float | None = None
    seed: int = 0
    target: str = "both"  # prompt | completion | both

    def __post_init__(self):
        if self.strategy not in NOISE_STRATEGIES:
            raise ValueError(f"unknown noise strategy {self.strategy!r}; pick one of {NOISE_STRATEGIES}")
        if self.target not in ("prompt", "completion", "both"):
            raise ValueError(f"bad noise target {self.target!r}")
        r = self.effective_rate
        if not (0.0 <= r <= 1.0):
            raise ValueError(f"noise rate must be in [0, 1], got {r}")

    @property
    def effective_rate(self) -> float:
        if self.rate is not None:
            return self.rate
        return DEFAULT_NOISE_RATES.get(self.strategy, 0.0)


def _upper1(c: str) -> str:
    """Length-preserving uppercase; characters that expand are left alone."""
    u = c.upper()
    return u if len(u) == 1 else c


def _lower1(c: str) -> str:
    lo = c.lower()
    return lo if len(lo) == 1 else c


def apply_noise(text: str, spec: NoiseSpec) -> str:
    """Apply one character-level noising strategy.

    Pure function of (text, spec): the PCG64 stream is derived from spec.seed
    only. Operates on characters (Unicode scalars), never on raw bytes, so the
    output is always valid text.
    """
    if not text:
        return text
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    rate = spec.effective_rate
    chars = list(text)
    n = len(chars)

    if spec.strategy == "upper_case":
        return "".join(_upper1(c) for c in chars)

    if spec.strategy == "antspeak":
        kept = [_upper1(c) for c in chars if not c.isspace()]
        return " ".join(kept)

    if spec.strategy == "drop":
        # Exact-count sampling: removes floor(rate * n) characters, so the
        # output length is deterministic (not just in expectation).
        k = math.floor(rate * n)
        if k == 0:
            return text
        doomed = set(rng.choice(n, size=k, replace=False).tolist())
        return "".join(c for i, c in enumerate(chars) if i not in doomed)

    if spec.strategy == "random_case":
        out = []
        for c in chars:
            if c.upper() != c.lower():  # cased character
                out.append(_upper1(c) if rng.random() < rate else _lower1(c))
            else:
                out.append(c)
        return "".join(out)

    if spec.strategy == "repeat":
        out = []
        for c in chars:
            out.append(c)
            if rng.random() < rate:
                # 1..3 extra copies, so a character occurs at most 4 times.
                out.append(c * int(rng.integers(1, 4)))
        return "".join(out)

    raise AssertionError(f"unhandled strategy {spec.strategy}")


# ---------------------------------------------------------------------------
# Byte-budget batch packing
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """A set of document byte sequences packed against a byte budget.

    Sequences are kept per-document so attention can never cross a document
    boundary; ``doc_boundary_mask`` marks sequence starts in the concatenated
    view and padding is excluded from loss by construction.
    """

    sequences: list[np.ndarray]
    pad_value: int = PAD_BYTE
    max_bytes: int = 0

    @property
    def n_bytes(self) -> int:
        return sum(len(s) for s in self.sequences)

    @property
    def doc_boundary_mask(self) -> np.ndarray:
        """1 at every position that starts a document, over the concatenated bytes."""
        mask = np.zeros(self.n_bytes, dtype=bool)
        pos = 0
        for s in self.sequences:
            mask[pos] = True
            pos += len(s)
        return mask

    def to_padded(self) -> tuple[np.ndarray, np.ndarray]:
        """(batch, width) byte matrix plus a validity mask; pad value 0x00."""
        width = max(len(s) for s in self.sequences)
        mat = np.full((len(self.sequences), width), self.pad_value, dtype=np.uint8)
        valid = np.zeros((len(self.sequences), width), dtype=bool)
        for r, s in enumerate(self.sequences):
            mat[r, : len(s)] = s
            valid[r, : len(s)] = True
        return mat, valid

    def to_stream(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated bytes plus per-position document ids."""
        data = np.concatenate(self.sequences) if self.sequences else np.zeros(0, np.uint8)
        doc_ids = np.concatenate(
            [np.full(len(s), i, dtype=np.int32) for i, s in enumerate(self.sequences)]
        ) if self.sequences else np.zeros(0, np.int32)
        return data, doc_ids


@dataclass
class PackStats:
    n_batches: int = 0
    n_docs: int = 0
    truncated_docs: int = 0
    total_bytes: int = 0
    realized: list[int] = field(default_factory=list)

    @property
    def mean_bytes_per_batch(self) -> float:
        return self.total_bytes / self.n_batches if self.n_batches else 0.0


def pack_batches(
    docs: DocumentSet | Iterable[Document],
    byte_budget: int,
    trunc_len: int,
    seed: int = 0,
) -> tuple[list[Batch], PackStats]:
    """Shuffle documents by seed and greedily fill batches up to ``byte_budget``.

    Documents longer than ``trunc_len`` are truncated (counted in the stats).
    Empty documents are never admitted. The realized byte count of each batch
    is at most the budget and within one document of it.
    """
    if not (byte_budget >= trunc_len >= 1):
        raise ValueError("need byte_budget >= trunc_len >= 1")
    items = [d for d in docs if len(d) > 0]
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(items))

    stats = PackStats()
    batches: list[Batch] = []
    cur: list[np.ndarray] = []
    cur_bytes = 0
    for idx in order:
        seq = items[idx].data
        if len(seq) > trunc_len:
            seq = seq[:trunc_len]
            stats.truncated_docs += 1
        if cur and cur_bytes + len(seq) > byte_budget:
            batches.append(Batch(cur, max_bytes=byte_budget))
            stats.realized.append(cur_bytes)
            cur, cur_bytes = [], 0
        cur.append(seq)
        cur_bytes += len(seq)
        stats.n_docs += 1
    if cur:
        batches.append(Batch(cur, max_bytes=byte_budget))
        stats.realized.append(cur_bytes)
    stats.n_batches = len(batches)
    stats.total_bytes = sum(stats.realized)
    return batches, stats


def write_batch_dump(batches: Iterable[Batch], path: str | Path) -> int:
    """Dump sequences as length-prefixed binary records (u32 LE length + raw bytes)."""
    n = 0
    with open(path, "wb") as fh:
        for batch in batches:
            for seq in batch.sequences:
                fh.write(struct.pack("<I", len(seq)))
                fh.write(seq.tobytes())
                n += 1
    return n


def read_batch_dump(path: str | Path) -> list[np.ndarray]:
    """Read back sequences written by :func:`write_batch_dump`."""
    out = []
    raw = Path(path).read_bytes()
    pos = 0
    while pos < len(raw):
        if pos + 4 > len(raw):
            raise CorpusError(f"truncated batch dump at offset {pos}")
        (length,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + length > len(raw):
            raise CorpusError(f"truncated batch dump record at offset {pos}")
        out.append(np.frombuffer(raw[pos : pos + length], dtype=np.uint8))
        pos += length
    return out
