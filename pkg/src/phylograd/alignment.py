"""FASTA parsing, tip-state encoding and site-pattern compression.

Tip observations are stored as small integers: a code ``c >= 0`` is an
observed state, a code ``c < 0`` points at row ``-c - 1`` of a 0/1 mask
table listing the states compatible with an ambiguous character.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ValidationError
from .genetic_code import NUCLEOTIDES, genetic_code

IUPAC = {
    "A": "A", "C": "C", "G": "G", "T": "T", "U": "T",
    "R": "AG", "Y": "CT", "S": "CG", "W": "AT", "K": "GT", "M": "AC",
    "B": "CGT", "D": "AGT", "H": "ACT", "V": "ACG",
    "N": "ACGT", "-": "ACGT", "?": "ACGT", ".": "ACGT",
}
GAP_CHARS = set("-?.")
ALPHABETS = ("nuc", "codon")


class _MaskTable:
    def __init__(self, state_count):
        self.state_count = state_count
        self.rows = []
        self.index = {}

    def code(self, states):
        states = tuple(sorted(set(states)))
        if len(states) == 1:
            return states[0]
        key = states or tuple(range(self.state_count))
        if key not in self.index:
            row = np.zeros(self.state_count, dtype=bool)
            row[list(key)] = True
            self.index[key] = len(self.rows)
            self.rows.append(row)
        return -self.index[key] - 1

    def array(self):
        if not self.rows:
            return np.zeros((0, self.state_count), dtype=bool)
        return np.array(self.rows)


@dataclass(frozen=True, eq=False)
class RawAlignment:
    names: tuple[str, ...]
    codes: np.ndarray  # (N, L) int32
    masks: np.ndarray  # (M, S) bool
    state_count: int
    alphabet: str = "nuc"
    genetic_code: str = "universal"

    @property
    def taxon_count(self) -> int:
        return len(self.names)

    @property
    def site_count(self) -> int:
        return self.codes.shape[1]

    def states_at(self, taxon: int, site: int) -> frozenset:
        code = int(self.codes[taxon, site])
        if code >= 0:
            return frozenset([code])
        return frozenset(np.flatnonzero(self.masks[-code - 1]).tolist())


def read_fasta_records(text: str) -> list[tuple[str, str]]:
    records = []
    name, chunks = None, []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            if name is not None:
                records.append((name, "".join(chunks)))
            parts = line[1:].split()
            if not parts:
                raise ValidationError(f"FASTA line {lineno}: empty sequence name")
            name, chunks = parts[0], []
        else:
            if name is None:
                raise ValidationError(f"FASTA line {lineno}: sequence data before first header")
            chunks.append("".join(line.split()).upper())
    if name is not None:
        records.append((name, "".join(chunks)))
    if not records:
        raise ValidationError("FASTA input contains no sequences")
    return records


def parse_fasta(text: str, alphabet: str = "nuc", code: str = "universal",
                strict: bool = True) -> RawAlignment:
    """Parse aligned FASTA into per-tip state codes.

    Nucleotide mode maps IUPAC ambiguity codes to masks.  Codon mode reads
    triplets; stop codons and triplets containing gaps become fully
    ambiguous, partially ambiguous triplets become the mask of compatible
    sense codons.  With ``strict`` unknown characters are an error,
    otherwise they are treated as fully ambiguous.
    """
    if alphabet not in ALPHABETS:
        raise ValidationError(f"alphabet must be one of {ALPHABETS}, got {alphabet!r}")
    records = read_fasta_records(text)
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate sequence names in FASTA input")
    lengths = {len(seq) for _, seq in records}
    if len(lengths) != 1:
        raise ValidationError(f"ragged alignment: sequence lengths {sorted(lengths)}")
    length = lengths.pop()
    if alphabet == "nuc":
        table = _MaskTable(4)
        lookup = {}
        for ch, states in IUPAC.items():
            lookup[ch] = table.code(NUCLEOTIDES.index(x) for x in states)
        full = table.code(range(4))
        codes = np.empty((len(records), length), dtype=np.int32)
        for row, (name, seq) in enumerate(records):
            for col, ch in enumerate(seq):
                try:
                    codes[row, col] = lookup[ch]
                except KeyError:
                    if strict:
                        raise ValidationError(
                            f"unknown character {ch!r} in sequence {name!r} at column {col + 1}"
                        ) from None
                    codes[row, col] = full
        return RawAlignment(tuple(names), codes, table.array(), 4, "nuc", code)

    if length % 3:
        raise ValidationError(f"codon alignment length {length} is not divisible by 3")
    gc = genetic_code(code)
    table = _MaskTable(gc.state_count)
    full = table.code(range(gc.state_count))
    cache = {}
    codes = np.empty((len(records), length // 3), dtype=np.int32)
    for row, (name, seq) in enumerate(records):
        for col in range(length // 3):
            triplet = seq[3 * col : 3 * col + 3]
            if triplet not in cache:
                cache[triplet] = _codon_code(triplet, gc, table, full, strict, name, col)
            codes[row, col] = cache[triplet]
    return RawAlignment(tuple(names), codes, table.array(), gc.state_count, "codon", code)


def _codon_code(triplet, gc, table, full, strict, name, col):
    if any(ch in GAP_CHARS for ch in triplet):
        return full
    options = []
    for ch in triplet:
        if ch not in IUPAC:
            if strict:
                raise ValidationError(
                    f"unknown character {ch!r} in sequence {name!r} at codon {col + 1}"
                )
            return full
        options.append(IUPAC[ch])
    states = [gc.index(c) for c in ("".join(p) for p in product(*options)) if not gc.is_stop(c)]
    if not states:
        return full
    return table.code(states)


@dataclass(frozen=True, eq=False)
class PatternizedAlignment:
    names: tuple[str, ...]
    patterns: np.ndarray  # (N, C) int32 tip codes
    weights: np.ndarray  # (C,) int64
    masks: np.ndarray  # (M, S) bool
    state_count: int
    site_to_pattern: np.ndarray = None

    @property
    def pattern_count(self) -> int:
        return self.patterns.shape[1]

    @property
    def taxon_count(self) -> int:
        return len(self.names)

    def has_ambiguity(self) -> bool:
        return bool(np.any(self.patterns < 0))

    def mask_table(self, padded_count=None) -> np.ndarray:
        """Float 0/1 masks padded with zero columns to ``padded_count``."""
        s_pad = padded_count or self.state_count
        out = np.zeros((max(len(self.masks), 1), s_pad))
        if len(self.masks):
            out[: len(self.masks), : self.state_count] = self.masks
        return out

    def decompress(self) -> np.ndarray:
        return np.repeat(self.patterns, self.weights, axis=1)

    def for_tree(self, tree) -> "PatternizedAlignment":
        """Reorder rows so row ``k`` holds the data of tree tip ``k``."""
        if tuple(tree.names) == self.names:
            return self
        index = {n: k for k, n in enumerate(self.names)}
        missing = [n for n in tree.names if n not in index]
        extra = set(self.names) - set(tree.names)
        if missing or extra:
            raise ValidationError(
                f"tree and alignment taxa differ: missing from alignment {missing[:5]}, "
                f"not in tree {sorted(extra)[:5]}"
            )
        order = [index[n] for n in tree.names]
        return PatternizedAlignment(tuple(tree.names), self.patterns[order], self.weights,
                                    self.masks, self.state_count, self.site_to_pattern)

    def to_tsv(self) -> str:
        lines = ["pattern_index\tweight\t" + "\t".join(self.names)]
        for c in range(self.pattern_count):
            codes = "\t".join(str(int(x)) for x in self.patterns[:, c])
            lines.append(f"{c}\t{int(self.weights[c])}\t{codes}")
        return "\n".join(lines) + "\n"


def compress_patterns(raw: RawAlignment) -> PatternizedAlignment:
    """Collapse identical columns; patterns keep first-occurrence order."""
    codes = np.ascontiguousarray(raw.codes.T)  # one row per site
    if codes.shape[0] == 0:
        raise ValidationError("alignment has no sites")
    _, first, inverse, counts = np.unique(
        codes, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    patterns = np.ascontiguousarray(codes[first[order]].T, dtype=np.int32)
    return PatternizedAlignment(
        raw.names, patterns, counts[order].astype(np.int64), raw.masks, raw.state_count,
        rank[inverse],
    )


def from_states(names, states, state_count) -> RawAlignment:
    """Unambiguous alignment from an (N, L) integer state array."""
    codes = np.asarray(states, dtype=np.int32)
    return RawAlignment(tuple(names), codes, np.zeros((0, state_count), dtype=bool), state_count)


def to_fasta(raw: RawAlignment) -> str:
    if raw.alphabet == "codon":
        gc = genetic_code(raw.genetic_code)
        symbols = list(gc.codons)
        unknown = "NNN"
    else:
        symbols = list(NUCLEOTIDES)
        unknown = "N"
    out = []
    for name, row in zip(raw.names, raw.codes):
        seq = "".join(symbols[c] if c >= 0 else unknown for c in row)
        out.append(f">{name}\n{seq}")
    return "\n".join(out) + "\n"
