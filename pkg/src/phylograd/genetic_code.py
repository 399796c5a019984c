"""Genetic code tables and codon state-space enumeration.

Codon states are the sense codons of a code, ordered alphabetically over
``ACGT`` (``AAA, AAC, AAG, AAT, ACA, ...``) with stop codons removed.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import product

from .errors import ValidationError

NUCLEOTIDES = "ACGT"

# NCBI translation tables, codons enumerated in TCAG order.
_TCAG_TABLES = {
    "universal": "FFLLSSSSYY**CC*WLLLLPPPPHHQQRRRRIIIMTTTTNNKKSSRRVVVVAAAADDEEGGGG",
    "vertebrate-mito": "FFLLSSSSYY**CCWWLLLLPPPPHHQQRRRRIIMMTTTTNNKKSS**VVVVAAAADDEEGGGG",
}

_TRANSITIONS = {frozenset("AG"), frozenset("CT")}


@dataclass(frozen=True)
class GeneticCode:
    name: str
    codons: tuple[str, ...]
    amino_acids: tuple[str, ...]
    stops: frozenset[str]

    @property
    def state_count(self) -> int:
        return len(self.codons)

    def index(self, codon: str) -> int:
        return self._lookup()[codon]

    def is_stop(self, codon: str) -> bool:
        return codon in self.stops

    def _lookup(self):
        return _codon_lookup(self)


@lru_cache(maxsize=None)
def _codon_lookup(code: GeneticCode) -> dict[str, int]:
    return {c: i for i, c in enumerate(code.codons)}


@lru_cache(maxsize=None)
def genetic_code(name: str = "universal") -> GeneticCode:
    try:
        table = _TCAG_TABLES[name]
    except KeyError:
        raise ValidationError(
            f"unknown genetic code {name!r}; choose from {sorted(_TCAG_TABLES)}"
        ) from None
    translation = {
        "".join(c): aa for c, aa in zip(product("TCAG", repeat=3), table)
    }
    codons, aas, stops = [], [], set()
    for triplet in product(NUCLEOTIDES, repeat=3):
        codon = "".join(triplet)
        aa = translation[codon]
        if aa == "*":
            stops.add(codon)
        else:
            codons.append(codon)
            aas.append(aa)
    return GeneticCode(name, tuple(codons), tuple(aas), frozenset(stops))


def is_transition(a: str, b: str) -> bool:
    return frozenset((a, b)) in _TRANSITIONS
