"""Rooted bifurcating phylogenies and Newick I/O.

Node numbering (zero-based here, one-based in reports):

* tips ``0 .. N-1`` in order of first appearance in the Newick string,
* internal nodes ``N .. 2N-3`` in post-order of the Newick structure,
* root ``2N-2``.

Because internal nodes are numbered in post-order every child has a smaller
index than its parent, so ascending order is a valid post-order schedule and
descending order a valid pre-order schedule.  Branch ``i`` is the edge above
node ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterDomainError, ParseError, ValidationError

_DELIMS = set("(),:;[]")


@dataclass(frozen=True, eq=False)
class Phylogeny:
    names: tuple[str, ...]
    parent: np.ndarray
    children: np.ndarray
    branch_lengths: np.ndarray
    rate_scalars: np.ndarray = None

    def __post_init__(self):
        n = len(self.names)
        if n < 2:
            raise ValidationError("a phylogeny needs at least 2 tips")
        lengths = np.array(self.branch_lengths, dtype=float)
        if lengths.shape != (2 * n - 2,):
            raise ValidationError(f"expected {2 * n - 2} branch lengths, got {lengths.shape}")
        if np.any(lengths < 0) or not np.all(np.isfinite(lengths)):
            raise ParameterDomainError("branch lengths must be finite and >= 0")
        if self.rate_scalars is None:
            scalars = np.ones(2 * n - 2)
        else:
            scalars = np.array(self.rate_scalars, dtype=float)
            if scalars.shape != lengths.shape or np.any(scalars <= 0):
                raise ParameterDomainError("rate scalars must be positive, one per branch")
        for arr in (lengths, scalars):
            arr.flags.writeable = False
        object.__setattr__(self, "branch_lengths", lengths)
        object.__setattr__(self, "rate_scalars", scalars)

    @property
    def tip_count(self) -> int:
        return len(self.names)

    @property
    def node_count(self) -> int:
        return 2 * self.tip_count - 1

    @property
    def branch_count(self) -> int:
        return 2 * self.tip_count - 2

    @property
    def root(self) -> int:
        return 2 * self.tip_count - 2

    @property
    def effective_lengths(self) -> np.ndarray:
        """Branch length times rate scalar: the ``b_i`` the CTMC sees."""
        return self.branch_lengths * self.rate_scalars

    def is_tip(self, node: int) -> bool:
        return node < self.tip_count

    def sibling(self, node: int) -> int:
        a, b = self.children[self.parent[node]]
        return b if a == node else a

    def postorder_internal(self):
        return range(self.tip_count, self.node_count)

    def preorder_nonroot(self):
        return range(self.root - 1, -1, -1)

    def with_branch_lengths(self, lengths) -> "Phylogeny":
        return Phylogeny(self.names, self.parent, self.children, lengths, self.rate_scalars)

    def with_rate_scalars(self, scalars) -> "Phylogeny":
        return Phylogeny(self.names, self.parent, self.children, self.branch_lengths, scalars)

    def with_effective_lengths(self, lengths) -> "Phylogeny":
        return Phylogeny(self.names, self.parent, self.children, lengths, None)

    def to_newick(self, precision: int = 17) -> str:
        def emit(node):
            if self.is_tip(node):
                text = _quote(self.names[node])
            else:
                a, b = self.children[node]
                text = f"({emit(a)},{emit(b)})"
            if node != self.root:
                text += f":{self.branch_lengths[node]:.{precision}g}"
            return text

        return emit(self.root) + ";"


def _quote(name):
    if any(ch in _DELIMS or ch.isspace() or ch == "'" for ch in name):
        return "'" + name.replace("'", "''") + "'"
    return name


class _NewickReader:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.tips = []
        self.internals = []  # post-order list of (child ids, lengths)

    def fail(self, message, pos=None):
        pos = self.pos if pos is None else pos
        raise ParseError(message, len(self.text[:pos].encode("utf-8")))

    def skip(self):
        text = self.text
        while self.pos < len(text):
            ch = text[self.pos]
            if ch.isspace():
                self.pos += 1
            elif ch == "[":
                end = text.find("]", self.pos)
                if end < 0:
                    self.fail("unterminated comment")
                self.pos = end + 1
            else:
                break

    def peek(self):
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def label(self):
        self.skip()
        text = self.text
        if self.pos < len(text) and text[self.pos] == "'":
            start = self.pos
            self.pos += 1
            out = []
            while True:
                if self.pos >= len(text):
                    self.fail("unterminated quoted label", start)
                ch = text[self.pos]
                if ch == "'":
                    if text[self.pos + 1 : self.pos + 2] == "'":
                        out.append("'")
                        self.pos += 2
                        continue
                    self.pos += 1
                    return "".join(out)
                out.append(ch)
                self.pos += 1
        start = self.pos
        while self.pos < len(text) and text[self.pos] not in _DELIMS and not text[self.pos].isspace():
            self.pos += 1
        return text[start : self.pos]

    def length(self, required):
        if self.peek() != ":":
            if required:
                self.fail("missing branch length")
            return None
        self.pos += 1
        self.skip()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] not in _DELIMS and not self.text[self.pos].isspace():
            self.pos += 1
        token = self.text[start : self.pos]
        try:
            value = float(token)
        except ValueError:
            self.fail(f"invalid branch length {token!r}", start)
        if not np.isfinite(value) or value < 0:
            self.fail(f"branch length must be finite and >= 0, got {token!r}", start)
        return value

    def subtree(self):
        """Returns ("tip"|"int", provisional id)."""
        if self.peek() == "(":
            open_pos = self.pos
            self.pos += 1
            kids = []
            while True:
                kid = self.subtree()
                kids.append((kid, self.length(required=True)))
                ch = self.peek()
                if ch == ",":
                    self.pos += 1
                    continue
                if ch == ")":
                    self.pos += 1
                    break
                if ch == "":
                    self.fail("unbalanced parentheses: missing ')'", open_pos)
                self.fail(f"unexpected character {ch!r}")
            if len(kids) > 2:
                self.fail(
                    f"polytomy with {len(kids)} children; resolve it with zero-length "
                    "branches before loading (this is not done automatically)",
                    open_pos,
                )
            if len(kids) < 2:
                self.fail("internal node with a single child", open_pos)
            self.label()  # internal labels are ignored
            self.internals.append(kids)
            return ("int", len(self.internals) - 1)
        start = self.pos
        name = self.label()
        if not name:
            ch = self.peek()
            self.fail("empty tip label" if ch else "unexpected end of input", start)
        self.tips.append((name, start))
        return ("tip", len(self.tips) - 1)

    def parse(self):
        root = self.subtree()
        self.length(required=False)
        ch = self.peek()
        if ch == ")":
            self.fail("unbalanced parentheses: unexpected ')'")
        if ch != ";":
            self.fail("expected ';' at end of tree" if ch == "" else f"unexpected character {ch!r}")
        self.pos += 1
        if self.peek():
            self.fail("trailing characters after ';'")
        if root[0] == "tip":
            self.fail("a phylogeny needs at least 2 tips", 0)
        return self.build()

    def build(self):
        n = len(self.tips)
        seen = {}
        for name, pos in self.tips:
            if name in seen:
                raise ParseError(f"duplicate tip label {name!r}", len(self.text[:pos].encode("utf-8")))
            seen[name] = pos
        total = 2 * n - 1
        parent = np.full(total, -1, dtype=np.int64)
        children = np.full((total, 2), -1, dtype=np.int64)
        lengths = np.zeros(2 * n - 2)

        def ident(ref):
            kind, k = ref
            return k if kind == "tip" else n + k

        for k, kids in enumerate(self.internals):
            node = n + k
            for slot, (ref, length) in enumerate(kids):
                child = ident(ref)
                children[node, slot] = child
                parent[child] = node
                lengths[child] = length
        parent.flags.writeable = False
        children.flags.writeable = False
        return Phylogeny(tuple(name for name, _ in self.tips), parent, children, lengths)


def parse_newick(text: str) -> Phylogeny:
    """Parse a rooted bifurcating Newick tree with lengths on every non-root edge."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    return _NewickReader(text).parse()


def random_tree(tip_count: int, rng: np.random.Generator, mean_length: float = 0.1,
                names=None) -> Phylogeny:
    """Random topology by repeated joining of random pairs, exponential lengths."""
    if tip_count < 2:
        raise ValidationError("a phylogeny needs at least 2 tips")
    if names is None:
        names = [f"t{k + 1}" for k in range(tip_count)]
    pool = [_quote(n) for n in names]
    while len(pool) > 1:
        i, j = sorted(rng.choice(len(pool), size=2, replace=False))
        b = pool.pop(j)
        a = pool.pop(i)
        la, lb = rng.exponential(mean_length, size=2)
        pool.append(f"({a}:{float(la)!r},{b}:{float(lb)!r})")
    return parse_newick(pool[0] + ";")
