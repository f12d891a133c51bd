"""Label graph: hierarchy, mutual exclusivity, and the set operations built on them.

A label ontology is a DAG over dense integer label ids.  Parent edges point
from child to parent and a child may have several parents.  Exclusive pairs
are unordered and inherited downward: when two labels are exclusive, every
descendant of one is exclusive with every descendant of the other.  Ancestor
and descendant sets are precomputed as integer bitmasks, so expansion,
closure, and reliable-negative queries cost a handful of word operations per
label.

Construction is permissive (anything that can be stored is stored) so that
``validate`` can report problems instead of crashing on them.  Query
operations refuse to run only when their result would be meaningless: cycles
block reachability, and an exclusivity closure that would pair a label with
itself or with one of its ancestors rejects the ontology outright.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

CATEGORIES = ("body-part", "type", "attribute")


class OntologyError(ValueError):
    """An ontology violates a structural invariant."""


class OntologyFormatError(OntologyError):
    """An ontology file could not be parsed; the message carries the line number."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


def normalize_name(name: str) -> str:
    """Case-insensitive, whitespace-collapsed form used for all name lookups."""
    return " ".join(name.lower().split())


@dataclass(frozen=True)
class Label:
    id: int
    name: str
    category: str


@dataclass(frozen=True)
class LabelSet:
    """Fixed-width set of label ids backed by an int bitmask."""

    width: int
    bits: int = 0

    def __post_init__(self):
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "bits", int(self.bits))
        if self.width < 0:
            raise ValueError("width must be non-negative")
        if self.bits < 0 or self.bits >> self.width:
            raise ValueError("bits fall outside the declared width")

    @classmethod
    def from_ids(cls, width: int, ids: Iterable[int]) -> "LabelSet":
        bits = 0
        for i in ids:
            i = int(i)
            if not 0 <= i < width:
                raise ValueError(f"label id {i} out of range 0..{width - 1}")
            bits |= 1 << i
        return cls(width, bits)

    def ids(self) -> list[int]:
        return list(self)

    def __iter__(self) -> Iterator[int]:
        bits = self.bits
        while bits:
            low = bits & -bits
            yield low.bit_length() - 1
            bits ^= low

    def __len__(self) -> int:
        return self.bits.bit_count()

    def __bool__(self) -> bool:
        return self.bits != 0

    def __contains__(self, label_id: int) -> bool:
        if not 0 <= label_id < self.width:
            return False
        return bool((self.bits >> label_id) & 1)

    def _same_width(self, other: "LabelSet") -> None:
        if self.width != other.width:
            raise ValueError(f"width mismatch: {self.width} vs {other.width}")

    def __or__(self, other: "LabelSet") -> "LabelSet":
        self._same_width(other)
        return LabelSet(self.width, self.bits | other.bits)

    def __and__(self, other: "LabelSet") -> "LabelSet":
        self._same_width(other)
        return LabelSet(self.width, self.bits & other.bits)

    def __sub__(self, other: "LabelSet") -> "LabelSet":
        self._same_width(other)
        return LabelSet(self.width, self.bits & ~other.bits)

    def isdisjoint(self, other: "LabelSet") -> bool:
        self._same_width(other)
        return (self.bits & other.bits) == 0

    def issubset(self, other: "LabelSet") -> bool:
        self._same_width(other)
        return (self.bits & ~other.bits) == 0

    def to_array(self, dtype=np.float64) -> np.ndarray:
        out = np.zeros(self.width, dtype=dtype)
        for i in self:
            out[i] = 1
        return out

    @classmethod
    def from_array(cls, values) -> "LabelSet":
        arr = np.asarray(values)
        bits = 0
        for i in np.flatnonzero(arr):
            bits |= 1 << int(i)
        return cls(arr.shape[0], bits)


@dataclass(frozen=True)
class Violation:
    kind: str  # cycle | self-exclusive | ancestor-exclusive | duplicate-synonym
    ids: tuple[int, ...]
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __str__(self) -> str:
        if self.ok:
            return "ontology ok"
        return "\n".join(f"{v.kind}: {v.message}" for v in self.violations)


class LabelOntology:
    """Immutable label graph with precomputed reachability bitmasks.

    ``labels`` must carry dense ids 0..C-1 in order.  ``parent_edges`` are
    (child id, parent id) pairs; ``exclusive_pairs`` are unordered id pairs
    as authored, before closure.  ``synonym_entries`` keep every authored
    (phrase, id) pair so duplicate synonyms can still be reported; the
    derived ``synonyms`` dict additionally maps every label name to its id.
    """

    def __init__(self, labels, parent_edges=(), exclusive_pairs=(), synonym_entries=()):
        self.labels: tuple[Label, ...] = tuple(labels)
        for pos, lab in enumerate(self.labels):
            if lab.id != pos:
                raise OntologyError(
                    f"label ids must be dense and in order; got id {lab.id} at position {pos}"
                )
            if lab.category not in CATEGORIES:
                raise OntologyError(f"unknown category {lab.category!r} for label {lab.name!r}")
        n = len(self.labels)

        def check_id(i) -> int:
            i = int(i)
            if not 0 <= i < n:
                raise OntologyError(f"label id {i} out of range 0..{n - 1}")
            return i

        self.parent_edges = frozenset((check_id(c), check_id(p)) for c, p in parent_edges)
        self.exclusive_pairs = frozenset(
            tuple(sorted((check_id(a), check_id(b)))) for a, b in exclusive_pairs
        )
        self.synonym_entries = tuple(
            (normalize_name(phrase), check_id(i)) for phrase, i in synonym_entries
        )

        self.synonyms: dict[str, int] = {}
        for lab in self.labels:
            self.synonyms.setdefault(normalize_name(lab.name), lab.id)
        for phrase, i in self.synonym_entries:
            self.synonyms.setdefault(phrase, i)

        self._parents: list[list[int]] = [[] for _ in range(n)]
        self._children: list[list[int]] = [[] for _ in range(n)]
        for child, parent in sorted(self.parent_edges):
            self._parents[child].append(parent)
            self._children[parent].append(child)

        self._reach: tuple[list[int], list[int]] | None = None
        self._exclusive_masks: list[int] | None = None

    # ------------------------------------------------------------------
    # basics

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def names(self) -> list[str]:
        return [lab.name for lab in self.labels]

    def name_of(self, label_id: int) -> str:
        return self.labels[label_id].name

    def resolve_name(self, phrase: str) -> int:
        """Look up a label by name or synonym (case-insensitive)."""
        key = normalize_name(phrase)
        if key not in self.synonyms:
            raise KeyError(f"unknown label name or synonym: {phrase!r}")
        return self.synonyms[key]

    def label_set(self, ids: Iterable[int] = ()) -> LabelSet:
        return LabelSet.from_ids(self.n_labels, ids)

    def label_set_by_names(self, names: Iterable[str]) -> LabelSet:
        return self.label_set(self.resolve_name(n) for n in names)

    def parents_of(self, label_id: int) -> list[int]:
        return list(self._parents[label_id])

    def children_of(self, label_id: int) -> list[int]:
        return list(self._children[label_id])

    def leaves(self) -> list[int]:
        return [i for i in range(self.n_labels) if not self._children[i]]

    def __repr__(self) -> str:
        return (
            f"LabelOntology(n_labels={self.n_labels}, "
            f"parent_edges={len(self.parent_edges)}, "
            f"exclusive_pairs={len(self.exclusive_pairs)})"
        )

    # ------------------------------------------------------------------
    # validation

    def validate(self) -> ValidationReport:
        """Report every violated invariant; empty report iff the graph is sound.

        Diagnostics, not exceptions: the checks run even on graphs with
        cycles, so a broken file produces one complete report instead of a
        crash on the first problem.
        """
        report = ValidationReport()
        n = self.n_labels

        for comp in _strongly_connected(n, self._parents):
            if len(comp) > 1 or comp[0] in self._parents[comp[0]]:
                ids = tuple(sorted(comp))
                report.violations.append(
                    Violation("cycle", ids, f"parent edges form a cycle through {self._fmt(ids)}")
                )

        reach = _reachable_sets(n, self._parents)
        for a, b in sorted(self.exclusive_pairs):
            if a == b:
                report.violations.append(
                    Violation(
                        "self-exclusive", (a,), f"label {self._fmt((a,))} marked exclusive with itself"
                    )
                )
            elif b in reach[a] or a in reach[b]:
                report.violations.append(
                    Violation(
                        "ancestor-exclusive",
                        (a, b),
                        f"exclusive pair {self._fmt((a, b))} relates a label to its own ancestor",
                    )
                )

        phrase_ids: dict[str, set[int]] = {}
        for lab in self.labels:
            phrase_ids.setdefault(normalize_name(lab.name), set()).add(lab.id)
        for phrase, i in self.synonym_entries:
            phrase_ids.setdefault(phrase, set()).add(i)
        for phrase in sorted(phrase_ids):
            ids = phrase_ids[phrase]
            if len(ids) > 1:
                report.violations.append(
                    Violation(
                        "duplicate-synonym",
                        tuple(sorted(ids)),
                        f"phrase {phrase!r} maps to labels {self._fmt(sorted(ids))}",
                    )
                )
        return report

    def _fmt(self, ids) -> str:
        return "{" + ", ".join(self.labels[i].name for i in ids) + "}"

    # ------------------------------------------------------------------
    # reachability

    def _ensure_reach(self) -> tuple[list[int], list[int]]:
        if self._reach is not None:
            return self._reach
        cycles = [v for v in self.validate().violations if v.kind == "cycle"]
        if cycles:
            raise OntologyError(f"cannot compute reachability: {cycles[0].message}")
        n = self.n_labels
        anc = [0] * n
        remaining = [len(self._parents[i]) for i in range(n)]
        queue = [i for i in range(n) if remaining[i] == 0]
        seen = 0
        while queue:
            u = queue.pop()
            seen += 1
            for child in self._children[u]:
                anc[child] |= anc[u] | (1 << u)
                remaining[child] -= 1
                if remaining[child] == 0:
                    queue.append(child)
        if seen != n:  # unreachable given the cycle check above
            raise OntologyError("parent edges form a cycle")
        desc = [0] * n
        for child in range(n):
            bits = anc[child]
            while bits:
                low = bits & -bits
                desc[low.bit_length() - 1] |= 1 << child
                bits ^= low
        self._reach = (anc, desc)
        return self._reach

    def ancestors(self, label_id: int) -> LabelSet:
        """All labels reachable through parent edges, excluding the label itself."""
        if not 0 <= label_id < self.n_labels:
            raise ValueError(f"label id {label_id} out of range 0..{self.n_labels - 1}")
        anc, _ = self._ensure_reach()
        return LabelSet(self.n_labels, anc[label_id])

    def descendants(self, label_id: int) -> LabelSet:
        if not 0 <= label_id < self.n_labels:
            raise ValueError(f"label id {label_id} out of range 0..{self.n_labels - 1}")
        _, desc = self._ensure_reach()
        return LabelSet(self.n_labels, desc[label_id])

    def expand(self, labels: LabelSet) -> LabelSet:
        """Close a label set upward: add every ancestor of every member.

        Idempotent and monotone; the result is always a superset of the input.
        """
        if labels.width != self.n_labels:
            raise ValueError("label set width does not match the ontology")
        anc, _ = self._ensure_reach()
        bits = labels.bits
        for i in labels:
            bits |= anc[i]
        return LabelSet(self.n_labels, bits)

    # ------------------------------------------------------------------
    # exclusivity closure

    def _ensure_closure(self) -> list[int]:
        if self._exclusive_masks is not None:
            return self._exclusive_masks
        anc, desc = self._ensure_reach()
        n = self.n_labels
        masks = [0] * n
        for a, b in sorted(self.exclusive_pairs):
            side_a = desc[a] | (1 << a)
            side_b = desc[b] | (1 << b)
            shared = side_a & side_b
            if shared:
                names = self._fmt(LabelSet(n, shared).ids())
                raise OntologyError(
                    f"inconsistent ontology: exclusive pair {self._fmt((a, b))} shares "
                    f"descendants {names}, so the closure would pair a label with itself"
                )
            rest = side_a
            while rest:
                low = rest & -rest
                x = low.bit_length() - 1
                rest ^= low
                related = (anc[x] | desc[x]) & side_b
                if related:
                    names = self._fmt(LabelSet(n, related).ids())
                    raise OntologyError(
                        f"inconsistent ontology: closure of {self._fmt((a, b))} would make "
                        f"{self.labels[x].name!r} exclusive with its own ancestor or "
                        f"descendant in {names}"
                    )
                masks[x] |= side_b
            rest = side_b
            while rest:
                low = rest & -rest
                y = low.bit_length() - 1
                rest ^= low
                masks[y] |= side_a
        self._exclusive_masks = masks
        return masks

    def exclusivity_closure(self) -> frozenset[tuple[int, int]]:
        """Every exclusive pair implied by inheritance, as sorted id pairs.

        For an authored pair (a, b), every member of {a} + descendants(a) is
        exclusive with every member of {b} + descendants(b).  Raises
        OntologyError when that rule would pair a label with itself or with
        one of its own ancestors or descendants.
        """
        masks = self._ensure_closure()
        pairs = set()
        for x in range(self.n_labels):
            for y in LabelSet(self.n_labels, masks[x]):
                if x < y:
                    pairs.add((x, y))
        return frozenset(pairs)

    def exclusive_partners(self, label_id: int) -> LabelSet:
        """Labels exclusive with ``label_id`` under the closure."""
        masks = self._ensure_closure()
        return LabelSet(self.n_labels, masks[label_id])

    def reliable_negatives(self, positives: LabelSet) -> LabelSet:
        """Labels guaranteed absent because a positive excludes them.

        ``positives`` should already be expanded; the result is the union of
        the closure-exclusive partners of every positive label.
        """
        if positives.width != self.n_labels:
            raise ValueError("label set width does not match the ontology")
        masks = self._ensure_closure()
        bits = 0
        for i in positives:
            bits |= masks[i]
        return LabelSet(self.n_labels, bits)

    def has_exclusive_conflict(self, labels: LabelSet) -> bool:
        """True when the set contains two labels that are closure-exclusive."""
        masks = self._ensure_closure()
        for i in labels:
            if masks[i] & labels.bits:
                return True
        return False


# ----------------------------------------------------------------------
# graph helpers


def _strongly_connected(n: int, adjacency: list[list[int]]) -> list[list[int]]:
    """Iterative Tarjan; returns the strongly connected components."""
    index = [0] * n
    low = [0] * n
    state = [0] * n  # 0 unseen, 1 on stack, 2 done
    stack: list[int] = []
    components: list[list[int]] = []
    counter = 1
    for root in range(n):
        if state[root]:
            continue
        work = [(root, iter(adjacency[root]))]
        index[root] = low[root] = counter
        counter += 1
        state[root] = 1
        stack.append(root)
        while work:
            node, edges = work[-1]
            advanced = False
            for nxt in edges:
                if state[nxt] == 0:
                    index[nxt] = low[nxt] = counter
                    counter += 1
                    state[nxt] = 1
                    stack.append(nxt)
                    work.append((nxt, iter(adjacency[nxt])))
                    advanced = True
                    break
                if state[nxt] == 1:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    member = stack.pop()
                    state[member] = 2
                    comp.append(member)
                    if member == node:
                        break
                components.append(comp)
    return components


def _reachable_sets(n: int, adjacency: list[list[int]]) -> list[set[int]]:
    """Cycle-safe reachability (excluding the start node unless on a cycle)."""
    out = []
    for start in range(n):
        seen: set[int] = set()
        frontier = list(adjacency[start])
        while frontier:
            node = frontier.pop()
            if node in seen:
                continue
            seen.add(node)
            frontier.extend(adjacency[node])
        out.append(seen)
    return out


# ----------------------------------------------------------------------
# file format
#
# Three sections.  `#` starts a comment; names are case-insensitive.
#
#   [labels]
#   0 | chest | body-part |
#   1 | right mid lung | body-part | right middle lobe, right mid lobe
#   [parents]
#   right mid lung -> chest
#   [exclusive]
#   chest ~ abdomen


def parse_ontology(path) -> LabelOntology:
    """Parse an ontology file without validating it.

    Raises OntologyFormatError (with a line number) for anything that cannot
    even be represented: bad syntax, unknown sections or categories, ids out
    of file order, references to undeclared names.
    """
    labels: list[Label] = []
    synonym_entries: list[tuple[str, int]] = []
    parent_lines: list[tuple[int, str, str]] = []
    exclusive_lines: list[tuple[int, str, str]] = []
    section = None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip().lower()
                if section not in ("labels", "parents", "exclusive"):
                    raise OntologyFormatError(path, lineno, f"unknown section [{section}]")
                continue
            if section is None:
                raise OntologyFormatError(path, lineno, "content before any section header")
            if section == "labels":
                parts = [p.strip() for p in line.split("|")]
                if len(parts) not in (3, 4):
                    raise OntologyFormatError(
                        path, lineno, "expected 'id | name | category [| synonyms]'"
                    )
                try:
                    label_id = int(parts[0])
                except ValueError:
                    raise OntologyFormatError(path, lineno, f"bad label id {parts[0]!r}") from None
                if label_id != len(labels):
                    raise OntologyFormatError(
                        path, lineno, f"label ids must be dense in file order; expected {len(labels)}"
                    )
                name, category = parts[1], parts[2]
                if not name:
                    raise OntologyFormatError(path, lineno, "empty label name")
                if category not in CATEGORIES:
                    raise OntologyFormatError(
                        path, lineno, f"unknown category {category!r} (expected one of {CATEGORIES})"
                    )
                labels.append(Label(label_id, name, category))
                if len(parts) == 4 and parts[3]:
                    for phrase in parts[3].split(","):
                        phrase = phrase.strip()
                        if phrase:
                            synonym_entries.append((phrase, label_id))
            elif section == "parents":
                if "->" not in line:
                    raise OntologyFormatError(path, lineno, "expected 'child -> parent'")
                child, _, parent = line.partition("->")
                parent_lines.append((lineno, child.strip(), parent.strip()))
            else:
                if "~" not in line:
                    raise OntologyFormatError(path, lineno, "expected 'name ~ name'")
                a, _, b = line.partition("~")
                exclusive_lines.append((lineno, a.strip(), b.strip()))

    by_name = {normalize_name(lab.name): lab.id for lab in labels}

    def resolve(lineno: int, name: str) -> int:
        key = normalize_name(name)
        if key not in by_name:
            raise OntologyFormatError(path, lineno, f"unknown label name {name!r}")
        return by_name[key]

    parent_edges = [(resolve(ln, c), resolve(ln, p)) for ln, c, p in parent_lines]
    exclusive_pairs = [(resolve(ln, a), resolve(ln, b)) for ln, a, b in exclusive_lines]
    return LabelOntology(labels, parent_edges, exclusive_pairs, synonym_entries)


def load_ontology(path, report_stream: TextIO | None = None) -> LabelOntology:
    """Parse, validate, and consistency-check an ontology file.

    A non-empty validation report is written to ``report_stream`` (stderr by
    default) and the ontology is rejected; an exclusivity closure that would
    pair a label with itself or an ancestor is likewise rejected rather than
    silently repaired.
    """
    stream = sys.stderr if report_stream is None else report_stream
    ontology = parse_ontology(path)
    report = ontology.validate()
    if not report.ok:
        print(f"{path}: invalid ontology", file=stream)
        print(report, file=stream)
        raise OntologyError(
            f"{path}: ontology failed validation with {len(report.violations)} problem(s)"
        )
    try:
        ontology._ensure_closure()
    except OntologyError as exc:
        print(f"{path}: {exc}", file=stream)
        raise
    return ontology
