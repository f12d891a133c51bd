"""Deterministic mining of label mentions from bookmarked report sentences.

One record is a single sentence in which the lesion of interest is marked by
the literal token ``BOOKMARK``; markers that point at other lesions appear as
``OTHER_BMK``.  Mining runs in three steps:

1. ``tokenize_normalize``: lowercase word tokens with light suffix stripping.
2. ``match_mentions``: longest-match-first n-gram lookup in the ontology
   lexicon.
3. ``classify_relevance``: decide per mentioned label whether it describes
   the bookmarked lesion (relevant), is hedged (uncertain), or belongs to
   some other finding (irrelevant).

All rules live in small explicit tables below so they can be audited and
extended; RULES_VERSION is bumped whenever one of them changes.  Training
consumers keep the relevant and uncertain labels and drop the irrelevant
ones.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from ontolabel.ontology import LabelOntology

RULES_VERSION = "1"

TARGET_BOOKMARK = "BOOKMARK"
OTHER_BOOKMARK = "OTHER_BMK"

# Clause delimiters are kept as standalone tokens because the relevance rules
# segment on them; every other punctuation character is dropped.
PUNCT_TOKENS = (",", ";")

# Inflected forms the generic suffix rules below would mangle.
IRREGULAR_FORMS = {
    "foci": "focus",
    "metastases": "metastasis",
    "calculi": "calculus",
}

# Tried in order; first applicable rule wins.  A rule applies only when the
# stripped stem keeps at least three characters.
SUFFIX_RULES = (
    ("sses", "ss"),  # masses -> mass
    ("ies", "y"),    # opacities -> opacity
    ("ging", "ge"),  # enlarging -> enlarge
    ("s", ""),       # nodules -> nodule
)

# Words ending in these are not plurals; the bare "s" rule skips them.
_KEEP_TRAILING_S = ("ss", "us", "is")

UNCERTAINTY_CUES = frozenset({"or", "versus", "possibly", "may", "suspicious", "likely"})

# Cues that coordinate alternatives: the mention just before them is hedged
# too ("adenopathy or mass" hedges both sides).
COORDINATION_CUES = frozenset({"or", "versus"})

# Token bigrams that open a clause about a new finding.
CLAUSE_OPENERS = (("and", "a"), ("and", "an"))

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[;,]")


class BookmarkError(ValueError):
    """A sentence record does not contain exactly one target bookmark."""


class RelevanceLabel(enum.IntEnum):
    """Relation of a mentioned label to the bookmarked lesion.

    Ordered so that ``max`` aggregates multiple mentions of one label toward
    the most certain reading.
    """

    IRRELEVANT = 0
    UNCERTAIN = 1
    RELEVANT = 2

    def __str__(self) -> str:
        return self.name.lower()


RELEVANCE_BY_NAME = {str(v): v for v in RelevanceLabel}


@dataclass(frozen=True)
class Mention:
    label_id: int
    start: int
    end: int  # exclusive token index
    category: str


@dataclass(frozen=True)
class MinedSentence:
    tokens: tuple[str, ...]
    target_position: int
    other_positions: tuple[int, ...]
    mentions: tuple[Mention, ...]


def _base_form(word: str) -> str:
    if word in IRREGULAR_FORMS:
        return IRREGULAR_FORMS[word]
    for suffix, repl in SUFFIX_RULES:
        if not word.endswith(suffix):
            continue
        if suffix == "s" and word.endswith(_KEEP_TRAILING_S):
            continue
        stem = word[: -len(suffix)] + repl
        if len(stem) >= 3:
            return stem
    return word


def tokenize_normalize(sentence: str) -> list[str]:
    """Lowercased tokens split on whitespace and punctuation.

    Bookmark placeholders are preserved verbatim; "," and ";" survive as
    their own tokens (see PUNCT_TOKENS); other words are reduced to a base
    form via the suffix table.
    """
    tokens = []
    for tok in _TOKEN_RE.findall(sentence):
        if tok in (TARGET_BOOKMARK, OTHER_BOOKMARK) or tok in PUNCT_TOKENS:
            tokens.append(tok)
        else:
            tokens.append(_base_form(tok.lower()))
    return tokens


def normalize_phrase(phrase: str) -> tuple[str, ...]:
    """Lexicon key for a synonym phrase: its normalized word tokens."""
    return tuple(t for t in tokenize_normalize(phrase) if t not in PUNCT_TOKENS)


def build_mention_index(ontology: LabelOntology) -> dict[tuple[str, ...], int]:
    """Map normalized phrase tokens to label ids, names and synonyms alike."""
    index: dict[tuple[str, ...], int] = {}
    for phrase, label_id in ontology.synonyms.items():
        key = normalize_phrase(phrase)
        if key:
            index.setdefault(key, label_id)
    return index


def match_mentions(tokens, ontology: LabelOntology, index=None) -> list[Mention]:
    """Longest-match-first scan of the token stream against the lexicon.

    At each position the longest matching phrase wins and the scan resumes
    after it, so shorter phrases inside a longer match are suppressed.
    """
    if index is None:
        index = build_mention_index(ontology)
    max_len = max((len(key) for key in index), default=0)
    mentions: list[Mention] = []
    i, n = 0, len(tokens)
    while i < n:
        hit = None
        for width in range(min(max_len, n - i), 0, -1):
            label_id = index.get(tuple(tokens[i : i + width]))
            if label_id is not None:
                hit = Mention(label_id, i, i + width, ontology.labels[label_id].category)
                break
        if hit is None:
            i += 1
        else:
            mentions.append(hit)
            i = hit.end
    return mentions


def mine_sentence(sentence: str, ontology: LabelOntology, index=None) -> MinedSentence:
    """Tokenize, locate bookmarks, and match mentions for one sentence."""
    tokens = tuple(tokenize_normalize(sentence))
    targets = [i for i, t in enumerate(tokens) if t == TARGET_BOOKMARK]
    if len(targets) != 1:
        raise BookmarkError(
            f"expected exactly one {TARGET_BOOKMARK} token, found {len(targets)}"
        )
    others = tuple(i for i, t in enumerate(tokens) if t == OTHER_BOOKMARK)
    mentions = tuple(match_mentions(tokens, ontology, index))
    return MinedSentence(tokens, targets[0], others, mentions)


def _segment_starts(sent: MinedSentence) -> list[int]:
    """Indices at which a new clause begins.

    A clause ends after an other-lesion bookmark or a semicolon, before an
    "and a"/"and an" opener, and at a comma directly followed by a body-part
    mention (a new location usually means a new finding).
    """
    tokens = sent.tokens
    n = len(tokens)
    starts = {0}
    for p in sent.other_positions:
        starts.add(p + 1)
    body_part_starts = {m.start for m in sent.mentions if m.category == "body-part"}
    for i, tok in enumerate(tokens):
        if tok == ";":
            starts.add(i + 1)
        elif tok == "," and (i + 1) in body_part_starts:
            starts.add(i + 1)
        elif tok == "and" and i + 1 < n and (tok, tokens[i + 1]) in CLAUSE_OPENERS:
            starts.add(i)
    return sorted(s for s in starts if s < n)


def classify_relevance(sent: MinedSentence) -> list[tuple[int, RelevanceLabel]]:
    """Assign one relevance value per mentioned label.

    Rule 1: labels mentioned in the clause that holds the target bookmark are
    relevant; labels mentioned only in other clauses (owned by another
    bookmark or describing some other finding) are irrelevant.

    Rule 2: inside the target clause, labels mentioned after an uncertainty
    cue (up to the end of the clause) are uncertain, overriding rule 1; for
    coordination cues the mention immediately before the cue is hedged too.

    A label mentioned several times keeps its most certain reading.  Results
    are ordered by first mention.
    """
    tokens = sent.tokens
    if not 0 <= sent.target_position < len(tokens) or tokens[sent.target_position] != TARGET_BOOKMARK:
        raise BookmarkError("no target bookmark at the recorded position")
    starts = _segment_starts(sent)
    bounds = list(zip(starts, starts[1:] + [len(tokens)]))
    target_lo = target_hi = None
    for lo, hi in bounds:
        if lo <= sent.target_position < hi:
            target_lo, target_hi = lo, hi
            break

    statuses = [
        RelevanceLabel.RELEVANT if target_lo <= m.start < target_hi else RelevanceLabel.IRRELEVANT
        for m in sent.mentions
    ]

    for pos in range(target_lo, target_hi):
        cue = tokens[pos]
        if cue not in UNCERTAINTY_CUES:
            continue
        for k, m in enumerate(sent.mentions):
            if pos < m.start < target_hi:
                statuses[k] = RelevanceLabel.UNCERTAIN
        if cue in COORDINATION_CUES:
            before = None
            for k, m in enumerate(sent.mentions):
                if target_lo <= m.start and m.end <= pos:
                    if before is None or m.end > sent.mentions[before].end:
                        before = k
            if before is not None:
                statuses[before] = RelevanceLabel.UNCERTAIN

    order: list[int] = []
    best: dict[int, RelevanceLabel] = {}
    for m, status in zip(sent.mentions, statuses):
        if m.label_id not in best:
            order.append(m.label_id)
            best[m.label_id] = status
        else:
            best[m.label_id] = max(best[m.label_id], status)
    return [(label_id, best[label_id]) for label_id in order]
