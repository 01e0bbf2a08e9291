"""Dependency-based storage cost over CoNLL-U trees.

The cost at position k is the number of not-yet-seen tokens that already
have at least one seen co-dependent, where a co-dependent is the other
endpoint of a head-dependent arc in either direction. Arcs whose relation
is excluded (default: punct, root, dep, reparandum; matched on the base
label before any ':' subtype) never contribute, and an unseen token counts
at most once however many seen co-dependents it has.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import AlignmentError, DataFormatError

DEFAULT_EXCLUDED = frozenset({"punct", "root", "dep", "reparandum"})


@dataclass(frozen=True)
class DependencyToken:
    form: str
    head: int  # 0 = root
    deprel: str


@dataclass(frozen=True)
class DependencyTree:
    sentence_id: str
    tokens: tuple[DependencyToken, ...]

    def __post_init__(self):
        n = len(self.tokens)
        roots = 0
        for pos, tok in enumerate(self.tokens, start=1):
            if not 0 <= tok.head <= n:
                raise DataFormatError(
                    f"sentence {self.sentence_id}: head {tok.head} out of range 0..{n}"
                )
            if tok.head == pos:
                raise DataFormatError(f"sentence {self.sentence_id}: token {pos} is its own head")
            if tok.head == 0:
                roots += 1
        if n and roots == 0:
            raise DataFormatError(f"sentence {self.sentence_id}: no root token")
        for pos in range(1, n + 1):
            seen = set()
            cursor = pos
            while cursor != 0:
                if cursor in seen:
                    raise DataFormatError(
                        f"sentence {self.sentence_id}: head cycle through token {pos}"
                    )
                seen.add(cursor)
                cursor = self.tokens[cursor - 1].head

    def __len__(self):
        return len(self.tokens)

    @property
    def forms(self) -> tuple[str, ...]:
        return tuple(t.form for t in self.tokens)


@dataclass(frozen=True)
class DltProfile:
    tree: DependencyTree
    per_token: tuple[int, ...]

    @property
    def total(self) -> int:
        return int(sum(self.per_token))


@dataclass(frozen=True)
class WordAlignedProfile:
    words: tuple[str, ...]
    per_word: tuple[int, ...]


def _base_label(deprel: str) -> str:
    return deprel.split(":", 1)[0]


def dlt_storage(tree: DependencyTree, excluded: Iterable[str] = DEFAULT_EXCLUDED) -> DltProfile:
    """Count, at each position, the unseen tokens with a seen co-dependent."""
    excluded = frozenset(excluded)
    n = len(tree)
    partners: list[set[int]] = [set() for _ in range(n + 1)]
    for pos, tok in enumerate(tree.tokens, start=1):
        if tok.head == 0 or _base_label(tok.deprel) in excluded:
            continue
        partners[pos].add(tok.head)
        partners[tok.head].add(pos)
    counts = []
    for k in range(1, n + 1):
        pending = 0
        for t in range(k + 1, n + 1):
            if any(u <= k for u in partners[t]):
                pending += 1
        counts.append(pending)
    return DltProfile(tree, tuple(counts))


def word_align(profile: DltProfile, raw_text: str) -> WordAlignedProfile:
    """Sum per-token counts into whitespace words of the raw sentence text.

    Token forms must reproduce raw_text character-for-character once
    whitespace is discarded; a token is assigned to the whitespace word its
    first character falls in.
    """
    words = raw_text.split()
    if not words:
        raise AlignmentError("raw text contains no words")
    # Character stream of the raw text with the word index of each character.
    chars: list[str] = []
    char_word: list[int] = []
    for w_idx, word in enumerate(words):
        chars.extend(word)
        char_word.extend([w_idx] * len(word))
    per_word = [0] * len(words)
    cursor = 0
    for tok, value in zip(profile.tree.tokens, profile.per_token):
        form = tok.form
        stripped = "".join(form.split())
        if chars[cursor : cursor + len(stripped)] != list(stripped):
            context = "".join(chars[cursor : cursor + len(stripped) + 8])
            raise AlignmentError(
                f"token {form!r} does not match text at {context!r} (offset {cursor})"
            )
        per_word[char_word[cursor]] += int(value)
        cursor += len(stripped)
    if cursor != len(chars):
        raise AlignmentError(
            f"tokens cover only {cursor} of {len(chars)} non-space characters"
        )
    return WordAlignedProfile(tuple(words), tuple(per_word))


# ---------------------------------------------------------------------------
# CoNLL-U ingestion
# ---------------------------------------------------------------------------


def parse_conllu(source) -> list[DependencyTree]:
    """Parse a CoNLL-U text stream, string, or path-opened file object.

    Multiword-token ranges (ids like `3-4`) are skipped in favor of their
    parts; empty nodes (ids like `5.1`) are skipped; only ID, FORM, HEAD and
    DEPREL are retained.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    trees: list[DependencyTree] = []
    tokens: list[DependencyToken] = []
    expected_id = 1
    sent_id: str | None = None

    def flush():
        nonlocal tokens, expected_id, sent_id
        if tokens:
            default_id = f"s{len(trees) + 1}"
            trees.append(DependencyTree(sent_id or default_id, tuple(tokens)))
        tokens = []
        expected_id = 1
        sent_id = None

    for lineno, line in enumerate(source, start=1):
        line = line.rstrip("\n").rstrip("\r")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("sent_id") and "=" in body:
                sent_id = body.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise DataFormatError(f"expected 10 tab-separated columns, got {len(cols)}", lineno)
        token_id = cols[0]
        if "-" in token_id or "." in token_id:
            continue  # multiword-token range or empty node
        try:
            token_index = int(token_id)
        except ValueError:
            raise DataFormatError(f"bad token id {token_id!r}", lineno) from None
        if token_index != expected_id:
            raise DataFormatError(
                f"token id {token_index} out of sequence (expected {expected_id})", lineno
            )
        expected_id += 1
        try:
            head = int(cols[6])
        except ValueError:
            raise DataFormatError(f"non-integer head {cols[6]!r}", lineno) from None
        tokens.append(DependencyToken(form=cols[1], head=head, deprel=cols[7]))
    flush()
    return trees


def serialize_conllu(trees: Iterable[DependencyTree]) -> str:
    """Emit the retained columns back out as CoNLL-U ('_' elsewhere)."""
    blocks = []
    for tree in trees:
        lines = [f"# sent_id = {tree.sentence_id}"]
        for idx, tok in enumerate(tree.tokens, start=1):
            lines.append(
                "\t".join(
                    [str(idx), tok.form, "_", "_", "_", "_", str(tok.head), tok.deprel, "_", "_"]
                )
            )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


# ---------------------------------------------------------------------------
# TSV output
# ---------------------------------------------------------------------------


def token_rows(profiles: Sequence[DltProfile]) -> list[tuple[str, int, str, int]]:
    rows = []
    for profile in profiles:
        for idx, (tok, value) in enumerate(zip(profile.tree.tokens, profile.per_token), start=1):
            rows.append((profile.tree.sentence_id, idx, tok.form, int(value)))
    return rows


def write_token_tsv(path, profiles: Sequence[DltProfile], manifest: str | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        fh.write("sentence_id\ttoken_index\tform\tdlt_storage\n")
        for sid, idx, form, value in token_rows(profiles):
            fh.write(f"{sid}\t{idx}\t{form}\t{value}\n")


def write_word_tsv(path, aligned: Sequence[tuple[str, WordAlignedProfile]], manifest=None):
    with open(path, "w", encoding="utf-8") as fh:
        if manifest is not None:
            fh.write(f"# manifest: {manifest}\n")
        fh.write("sentence_id\tword_index\tword\tdlt_storage\n")
        for sid, profile in aligned:
            for idx, (word, value) in enumerate(zip(profile.words, profile.per_word), start=1):
                fh.write(f"{sid}\t{idx}\t{word}\t{value}\n")
