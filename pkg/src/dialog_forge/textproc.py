"""Text normalization shared by analytics and the evaluation harness."""

from __future__ import annotations

import re
from pathlib import Path

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs. No stemming."""
    return _TOKEN_RE.findall(text.lower())


def normalize_key(text: str) -> str:
    """Lowercased, whitespace-collapsed form used as an exact-dedup key."""
    return " ".join(text.lower().split())


def load_stopwords(path: str | Path) -> set[str]:
    """Newline-delimited stopword list; blank lines ignored."""
    words = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.strip().lower()
        if word:
            words.add(word)
    return words


def load_tsv_lexicon(path: str | Path) -> dict[str, str]:
    """Two-column TSV ``word<TAB>value`` (hypernym or synonym lexicons).

    Keys are lowercased; the first mapping for a word wins.

    Raises:
        ValueError: a non-blank line without exactly two tab-separated fields.
    """
    lexicon: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValueError(f"unreadable lexicon {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise ValueError(f"{path}:{lineno}: expected 'word<TAB>value'")
        lexicon.setdefault(parts[0].strip().lower(), parts[1].strip())
    return lexicon
