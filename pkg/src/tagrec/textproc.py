"""Text utilities shared by compression, retrieval, and validation.

The tokenizer is intentionally simple and deterministic: lowercase,
split on whitespace and punctuation, and treat each CJK ideograph or
kana/hangul character as its own token.  Token counting for prompt
budgeting reuses the same rule so budgets are a monotone proxy for
any real model tokenizer.
"""

from __future__ import annotations

import unicodedata

# CJK ideographs, kana, and hangul syllables: one character = one token.
_CJK_RANGES = (
    (0x3400, 0x4DBF),   # CJK extension A
    (0x4E00, 0x9FFF),   # CJK unified ideographs
    (0xF900, 0xFAFF),   # CJK compatibility ideographs
    (0x3040, 0x30FF),   # hiragana + katakana
    (0xAC00, 0xD7AF),   # hangul syllables
)


def is_cjk(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str) -> list[str]:
    """Lowercased tokens; CJK characters are emitted individually."""
    tokens: list[str] = []
    current: list[str] = []

    def flush() -> None:
        if current:
            tokens.append("".join(current))
            current.clear()

    for ch in text.lower():
        if is_cjk(ch):
            flush()
            tokens.append(ch)
            continue
        category = unicodedata.category(ch)
        # Punctuation, separators, and control characters delimit tokens.
        if category.startswith(("P", "Z", "C")) or ch.isspace():
            flush()
        else:
            current.append(ch)
    flush()
    return tokens


def token_count(text: str) -> int:
    """Budget-counting rule: delimited units plus individual CJK chars."""
    return len(tokenize(text))


def text_length(text: str) -> int:
    """Grapheme-cluster count excluding punctuation, whitespace, controls.

    Combining marks attach to the preceding base character, so accented
    text counts clusters, not codepoints.  This is the length rule used
    for recommendation-explanation screening.
    """
    count = 0
    for ch in text:
        category = unicodedata.category(ch)
        if category.startswith(("P", "Z", "C")):
            continue
        if category.startswith("M"):
            continue  # combining mark: part of the previous cluster
        count += 1
    return count
