"""Text normalisation shared by corpus preprocessing and metric scoring."""

from __future__ import annotations

import string

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip edge punctuation from tokens.

    Tokens that are pure punctuation vanish.

    >>> tokenize("The lungs are clear.  No effusion!")
    ['the', 'lungs', 'are', 'clear', 'no', 'effusion']
    """
    out = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            out.append(tok)
    return out


def normalize(text: str) -> str:
    return " ".join(tokenize(text))
