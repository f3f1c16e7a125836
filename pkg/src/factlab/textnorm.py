"""Answer-string normalization shared by negative sampling and evaluation."""

import re

_WS = re.compile(r"\s+")


def normalize_answer(text: str) -> str:
    """Case-fold, trim, and collapse internal whitespace."""
    return _WS.sub(" ", text.strip()).casefold()
