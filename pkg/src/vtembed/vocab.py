"""Reserved token ids shared by the model, losses, and templates."""

from __future__ import annotations

PAD = 0
EOS = 1
YES = 2
NO = 3
# digit tokens "1".."9"; DIGIT_BASE + k encodes the 1-based list position k
DIGIT_BASE = 3
DIGITS = tuple(range(4, 13))
BOI = 13   # instruction delimiter
BOV = 14   # visual-context delimiter
BOT = 15   # text-context delimiter
VIS = 16   # visual token slot, replaced by a projected visual embedding
SEP = 17   # prompt separator for judge/rerank templates
DATA_START = 18  # first id free for data tokens

RESERVED = (PAD, EOS, YES, NO) + DIGITS + (BOI, BOV, BOT, VIS, SEP)


def digit_token(k: int) -> int:
    """Token id encoding the 1-based position k (single digit, k <= 9)."""
    if not 1 <= k <= 9:
        raise ValueError(f"position {k} has no single-digit token")
    return DIGIT_BASE + k
