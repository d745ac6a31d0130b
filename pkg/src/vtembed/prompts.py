"""Prompt construction for judging and reranking.

All prompts end one position before the answer token, so the model's
next-token logits at the final position score YES/NO (pointwise, judge)
or a digit token (listwise).
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from . import vocab
from .model import LengthError, ModelConfig, MultimodalExample, SerializedInput, serialize


def _body(example: MultimodalExample, cfg: ModelConfig) -> SerializedInput:
    s = serialize(example, cfg)
    return SerializedInput(s.ids[1:-1], s.visuals)  # drop leading BOI and trailing EOS


def _check_len(ids, cfg: ModelConfig, what: str):
    if len(ids) > cfg.max_seq_len:
        raise LengthError(f"{what} prompt length {len(ids)} > max_seq_len {cfg.max_seq_len}")


def pointwise_prompt(query: MultimodalExample, candidate: MultimodalExample,
                     cfg: ModelConfig, instruction: Tuple[int, ...] = ()) -> SerializedInput:
    qb, cb = _body(query, cfg), _body(candidate, cfg)
    ids = np.concatenate([
        [vocab.BOI], list(instruction), [vocab.SEP], qb.ids, [vocab.SEP], cb.ids, [vocab.SEP],
    ]).astype(np.int64)
    _check_len(ids, cfg, "pointwise")
    return SerializedInput(ids, qb.visuals + cb.visuals)


def listwise_prompt(query: MultimodalExample, candidates: Sequence[MultimodalExample],
                    cfg: ModelConfig, instruction: Tuple[int, ...] = ()) -> SerializedInput:
    qb = _body(query, cfg)
    parts = [np.asarray([vocab.BOI] + list(instruction) + [vocab.SEP], dtype=np.int64), qb.ids]
    visuals = list(qb.visuals)
    for pos, cand in enumerate(candidates, start=1):
        cb = _body(cand, cfg)
        parts.append(np.asarray([vocab.digit_token(pos)], dtype=np.int64))
        parts.append(cb.ids)
        visuals.extend(cb.visuals)
    parts.append(np.asarray([vocab.SEP], dtype=np.int64))
    ids = np.concatenate(parts)
    _check_len(ids, cfg, "listwise")
    return SerializedInput(ids, visuals)
