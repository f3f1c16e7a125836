"""Beam search and greedy (temperature-0) decoding over next-token scorers.

Scores are raw cumulative log-probabilities: no length normalization, since
both the confidence metric and the negative ranking depend on the raw
product of token probabilities. A finished hypothesis (EOS emitted) is
frozen and competes with active ones at final ranking. EOS is excluded from
the surface text but its probability factor is part of the logprob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .corpus import EOS_ID, Vocabulary
from .model import TransformerLM


class Scorer(Protocol):
    """Anything that maps equal-length token prefixes to next-token log-probs."""

    def next_logprobs(self, prefixes: list[list[int]]) -> np.ndarray: ...


class LMScorer:
    def __init__(self, model: TransformerLM):
        self.model = model
        self.max_prefix_len = model.config.context_len

    def next_logprobs(self, prefixes: list[list[int]]) -> np.ndarray:
        return self.model.next_logprobs(prefixes).double().numpy()


class TableScorer:
    """History-independent next-token distribution, for tests and baselines."""

    def __init__(self, probs: np.ndarray):
        probs = np.asarray(probs, dtype=np.float64)
        if abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
            raise ValueError("probs must be a distribution")
        with np.errstate(divide="ignore"):
            self.logprobs = np.log(probs)

    def next_logprobs(self, prefixes: list[list[int]]) -> np.ndarray:
        return np.tile(self.logprobs, (len(prefixes), 1))


@dataclass
class BeamHypothesis:
    tokens: tuple[int, ...]  # continuation only, EOS stripped
    text: str
    logprob: float
    rank: int
    finished: bool


def _check_budget(scorer, prompt: list[int], max_len: int) -> None:
    limit = getattr(scorer, "max_prefix_len", None)
    if limit is not None and len(prompt) + max_len > limit:
        raise ValueError(
            f"prompt length {len(prompt)} + max_len {max_len} exceeds context budget {limit}"
        )


def beam_search(
    scorer: Scorer,
    prompt: list[int],
    k: int,
    max_len: int,
    detok: Callable[[list[int]], str] | None = None,
    eos_id: int = EOS_ID,
) -> list[BeamHypothesis]:
    """Top-k continuations by cumulative log-probability.

    Keeps the k best active partial continuations at every step; expansions
    that emit EOS retire to the finished pool. The returned list is
    deduplicated by token sequence, sorted by (-logprob, tokens), truncated
    to k, and ranked 1..n.
    """
    if k < 1 or max_len < 1:
        raise ValueError("k and max_len must be >= 1")
    _check_budget(scorer, prompt, max_len)

    # (tokens_without_eos, logprob); active continuations never contain EOS
    active: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        rows = np.asarray(scorer.next_logprobs([list(prompt) + list(toks) for toks, _ in active]))
        for (toks, lp), row in zip(active, rows):
            finished.append((toks, lp + float(row[eos_id])))
        # vectorized expansion: pre-select by score alone, keeping boundary
        # ties so the exact (-logprob, tokens) ordering survives the cut
        scores = np.array([lp for _, lp in active])[:, None] + rows
        scores[:, eos_id] = -np.inf
        flat = scores.ravel()
        if k < flat.size:
            kth = np.partition(flat, flat.size - k)[flat.size - k]
            idx = np.nonzero(flat >= kth)[0] if np.isfinite(kth) else np.nonzero(np.isfinite(flat))[0]
        else:
            idx = np.nonzero(np.isfinite(flat))[0]
        vocab_size = rows.shape[1]
        candidates = [
            (active[j // vocab_size][0] + (j % vocab_size,), float(flat[j])) for j in map(int, idx)
        ]
        candidates.sort(key=lambda c: (-c[1], c[0]))
        active = candidates[:k]
        if not active:
            break

    pool = [(toks, lp, True) for toks, lp in finished]
    pool += [(toks, lp, False) for toks, lp in active]
    pool.sort(key=lambda c: (-c[1], c[0]))
    seen: set[tuple[int, ...]] = set()
    out: list[BeamHypothesis] = []
    for toks, lp, done in pool:
        if toks in seen:
            continue
        seen.add(toks)
        out.append(
            BeamHypothesis(
                tokens=toks,
                text=detok(list(toks)) if detok else "",
                logprob=lp,
                rank=len(out) + 1,
                finished=done,
            )
        )
        if len(out) == k:
            break
    return out


def greedy_decode(
    scorer: Scorer,
    prompt: list[int],
    max_len: int,
    detok: Callable[[list[int]], str] | None = None,
    eos_id: int = EOS_ID,
) -> BeamHypothesis:
    """Argmax token at each step, ties broken by lowest id; stops on EOS/max_len."""
    _check_budget(scorer, prompt, max_len)
    tokens: list[int] = []
    logprob = 0.0
    finished = False
    for _ in range(max_len):
        row = scorer.next_logprobs([list(prompt) + tokens])[0]
        tok = int(np.argmax(row))  # argmax takes the lowest index on ties
        logprob += float(row[tok])
        if tok == eos_id:
            finished = True
            break
        tokens.append(tok)
    return BeamHypothesis(
        tokens=tuple(tokens),
        text=detok(tokens) if detok else "",
        logprob=logprob,
        rank=1,
        finished=finished,
    )


def greedy_decode_batch(
    scorer: Scorer,
    prompts: list[list[int]],
    max_len: int,
    detok: Callable[[list[int]], str] | None = None,
    eos_id: int = EOS_ID,
) -> list[BeamHypothesis]:
    """Batched greedy decode for equal-length prompts (one forward per step)."""
    if not prompts:
        return []
    for p in prompts:
        _check_budget(scorer, p, max_len)
    n = len(prompts)
    tokens: list[list[int]] = [[] for _ in range(n)]
    logprob = [0.0] * n
    done = [False] * n
    prefixes = [list(p) for p in prompts]
    for _ in range(max_len):
        live = [i for i in range(n) if not done[i]]
        if not live:
            break
        rows = scorer.next_logprobs([prefixes[i] for i in live])
        for i, row in zip(live, rows):
            tok = int(np.argmax(row))
            logprob[i] += float(row[tok])
            if tok == eos_id:
                done[i] = True
            else:
                tokens[i].append(tok)
                prefixes[i].append(tok)
    return [
        BeamHypothesis(
            tokens=tuple(tokens[i]),
            text=detok(tokens[i]) if detok else "",
            logprob=logprob[i],
            rank=1,
            finished=done[i],
        )
        for i in range(n)
    ]


# -- beam-dump interchange format ---------------------------------------------
# one JSON record per question: id, category, question text, ranked answers.


def dump_beams(records: list[dict], path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def beam_record(
    question_id: str, category: str, question: str, hyps: list[BeamHypothesis]
) -> dict:
    return {
        "question_id": question_id,
        "category": category,
        "question": question,
        "answers": [[h.rank, h.text, h.logprob] for h in hyps],
    }


def load_beams(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def beams_as_entries(records: list[dict]):
    """Adapt beam-dump records to (category, text, weight) counting entries."""
    for rec in records:
        for _rank, text, _logprob in rec["answers"]:
            yield rec["category"], text, 1


def make_detok(vocab: Vocabulary) -> Callable[[list[int]], str]:
    return vocab.decode
