"""Discovery of high-probability falsehoods and preference-pair construction.

The default discovery mode aggregates beam answers per question category into
a candidate pool (counting each hypothesis once); a per-instance mode ranks
each question's own beams instead. A popularity-quantile baseline is kept for
comparison. Ground-truth aliases are always filtered, after normalization, so
no loser can ever be a surface form of the truth.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .corpus import KnowledgeTriple
from .textnorm import normalize_answer

log = logging.getLogger(__name__)

PAD_GLYPH = "<pad>"


def _stable_seed(seed: int, key: str) -> int:
    """Process-independent per-key seed (str.__hash__ is salted per run)."""
    import hashlib

    digest = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class CandidatePool:
    category: str
    candidates: list[tuple[str, float]]  # (object text, count or prob mass), descending
    source: str = "model-beams"  # or "popularity-table"

    def __post_init__(self):
        texts = [normalize_answer(t) for t, _ in self.candidates]
        if len(set(texts)) != len(texts):
            raise ValueError(f"pool for {self.category!r} has duplicate candidates")
        weights = [w for _, w in self.candidates]
        if any(a < b for a, b in zip(weights, weights[1:])):
            raise ValueError(f"pool for {self.category!r} is not ranked descending")


@dataclass(frozen=True)
class PreferencePair:
    triple_id: str
    prompt: str
    winner: str
    loser: str


def _alias_set(triple: KnowledgeTriple, use_aliases: bool = True) -> set[str]:
    if use_aliases:
        return {normalize_answer(a) for a in triple.object_aliases}
    return {normalize_answer(triple.object)}


def discover_pool(
    beam_records: list[dict],
    triples_by_id: dict[str, KnowledgeTriple],
    sample_per_category: int = 1000,
    top_m: int = 20,
    seed: int = 0,
    weight_by_prob: bool = False,
    filter_aliases: bool = True,
) -> dict[str, CandidatePool]:
    """Per category: sample questions without replacement, aggregate their beam
    answers (each question's own truth filtered out), keep the top_m."""
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    by_cat: dict[str, list[dict]] = defaultdict(list)
    for rec in beam_records:
        by_cat[rec["category"]].append(rec)

    pools: dict[str, CandidatePool] = {}
    for cat in sorted(by_cat):
        records = sorted(by_cat[cat], key=lambda r: r["question_id"])
        if not records:
            raise ValueError(f"category {cat!r} has no beam records")
        rng = random.Random(seed)
        if sample_per_category < len(records):
            records = rng.sample(records, sample_per_category)
        counts: Counter = Counter()
        for rec in records:
            triple = triples_by_id[rec["question_id"]]
            truths = _alias_set(triple, filter_aliases)
            for _rank, text, logprob in rec["answers"]:
                if normalize_answer(text) in truths:
                    continue
                counts[text] += math.exp(logprob) if weight_by_prob else 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_m]
        pools[cat] = CandidatePool(category=cat, candidates=ranked, source="model-beams")
    return pools


def per_instance_negatives(
    beam_record: dict,
    triple: KnowledgeTriple,
    n: int = 5,
    logprob_threshold: float | None = None,
    filter_aliases: bool = True,
) -> list[str]:
    """Alternative mode: take a question's own top beams (truth filtered) as
    its negatives, cut by rank n or by a log-probability threshold."""
    truths = _alias_set(triple, filter_aliases)
    out = []
    for _rank, text, logprob in sorted(beam_record["answers"], key=lambda a: a[0]):
        if normalize_answer(text) in truths:
            continue
        if logprob_threshold is not None and logprob < logprob_threshold:
            continue
        out.append(text)
        if logprob_threshold is None and len(out) == n:
            break
    return out


class EmptyPoolError(ValueError):
    pass


def sample_negatives(
    pool: CandidatePool,
    triple: KnowledgeTriple,
    n: int = 5,
    seed: int = 0,
    filter_aliases: bool = True,
) -> list[str]:
    """n distinct losers drawn uniformly without replacement from the
    alias-filtered pool; returns all (with a warning) if fewer remain."""
    truths = _alias_set(triple, filter_aliases)
    valid = [text for text, _ in pool.candidates if normalize_answer(text) not in truths]
    if not valid:
        raise EmptyPoolError(f"pool for {pool.category!r} empty after filtering truth of {triple.id}")
    if len(valid) < n:
        log.warning("triple %s: only %d candidates for %d requested", triple.id, len(valid), n)
        n = len(valid)
    return random.Random(seed).sample(valid, n)


def popularity_sampler(
    triples: list[KnowledgeTriple],
    popularity: dict[str, float],
    head_quantile: float = 0.1,
    n: int = 5,
    seed: int = 0,
    filter_aliases: bool = True,
    on_empty: str = "error",
) -> dict[str, list[str]]:
    """Baseline: per category, the head pool is the objects at or above the
    (1 - head_quantile) popularity quantile; losers drawn uniformly from it.
    A triple whose whole head pool is its own truth errors, or is skipped
    when on_empty="skip"."""
    if not 0.0 < head_quantile <= 1.0:
        raise ValueError("head_quantile must lie in (0, 1]")
    by_cat: dict[str, list[KnowledgeTriple]] = defaultdict(list)
    for t in triples:
        if t.object not in popularity:
            raise ValueError(f"no popularity score for object {t.object!r}")
        by_cat[t.category].append(t)

    losers: dict[str, list[str]] = {}
    for cat in sorted(by_cat):
        objects = sorted({t.object for t in by_cat[cat]})
        scores = sorted(popularity[o] for o in objects)
        cut_idx = math.ceil((1.0 - head_quantile) * len(scores))
        cut = scores[min(cut_idx, len(scores) - 1)]
        head_pool = [o for o in objects if popularity[o] >= cut]
        for t in sorted(by_cat[cat], key=lambda t: t.id):
            truths = _alias_set(t, filter_aliases)
            valid = [o for o in head_pool if normalize_answer(o) not in truths]
            if not valid:
                if on_empty == "skip":
                    log.warning("triple %s: head pool empty after truth filtering, skipped", t.id)
                    continue
                raise EmptyPoolError(f"head pool empty after filtering truth of {t.id}")
            k = min(n, len(valid))
            losers[t.id] = random.Random(_stable_seed(seed, t.id)).sample(valid, k)
    return losers


def build_pairs(triple: KnowledgeTriple, prompt: str, losers: list[str]) -> list[PreferencePair]:
    pairs = []
    for loser in losers:
        if normalize_answer(loser) in _alias_set(triple):
            raise ValueError(f"loser {loser!r} is an alias of the truth for {triple.id}")
        pairs.append(PreferencePair(triple.id, prompt, triple.object, loser))
    return pairs


def serialize_pair(pair: PreferencePair) -> str:
    """'{Question} {pos}<pad>{Question} {neg}' on a single line."""
    for part in (pair.prompt, pair.winner, pair.loser):
        if PAD_GLYPH in part or "\n" in part:
            raise ValueError(f"pair for {pair.triple_id}: text contains the separator or a newline")
    return f"{pair.prompt} {pair.winner}{PAD_GLYPH}{pair.prompt} {pair.loser}"


def split_pair_row(row: str) -> tuple[str, str]:
    """Split a serialized row on the first PAD into its two sides."""
    left, sep, right = row.partition(PAD_GLYPH)
    if not sep:
        raise ValueError("row has no pad separator")
    return left, right


def parse_pair_row(row: str, triple_id: str, prompt: str) -> PreferencePair:
    left, right = split_pair_row(row)
    for side in (left, right):
        if not side.startswith(prompt + " "):
            raise ValueError(f"row side does not start with the expected question: {side!r}")
    return PreferencePair(
        triple_id=triple_id,
        prompt=prompt,
        winner=left[len(prompt) + 1 :],
        loser=right[len(prompt) + 1 :],
    )


def write_pairs(pairs: list[PreferencePair], rows_path, sidecar_path) -> None:
    """Template rows plus a structured sidecar for exact reconstruction."""
    with open(rows_path, "w") as rows, open(sidecar_path, "w") as side:
        for p in pairs:
            rows.write(serialize_pair(p) + "\n")
            side.write(
                json.dumps(
                    {"triple_id": p.triple_id, "prompt": p.prompt, "winner": p.winner, "loser": p.loser},
                    sort_keys=True,
                )
                + "\n"
            )


def read_pairs(sidecar_path) -> list[PreferencePair]:
    pairs = []
    with open(sidecar_path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append(PreferencePair(d["triple_id"], d["prompt"], d["winner"], d["loser"]))
    return pairs


def distribution_similarity(
    pool_a: CandidatePool | list[tuple[str, float]],
    pool_b: CandidatePool | list[tuple[str, float]],
) -> tuple[float, float]:
    """(cosine, spearman) of the two count vectors aligned on the union of
    object keys (missing key counts as 0). Spearman uses average-rank ties."""
    a = dict(pool_a.candidates if isinstance(pool_a, CandidatePool) else pool_a)
    b = dict(pool_b.candidates if isinstance(pool_b, CandidatePool) else pool_b)
    keys = sorted(set(a) | set(b))
    x = np.array([a.get(k, 0.0) for k in keys], dtype=np.float64)
    y = np.array([b.get(k, 0.0) for k in keys], dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine undefined for a zero count vector")
    cosine = float(x @ y / (nx * ny))
    rho = float(stats.spearmanr(x, y).statistic)
    return cosine, rho
