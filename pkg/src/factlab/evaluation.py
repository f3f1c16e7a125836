"""Ranking metrics over beam and greedy outputs.

ACC: greedy (temperature-0) exact match after normalization.
HR@k: some beam hypothesis matches an alias.
MRR@k: mean over ALL questions of 1/rank of the first correct beam, 0 on miss.
Prob@k: mean, over hit questions only, of exp(logprob) of the first correct
beam (0 reported when nothing hits).
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, asdict

from .corpus import BOS_ID, KnowledgeTriple, RelationSchema, Vocabulary, question_for
from .decode import BeamHypothesis, LMScorer, beam_search, greedy_decode_batch
from .model import TransformerLM
from .textnorm import normalize_answer


def judge(answer: str, triple: KnowledgeTriple) -> bool:
    """Normalized exact match against the triple's alias set."""
    return normalize_answer(answer) in {normalize_answer(a) for a in triple.object_aliases}


@dataclass
class EvalRecord:
    triple_id: str
    category: str
    greedy_answer: str
    greedy_correct: bool
    beams: list[BeamHypothesis]
    first_correct_rank: int | None
    correct_prob: float | None


@dataclass
class EvalReport:
    acc: float
    hr: float
    mrr: float
    prob: float
    k: int
    n_questions: int
    per_category: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def score_record(
    triple: KnowledgeTriple,
    category: str,
    greedy: BeamHypothesis,
    beams: list[BeamHypothesis],
    acc_from_beam_top1: bool = False,
    prob_sum_mode: bool = False,
) -> EvalRecord:
    correct = [h for h in beams if judge(h.text, triple)]
    first = min(correct, key=lambda h: h.rank) if correct else None
    if first is None:
        prob = None
    elif prob_sum_mode:
        prob = min(1.0, sum(math.exp(h.logprob) for h in correct))
    else:
        prob = math.exp(first.logprob)
    if acc_from_beam_top1:
        greedy_answer = beams[0].text if beams else ""
        greedy_correct = bool(beams) and judge(beams[0].text, triple)
    else:
        greedy_answer = greedy.text
        greedy_correct = judge(greedy.text, triple)
    return EvalRecord(
        triple_id=triple.id,
        category=category,
        greedy_answer=greedy_answer,
        greedy_correct=greedy_correct,
        beams=beams,
        first_correct_rank=first.rank if first else None,
        correct_prob=prob,
    )


def aggregate(records: list[EvalRecord], k: int) -> EvalReport:
    if not records:
        raise ValueError("empty question set")

    def _metrics(rs: list[EvalRecord]) -> dict[str, float]:
        n = len(rs)
        acc = sum(r.greedy_correct for r in rs) / n
        hr = sum(r.first_correct_rank is not None for r in rs) / n
        mrr = sum(1.0 / r.first_correct_rank for r in rs if r.first_correct_rank) / n
        hits = [r.correct_prob for r in rs if r.correct_prob is not None]
        prob = sum(hits) / len(hits) if hits else 0.0
        return {"acc": acc, "hr": hr, "mrr": mrr, "prob": prob, "n": n}

    overall = _metrics(records)
    by_cat: dict[str, list[EvalRecord]] = defaultdict(list)
    for r in records:
        by_cat[r.category].append(r)
    return EvalReport(
        acc=overall["acc"],
        hr=overall["hr"],
        mrr=overall["mrr"],
        prob=overall["prob"],
        k=k,
        n_questions=len(records),
        per_category={cat: _metrics(rs) for cat, rs in sorted(by_cat.items())},
    )


def evaluate(
    model: TransformerLM,
    vocab: Vocabulary,
    triples: list[KnowledgeTriple],
    schemas: list[RelationSchema],
    k: int,
    max_len: int,
    acc_from_beam_top1: bool = False,
    prob_sum_mode: bool = False,
    questions: dict[str, str] | None = None,
) -> tuple[EvalReport, list[EvalRecord]]:
    """Greedy plus beam-k decode for every question, then aggregate."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not triples:
        raise ValueError("empty question set")
    scorer = LMScorer(model)

    def _question(t: KnowledgeTriple) -> str:
        return questions[t.id] if questions else question_for(t, schemas)

    prompts = {t.id: [BOS_ID] + vocab.encode(_question(t)) for t in triples}

    # batch greedy decodes across equal-length prompts
    by_len: dict[int, list[KnowledgeTriple]] = defaultdict(list)
    for t in triples:
        by_len[len(prompts[t.id])].append(t)
    greedy: dict[str, BeamHypothesis] = {}
    for _, group in sorted(by_len.items()):
        hyps = greedy_decode_batch(scorer, [prompts[t.id] for t in group], max_len, detok=vocab.decode)
        for t, h in zip(group, hyps):
            greedy[t.id] = h

    records = []
    for t in triples:
        beams = beam_search(scorer, prompts[t.id], k, max_len, detok=vocab.decode)
        records.append(
            score_record(t, t.category, greedy[t.id], beams,
                         acc_from_beam_top1=acc_from_beam_top1, prob_sum_mode=prob_sum_mode)
        )
    return aggregate(records, k), records


def head_objects(triples: list[KnowledgeTriple]) -> dict[str, str]:
    """Per category, the object with the largest total corpus frequency."""
    mass: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for t in triples:
        mass[t.category][t.object] += t.frequency
    return {
        cat: min((o for o in objs if objs[o] == max(objs.values())))
        for cat, objs in mass.items()
    }


def head_takeover_rate(
    model: TransformerLM,
    vocab: Vocabulary,
    triples: list[KnowledgeTriple],
    schemas: list[RelationSchema],
    max_len: int,
    questions: dict[str, str] | None = None,
) -> float:
    """Fraction of tail questions whose greedy answer is their category's
    dominant (head) object: the imbalance failure mode, measured directly."""
    heads = head_objects(triples)
    tails = [t for t in triples if t.object != heads[t.category]]
    if not tails:
        raise ValueError("world has no tail triples")
    scorer = LMScorer(model)
    prompts = [
        [BOS_ID] + vocab.encode(questions[t.id] if questions else question_for(t, schemas))
        for t in tails
    ]
    by_len: dict[int, list[int]] = defaultdict(list)
    for i, p in enumerate(prompts):
        by_len[len(p)].append(i)
    n_head = 0
    for _, idxs in sorted(by_len.items()):
        hyps = greedy_decode_batch(scorer, [prompts[i] for i in idxs], max_len, detok=vocab.decode)
        for i, h in zip(idxs, hyps):
            if normalize_answer(h.text) == normalize_answer(heads[tails[i].category]):
                n_head += 1
    return n_head / len(tails)


def save_report(report: EvalReport, records: list[EvalRecord], report_path, records_path) -> None:
    with open(report_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    with open(records_path, "w") as f:
        for r in records:
            f.write(
                json.dumps(
                    {
                        "triple_id": r.triple_id,
                        "category": r.category,
                        "greedy_answer": r.greedy_answer,
                        "greedy_correct": r.greedy_correct,
                        "first_correct_rank": r.first_correct_rank,
                        "correct_prob": r.correct_prob,
                        "beams": [[h.rank, h.text, h.logprob] for h in r.beams],
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_report(path) -> EvalReport:
    with open(path) as f:
        return EvalReport(**json.load(f))
