"""Acceptance suite: one pass/fail line per criterion.

Criteria 1-4 are exact oracles (loss identities, finite-difference
gradients, beam-search brute force, metric arithmetic). Criteria 5-8 are
directional properties of whole training runs on a synthetic imbalanced
world, voted across 3 master seeds. Criterion 9 is bit-exact
reproducibility of a manifest rerun. Everything is deterministic given the
pinned seeds.
"""

import copy
import math
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest

import factlab.train as train_mod
from factlab.corpus import (
    BOS_ID,
    RelationSchema,
    WorldSpec,
    build_vocab,
    generate_world,
    render_corpus,
)
from factlab.decode import LMScorer, TableScorer, beam_record, beam_search
from factlab.evaluation import EvalRecord, aggregate, head_takeover_rate
from factlab.manifest import (
    EvalConfig,
    ExperimentManifest,
    ModelShape,
    Pipeline,
    SamplingConfig,
)
from factlab.model import ModelConfig, TransformerLM, checkpoint_hash, load_checkpoint
from factlab.negsample import discover_pool, distribution_similarity
from factlab.train import (
    TokenizedPair,
    TrainConfig,
    combined_loss,
    ct_loss,
    dpo_loss,
    ntp_loss,
)

RELATIONS = [
    ("capital", "What is the capital of {s}?"),
    ("river", "What river runs through {s}?"),
    ("currency", "What currency is used in {s}?"),
    ("language", "What language is spoken in {s}?"),
    ("mountain", "What is the highest mountain of {s}?"),
    ("anthem", "What is the anthem of {s}?"),
    ("founder", "Who founded {s}?"),
    ("ruler", "Who rules {s}?"),
    ("export", "What is the main export of {s}?"),
    ("dish", "What is the national dish of {s}?"),
    ("bird", "What is the national bird of {s}?"),
    ("flower", "What is the national flower of {s}?"),
    ("sport", "What is the most popular sport in {s}?"),
    ("festival", "What is the main festival of {s}?"),
    ("port", "What is the largest port of {s}?"),
    ("airline", "What is the flag carrier of {s}?"),
    ("university", "What is the oldest university of {s}?"),
    ("newspaper", "What is the leading newspaper of {s}?"),
    ("lake", "What is the largest lake of {s}?"),
    ("island", "What is the largest island of {s}?"),
]

SEEDS = (0, 1, 2)


def verdict(criterion: str, ok: bool) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}"
    print(line, flush=True)
    conftest.VERDICTS.append(line)
    return ok


def f64_model(vocab_size=24, context_len=16, layers=1, dim=16, heads=2, seed=0):
    return TransformerLM(ModelConfig(
        vocab_size=vocab_size, context_len=context_len, layers=layers,
        model_dim=dim, heads=heads, precision="f64", init_seed=seed))


def random_pairs(n, vocab_size=24, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        prompt = [BOS_ID] + rng.integers(4, vocab_size, rng.integers(2, 6)).tolist()
        winner = rng.integers(4, vocab_size, rng.integers(1, 4)).tolist() + [2]
        loser = rng.integers(4, vocab_size, rng.integers(1, 4)).tolist() + [2]
        if winner == loser:
            loser[0] = (loser[0] - 4 + 1) % (vocab_size - 4) + 4
        pairs.append(TokenizedPair(f"p{i}", prompt, winner, loser))
    return pairs


class TestCriterion1:
    def test_preference_loss_identity_at_reference(self):
        model = f64_model(seed=3)
        ref = copy.deepcopy(model)
        pairs = random_pairs(100, seed=11)
        worst = 0.0
        for beta in (0.05, 0.1, 0.5, 1.0):
            loss = dpo_loss(model, ref, pairs, beta=beta).item()
            worst = max(worst, abs(loss - math.log(2)))
        ok = verdict(
            f"criterion 1: preference loss at policy==reference is ln 2 "
            f"(max deviation {worst:.2e})", worst < 1e-12)
        assert ok


class TestCriterion2:
    N_COORDS = 200
    STEP = 1e-5
    RTOL = 1e-4

    def _max_rel_err(self, loss_fn, model, gen):
        model.zero_grad()
        loss_fn().backward()
        params = [p for p in model.parameters() if p.grad is not None]
        sizes = torch.tensor([p.numel() for p in params])
        offsets = torch.cumsum(sizes, 0)
        total = int(offsets[-1])
        coords = torch.randperm(total, generator=gen)[: self.N_COORDS]
        worst = 0.0
        for c in coords:
            c = int(c)
            pi = int(torch.searchsorted(offsets, c, right=True))
            local = c - (int(offsets[pi - 1]) if pi else 0)
            flat = params[pi].detach().view(-1)
            orig = flat[local].item()
            with torch.no_grad():
                flat[local] = orig + self.STEP
            hi = loss_fn().item()
            with torch.no_grad():
                flat[local] = orig - self.STEP
            lo = loss_fn().item()
            with torch.no_grad():
                flat[local] = orig
            fd = (hi - lo) / (2 * self.STEP)
            an = params[pi].grad.view(-1)[local].item()
            # the difference quotient carries ~eps*|loss|/step of f64 rounding
            # noise, so gradients below STEP are judged against the absolute
            # bound rtol*STEP instead of a pure ratio
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), self.STEP))
        return worst

    def test_gradients_match_finite_differences(self):
        model = f64_model(seed=5)
        ref = f64_model(seed=6)
        seqs = [[1, 5, 9, 13, 2], [1, 7, 20, 2], [1, 11, 4, 8, 2]]
        pairs = random_pairs(6, seed=7)
        winners = [p.prompt + p.winner for p in pairs]
        gen = torch.Generator().manual_seed(0)
        losses = {
            "ntp": lambda: ntp_loss(model, seqs),
            "ct": lambda: ct_loss(model, winners),
            "dpo": lambda: dpo_loss(model, ref, pairs, beta=0.5),
            "combined": lambda: combined_loss(model, ref, pairs, beta=0.5, lam=0.7)[0],
        }
        worst = {name: self._max_rel_err(fn, model, gen) for name, fn in losses.items()}
        bad = max(worst.values())
        ok = verdict(
            "criterion 2: losses match central finite differences "
            f"(worst rel err {bad:.2e} over {self.N_COORDS} coords x 4 losses)",
            bad < self.RTOL)
        assert ok


def enumerate_continuations(logprobs, max_len, eos_id):
    """All continuations over non-EOS symbols, EOS-terminated below max_len."""
    out = []

    def walk(toks, lp):
        if len(toks) < max_len:
            out.append((toks, lp + logprobs[eos_id]))
            for tok in range(len(logprobs)):
                if tok != eos_id:
                    walk(toks + (tok,), lp + logprobs[tok])
        else:
            out.append((toks, lp))

    walk((), 0.0)
    out.sort(key=lambda c: (-c[1], c[0]))
    return out


class TestCriterion3:
    def test_beam_matches_brute_force(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        exact = True
        for _ in range(50):
            v = int(rng.integers(3, 9))
            max_len = int(rng.integers(1, 5))
            probs = rng.dirichlet(np.ones(v))
            scorer = TableScorer(probs)
            eos = v - 1
            k = v**max_len
            hyps = beam_search(scorer, [0], k=k, max_len=max_len, eos_id=eos)
            oracle = enumerate_continuations(np.log(probs), max_len, eos)[:k]
            if [h.tokens for h in hyps] != [toks for toks, _ in oracle]:
                exact = False
                break
            worst = max(
                worst,
                max(abs(h.logprob - lp) for h, (_, lp) in zip(hyps, oracle)),
            )
        ok = verdict(
            "criterion 3: beam search equals brute-force top-k on 50 random "
            f"tables (max logprob deviation {worst:.2e})", exact and worst < 1e-9)
        assert ok


class TestCriterion4:
    @staticmethod
    def rec(rank=None, prob=None, correct=False):
        return EvalRecord("t", "c", "", correct, [], rank, prob)

    def test_metric_fixtures(self):
        checks = []
        # pinned fixture: hits at ranks 1, 2, 4 plus seven misses
        rep = aggregate(
            [self.rec(rank=r) for r in (1, 2, 4)] + [self.rec() for _ in range(7)], k=10)
        checks.append(abs(rep.hr - 0.3) < 1e-12)
        checks.append(abs(rep.mrr - 0.175) < 1e-12)
        # hand-computed mixed fixture
        recs = [
            self.rec(rank=1, prob=0.5, correct=True),
            self.rec(rank=5, prob=0.125, correct=False),
            self.rec(correct=True),
            self.rec(),
        ]
        rep = aggregate(recs, k=5)
        checks.append(abs(rep.acc - 0.5) < 1e-12)
        checks.append(abs(rep.hr - 0.5) < 1e-12)
        checks.append(abs(rep.mrr - (1.0 + 0.2) / 4) < 1e-12)
        checks.append(abs(rep.prob - 0.3125) < 1e-12)
        # boundary fixtures
        rep = aggregate([self.rec(rank=1, prob=1.0, correct=True)] * 3, k=5)
        checks.append((rep.acc, rep.hr, rep.mrr, rep.prob) == (1.0, 1.0, 1.0, 1.0))
        rep = aggregate([self.rec()] * 3, k=5)
        checks.append((rep.acc, rep.hr, rep.mrr, rep.prob) == (0.0, 0.0, 0.0, 0.0))
        ok = verdict(
            f"criterion 4: metric oracles within 1e-12 ({sum(checks)}/{len(checks)} fixtures)",
            all(checks))
        assert ok


def imbalanced_manifest(out_dir: Path, master_seed: int) -> ExperimentManifest:
    """The 20-category, 50-subject, 100:1 world with calibrated training."""
    return ExperimentManifest(
        name=f"imbalanced-s{master_seed}",
        world=WorldSpec(
            categories=tuple(RelationSchema(n, t) for n, t in RELATIONS),
            subjects_per_category=50,
            head_fraction=0.1,
            imbalance_ratio=100,
            seed=1,
        ),
        output_dir=str(out_dir),
        model=ModelShape(layers=2, model_dim=64, heads=4, init_seed=0),
        pretrain=TrainConfig(learning_rate=1e-3, weight_decay=0.1, batch_size=64,
                             epochs=3, seed=0),
        preference=TrainConfig(beta=0.1, lam=1.0, learning_rate=3e-5,
                               weight_decay=0.1, batch_size=64, epochs=1, seed=0),
        sampling=SamplingConfig(top_m=20, n_negatives=5, beam_k=20, seed=0),
        eval=EvalConfig(k=50),
        ablations=("woNTP", "woDPO", "popularity"),
        master_seed=master_seed,
    )


@pytest.fixture(scope="session")
def imbalanced_runs(tmp_path_factory):
    """Full pipeline per master seed, plus the head-takeover probes."""
    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"imbalanced_s{seed}")
        pipe = Pipeline(imbalanced_manifest(out, seed))
        pipe.run_all()
        base, _, _ = load_checkpoint(out / "base.ckpt")
        untrained = TransformerLM(base.config)
        max_len = pipe._answer_max_len()
        takeover = head_takeover_rate(base, pipe.vocab, pipe.triples, pipe.schemas, max_len)
        takeover_raw = head_takeover_rate(untrained, pipe.vocab, pipe.triples, pipe.schemas, max_len)
        metrics = {}
        for line in (out / "report.tsv").read_text().splitlines()[1:]:
            parts = line.split("\t")
            metrics[parts[0]] = dict(zip(("ACC", "HR", "MRR", "Prob"), map(float, parts[1:])))
        runs[seed] = {
            "out": out,
            "takeover": takeover,
            "takeover_untrained": takeover_raw,
            "metrics": metrics,
            "n_tail_objects": 46,  # 45 distinct tail objects + 1 head object per category
        }
    return runs


@pytest.mark.slow
class TestCriterion5:
    def test_head_answers_permeate_tail_questions(self, imbalanced_runs):
        hits = sum(imbalanced_runs[s]["takeover"] > 0.5 for s in SEEDS)
        chance_ok = all(
            imbalanced_runs[s]["takeover_untrained"] <= 1 / imbalanced_runs[s]["n_tail_objects"]
            for s in SEEDS
        )
        rates = [round(imbalanced_runs[s]["takeover"], 3) for s in SEEDS]
        ok = verdict(
            f"criterion 5: head takeover on tail questions {rates} > 0.5 in "
            f"{hits}/3 seeds, untrained at or below chance", hits >= 2 and chance_ok)
        assert ok


@pytest.mark.slow
class TestCriterion6:
    def test_ablation_pattern(self, imbalanced_runs):
        inequalities = {
            "ACC(full) > ACC(ct-only)": lambda m: m["pretrainrl"]["ACC"] > m["woDPO"]["ACC"],
            "ACC(ct-only) > ACC(base)": lambda m: m["woDPO"]["ACC"] > m["base"]["ACC"],
            "Prob(dpo-only) > Prob(base)": lambda m: m["woNTP"]["Prob"] > m["base"]["Prob"],
            "HR(dpo-only) < HR(full)": lambda m: m["woNTP"]["HR"] < m["pretrainrl"]["HR"],
            "MRR(full) > MRR(dpo-only)": lambda m: m["pretrainrl"]["MRR"] > m["woNTP"]["MRR"],
            "MRR(full) > MRR(ct-only)": lambda m: m["pretrainrl"]["MRR"] > m["woDPO"]["MRR"],
        }
        votes = {
            name: sum(check(imbalanced_runs[s]["metrics"]) for s in SEEDS)
            for name, check in inequalities.items()
        }
        failed = {n: v for n, v in votes.items() if v < 2}
        ok = verdict(
            "criterion 6: ablation pattern holds by majority vote "
            f"(votes {list(votes.values())}/3 per inequality)", not failed)
        if failed:
            print(f"  failed inequalities: {failed}")
        assert ok


@pytest.mark.slow
class TestCriterion7:
    def test_sampled_pool_approximates_full_pool(self, tmp_path):
        schemas = [RelationSchema(n, t) for n, t in RELATIONS[:2]]
        spec = WorldSpec(
            categories=tuple(schemas),
            subjects_per_category=5000,
            head_fraction=0.1,
            imbalance_ratio=20,
            seed=1,
        )
        triples = generate_world(spec)
        vocab = build_vocab(triples, schemas)
        stream = render_corpus(triples, schemas, vocab, seed=0)
        model = TransformerLM(ModelConfig(
            vocab_size=len(vocab), context_len=16, layers=1, model_dim=32,
            heads=2, init_seed=0))
        torch.manual_seed(0)
        train_mod.run_pretrain(
            stream, model, TrainConfig(learning_rate=1e-3, batch_size=128, epochs=1, seed=0))
        scorer = LMScorer(model)
        max_len = max(len(vocab.encode(t.object)) for t in triples) + 2
        by_name = {s.name: s for s in schemas}
        records = []
        for t in triples:
            q = by_name[t.category].question(t.subject)
            hyps = beam_search(scorer, [BOS_ID] + vocab.encode(q), k=20,
                               max_len=max_len, detok=vocab.decode)
            records.append(beam_record(t.id, t.category, q, hyps))
        by_id = {t.id: t for t in triples}
        full = discover_pool(records, by_id, sample_per_category=len(triples),
                             top_m=20, seed=0)
        per_seed = []
        for seed in SEEDS:
            sampled = discover_pool(records, by_id, sample_per_category=1000,
                                    top_m=20, seed=seed)
            sims = [distribution_similarity(sampled[c], full[c]) for c in full]
            per_seed.append(all(cos >= 0.85 and rho >= 0.8 for cos, rho in sims))
        worst_cos = min(
            distribution_similarity(
                discover_pool(records, by_id, sample_per_category=1000, top_m=20, seed=s)[c],
                full[c])[0]
            for s in SEEDS for c in full
        )
        ok = verdict(
            "criterion 7: 1000-question pools match full pools "
            f"(cosine >= 0.85, spearman >= 0.8; worst cosine {worst_cos:.3f}) in "
            f"{sum(per_seed)}/3 seeds", sum(per_seed) >= 2)
        assert ok


@pytest.mark.slow
class TestCriterion8:
    def test_pool_sampling_beats_popularity_sampling(self, imbalanced_runs):
        wins = sum(
            imbalanced_runs[s]["metrics"]["pretrainrl"]["ACC"]
            >= imbalanced_runs[s]["metrics"]["popularity"]["ACC"]
            for s in SEEDS
        )
        ok = verdict(
            "criterion 8: model-discovered negatives match or beat popularity "
            f"negatives on accuracy in {wins}/3 seeds", wins >= 2)
        assert ok


@pytest.mark.slow
class TestCriterion9:
    def test_manifest_rerun_is_bit_exact(self, tmp_path):
        def small_manifest(out):
            return ExperimentManifest(
                name="repro",
                world=WorldSpec(
                    categories=tuple(RelationSchema(n, t) for n, t in RELATIONS[:3]),
                    subjects_per_category=10,
                    head_fraction=0.2,
                    imbalance_ratio=10,
                    seed=5,
                ),
                output_dir=str(out),
                model=ModelShape(layers=1, model_dim=32, heads=2, init_seed=0),
                pretrain=TrainConfig(learning_rate=1e-3, batch_size=32, epochs=2, seed=0),
                preference=TrainConfig(learning_rate=1e-4, batch_size=32, epochs=1, seed=0),
                sampling=SamplingConfig(top_m=10, n_negatives=3, beam_k=8, seed=0),
                eval=EvalConfig(k=5),
                ablations=("woNTP", "woDPO", "popularity"),
                master_seed=7,
            )

        a, b = tmp_path / "run_a", tmp_path / "run_b"
        Pipeline(small_manifest(a)).run_all()
        Pipeline(small_manifest(b)).run_all()
        ckpts = ["base.ckpt", "rl_pretrainrl.ckpt", "rl_woNTP.ckpt",
                 "rl_woDPO.ckpt", "rl_popularity.ckpt"]
        ckpt_ok = all(checkpoint_hash(a / c) == checkpoint_hash(b / c) for c in ckpts)
        reports = ["report.tsv", "prob_traces.tsv", "eval_base.json",
                   "eval_pretrainrl.json", "eval_woNTP.json", "eval_woDPO.json",
                   "eval_popularity.json"]
        report_ok = all((a / r).read_bytes() == (b / r).read_bytes() for r in reports)
        ok = verdict(
            "criterion 9: manifest rerun reproduces all checkpoints "
            f"({len(ckpts)} hashes) and reports ({len(reports)} files) bit-exactly",
            ckpt_ok and report_ok)
        assert ok
