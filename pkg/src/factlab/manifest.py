"""Experiment manifests and the staged pipeline.

A manifest fully determines a run: world recipe (or external dataset),
model shape, training configs, sampling and eval knobs, ablation flags,
output directory. Every stage persists its artifacts next to a meta file
carrying a hash of the stage's inputs, so reruns reuse artifacts only when
nothing upstream changed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

from . import corpus as C
from . import decode as D
from . import evaluation as E
from . import negsample as N
from . import train as T
from .model import ModelConfig, TransformerLM, load_checkpoint, save_checkpoint
from .negsample import _stable_seed

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

ABLATIONS = ("woNTP", "woDPO", "popularity")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class SamplingConfig:
    mode: str = "category-pool"  # or "per-instance"
    top_m: int = 20
    n_negatives: int = 5
    sample_per_category: int = 1000
    beam_k: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("category-pool", "per-instance"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 10
    max_len: int | None = None  # default: longest answer length + 2
    acc_from_beam_top1: bool = False
    prob_sum_mode: bool = False


@dataclass(frozen=True)
class ModelShape:
    layers: int = 2
    model_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    precision: str = "f32"
    init_seed: int = 0


@dataclass
class ExperimentManifest:
    name: str
    world: C.WorldSpec | None
    output_dir: str
    dataset_path: str | None = None
    repetition: int = 1
    model: ModelShape = field(default_factory=ModelShape)
    pretrain: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(epochs=3))
    preference: T.TrainConfig = field(default_factory=lambda: T.TrainConfig(learning_rate=1e-4, epochs=1))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablations: tuple[str, ...] = ()
    master_seed: int = 0

    def __post_init__(self):
        if (self.world is None) == (self.dataset_path is None):
            raise ValueError("exactly one of world or dataset_path must be set")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ValueError(f"unknown ablation {a!r}")

    def to_dict(self) -> dict:
        return {
            "spec_version": MANIFEST_VERSION,
            "name": self.name,
            "world": self.world.to_dict() if self.world else None,
            "dataset_path": self.dataset_path,
            "repetition": self.repetition,
            "model": asdict(self.model),
            "pretrain": self.pretrain.to_dict(),
            "preference": self.preference.to_dict(),
            "sampling": asdict(self.sampling),
            "eval": asdict(self.eval),
            "ablations": list(self.ablations),
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        version = d.get("spec_version", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest spec_version {version}")
        return cls(
            name=d["name"],
            world=C.WorldSpec.from_dict(d["world"]) if d.get("world") else None,
            dataset_path=d.get("dataset_path"),
            repetition=d.get("repetition", 1),
            model=ModelShape(**d.get("model", {})),
            pretrain=T.TrainConfig.from_dict(d.get("pretrain", {})),
            preference=T.TrainConfig.from_dict(d.get("preference", {})),
            sampling=SamplingConfig(**d.get("sampling", {})),
            eval=EvalConfig(**d.get("eval", {})),
            ablations=tuple(d.get("ablations", ())),
            master_seed=d.get("master_seed", 0),
            output_dir=d["output_dir"],
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def seed_for(self, component_seed: int) -> int:
        return component_seed + self.master_seed


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


STAGES = ("generate", "pretrain", "eval-base", "beam", "pool", "pairs", "train-rl", "eval", "report")


class Pipeline:
    """Runs manifest stages in order, reusing artifacts whose recorded input
    hash still matches."""

    def __init__(self, manifest: ExperimentManifest):
        self.m = manifest
        self.out = Path(manifest.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        manifest.save(self.out / "manifest.json")
        self._triples: list[C.KnowledgeTriple] | None = None
        self._vocab: C.Vocabulary | None = None
        self._schemas: list[C.RelationSchema] | None = None
        self._questions: dict[str, str] | None = None

    # -- artifact bookkeeping --------------------------------------------
    def _meta_path(self, artifact: Path) -> Path:
        return artifact.with_suffix(artifact.suffix + ".meta.json")

    def _fresh(self, artifact: Path, input_hash: str) -> bool:
        meta = self._meta_path(artifact)
        if not artifact.exists() or not meta.exists():
            return False
        with open(meta) as f:
            return json.load(f).get("input_hash") == input_hash

    def _stamp(self, artifact: Path, stage: str, input_hash: str) -> None:
        with open(self._meta_path(artifact), "w") as f:
            json.dump({"stage": stage, "input_hash": input_hash}, f)

    # -- world / dataset loading -----------------------------------------
    def _load_world(self):
        if self._triples is not None:
            return
        with open(self.out / "triples.json") as f:
            self._triples = [
                C.KnowledgeTriple(
                    id=d["id"], subject=d["subject"], predicate=d["predicate"],
                    object=d["object"], object_aliases=frozenset(d["object_aliases"]),
                    category=d["category"], frequency=d["frequency"],
                )
                for d in json.load(f)
            ]
        with open(self.out / "vocab.json") as f:
            v = json.load(f)
        self._vocab = C.Vocabulary(v["tokens"], mode=v["mode"])
        with open(self.out / "schemas.json") as f:
            self._schemas = [C.RelationSchema(s["name"], s["template"]) for s in json.load(f)]
        questions_path = self.out / "questions.json"
        if questions_path.exists():
            with open(questions_path) as f:
                self._questions = json.load(f)

    @property
    def triples(self) -> list[C.KnowledgeTriple]:
        self._load_world()
        return self._triples

    @property
    def vocab(self) -> C.Vocabulary:
        self._load_world()
        return self._vocab

    @property
    def schemas(self) -> list[C.RelationSchema]:
        self._load_world()
        return self._schemas

    @property
    def triples_by_id(self) -> dict[str, C.KnowledgeTriple]:
        return {t.id: t for t in self.triples}

    def question(self, triple: C.KnowledgeTriple) -> str:
        if self._questions is not None:
            return self._questions[triple.id]
        return C.question_for(triple, self.schemas)

    def _answer_max_len(self) -> int:
        longest = max(len(self.vocab.encode(t.object)) for t in self.triples)
        return longest + 2

    def _eval_max_len(self) -> int:
        return self.m.eval.max_len or self._answer_max_len()

    def _render_stream(self) -> list[C.RenderedExample]:
        return C.render_corpus(
            self.triples, self.schemas, self.vocab,
            seed=self.m.seed_for(self.m.world.seed if self.m.world else 0),
            repetition=self.m.repetition,
            questions=self._questions,
        )

    def _model_config(self) -> ModelConfig:
        full_len = max(len(ex.full_tokens) for ex in self._render_stream())
        max_prompt = max(1 + len(self.vocab.encode(self.question(t))) for t in self.triples)
        context = max(full_len, max_prompt + self._eval_max_len())
        s = self.m.model
        return ModelConfig(
            vocab_size=len(self.vocab), context_len=context,
            layers=s.layers, model_dim=s.model_dim, heads=s.heads,
            mlp_ratio=s.mlp_ratio, precision=s.precision,
            init_seed=self.m.seed_for(s.init_seed),
        )

    # -- stages ------------------------------------------------------------
    def stage_generate(self) -> None:
        ih = _hash_obj({"world": self.m.world.to_dict() if self.m.world else None,
                        "dataset": self.m.dataset_path, "repetition": self.m.repetition,
                        "master_seed": self.m.master_seed})
        artifact = self.out / "triples.json"
        if self._fresh(artifact, ih):
            return
        if self.m.world is not None:
            spec = dataclasses.replace(self.m.world, seed=self.m.seed_for(self.m.world.seed))
            triples = C.generate_world(spec)
            schemas = list(spec.categories)
            vocab = C.build_vocab(triples, schemas)
        else:
            path = Path(self.m.dataset_path)
            if not path.exists():
                raise StageError("generate", f"dataset file not found: {path} (manifest field dataset_path)")
            triples, questions, _dropped = C.load_external_qa(path)
            # external questions carry their own text; templates are placeholders
            schemas = [C.RelationSchema(cat, "{s}") for cat in sorted({t.category for t in triples})]
            vocab = C.build_vocab(triples, schemas, extra_texts=list(questions.values()))
            with open(self.out / "questions.json", "w") as f:
                json.dump(questions, f)
        with open(self.out / "schemas.json", "w") as f:
            json.dump([{"name": s.name, "template": s.template} for s in schemas], f, indent=2)
        with open(self.out / "vocab.json", "w") as f:
            json.dump({"tokens": vocab.tokens, "mode": vocab.mode}, f)
        with open(artifact, "w") as f:
            json.dump(
                [
                    {"id": t.id, "subject": t.subject, "predicate": t.predicate,
                     "object": t.object, "object_aliases": sorted(t.object_aliases),
                     "category": t.category, "frequency": t.frequency}
                    for t in triples
                ],
                f,
            )
        self._triples = self._vocab = self._schemas = self._questions = None
        C.dump_corpus(self._render_stream(), self.vocab, self.out / "corpus.tsv")
        self._stamp(artifact, "generate", ih)

    def stage_pretrain(self) -> None:
        ih = _hash_obj({"triples": _hash_file(self.out / "triples.json"),
                        "model": asdict(self.m.model), "pretrain": self.m.pretrain.to_dict(),
                        "master_seed": self.m.master_seed})
        artifact = self.out / "base.ckpt"
        if self._fresh(artifact, ih):
            return
        import torch

        cfg = dataclasses.replace(self.m.pretrain, seed=self.m.seed_for(self.m.pretrain.seed))
        torch.manual_seed(cfg.seed)
        model = TransformerLM(self._model_config())
        T.run_pretrain(self._render_stream(), model, cfg, log_path=self.out / "pretrain.log")
        save_checkpoint(artifact, model, step=cfg.epochs, rng_state={"seed": cfg.seed})
        self._stamp(artifact, "pretrain", ih)

    def _evaluate_checkpoint(self, ckpt: Path, tag: str) -> None:
        model, _, _ = load_checkpoint(ckpt)
        report, records = E.evaluate(
            model, self.vocab, self.triples, self.schemas,
            k=self.m.eval.k, max_len=self._eval_max_len(),
            acc_from_beam_top1=self.m.eval.acc_from_beam_top1,
            prob_sum_mode=self.m.eval.prob_sum_mode,
            questions=self._questions,
        )
        E.save_report(report, records, self.out / f"eval_{tag}.json", self.out / f"records_{tag}.jsonl")

    def stage_eval_base(self) -> None:
        ih = _hash_obj({"base": _hash_file(self.out / "base.ckpt"), "eval": asdict(self.m.eval)})
        artifact = self.out / "eval_base.json"
        if self._fresh(artifact, ih):
            return
        self._evaluate_checkpoint(self.out / "base.ckpt", "base")
        self._stamp(artifact, "eval-base", ih)

    def stage_beam(self) -> None:
        ih = _hash_obj({"base": _hash_file(self.out / "base.ckpt"),
                        "sampling": asdict(self.m.sampling)})
        artifact = self.out / "beams.jsonl"
        if self._fresh(artifact, ih):
            return
        model, _, _ = load_checkpoint(self.out / "base.ckpt")
        scorer = D.LMScorer(model)
        records = []
        max_len = self._answer_max_len()
        for t in self.triples:
            question = self.question(t)
            prompt = [C.BOS_ID] + self.vocab.encode(question)
            hyps = D.beam_search(scorer, prompt, self.m.sampling.beam_k, max_len, detok=self.vocab.decode)
            records.append(D.beam_record(t.id, t.category, question, hyps))
        D.dump_beams(records, artifact)
        self._stamp(artifact, "beam", ih)

    def stage_pool(self) -> None:
        ih = _hash_obj({"beams": _hash_file(self.out / "beams.jsonl"),
                        "sampling": asdict(self.m.sampling), "master_seed": self.m.master_seed})
        artifact = self.out / "pools.json"
        if self._fresh(artifact, ih):
            return
        pools = N.discover_pool(
            D.load_beams(self.out / "beams.jsonl"), self.triples_by_id,
            sample_per_category=self.m.sampling.sample_per_category,
            top_m=self.m.sampling.top_m, seed=self.m.seed_for(self.m.sampling.seed),
        )
        with open(artifact, "w") as f:
            json.dump(
                {cat: {"candidates": p.candidates, "source": p.source} for cat, p in pools.items()},
                f, indent=2,
            )
        self._stamp(artifact, "pool", ih)

    def _load_pools(self) -> dict[str, N.CandidatePool]:
        with open(self.out / "pools.json") as f:
            raw = json.load(f)
        return {
            cat: N.CandidatePool(cat, [tuple(c) for c in d["candidates"]], d["source"])
            for cat, d in raw.items()
        }

    def stage_pairs(self) -> None:
        ih = _hash_obj({"pools": _hash_file(self.out / "pools.json"),
                        "beams": _hash_file(self.out / "beams.jsonl"),
                        "sampling": asdict(self.m.sampling), "master_seed": self.m.master_seed})
        artifact = self.out / "pairs.jsonl"
        if self._fresh(artifact, ih):
            return
        seed = self.m.seed_for(self.m.sampling.seed)
        n = self.m.sampling.n_negatives
        pairs: list[N.PreferencePair] = []
        if self.m.sampling.mode == "per-instance":
            beams = {r["question_id"]: r for r in D.load_beams(self.out / "beams.jsonl")}
            for t in self.triples:
                losers = N.per_instance_negatives(beams[t.id], t, n=n)
                pairs.extend(N.build_pairs(t, self.question(t), losers))
        else:
            pools = self._load_pools()
            for t in self.triples:
                losers = N.sample_negatives(pools[t.category], t, n=n, seed=_stable_seed(seed, t.id))
                pairs.extend(N.build_pairs(t, self.question(t), losers))
        N.write_pairs(pairs, self.out / "pairs.txt", artifact)
        # the popularity-baseline pair set, if that ablation is requested
        if "popularity" in self.m.ablations:
            popularity = {}
            for t in self.triples:
                popularity[t.object] = popularity.get(t.object, 0) + t.frequency
            losers_by_id = N.popularity_sampler(self.triples, popularity, n=n, seed=seed, on_empty="skip")
            pop_pairs = []
            for t in self.triples:
                if t.id in losers_by_id:
                    pop_pairs.extend(N.build_pairs(t, self.question(t), losers_by_id[t.id]))
            N.write_pairs(pop_pairs, self.out / "pairs_popularity.txt", self.out / "pairs_popularity.jsonl")
        self._stamp(artifact, "pairs", ih)

    def _variants(self) -> list[str]:
        return ["pretrainrl"] + [a for a in self.m.ablations]

    def stage_train_rl(self) -> None:
        import torch

        ih = _hash_obj({"pairs": _hash_file(self.out / "pairs.jsonl"),
                        "base": _hash_file(self.out / "base.ckpt"),
                        "preference": self.m.preference.to_dict(),
                        "ablations": sorted(self.m.ablations),
                        "master_seed": self.m.master_seed})
        artifact = self.out / "rl_pretrainrl.ckpt"
        if self._fresh(artifact, ih):
            return
        base, _, _ = load_checkpoint(self.out / "base.ckpt")
        cfg = dataclasses.replace(self.m.preference, seed=self.m.seed_for(self.m.preference.seed))
        main_pairs = [T.tokenize_pair(p, self.vocab) for p in N.read_pairs(self.out / "pairs.jsonl")]
        for variant in self._variants():
            vcfg, use_dpo, pairs = cfg, True, main_pairs
            if variant == "woNTP":
                vcfg = dataclasses.replace(cfg, lam=0.0)
            elif variant == "woDPO":
                use_dpo = False
            elif variant == "popularity":
                pairs = [T.tokenize_pair(p, self.vocab) for p in N.read_pairs(self.out / "pairs_popularity.jsonl")]
            torch.manual_seed(vcfg.seed)
            policy = T.run_preference_training(
                pairs, base, vcfg, use_dpo=use_dpo, log_path=self.out / f"train_{variant}.log"
            )
            save_checkpoint(self.out / f"rl_{variant}.ckpt", policy, step=vcfg.epochs,
                            rng_state={"seed": vcfg.seed})
        self._stamp(artifact, "train-rl", ih)

    def stage_eval(self) -> None:
        ih = _hash_obj({"ckpts": {v: _hash_file(self.out / f"rl_{v}.ckpt") for v in self._variants()},
                        "eval": asdict(self.m.eval)})
        artifact = self.out / "eval_pretrainrl.json"
        if self._fresh(artifact, ih):
            return
        for variant in self._variants():
            self._evaluate_checkpoint(self.out / f"rl_{variant}.ckpt", variant)
        self._stamp(artifact, "eval", ih)

    def stage_report(self) -> None:
        variants = ["base"] + self._variants()
        ih = _hash_obj({v: _hash_file(self.out / f"eval_{v}.json") for v in variants})
        artifact = self.out / "report.tsv"
        if self._fresh(artifact, ih):
            return
        with open(artifact, "w") as f:
            f.write("method\tACC\tHR\tMRR\tProb\n")
            for v in variants:
                r = E.load_report(self.out / f"eval_{v}.json")
                f.write(f"{v}\t{100 * r.acc:.2f}\t{100 * r.hr:.2f}\t{100 * r.mrr:.2f}\t{100 * r.prob:.2f}\n")
        # per-question probability traces across variants, for external plotting
        with open(self.out / "prob_traces.tsv", "w") as f:
            f.write("triple_id\tmethod\tfirst_correct_rank\tcorrect_prob\n")
            for v in variants:
                with open(self.out / f"records_{v}.jsonl") as records:
                    for line in records:
                        r = json.loads(line)
                        rank = r["first_correct_rank"]
                        prob = r["correct_prob"]
                        f.write(f"{r['triple_id']}\t{v}\t{rank if rank else ''}\t"
                                f"{prob if prob is not None else ''}\n")
        self._stamp(artifact, "report", ih)

    # -- driver ------------------------------------------------------------
    def run_stage(self, stage: str) -> None:
        fn = {
            "generate": self.stage_generate,
            "pretrain": self.stage_pretrain,
            "eval-base": self.stage_eval_base,
            "beam": self.stage_beam,
            "pool": self.stage_pool,
            "pairs": self.stage_pairs,
            "train-rl": self.stage_train_rl,
            "eval": self.stage_eval,
            "report": self.stage_report,
        }.get(stage)
        if fn is None:
            raise ValueError(f"unknown stage {stage!r}")
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, str(exc)) from exc

    def run_all(self) -> Path:
        for stage in STAGES:
            log.info("[%s] stage %s", self.m.name, stage)
            self.run_stage(stage)
        return self.out
