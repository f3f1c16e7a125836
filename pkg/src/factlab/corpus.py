"""Synthetic imbalanced knowledge corpora: triples, vocabularies, rendering,
and ingestion of external QA datasets.

A "world" is a set of (subject, predicate, object) facts whose corpus
frequencies follow a configurable head/tail law. Rendering turns each fact
into a question/answer token sequence, repeated `frequency` times.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .textnorm import normalize_answer

log = logging.getLogger(__name__)

WORLD_SPEC_VERSION = 1

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
_SPECIALS = (PAD, BOS, EOS, UNK)

# trailing punctuation split off into its own token during encoding
_PUNCT = "?!.,"


@dataclass
class KnowledgeTriple:
    id: str
    subject: str
    predicate: str
    object: str
    object_aliases: frozenset[str]
    category: str
    frequency: int = 1

    def __post_init__(self):
        if self.object not in self.object_aliases:
            self.object_aliases = frozenset(self.object_aliases) | {self.object}
        if self.frequency < 1:
            raise ValueError(f"triple {self.id}: frequency must be >= 1")


@dataclass(frozen=True)
class RelationSchema:
    name: str
    template: str  # question template with a {s} slot

    def __post_init__(self):
        if "{s}" not in self.template:
            raise ValueError(f"template for {self.name!r} has no {{s}} slot")

    def question(self, subject: str) -> str:
        return self.template.replace("{s}", subject)


@dataclass(frozen=True)
class WorldSpec:
    categories: tuple[RelationSchema, ...]
    subjects_per_category: int
    head_fraction: float
    imbalance_ratio: float
    frequency_law: str = "two-level"  # "two-level" or "zipf"
    zipf_exponent: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.head_fraction < 1.0:
            raise ValueError("head_fraction must lie in (0, 1)")
        if self.imbalance_ratio < 1.0:
            raise ValueError("imbalance_ratio must be >= 1")
        if self.subjects_per_category < 2:
            raise ValueError("subjects_per_category must be >= 2")
        if self.frequency_law not in ("two-level", "zipf"):
            raise ValueError(f"unknown frequency_law {self.frequency_law!r}")

    def to_dict(self) -> dict:
        return {
            "spec_version": WORLD_SPEC_VERSION,
            "categories": [{"name": c.name, "template": c.template} for c in self.categories],
            "subjects_per_category": self.subjects_per_category,
            "head_fraction": self.head_fraction,
            "imbalance_ratio": self.imbalance_ratio,
            "frequency_law": self.frequency_law,
            "zipf_exponent": self.zipf_exponent,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        version = d.get("spec_version", WORLD_SPEC_VERSION)
        if version != WORLD_SPEC_VERSION:
            raise ValueError(f"unsupported world spec_version {version}")
        return cls(
            categories=tuple(RelationSchema(c["name"], c["template"]) for c in d["categories"]),
            subjects_per_category=d["subjects_per_category"],
            head_fraction=d["head_fraction"],
            imbalance_ratio=d["imbalance_ratio"],
            frequency_law=d.get("frequency_law", "two-level"),
            zipf_exponent=d.get("zipf_exponent", 1.0),
            seed=d.get("seed", 0),
        )


def save_world_spec(spec: WorldSpec, path) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2)


def load_world_spec(path) -> WorldSpec:
    with open(path) as f:
        return WorldSpec.from_dict(json.load(f))


def generate_world(spec: WorldSpec) -> list[KnowledgeTriple]:
    """Build the triple set: per category, a block of head subjects sharing one
    designated head object, the rest mapped to distinct tail objects.

    Deterministic given spec.seed. Frequencies follow spec.frequency_law.
    """
    rng = random.Random(spec.seed)
    n = spec.subjects_per_category
    n_head = math.ceil(spec.head_fraction * n)
    triples: list[KnowledgeTriple] = []
    for schema in spec.categories:
        subjects = [f"{schema.name}_subj{i}" for i in range(n)]
        rng.shuffle(subjects)
        head_object = f"{schema.name}_headobj"
        freqs = _frequencies(spec, n)
        for rank, subj in enumerate(subjects):
            is_head = rank < n_head
            obj = head_object if is_head else f"{schema.name}_obj{rank}"
            triples.append(
                KnowledgeTriple(
                    id=f"{schema.name}/{subj}",
                    subject=subj,
                    predicate=schema.name,
                    object=obj,
                    object_aliases=frozenset({obj}),
                    category=schema.name,
                    frequency=freqs[rank],
                )
            )
    return triples


def _frequencies(spec: WorldSpec, n: int) -> list[int]:
    if spec.frequency_law == "two-level":
        n_head = math.ceil(spec.head_fraction * n)
        head = max(1, round(spec.imbalance_ratio))
        return [head] * n_head + [1] * (n - n_head)
    # zipf: frequency of rank r proportional to 1/r^a, top rank = imbalance_ratio
    a = spec.zipf_exponent
    return [max(1, round(spec.imbalance_ratio / (r + 1) ** a)) for r in range(n)]


@dataclass
class Vocabulary:
    tokens: list[str]  # dense ids 0..|V|-1; specials occupy reserved slots
    mode: str = "entity-atomic"  # or "character-level"
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != _SPECIALS:
            raise ValueError("tokens must start with the reserved specials")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._max_words = max((t.count(" ") + 1 for t in self.tokens), default=1)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def encode(self, text: str) -> list[int]:
        """Tokenize text to ids. Entity-atomic mode does maximal-munch over
        whitespace words (multi-word entities are single tokens) and splits a
        trailing punctuation character into its own token when needed."""
        if self.mode == "character-level":
            return [self._index.get(ch, UNK_ID) for ch in text]
        words = text.split()
        ids: list[int] = []
        i = 0
        while i < len(words):
            matched = False
            for span in range(min(self._max_words, len(words) - i), 0, -1):
                cand = " ".join(words[i : i + span])
                if cand in self._index:
                    ids.append(self._index[cand])
                    i += span
                    matched = True
                    break
            if matched:
                continue
            w = words[i]
            if len(w) > 1 and w[-1] in _PUNCT and w[:-1] in self._index and w[-1] in self._index:
                ids.append(self._index[w[:-1]])
                ids.append(self._index[w[-1]])
            else:
                ids.append(UNK_ID)
            i += 1
        return ids

    def decode(self, ids: list[int]) -> str:
        """Inverse of encode on known-token strings. Specials are dropped;
        single-punctuation tokens attach to the preceding word."""
        if self.mode == "character-level":
            return "".join(self.tokens[i] for i in ids if i > UNK_ID)
        out = ""
        for i in ids:
            if i <= UNK_ID:
                continue
            tok = self.tokens[i]
            if out and not (len(tok) == 1 and tok in _PUNCT):
                out += " "
            out += tok
        return out


def build_vocab(
    triples: list[KnowledgeTriple],
    schemas: list[RelationSchema],
    mode: str = "entity-atomic",
    extra_texts: list[str] = (),
) -> Vocabulary:
    """Collect every template word, punctuation mark, entity, and alias into a
    dense vocabulary (or every character, in character-level mode)."""
    pieces: set[str] = set()
    for text in extra_texts:
        for word in text.split():
            if len(word) > 1 and word[-1] in _PUNCT:
                pieces.add(word[:-1])
                pieces.add(word[-1])
            else:
                pieces.add(word)
    for schema in schemas:
        for word in schema.template.replace("{s}", " ").split():
            if len(word) > 1 and word[-1] in _PUNCT:
                pieces.add(word[:-1])
                pieces.add(word[-1])
            else:
                pieces.add(word)
    for t in triples:
        pieces.add(t.subject)
        pieces.update(t.object_aliases)
    if mode == "character-level":
        chars = sorted({ch for p in pieces for ch in p} | {" "})
        return Vocabulary(list(_SPECIALS) + chars, mode=mode)
    return Vocabulary(list(_SPECIALS) + sorted(pieces), mode=mode)


@dataclass
class RenderedExample:
    triple_id: str
    prompt_tokens: list[int]  # the question, without framing
    answer_tokens: list[int]  # the object surface form
    full_tokens: list[int]  # BOS ++ prompt ++ answer ++ EOS


class EncodingError(ValueError):
    pass


def _encode_strict(vocab: Vocabulary, text: str, what: str) -> list[int]:
    ids = vocab.encode(text)
    if UNK_ID in ids:
        raise EncodingError(f"unencodable {what}: {text!r}")
    return ids


def render_example(
    triple: KnowledgeTriple,
    schema: RelationSchema,
    vocab: Vocabulary,
    question: str | None = None,
) -> RenderedExample:
    text = question if question is not None else schema.question(triple.subject)
    prompt = _encode_strict(vocab, text, f"question for {triple.id}")
    answer = _encode_strict(vocab, triple.object, f"object for {triple.id}")
    return RenderedExample(
        triple_id=triple.id,
        prompt_tokens=prompt,
        answer_tokens=answer,
        full_tokens=[BOS_ID] + prompt + answer + [EOS_ID],
    )


def render_corpus(
    triples: list[KnowledgeTriple],
    schemas: list[RelationSchema],
    vocab: Vocabulary,
    seed: int = 0,
    repetition: int = 1,
    questions: dict[str, str] | None = None,
) -> list[RenderedExample]:
    """Render each triple `frequency * repetition` times and shuffle the stream
    with the given seed. Dataset-level repetition is a corpus knob here."""
    by_name = {s.name: s for s in schemas}
    stream: list[RenderedExample] = []
    for t in triples:
        q = questions.get(t.id) if questions else None
        ex = render_example(t, by_name[t.predicate], vocab, question=q)
        stream.extend([ex] * (t.frequency * repetition))
    random.Random(seed).shuffle(stream)
    return stream


def dump_corpus(stream: list[RenderedExample], vocab: Vocabulary, path) -> None:
    """One example per line: triple_id, prompt text, answer text (tab-separated)."""
    with open(path, "w") as f:
        for ex in stream:
            f.write(
                f"{ex.triple_id}\t{vocab.decode(ex.prompt_tokens)}\t{vocab.decode(ex.answer_tokens)}\n"
            )


def load_external_dataset(
    path,
    delimiter: str = "\t",
    answer_sep: str = "|",
) -> tuple[list[KnowledgeTriple], int]:
    """Ingest a delimited QA dump with a header row carrying at least
    question, answers, subject, category (relation accepted as alias).

    Subjects that map to more than one distinct object within a category are
    dropped entirely (knowledge-conflict dedup). Returns (triples, n_dropped),
    where n_dropped counts malformed rows plus dedup casualties.
    """
    triples, _questions, n_dropped = load_external_qa(path, delimiter, answer_sep)
    return triples, n_dropped


def load_external_qa(
    path,
    delimiter: str = "\t",
    answer_sep: str = "|",
) -> tuple[list[KnowledgeTriple], dict[str, str], int]:
    """As load_external_dataset, but also returns the per-triple question text."""
    with open(path) as f:
        header = f.readline().rstrip("\n").split(delimiter)
        cols = {name: i for i, name in enumerate(header)}
        for required in ("question", "answers", "subject"):
            if required not in cols:
                raise ValueError(f"missing column {required!r} in {path}")
        cat_col = cols.get("category", cols.get("relation"))
        if cat_col is None:
            raise ValueError(f"missing column 'category' (or 'relation') in {path}")
        rows = []
        n_bad = 0
        for lineno, line in enumerate(f, start=2):
            parts = line.rstrip("\n").split(delimiter)
            if len(parts) < len(header) or not parts[cols["question"]].strip():
                log.warning("%s:%d malformed row skipped", path, lineno)
                n_bad += 1
                continue
            answers = [a.strip() for a in parts[cols["answers"]].split(answer_sep) if a.strip()]
            if not answers:
                log.warning("%s:%d row with no answers skipped", path, lineno)
                n_bad += 1
                continue
            rows.append(
                {
                    "question": parts[cols["question"]].strip(),
                    "answers": answers,
                    "subject": parts[cols["subject"]].strip(),
                    "category": parts[cat_col].strip(),
                }
            )

    # drop subjects with conflicting objects within a category
    objects_seen: dict[tuple[str, str], set[str]] = defaultdict(set)
    for r in rows:
        objects_seen[(r["category"], r["subject"])].add(normalize_answer(r["answers"][0]))
    conflicted = {k for k, objs in objects_seen.items() if len(objs) > 1}

    triples = []
    questions: dict[str, str] = {}
    seen_ids = set()
    n_dropped = n_bad
    for r in rows:
        key = (r["category"], r["subject"])
        if key in conflicted:
            n_dropped += 1
            continue
        tid = f"{r['category']}/{r['subject']}"
        if tid in seen_ids:  # exact duplicate row
            n_dropped += 1
            continue
        seen_ids.add(tid)
        questions[tid] = r["question"]
        triples.append(
            KnowledgeTriple(
                id=tid,
                subject=r["subject"],
                predicate=r["category"],
                object=r["answers"][0],
                object_aliases=frozenset(r["answers"]),
                category=r["category"],
                frequency=1,
            )
        )
    if n_dropped:
        log.info("%s: dropped %d rows (malformed or conflicting)", path, n_dropped)
    if not triples:
        raise ValueError(f"no valid rows in {path}")
    return triples, questions, n_dropped


def question_for(triple: KnowledgeTriple, schemas: list[RelationSchema]) -> str:
    by_name = {s.name: s for s in schemas}
    return by_name[triple.predicate].question(triple.subject)


def category_frequency_table(
    entries,
    top_m: int,
) -> dict[str, list[tuple[str, int]]]:
    """Per-category top_m object texts by count, descending, ties broken
    lexicographically. `entries` is an iterable of (category, text, weight);
    use `triples_as_entries` / beam-dump adapters to feed it."""
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    counts: dict[str, Counter] = defaultdict(Counter)
    for category, text, weight in entries:
        counts[category][text] += weight
    return {
        cat: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[:top_m]
        for cat, c in sorted(counts.items())
    }


def triples_as_entries(triples: list[KnowledgeTriple]):
    for t in triples:
        yield t.category, t.object, t.frequency
