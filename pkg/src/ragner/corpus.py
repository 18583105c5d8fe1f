"""Shared data model: BIO corpora, entity schemas, gold outputs, splits.

A corpus is a list of LabeledSentence objects parsed from BIO-tagged text.
An EntitySchema gives the ordered entity types (with natural-language
definitions) that drive prompt rendering and output key order. NerOutput is
the generation-task target: an ordered mapping from entity type to the
entity surface strings of that type.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import (
    DuplicateTypeName,
    EmptyDefinition,
    FormatError,
    MalformedLine,
    StoreSizeTooLarge,
    UnknownSpanType,
)

_FOLD_RE = re.compile(r"[\s_]+")


def fold_type_name(name: str) -> str:
    """Canonical form for matching entity type names: lowercase, whitespace
    and underscores collapsed to single spaces."""
    return _FOLD_RE.sub(" ", name.strip().lower())


@dataclass(frozen=True)
class EntitySpan:
    """A typed contiguous token range [start, end) within one sentence."""

    entity_type: str
    start: int
    end: int
    surface: str


@dataclass
class LabeledSentence:
    """A tokenized sentence with non-overlapping typed entity spans."""

    id: int
    tokens: list[str]
    spans: list[EntitySpan] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def validate(self, schema: "EntitySchema | None" = None) -> None:
        """Check span invariants; with a schema, also check span types."""
        prev_end = 0
        for span in self.spans:
            if not (0 <= span.start < span.end <= len(self.tokens)):
                raise ValueError(
                    f"sentence {self.id}: span {span} outside [0, {len(self.tokens)})"
                )
            if span.start < prev_end:
                raise ValueError(f"sentence {self.id}: overlapping/unsorted span {span}")
            expected = " ".join(self.tokens[span.start:span.end])
            if span.surface != expected:
                raise ValueError(
                    f"sentence {self.id}: span surface {span.surface!r} != {expected!r}"
                )
            if schema is not None and span.entity_type not in schema:
                raise UnknownSpanType(
                    f"sentence {self.id}: span type {span.entity_type!r} not in schema"
                )
            prev_end = span.end


@dataclass(frozen=True)
class EntityType:
    name: str
    definition: str


@dataclass(frozen=True)
class EntitySchema:
    """Ordered entity types; the order is the prompt order."""

    types: tuple[EntityType, ...]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for t in self.types:
            if not t.definition.strip():
                raise EmptyDefinition(f"entity type {t.name!r} has an empty definition")
            key = fold_type_name(t.name)
            if key in seen:
                raise DuplicateTypeName(f"{t.name!r} collides with {seen[key]!r}")
            seen[key] = t.name

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.types)

    def __len__(self) -> int:
        return len(self.types)

    def __iter__(self) -> Iterator[EntityType]:
        return iter(self.types)

    def __contains__(self, name: str) -> bool:
        return any(t.name == name for t in self.types)

    def canonical(self, raw: str) -> str | None:
        """Match a raw key to a schema type name, folding case/space/underscore."""
        key = fold_type_name(raw)
        for t in self.types:
            if fold_type_name(t.name) == key:
                return t.name
        return None

    def definition_of(self, name: str) -> str:
        for t in self.types:
            if t.name == name:
                return t.definition
        raise KeyError(name)

    def without(self, removed: Iterable[str]) -> "EntitySchema":
        """Schema with the given type names deleted, order preserved."""
        gone = set(removed)
        return EntitySchema(tuple(t for t in self.types if t.name not in gone))

    def reordered(self, names: Sequence[str]) -> "EntitySchema":
        """Schema permuted to the given name order (must be a permutation)."""
        if sorted(names) != sorted(self.names):
            raise ValueError("reordered() requires a permutation of the schema names")
        by_name = {t.name: t for t in self.types}
        return EntitySchema(tuple(by_name[n] for n in names))

    def to_json(self) -> list[dict]:
        return [{"name": t.name, "definition": t.definition} for t in self.types]


@dataclass
class NerOutput:
    """Generation-task target: entity type -> ordered entity surface strings.

    `entries` keys are exactly the governing schema's type names, in schema
    order. `unrecognized` collects non-schema keys seen while parsing model
    output; `dropped_ungrounded` counts values discarded by strict grounding.
    """

    entries: dict[str, list[str]]
    unrecognized: dict[str, list[str]] = field(default_factory=dict)
    dropped_ungrounded: int = 0

    def restricted_to(self, schema: EntitySchema) -> "NerOutput":
        """Entries re-keyed to the given schema's types and order; types the
        output did not cover map to empty lists."""
        return NerOutput({n: list(self.entries.get(n, [])) for n in schema.names})

    def total_entities(self) -> int:
        return sum(len(v) for v in self.entries.values())


@dataclass
class CorpusSplit:
    """Store/finetune partition of a corpus, disjoint by sentence id."""

    store: list[LabeledSentence]
    finetune: list[LabeledSentence]
    seed: int


@dataclass
class ParseWarnings:
    """Tally of recoverable problems found while parsing a BIO document."""

    dangling_inside: int = 0
    messages: list[str] = field(default_factory=list)


_TAG_RE = re.compile(r"^(O|[BI]-.+)$")


def parse_bio(text: str, warnings: ParseWarnings | None = None) -> list[LabeledSentence]:
    """Parse a BIO-tagged document into LabeledSentence objects.

    One `token<TAB-or-space>tag` pair per line, blank lines separate
    sentences, tags are O / B-X / I-X. An I-X with no open span of type X
    is recoverable: it is treated as B-X and counted in `warnings`.
    Sentence ids are assigned sequentially from 0.
    """
    if warnings is None:
        warnings = ParseWarnings()
    sentences: list[LabeledSentence] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush() -> None:
        if tokens:
            sid = len(sentences)
            sentences.append(LabeledSentence(sid, list(tokens), _spans_from_tags(tokens, tags)))
            tokens.clear()
            tags.clear()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            flush()
            continue
        # tab is the primary delimiter so type names may contain spaces;
        # plain-space files work when their tags are space-free
        if "\t" in line:
            fields = [f.strip() for f in line.split("\t") if f.strip()]
        else:
            fields = line.split()
        if len(fields) != 2:
            raise MalformedLine(line_no, raw, reason=f"expected 2 fields, got {len(fields)}")
        token, tag = fields
        if not _TAG_RE.match(tag):
            raise MalformedLine(line_no, raw, reason=f"bad tag {tag!r}")
        if tag.startswith("I-"):
            open_type = tags[-1][2:] if tags and tags[-1] != "O" else None
            if open_type != tag[2:]:
                warnings.dangling_inside += 1
                warnings.messages.append(
                    f"line {line_no}: I-{tag[2:]} without open {tag[2:]} span; treated as B-"
                )
                tag = "B-" + tag[2:]
        tokens.append(token)
        tags.append(tag)
    flush()
    return sentences


def _spans_from_tags(tokens: list[str], tags: list[str]) -> list[EntitySpan]:
    spans: list[EntitySpan] = []
    start = None
    current = None

    def close(end: int) -> None:
        nonlocal start, current
        if current is not None:
            spans.append(EntitySpan(current, start, end, " ".join(tokens[start:end])))
        start = None
        current = None

    for i, tag in enumerate(tags):
        if tag == "O":
            close(i)
        elif tag.startswith("B-"):
            close(i)
            start, current = i, tag[2:]
        else:  # I-X extending the open span; parse_bio guarantees the type matches
            pass
    close(len(tags))
    return spans


def bio_tags(sentence: LabeledSentence) -> list[str]:
    """Per-token BIO tags reconstructed from the sentence's spans."""
    tags = ["O"] * len(sentence.tokens)
    for span in sentence.spans:
        tags[span.start] = "B-" + span.entity_type
        for i in range(span.start + 1, span.end):
            tags[i] = "I-" + span.entity_type
    return tags


def render_bio(sentences: Iterable[LabeledSentence]) -> str:
    """Render sentences back to BIO text (inverse of parse_bio)."""
    blocks = []
    for s in sentences:
        lines = [f"{tok}\t{tag}" for tok, tag in zip(s.tokens, bio_tags(s))]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


def load_schema(path: str | Path) -> EntitySchema:
    """Load an EntitySchema from a JSON file.

    Accepts either a bare array of {name, definition} objects or an object
    with a `types` array; file order is the schema (and prompt) order.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"schema file {path}: invalid JSON: {exc}") from exc
    if isinstance(doc, dict):
        doc = doc.get("types")
    if not isinstance(doc, list):
        raise FormatError(f"schema file {path}: expected an array of types")
    types = []
    for item in doc:
        if not isinstance(item, dict) or "name" not in item or "definition" not in item:
            raise FormatError(f"schema file {path}: bad entry {item!r}")
        name = str(item["name"]).strip()
        if not name:
            raise FormatError(f"schema file {path}: empty type name")
        types.append(EntityType(name, str(item["definition"]).strip()))
    return EntitySchema(tuple(types))


def gold_output(sentence: LabeledSentence, schema: EntitySchema) -> NerOutput:
    """Gold NerOutput for a sentence: one key per schema type in schema
    order, values the surfaces of that type's spans in span order."""
    entries: dict[str, list[str]] = {name: [] for name in schema.names}
    for span in sentence.spans:
        if span.entity_type not in entries:
            raise UnknownSpanType(
                f"sentence {sentence.id}: span type {span.entity_type!r} not in schema"
            )
        entries[span.entity_type].append(span.surface)
    return NerOutput(entries)


def split_store_finetune(
    sentences: Sequence[LabeledSentence], store_size: int, seed: int
) -> CorpusSplit:
    """Uniformly random store subset of exactly `store_size` sentences;
    deterministic for a fixed seed. Both parts keep the input order."""
    n = len(sentences)
    if not 0 <= store_size <= n:
        raise StoreSizeTooLarge(f"store_size {store_size} out of range for {n} sentences")
    rng = random.Random(seed)
    chosen = set(rng.sample(range(n), store_size))
    store = [sentences[i] for i in range(n) if i in chosen]
    finetune = [sentences[i] for i in range(n) if i not in chosen]
    return CorpusSplit(store=store, finetune=finetune, seed=seed)


# --- JSON-lines persistence -------------------------------------------------

def sentence_to_dict(sentence: LabeledSentence) -> dict:
    return {
        "id": sentence.id,
        "tokens": sentence.tokens,
        "spans": [
            {"type": sp.entity_type, "start": sp.start, "end": sp.end, "surface": sp.surface}
            for sp in sentence.spans
        ],
    }


def sentence_from_dict(doc: dict) -> LabeledSentence:
    try:
        spans = [
            EntitySpan(sp["type"], sp["start"], sp["end"], sp["surface"])
            for sp in doc["spans"]
        ]
        return LabeledSentence(doc["id"], list(doc["tokens"]), spans)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad sentence record: {doc!r}") from exc


def write_sentences_jsonl(sentences: Iterable[LabeledSentence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(json.dumps(sentence_to_dict(s), ensure_ascii=False) + "\n")


def read_sentences_jsonl(path: str | Path) -> list[LabeledSentence]:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                sentences.append(sentence_from_dict(json.loads(line)))
    return sentences
