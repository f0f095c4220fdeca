# Core Python imports.
from collections import Counter, defaultdict
from dataclasses import dataclass, field
import json
import os
import zlib

# 3rd party imports.
from loguru import logger
import numpy as np

# Local imports.
from ..errors import DatasetError, VocabularyError
from ..utils import progress, write_atomic
from ._templates import EPhenomenon, alternating_slot, construction_ids, get_template, npi_items, phenomenon_of, render
from ._vocab import check_disjoint, content_words, shared_words

#------------------------------------------------------------------------------
# Constants.
split_names = ("train", "id_test", "ood_test")
default_sizes = {"train": 200, "id_test": 50, "ood_test": 50}

# Attempts per requested pair before generate gives up.
_attempts_per_pair = 200

# Allowed distance between the control filler and its output, in tokens,
# around the mean filler-gap distance.
_control_distance_tolerance = 1.0

#------------------------------------------------------------------------------
# Pairs.

@dataclass(frozen=True)
class MinimalPair:
    """ A base/source sentence pair with their grammatical continuations.

    alignment maps slot name -> {"base": [start, end], "source": [start, end]}
    character spans.
    """
    base: str
    source: str
    y_base: str
    y_source: str
    construction: str
    split: str = ""
    alignment: dict = field(default_factory=dict, hash=False)

    @property
    def phenomenon(self):
        return phenomenon_of(self.construction)

    def key(self):
        return (self.construction, self.base, self.source)

    def flipped(self):
        """ The mirrored pair (s, b, y_s, y_b).
        """
        alignment = {
            slot: {"base": list(spans["source"]), "source": list(spans["base"])}
            for slot, spans in self.alignment.items()
        }
        return MinimalPair(self.source, self.base, self.y_source, self.y_base, self.construction, self.split, alignment)

    def to_dict(self):
        return {
            "base": self.base,
            "source": self.source,
            "y_base": self.y_base,
            "y_source": self.y_source,
            "construction": self.construction,
            "split": self.split,
            "alignment": {
                slot: {"base": list(spans["base"]), "source": list(spans["source"])}
                for slot, spans in self.alignment.items()
            }
        }

    @classmethod
    def from_dict(cls, data):
        try:
            alignment = {
                slot: {"base": [int(v) for v in spans["base"]], "source": [int(v) for v in spans["source"]]}
                for slot, spans in data.get("alignment", {}).items()
            }
            return cls(
                base=data["base"],
                source=data["source"],
                y_base=data["y_base"],
                y_source=data["y_source"],
                construction=data["construction"],
                split=data.get("split", ""),
                alignment=alignment
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"malformed pair {data!r}: {e}") from e

def continuation_text(y):
    """ Text appended to a sentence to score output y.

    Words get a leading space; punctuation attaches directly.
    """
    if y and (y[0].isalnum() or y[0] in "'\""):
        return " " + y
    return y

def _render_side(template, side, fills, number, forms):
    text = ""
    spans = {}
    for slot in template.slots:
        part = render(slot.pattern(side), fills, number, forms)
        if part:
            if text:
                text += " "
            start = len(text)
            text += part
            spans[slot.name] = [start, len(text)]
        else:
            spans[slot.name] = [len(text), len(text)]
    return text, spans

def instantiate(template, fills, number="sg", y_base=0, y_source=0, split="", forms=None):
    """ Render one pair from explicit lexical choices.

    fills maps binding keys to vocabulary entries; y_base and y_source index
    the template's output alternatives.
    """
    base, base_spans = _render_side(template, "base", fills, number, forms)
    source, source_spans = _render_side(template, "source", fills, number, forms)
    alignment = {
        slot.name: {"base": base_spans[slot.name], "source": source_spans[slot.name]}
        for slot in template.slots
    }
    return MinimalPair(
        base=base,
        source=source,
        y_base=render(template.y_base[y_base], fills, number, forms),
        y_source=render(template.y_source[y_source], fills, number, forms),
        construction=template.construction,
        split=split,
        alignment=alignment
    )

def _draw(template, vocab, rng):
    """ Random fills for every binding of template.
    """
    by_category = defaultdict(list)
    for key, category in template.bindings().items():
        by_category[category].append(key)

    fills = {}
    for category, keys in by_category.items():
        entries = vocab.entries(category)
        if len(entries) < len(keys):
            raise VocabularyError(
                f"{template.construction}: category '{category}' needs {len(keys)} entries, has {len(entries)}"
            )
        chosen = rng.choice(len(entries), size=len(keys), replace=False)
        for key, index in zip(keys, chosen):
            fills[key] = entries[int(index)]
    return fills

def generate(template, vocab, n, seed, exclude=frozenset(), split="", y_base_items=None):
    """ n distinct pairs from template, deterministic under seed.

    Pairs whose base or source sentence is in exclude are rejected.
    y_base_items optionally restricts the base outputs (NPI items).
    """
    rng = np.random.default_rng(seed)
    y_choices = [
        index for index, y in enumerate(template.y_base)
        if y_base_items is None or y in y_base_items
    ]
    if not y_choices:
        raise DatasetError(f"{template.construction}: no base output left after restricting to {y_base_items}")

    pairs = []
    seen = set()
    attempts = 0
    while len(pairs) < n:
        if attempts >= _attempts_per_pair * (n + 1):
            raise VocabularyError(
                f"{template.construction} ({template.distribution}): vocabulary too small for {n} distinct pairs, "
                f"got {len(pairs)}"
            )
        attempts += 1

        fills = _draw(template, vocab, rng)
        number = ("sg", "pl")[int(rng.integers(2))] if template.numbered else "sg"
        y_base = y_choices[int(rng.integers(len(y_choices)))]
        y_source = int(rng.integers(len(template.y_source)))
        pair = instantiate(template, fills, number, y_base, y_source, split, vocab.forms)
        if pair.key() in seen or pair.base in exclude or pair.source in exclude:
            continue
        seen.add(pair.key())
        pairs.append(pair)
    return pairs

def symmetrize(pairs):
    """ Add the mirrored pair after each filler-gap and control pair.

    NPI pairs keep the NPI on the base side and are not mirrored.
    """
    out = []
    for pair in pairs:
        out.append(pair)
        if pair.phenomenon is not EPhenomenon.NPI:
            out.append(pair.flipped())
    return out

#------------------------------------------------------------------------------
# Splits.

@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    id_test: list = field(default_factory=list)
    ood_test: list = field(default_factory=list)

    def parts(self):
        return {"train": self.train, "id_test": self.id_test, "ood_test": self.ood_test}

    def constructions(self):
        """ Construction ids present, in canonical order.
        """
        present = {p.construction for pairs in self.parts().values() for p in pairs}
        ordered = [c for c in construction_ids if c in present]
        return ordered + sorted(present - set(ordered))

    def select(self, constructions):
        wanted = set([constructions] if isinstance(constructions, str) else constructions)
        return DatasetSplit(**{
            name: [p for p in pairs if p.construction in wanted] for name, pairs in self.parts().items()
        })

def _seed_for(seed, construction, split):
    return [seed, zlib.crc32(construction.encode("utf-8")), split_names.index(split)]

def build_splits(templates, id_vocab, ood_vocab, seed, sizes=None, y_base_items=("any",), constructions=None):
    """ Train / ID test / OOD test pairs for every construction.

    The ID test set is drawn first; train pairs may not reuse any of its
    sentences. OOD pairs come from the OOD template and vocabulary.
    """
    check_disjoint(id_vocab, ood_vocab)
    sizes = dict(default_sizes, **(sizes or {}))
    wanted = constructions or [t.construction for t in templates if t.distribution == "ID"]

    split = DatasetSplit()
    for construction in progress(wanted, desc="datagen"):
        id_template = get_template(construction, "ID", templates)
        ood_template = get_template(construction, "OOD", templates)
        items = y_base_items if id_template.phenomenon is EPhenomenon.NPI else None

        id_test = generate(id_template, id_vocab, sizes["id_test"], _seed_for(seed, construction, "id_test"), split="id_test", y_base_items=items)
        held_out = frozenset(s for p in id_test for s in (p.base, p.source))
        train = generate(id_template, id_vocab, sizes["train"], _seed_for(seed, construction, "train"), exclude=held_out, split="train", y_base_items=items)
        ood_test = generate(ood_template, ood_vocab, sizes["ood_test"], _seed_for(seed, construction, "ood_test"), split="ood_test", y_base_items=items)

        split.train.extend(train)
        split.id_test.extend(id_test)
        split.ood_test.extend(ood_test)
        logger.debug(f"{construction}: {len(train)}/{len(id_test)}/{len(ood_test)} pairs")

    logger.info(f"Generated {len(split.train)} train, {len(split.id_test)} ID test, {len(split.ood_test)} OOD test pairs")
    return split

#------------------------------------------------------------------------------
# Validation.

@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.violations

    def add(self, kind, construction, detail):
        self.violations.append({"kind": kind, "construction": construction, "detail": detail})

    def to_dict(self):
        return {"passed": self.passed, "violations": self.violations, "counts": self.counts}

def _squash(text):
    return " ".join(text.split())

def _outside(text, span):
    return _squash(text[:span[0]] + " " + text[span[1]:])

def _gap_distance(pair, tokenizer=None):
    """ Tokens from the end of the alternating slot to the output, on the base side.

    Without a tokenizer each word counts as one token.
    """
    span = pair.alignment[alternating_slot(pair.construction)]["base"]
    rest = pair.base[span[1]:]
    if tokenizer is None:
        return len(rest.split()) + 1
    return len(tokenizer.encode(rest)) + 1

def validate(split, id_vocab=None, ood_vocab=None, sizes=default_sizes, tokenizer=None):
    """ Check a DatasetSplit and report every violation found.

    Never raises on bad data; the report carries the failures. Control
    distances are measured with tokenizer when given, in words otherwise.
    """
    report = ValidationReport()

    # Sizes, before and after symmetrization.
    for construction in split.constructions():
        counts = {}
        for name, pairs in split.parts().items():
            chosen = [p for p in pairs if p.construction == construction]
            counts[name] = len(chosen)
            counts[f"{name}_symmetrized"] = len(symmetrize(chosen))
            factor = 1 if phenomenon_of(construction) is EPhenomenon.NPI else 2
            if counts[f"{name}_symmetrized"] != factor * len(chosen):
                report.add("symmetrized_count", construction, f"{name}: {counts[name]} -> {counts[f'{name}_symmetrized']}")
            if sizes and name in sizes and len(chosen) != sizes[name]:
                report.add("count", construction, f"{name} has {len(chosen)} pairs, expected {sizes[name]}")
        report.counts[construction] = counts

    # Duplicates within each part.
    for name, pairs in split.parts().items():
        for key, count in Counter(p.key() for p in pairs).items():
            if count > 1:
                report.add("duplicate", key[0], f"{name}: '{key[1]}' / '{key[2]}' appears {count} times")

    # Train / ID test sentence overlap.
    train_sentences = defaultdict(set)
    for pair in split.train:
        train_sentences[pair.construction].update((pair.base, pair.source))
    for pair in split.id_test:
        for sentence in (pair.base, pair.source):
            if sentence in train_sentences[pair.construction]:
                report.add("train_id_overlap", pair.construction, sentence)

    # Vocabulary separation.
    if id_vocab is not None and ood_vocab is not None:
        shared = shared_words(id_vocab, ood_vocab)
        if shared:
            report.add("vocabulary_overlap", "", shared)
    if id_vocab is not None:
        id_words = id_vocab.content_words()
        for pair in split.ood_test:
            for sentence in (pair.base, pair.source):
                found = sorted(content_words(sentence) & id_words)
                if found:
                    report.add("ood_uses_id_vocabulary", pair.construction, f"'{sentence}': {found}")

    fgd_distances = []
    for name, pairs in split.parts().items():
        for pair in pairs:
            slot = alternating_slot(pair.construction)
            if slot not in pair.alignment:
                report.add("alignment", pair.construction, f"'{pair.base}' has no '{slot}' span")
                continue

            # Minimality: everything outside the alternating slot matches.
            spans = pair.alignment[slot]
            if _outside(pair.base, spans["base"]) != _outside(pair.source, spans["source"]):
                report.add("minimality", pair.construction, f"'{pair.base}' / '{pair.source}'")

            if pair.phenomenon is EPhenomenon.NPI:
                if pair.y_base not in npi_items or pair.y_source in npi_items:
                    report.add("npi_orientation", pair.construction, f"'{pair.base}' -> {pair.y_base}/{pair.y_source}")
            elif pair.phenomenon is EPhenomenon.FGD and name != "ood_test":
                fgd_distances.append(_gap_distance(pair, tokenizer))

    # Control distance near the mean filler-gap distance.
    if fgd_distances:
        mean = sum(fgd_distances) / len(fgd_distances)
        report.counts["fgd_mean_distance"] = mean
        for name, pairs in split.parts().items():
            for pair in pairs:
                if pair.phenomenon is EPhenomenon.Control:
                    distance = _gap_distance(pair, tokenizer)
                    if abs(distance - mean) > _control_distance_tolerance:
                        report.add("control_distance", pair.construction, f"'{pair.base}': {distance} vs mean {mean:.2f}")

    if report.passed:
        logger.info("Dataset validation passed")
    else:
        logger.warning(f"Dataset validation found {len(report.violations)} violations")
    return report

#------------------------------------------------------------------------------
# JSONL I/O.

def pairs_to_jsonl(pairs):
    return "".join(json.dumps(p.to_dict(), ensure_ascii=False) + "\n" for p in pairs)

def write_pairs(path, pairs):
    """ One pair per line, fixed key order.
    """
    write_atomic(path, pairs_to_jsonl(pairs))

def read_pairs(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DatasetError(f"can't read pairs '{path}': {e}") from e

    pairs = []
    for number, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}:{number}: {e}") from e
        pairs.append(MinimalPair.from_dict(data))
    return pairs

def split_path(directory, construction, name):
    return os.path.join(directory, f"{construction}.{name}.jsonl")

def write_split(directory, split):
    """ Write one file per (construction, part). Returns the paths written.
    """
    paths = []
    for construction in split.constructions():
        for name, pairs in split.parts().items():
            path = split_path(directory, construction, name)
            write_pairs(path, [p for p in pairs if p.construction == construction])
            paths.append(path)
    return paths

def read_split(directory, constructions=None):
    """ Read every "<construction>.<part>.jsonl" file in directory.
    """
    if not os.path.isdir(directory):
        raise DatasetError(f"dataset directory '{directory}' doesn't exist")

    split = DatasetSplit()
    found = False
    for name in sorted(os.listdir(directory)):
        parts = name.split(".")
        if len(parts) != 3 or parts[2] != "jsonl" or parts[1] not in split_names:
            continue
        if constructions is not None and parts[0] not in constructions:
            continue
        getattr(split, parts[1]).extend(read_pairs(os.path.join(directory, name)))
        found = True
    if not found:
        raise DatasetError(f"no pair files in '{directory}'")
    return split
