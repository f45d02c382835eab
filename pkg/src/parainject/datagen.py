"""Aligned paraphrase corpus: generation, JSON-lines I/O, and splits.

Records carry word-level phrase span alignments; the generator produces
paraphrase pairs by synonym substitution inside tracked constituents and
optional constituent reordering, so every alignment has a known gold
answer. An optional noise knob re-points a fraction of alignments to
emulate aligner error.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class CorpusError(ValueError):
    pass


@dataclass
class AlignedPairRecord:
    source: list
    target: list
    alignments: list  # (js, je, ms, ne) word spans, 0-based inclusive

    def validate(self):
        if not self.source or not self.target:
            raise CorpusError("source and target must be non-empty")
        for a in self.alignments:
            if len(a) != 4:
                raise CorpusError(f"alignment must have 4 entries, got {a}")
            js, je, ms, ne = a
            if not (0 <= js <= je < len(self.source)):
                raise CorpusError(
                    f"source span ({js},{je}) out of bounds for "
                    f"{len(self.source)} words"
                )
            if not (0 <= ms <= ne < len(self.target)):
                raise CorpusError(
                    f"target span ({ms},{ne}) out of bounds for "
                    f"{len(self.target)} words"
                )


def save_corpus(records, path):
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(
                {"source": r.source, "target": r.target,
                 "alignments": [list(a) for a in r.alignments]},
                ensure_ascii=False) + "\n")


def load_corpus(path):
    """Read JSON-lines records, validating every span; errors carry line numbers."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {e}") from None
            try:
                rec = AlignedPairRecord(
                    source=list(obj["source"]),
                    target=list(obj["target"]),
                    alignments=[tuple(a) for a in obj.get("alignments", [])],
                )
                rec.validate()
            except (KeyError, CorpusError) as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
            records.append(rec)
    return records


def corpus_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def split_corpus(records, dev_n, test_n, seed):
    """Disjoint, exhaustive, seed-deterministic (train, dev, test) partition."""
    if dev_n + test_n >= len(records):
        raise CorpusError(
            f"need more than {dev_n + test_n} records for dev={dev_n}, "
            f"test={test_n}; have {len(records)}"
        )
    order = np.random.default_rng(seed).permutation(len(records))
    dev = [records[i] for i in order[:dev_n]]
    test = [records[i] for i in order[dev_n : dev_n + test_n]]
    train = [records[i] for i in order[dev_n + test_n :]]
    return train, dev, test


# Synonym clusters for the generator. Word forms are unique across
# clusters so gold phrase equivalence is unambiguous.
ADJ_CLUSTERS = [
    ["big", "large", "huge"],
    ["small", "tiny", "little"],
    ["fast", "quick", "rapid"],
    ["slow", "sluggish", "unhurried"],
    ["bright", "shiny", "gleaming"],
    ["dark", "dim", "shadowy"],
    ["old", "ancient", "aged"],
    ["new", "recent", "modern"],
    ["cold", "chilly", "frosty"],
    ["warm", "heated", "toasty"],
]
NOUN_CLUSTERS = [
    ["cat", "feline", "kitty"],
    ["dog", "hound", "pup"],
    ["car", "auto", "vehicle"],
    ["house", "home", "dwelling"],
    ["bird", "fowl", "sparrow"],
    ["river", "stream", "creek"],
    ["book", "volume", "tome"],
    ["road", "street", "path"],
    ["ship", "boat", "vessel"],
    ["hill", "mound", "ridge"],
    ["child", "kid", "youngster"],
    ["farmer", "grower", "rancher"],
    ["doctor", "physician", "medic"],
    ["garden", "yard", "plot"],
]
VERB_CLUSTERS = [
    ["saw", "spotted", "noticed"],
    ["chased", "pursued", "followed"],
    ["crossed", "traversed", "passed"],
    ["liked", "enjoyed", "fancied"],
    ["built", "constructed", "made"],
    ["found", "discovered", "located"],
    ["avoided", "dodged", "evaded"],
    ["painted", "colored", "decorated"],
    ["carried", "hauled", "lugged"],
    ["watched", "observed", "studied"],
]
ADV_CLUSTERS = [
    ["quickly", "swiftly", "speedily"],
    ["quietly", "silently", "noiselessly"],
    ["yesterday", "recently", "lately"],
    ["carefully", "cautiously", "gingerly"],
    ["happily", "gladly", "cheerfully"],
]


@dataclass
class SynthConfig:
    size: int = 1000
    substitution_prob: float = 0.9
    reorder_prob: float = 0.2
    noise: float = 0.0
    adjective_prob: float = 0.7
    adverb_prob: float = 0.6
    seed: int = 0
    clusters: dict = field(default_factory=lambda: {
        "adj": ADJ_CLUSTERS, "noun": NOUN_CLUSTERS,
        "verb": VERB_CLUSTERS, "adv": ADV_CLUSTERS,
    })

    def __post_init__(self):
        for name in ("substitution_prob", "reorder_prob", "noise",
                     "adjective_prob", "adverb_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {v}")
        for kind, sets in self.clusters.items():
            for s in sets:
                if len(s) < 2:
                    raise ValueError(f"{kind} synonym set {s} has fewer than 2 members")


def _sample_np(rng, cfg):
    """Noun phrase as a list of (cluster_kind, cluster_idx, word) slots."""
    slots = [("det", -1, "the")]
    if rng.random() < cfg.adjective_prob:
        i = rng.integers(len(cfg.clusters["adj"]))
        slots.append(("adj", int(i), cfg.clusters["adj"][i][rng.integers(3)]))
    i = rng.integers(len(cfg.clusters["noun"]))
    slots.append(("noun", int(i), cfg.clusters["noun"][i][rng.integers(3)]))
    return slots


def generate_record(rng, cfg):
    """One paraphrase pair with gold alignments over its constituents.

    Sentence template: NP_subj VERB NP_obj [ADV]. Emitted alignment spans
    are the mutually non-overlapping constituents: subject NP, verb,
    object NP, and the optional adverb.
    """
    subj = _sample_np(rng, cfg)
    vi = int(rng.integers(len(cfg.clusters["verb"])))
    verb = [("verb", vi, cfg.clusters["verb"][vi][rng.integers(3)])]
    obj = _sample_np(rng, cfg)
    constituents = [subj, verb, obj]
    if rng.random() < cfg.adverb_prob:
        ai = int(rng.integers(len(cfg.clusters["adv"])))
        constituents.append([("adv", ai, cfg.clusters["adv"][ai][rng.integers(3)])])

    def substitute(slots):
        out = []
        for kind, ci, word in slots:
            if kind != "det" and rng.random() < cfg.substitution_prob:
                options = [w for w in cfg.clusters[kind][ci] if w != word]
                word = options[rng.integers(len(options))]
            out.append((kind, ci, word))
        return out

    target_parts = [substitute(c) for c in constituents]
    order = list(range(len(constituents)))
    if len(constituents) == 4 and rng.random() < cfg.reorder_prob:
        # move the trailing adverb to the front of the target
        order = [3, 0, 1, 2]

    source, src_spans = [], []
    for c in constituents:
        start = len(source)
        source.extend(w for _, _, w in c)
        src_spans.append((start, len(source) - 1))
    target, tgt_spans = [], [None] * len(constituents)
    for idx in order:
        start = len(target)
        target.extend(w for _, _, w in target_parts[idx])
        tgt_spans[idx] = (start, len(target) - 1)

    alignments = [
        (src_spans[i][0], src_spans[i][1], tgt_spans[i][0], tgt_spans[i][1])
        for i in range(len(constituents))
    ]
    return AlignedPairRecord(source, target, alignments)


def generate_synthetic(cfg):
    """Corpus of gold-aligned paraphrase pairs; noise re-points alignments.

    With noise > 0, each alignment is independently corrupted with that
    probability by replacing its target span with a different alignment's
    target span from the same record.
    """
    rng = np.random.default_rng(cfg.seed)
    records = []
    n_corrupted = 0
    for _ in range(cfg.size):
        rec = generate_record(rng, cfg)
        if cfg.noise > 0 and len(rec.alignments) >= 2:
            noisy = []
            for i, (js, je, ms, ne) in enumerate(rec.alignments):
                if rng.random() < cfg.noise:
                    others = [a for j, a in enumerate(rec.alignments) if j != i]
                    _, _, ms, ne = others[rng.integers(len(others))]
                    n_corrupted += 1
                noisy.append((js, je, ms, ne))
            rec.alignments = noisy
        records.append(rec)
    return records, n_corrupted


def corpus_stats(records):
    """Sentence-pair and phrase-pair counts plus length summaries."""
    n_phrases = sum(len(r.alignments) for r in records)
    src_lens = [len(r.source) for r in records]
    return {
        "sentence_pairs": len(records),
        "phrase_pairs": n_phrases,
        "phrase_pairs_per_sentence": n_phrases / len(records) if records else 0.0,
        "mean_source_words": float(np.mean(src_lens)) if records else 0.0,
        "records_without_alignments": sum(1 for r in records if not r.alignments),
    }
