"""Paraphrasal relation injection: joint phrasal + sentential classification.

Builds three-way phrase examples (paraphrase / random / in-paraphrase)
and binary sentence examples from an aligned paraphrase corpus, trains
single-layer classifier heads on top of the encoder with a joint
cross-entropy loss L = L_p + L_s, and early-stops on the second decrease
of dev phrasal accuracy.
"""

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import tensor as T
from .tokenizer import PairTooLongError

PHRASE_CLASSES = ("paraphrase", "random", "in_paraphrase")
SENT_CLASSES = ("paraphrase", "random")
P_PARA, P_RANDOM, P_INPARA = 0, 1, 2
S_PARA, S_RANDOM = 0, 1

FEATURE_MODES = ("elaborate_max", "simple_mean")

# variant -> (phrasal head classes or 0, use sentential head, feature mode)
VARIANTS = {
    "joint": (3, True, "elaborate_max"),
    "joint_simple_feature": (3, True, "simple_mean"),
    "sentence_only": (0, True, "elaborate_max"),
    "phrase_3way": (3, False, "elaborate_max"),
    "phrase_binary": (2, False, "elaborate_max"),
}


@dataclass
class PhraseExample:
    pair: object  # EncodedPair
    src_span: tuple
    tgt_span: tuple
    label: int


@dataclass
class SentenceExample:
    pair: object
    label: int


@dataclass
class InjectionHyper:
    lr: float = 5e-5
    dropout: float = 0.2
    batch_size: int = 16
    max_steps: int = 2000
    eval_interval: int = 50
    ratios: tuple = (1.0, 1.0, 1.0)  # paraphrase : random : in_paraphrase
    seed: int = 0
    early_stop_mode: str = "second_ever"  # or "consecutive"

    def __post_init__(self):
        if any(r <= 0 for r in self.ratios):
            raise ValueError(f"negative-example ratios must be positive: {self.ratios}")
        if self.early_stop_mode not in ("second_ever", "consecutive"):
            raise ValueError(f"unknown early_stop_mode {self.early_stop_mode!r}")


@dataclass
class SampledData:
    phrase_examples: list
    sentence_examples: list
    stats: dict = field(default_factory=dict)


def _repeat_count(ratio, rng):
    base = int(ratio)
    return base + (1 if rng.random() < ratio - base else 0)


def sample_negatives(records, tokenizer, max_len, ratios=(1.0, 1.0, 1.0),
                     seed=0, rng=None):
    """Build phrase and sentence example streams from gold aligned pairs.

    Per gold pair <s, t>: gold alignments become `paraphrase` phrase
    examples; a random partner t' yields a `random` sentence example whose
    phrase pairings (source phrase vs random phrase span of t') feed the
    `random` phrasal class; `in_paraphrase` examples replace a gold target
    span with a different phrase span of t. Ratios scale per-alignment
    example counts for the three phrasal classes.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if len(records) < 2:
        raise ValueError("negative sampling needs at least 2 sentence pairs")
    r_para, r_rand, r_inpara = ratios

    phrase_examples, sentence_examples = [], []
    stats = {"pairs": 0, "dropped_overlong": 0, "dropped_alignments": 0,
             "pairs_without_phrases": 0}
    for idx, rec in enumerate(records):
        try:
            pair = tokenizer.encode_pair(rec.source, rec.target, max_len)
        except PairTooLongError:
            stats["dropped_overlong"] += 1
            stats["dropped_alignments"] += len(rec.alignments)
            continue
        stats["pairs"] += 1
        spans = tokenizer.remap_spans(rec.alignments, pair)
        tgt_spans = [(m, n) for _, _, m, n in spans]

        sentence_examples.append(SentenceExample(pair, S_PARA))

        # random partner sentence from a different record
        other = int(rng.integers(len(records) - 1))
        if other >= idx:
            other += 1
        rec2 = records[other]
        rand_pair = None
        try:
            rand_pair = tokenizer.encode_pair(rec.source, rec2.target, max_len)
            sentence_examples.append(SentenceExample(rand_pair, S_RANDOM))
        except PairTooLongError:
            stats["dropped_overlong"] += 1

        if not spans:
            stats["pairs_without_phrases"] += 1
            continue

        rand_tgt_spans = []
        if rand_pair is not None:
            # only the target side of the partner's alignments is valid in
            # the mixed pair <s, t'>
            for _, _, ms, ne in rec2.alignments:
                m = rand_pair.tgt_offsets[ms][0] + rand_pair.boundary
                n = rand_pair.tgt_offsets[ne][1] + rand_pair.boundary
                rand_tgt_spans.append((m, n))

        for j, k, m, n in spans:
            for _ in range(_repeat_count(r_para, rng)):
                phrase_examples.append(PhraseExample(pair, (j, k), (m, n), P_PARA))
            alternatives = [sp for sp in tgt_spans if sp != (m, n)]
            if alternatives:
                for _ in range(_repeat_count(r_inpara, rng)):
                    alt = alternatives[int(rng.integers(len(alternatives)))]
                    phrase_examples.append(
                        PhraseExample(pair, (j, k), alt, P_INPARA))
            if rand_tgt_spans:
                for _ in range(_repeat_count(r_rand, rng)):
                    sp = rand_tgt_spans[int(rng.integers(len(rand_tgt_spans)))]
                    phrase_examples.append(
                        PhraseExample(rand_pair, (j, k), sp, P_RANDOM))
    return SampledData(phrase_examples, sentence_examples, stats)


def phrase_feature(h, span_s, span_t, mode):
    """Matching feature from one encoded pair's hidden states.

    elaborate_max: [h_s; h_t; h_s*h_t; |h_s-h_t|] from max-pooled spans
    (4x hidden). simple_mean: [h_s; h_t] from mean-pooled spans (2x).
    """
    if mode == "elaborate_max":
        hs = T.max_pool_span(h, span_s)
        ht = T.max_pool_span(h, span_t)
        return T.concat([hs, ht, T.mul(hs, ht), T.absolute(T.sub(hs, ht))])
    if mode == "simple_mean":
        hs = T.mean_pool_span(h, span_s)
        ht = T.mean_pool_span(h, span_t)
        return T.concat([hs, ht])
    raise ValueError(f"unknown feature mode {mode!r}")


def feature_width(hidden, mode):
    return 4 * hidden if mode == "elaborate_max" else 2 * hidden


def init_heads(config, variant, seed):
    """Single fully-connected layer per classification head."""
    n_phrase, use_sent, mode = VARIANTS[variant]
    rng = np.random.default_rng(seed)
    heads = {}
    if n_phrase:
        w = feature_width(config.hidden, mode)
        heads["head.phrase_w"] = T.Tensor(
            enc._trunc_normal(rng, (w, n_phrase)), requires_grad=True)
        heads["head.phrase_b"] = T.Tensor(np.zeros(n_phrase), requires_grad=True)
    if use_sent:
        heads["head.sent_w"] = T.Tensor(
            enc._trunc_normal(rng, (config.hidden, 2)), requires_grad=True)
        heads["head.sent_b"] = T.Tensor(np.zeros(2), requires_grad=True)
    return heads


def phrase_logits(features, heads):
    return T.add(T.matmul(features, heads["head.phrase_w"]), heads["head.phrase_b"])


def sentence_logits(h_cls, heads):
    return T.add(T.matmul(h_cls, heads["head.sent_w"]), heads["head.sent_b"])


def _relabel_binary(phrase_examples):
    """paraphrase vs in_paraphrase only, labels remapped to {0, 1}."""
    out = []
    for ex in phrase_examples:
        if ex.label == P_PARA:
            out.append(PhraseExample(ex.pair, ex.src_span, ex.tgt_span, 0))
        elif ex.label == P_INPARA:
            out.append(PhraseExample(ex.pair, ex.src_span, ex.tgt_span, 1))
    return out


def _encode_batch(phrase_examples, sentence_examples, params, config,
                  train, rng):
    """One shared encoder pass over every distinct pair in the batch."""
    pairs, index = [], {}
    for ex in list(sentence_examples) + list(phrase_examples):
        if id(ex.pair) not in index:
            index[id(ex.pair)] = len(pairs)
            pairs.append(ex.pair)
    ids, segs = enc.pad_batch(pairs)
    h = enc.encode(ids, segs, params, config, train=train, rng=rng)
    rows = {}

    def row(pair):
        b = index[id(pair)]
        if b not in rows:
            rows[b] = T.select(h, b)
        return rows[b]

    return row


def joint_loss(phrase_examples, sentence_examples, params, heads, config,
               feature_mode="elaborate_max", head_dropout=0.0, train=False,
               rng=None):
    """L = L_p + L_s on one shared encoder forward pass per sentence pair.

    Returns (L, L_p, L_s) as tensors; L_p or L_s is None for single-task
    variants (then L is the remaining term). For the joint setting both
    example lists must be non-empty.
    """
    use_phrase = "head.phrase_w" in heads
    use_sent = "head.sent_w" in heads
    if use_phrase and use_sent and (not phrase_examples or not sentence_examples):
        raise ValueError("joint loss needs a non-empty batch for both tasks")
    if use_phrase and not phrase_examples:
        raise ValueError("phrasal loss needs phrase examples")
    if use_sent and not sentence_examples:
        raise ValueError("sentential loss needs sentence examples")

    row = _encode_batch(phrase_examples if use_phrase else [],
                        sentence_examples if use_sent else [],
                        params, config, train, rng)
    l_p = l_s = None
    if use_phrase:
        feats = T.stack([
            phrase_feature(row(ex.pair), ex.src_span, ex.tgt_span, feature_mode)
            for ex in phrase_examples
        ])
        feats = T.dropout(feats, head_dropout, rng, train)
        l_p = T.softmax_cross_entropy(
            phrase_logits(feats, heads), [ex.label for ex in phrase_examples])
    if use_sent:
        h_cls = T.stack([T.select(row(ex.pair), 0) for ex in sentence_examples])
        h_cls = T.dropout(h_cls, head_dropout, rng, train)
        l_s = T.softmax_cross_entropy(
            sentence_logits(h_cls, heads), [ex.label for ex in sentence_examples])
    if l_p is not None and l_s is not None:
        return T.add(l_p, l_s), l_p, l_s
    return (l_p if l_p is not None else l_s), l_p, l_s


def evaluate(phrase_examples, sentence_examples, params, heads, config,
             feature_mode="elaborate_max", chunk=64):
    """Accuracy of both heads with dropout off; returns (phrase, sentence)."""
    def _accuracy(examples, predict):
        if not examples:
            return None
        hits = 0
        for start in range(0, len(examples), chunk):
            batch = examples[start : start + chunk]
            hits += predict(batch)
        return hits / len(examples)

    def _phrase(batch):
        row = _encode_batch(batch, [], params, config, False, None)
        feats = T.stack([
            phrase_feature(row(ex.pair), ex.src_span, ex.tgt_span, feature_mode)
            for ex in batch
        ])
        pred = phrase_logits(feats, heads).data.argmax(axis=-1)
        return int((pred == np.array([ex.label for ex in batch])).sum())

    def _sent(batch):
        row = _encode_batch([], batch, params, config, False, None)
        h_cls = T.stack([T.select(row(ex.pair), 0) for ex in batch])
        pred = sentence_logits(h_cls, heads).data.argmax(axis=-1)
        return int((pred == np.array([ex.label for ex in batch])).sum())

    p_acc = _accuracy(phrase_examples, _phrase) if "head.phrase_w" in heads else None
    s_acc = _accuracy(sentence_examples, _sent) if "head.sent_w" in heads else None
    return p_acc, s_acc


def early_stop_decision(history, mode="second_ever"):
    """True once dev accuracy has decreased for the second time.

    ``second_ever`` counts any evaluation strictly below its immediate
    predecessor; ``consecutive`` requires the two decreases to be
    back-to-back.
    """
    decreases = [history[i] < history[i - 1] for i in range(1, len(history))]
    if mode == "consecutive":
        return any(a and b for a, b in zip(decreases, decreases[1:]))
    return sum(decreases) >= 2


@dataclass
class InjectionResult:
    params: dict
    heads: dict
    report_rows: list  # (step, L_p, L_s, L, dev_phrase_acc, dev_sent_acc)
    dev_phrase_acc: float
    dev_sent_acc: float
    test_phrase_acc: float
    test_sent_acc: float
    stopped_early: bool
    steps_run: int
    sampler_stats: dict


def _prepare(records, tokenizer, max_len, ratios, seed, variant):
    data = sample_negatives(records, tokenizer, max_len, ratios, seed=seed)
    n_phrase, use_sent, _ = VARIANTS[variant]
    phrase = data.phrase_examples if n_phrase else []
    if n_phrase == 2:
        phrase = _relabel_binary(phrase)
    sent = data.sentence_examples if use_sent else []
    return phrase, sent, data.stats


def inject_train(splits, params, config, hyper, tokenizer, variant="joint"):
    """Algorithm: mini-batch joint training with early stopping.

    ``splits`` is (train, dev, test) lists of AlignedPairRecords. Restores
    the snapshot from the best dev phrasal accuracy (sentential accuracy
    for the sentence_only variant). Returns an InjectionResult.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    train_recs, dev_recs, test_recs = splits
    if not dev_recs:
        raise ValueError("dev split is empty")
    n_phrase, use_sent, feature_mode = VARIANTS[variant]

    rng = np.random.default_rng(hyper.seed)
    train_p, train_s, stats = _prepare(
        train_recs, tokenizer, config.max_len, hyper.ratios, hyper.seed, variant)
    dev_p, dev_s, _ = _prepare(
        dev_recs, tokenizer, config.max_len, hyper.ratios, hyper.seed + 1, variant)
    test_p, test_s, _ = _prepare(
        test_recs, tokenizer, config.max_len, hyper.ratios, hyper.seed + 2, variant)

    heads = init_heads(config, variant, hyper.seed)
    all_params = dict(params)
    all_params.update(heads)
    opt = T.Adam(all_params, lr=hyper.lr)

    # batch over distinct pairs so each pair is encoded once per step
    pair_groups = {}
    for ex in train_s + train_p:
        pair_groups.setdefault(id(ex.pair), ([], []))
    for ex in train_p:
        pair_groups[id(ex.pair)][0].append(ex)
    for ex in train_s:
        pair_groups[id(ex.pair)][1].append(ex)
    groups = list(pair_groups.values())

    def dev_score(p_acc, s_acc):
        return p_acc if p_acc is not None else s_acc

    best = {"score": -1.0, "params": enc.clone_params(params),
            "heads": enc.clone_params(heads)}
    history = []
    report_rows = []
    loss_acc = np.zeros(3)
    loss_n = 0
    step = 0
    stopped_early = False
    diverged = False

    while step < hyper.max_steps and not stopped_early and not diverged:
        order = rng.permutation(len(groups))
        for start in range(0, len(order), hyper.batch_size):
            if step >= hyper.max_steps:
                break
            chunk = [groups[i] for i in order[start : start + hyper.batch_size]]
            batch_p = [ex for g in chunk for ex in g[0]]
            batch_s = [ex for g in chunk for ex in g[1]]
            if (n_phrase and not batch_p) or (use_sent and not batch_s):
                continue
            opt.zero_grad()
            loss, l_p, l_s = joint_loss(
                batch_p, batch_s, params, heads, config,
                feature_mode=feature_mode, head_dropout=hyper.dropout,
                train=True, rng=rng)
            if not np.isfinite(loss.data):
                diverged = True
                break
            loss.backward()
            try:
                opt.step()
            except FloatingPointError:
                diverged = True
                break
            step += 1
            loss_acc += [l_p.item() if l_p is not None else 0.0,
                         l_s.item() if l_s is not None else 0.0, loss.item()]
            loss_n += 1

            if step % hyper.eval_interval == 0:
                p_acc, s_acc = evaluate(dev_p, dev_s, params, heads, config,
                                        feature_mode)
                mean = loss_acc / max(loss_n, 1)
                report_rows.append((step, mean[0], mean[1], mean[2], p_acc, s_acc))
                loss_acc[:] = 0.0
                loss_n = 0
                score = dev_score(p_acc, s_acc)
                if score > best["score"]:
                    best = {"score": score, "params": enc.clone_params(params),
                            "heads": enc.clone_params(heads)}
                history.append(score)
                if early_stop_decision(history, hyper.early_stop_mode):
                    stopped_early = True
                    break

    # restore the best checkpoint (or the last good one after divergence)
    if best["score"] >= 0.0:
        params = best["params"]
        heads = best["heads"]
    dev_acc = evaluate(dev_p, dev_s, params, heads, config, feature_mode)
    test_acc = evaluate(test_p, test_s, params, heads, config, feature_mode)
    return InjectionResult(
        params=params, heads=heads, report_rows=report_rows,
        dev_phrase_acc=dev_acc[0], dev_sent_acc=dev_acc[1],
        test_phrase_acc=test_acc[0], test_sent_acc=test_acc[1],
        stopped_early=stopped_early, steps_run=step, sampler_stats=stats)
