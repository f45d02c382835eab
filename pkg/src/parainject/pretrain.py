"""Miniature masked-LM + next-sentence-prediction pre-training.

Produces the "pre-trained model" checkpoint the injection stage starts
from. Masking follows the 80/10/10 mask/random/keep recipe; NSP pairs
are balanced between within-document adjacencies and cross-document
random partners.
"""

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import tensor as T
from .tokenizer import RESERVED

MASK_ID = RESERVED.index("[MASK]")
N_RESERVED = len(RESERVED)
NSP_CONSECUTIVE, NSP_RANDOM = 0, 1


@dataclass
class MlmExample:
    ids: list  # after masking
    targets: list  # (position, original id)


@dataclass
class NspExample:
    s_words: list
    t_words: list
    label: int


@dataclass
class PretrainHyper:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1e-3
    mask_rate: float = 0.15
    seed: int = 0
    snapshot_interval: int = 50


def mask_tokens(ids, maskable, rate, rng, vocab_size):
    """Independent per-position masking with the 80/10/10 replacement rule.

    ``maskable`` flags positions eligible for masking (special-token
    positions must be False). Deterministic given the rng state.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"mask rate must be in [0,1), got {rate}")
    ids = list(ids)
    targets = []
    for pos, ok in enumerate(maskable):
        if not ok or rng.random() >= rate:
            continue
        targets.append((pos, ids[pos]))
        roll = rng.random()
        if roll < 0.8:
            ids[pos] = MASK_ID
        elif roll < 0.9:
            ids[pos] = int(rng.integers(N_RESERVED, vocab_size))
        # else keep the original id
    return MlmExample(ids, targets)


def consecutive_pairs(documents):
    """All within-document adjacent sentence pairs."""
    return [
        (doc[i], doc[i + 1])
        for doc in documents
        for i in range(len(doc) - 1)
    ]


def nsp_sample(documents, rng, n):
    """Yield n NspExamples with 50/50 consecutive/random labels.

    Random partners are always drawn from a different document than the
    first sentence's.
    """
    if len(documents) < 2 or any(len(d) < 2 for d in documents):
        raise ValueError("NSP sampling needs >= 2 documents of >= 2 sentences")
    for _ in range(n):
        d = int(rng.integers(len(documents)))
        doc = documents[d]
        i = int(rng.integers(len(doc) - 1))
        first = doc[i]
        if rng.random() < 0.5:
            yield NspExample(first, doc[i + 1], NSP_CONSECUTIVE)
        else:
            d2 = int(rng.integers(len(documents) - 1))
            if d2 >= d:
                d2 += 1
            other = documents[d2]
            yield NspExample(first, other[int(rng.integers(len(other)))],
                             NSP_RANDOM)


def init_pretrain_heads(config, seed):
    rng = np.random.default_rng(seed)
    return {
        "head.mlm_w": T.Tensor(
            enc._trunc_normal(rng, (config.hidden, config.vocab_size)),
            requires_grad=True),
        "head.mlm_b": T.Tensor(np.zeros(config.vocab_size), requires_grad=True),
        "head.nsp_w": T.Tensor(
            enc._trunc_normal(rng, (config.hidden, 2)), requires_grad=True),
        "head.nsp_b": T.Tensor(np.zeros(2), requires_grad=True),
    }


def load_documents(path):
    """Plain text: one sentence per line, blank line between documents."""
    documents = [[]]
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                if documents[-1]:
                    documents.append([])
            else:
                documents[-1].append(line.lower().split())
    if not documents[-1]:
        documents.pop()
    return documents


def pretrain_batch_loss(examples, tokenizer, params, heads, config, hyper,
                        rng, train=True):
    """Joint MLM + NSP cross-entropy over a batch of NspExamples."""
    pairs = [
        tokenizer.encode_pair(ex.s_words, ex.t_words, config.max_len,
                              truncate=True)
        for ex in examples
    ]
    masked = []
    mlm_targets = []  # (batch index, position, original id)
    for b, pair in enumerate(pairs):
        maskable = [seg in (0, 1) and tid >= N_RESERVED
                    for tid, seg in zip(pair.ids, pair.segments)]
        ex = mask_tokens(pair.ids, maskable, hyper.mask_rate, rng,
                         config.vocab_size)
        masked.append(ex)
        mlm_targets.extend((b, pos, orig) for pos, orig in ex.targets)

    n = max(len(p) for p in pairs)
    ids = np.zeros((len(pairs), n), dtype=np.int64)
    segs = np.zeros((len(pairs), n), dtype=np.int64)
    for b, (pair, ex) in enumerate(zip(pairs, masked)):
        ids[b, : len(pair)] = ex.ids
        segs[b, : len(pair)] = pair.segments

    h = enc.encode(ids, segs, params, config, train=train, rng=rng)
    rows = {b: T.select(h, b) for b in range(len(pairs))}

    losses = []
    if mlm_targets:
        hidden = T.stack([T.select(rows[b], pos) for b, pos, _ in mlm_targets])
        logits = T.add(T.matmul(hidden, heads["head.mlm_w"]), heads["head.mlm_b"])
        losses.append(T.softmax_cross_entropy(
            logits, [orig for _, _, orig in mlm_targets]))
    h_cls = T.stack([T.select(rows[b], 0) for b in range(len(pairs))])
    nsp_logits = T.add(T.matmul(h_cls, heads["head.nsp_w"]), heads["head.nsp_b"])
    losses.append(T.softmax_cross_entropy(
        nsp_logits, [ex.label for ex in examples]))
    loss = losses[0]
    for extra in losses[1:]:
        loss = T.add(loss, extra)
    return loss


@dataclass
class PretrainResult:
    params: dict
    loss_curve: list = field(default_factory=list)  # (step, loss)
    diverged: bool = False


def pretrain_loop(documents, tokenizer, config, hyper, init_seed=0):
    """Minimize MLM + NSP loss; on divergence returns the last snapshot."""
    params = enc.init_params(config, init_seed)
    heads = init_pretrain_heads(config, init_seed + 1)
    all_params = dict(params)
    all_params.update(heads)
    opt = T.Adam(all_params, lr=hyper.lr)
    rng = np.random.default_rng(hyper.seed)

    snapshot = enc.clone_params(params)
    curve = []
    for step in range(hyper.steps):
        batch = list(nsp_sample(documents, rng, hyper.batch_size))
        opt.zero_grad()
        loss = pretrain_batch_loss(batch, tokenizer, params, heads, config,
                                   hyper, rng)
        if not np.isfinite(loss.data):
            return PretrainResult(snapshot, curve, diverged=True)
        loss.backward()
        try:
            opt.step()
        except FloatingPointError:
            return PretrainResult(snapshot, curve, diverged=True)
        curve.append((step + 1, loss.item()))
        if (step + 1) % hyper.snapshot_interval == 0:
            snapshot = enc.clone_params(params)
    return PretrainResult(params, curve, diverged=False)
