"""Acceptance gate: one pass/fail line per criterion.

Each test prints ``criterion N: <summary>: PASS|FAIL`` (run pytest with
``-s`` to see the lines for passing tests) and then asserts, so a red
suite always pinpoints the failing criterion.
"""

import time

import numpy as np
import pytest

from parainject import cli, datagen
from parainject import encoder as enc
from parainject import finetune as ft
from parainject import gradcheck as gc
from parainject import injection as inj
from parainject import tensor as T
from parainject.tokenizer import Tokenizer, build_vocab


def report(num, desc, ok):
    print(f"criterion {num}: {desc}: {'PASS' if ok else 'FAIL'}")
    return ok


# ---- shared expensive artifacts ----

@pytest.fixture(scope="module")
def acc_corpus():
    records, _ = datagen.generate_synthetic(datagen.SynthConfig(size=2000, seed=7))
    return records


@pytest.fixture(scope="module")
def acc_tokenizer(acc_corpus):
    vocab = build_vocab((r.source + r.target for r in acc_corpus), 300)
    return Tokenizer(vocab)


@pytest.fixture(scope="module")
def acc_config(acc_tokenizer):
    return enc.EncoderConfig(layers=2, hidden=64, heads=4, ff=256, max_len=64,
                             vocab_size=len(acc_tokenizer.vocab), dropout=0.05)


@pytest.fixture(scope="module")
def acc_base(acc_config):
    return enc.init_params(acc_config, seed=0)


@pytest.fixture(scope="module")
def acc_injection(acc_corpus, acc_tokenizer, acc_config, acc_base):
    splits = datagen.split_corpus(acc_corpus, 200, 200, seed=0)
    hyper = inj.InjectionHyper(lr=1e-3, batch_size=32, max_steps=2000,
                               eval_interval=250, seed=0)
    start = time.monotonic()
    result = inj.inject_train(splits, enc.clone_params(acc_base), acc_config,
                              hyper, acc_tokenizer, variant="joint")
    return result, time.monotonic() - start


@pytest.fixture(scope="module")
def corpus_10k():
    records, _ = datagen.generate_synthetic(datagen.SynthConfig(size=10000, seed=11))
    vocab = build_vocab((r.source + r.target for r in records), 300)
    return records, Tokenizer(vocab)


# ---- criteria ----

def test_criterion_01_gradient_integrity():
    start = time.monotonic()
    result = gc.run_suite(seed=0)
    elapsed = time.monotonic() - start
    ok = (result["max_error"] < 1e-3
          and result["corrupted_control_error"] > 1e-1
          and elapsed < 300)
    assert report(
        1, f"gradcheck max {result['max_error']:.2e} < 1e-3, control "
           f"{result['corrupted_control_error']:.2e} > 1e-1, {elapsed:.0f}s < 300s",
        ok), result


def test_criterion_02_pooling_oracles():
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        rows, dims = int(rng.integers(1, 9)), int(rng.integers(1, 7))
        h = rng.normal(size=(rows, dims))
        a = int(rng.integers(rows))
        b = int(rng.integers(a, rows))
        mx = T.max_pool_span(T.Tensor(h), (a, b)).data
        mn = T.mean_pool_span(T.Tensor(h), (a, b)).data
        brute_max = np.array([max(h[r][d] for r in range(a, b + 1))
                              for d in range(dims)])
        brute_mean = np.array([sum(h[r][d] for r in range(a, b + 1)) / (b - a + 1)
                               for d in range(dims)])
        ok &= np.array_equal(mx, brute_max)
        ok &= bool(np.all(np.abs(mn - brute_mean) <= 1e-12))
        ok &= bool(np.all(mx >= mn - 1e-12))
    assert report(2, "1000 pooling cases match brute force, max >= mean", ok)


def test_criterion_03_feature_contract():
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(1000):
        lam = int(rng.integers(2, 9))
        rows = int(rng.integers(4, 10))
        h = T.Tensor(rng.normal(size=(rows, lam)))
        a = sorted(rng.integers(rows, size=2))
        b = sorted(rng.integers(rows, size=2))
        s, t = tuple(int(x) for x in a), tuple(int(x) for x in b)
        f_el = inj.phrase_feature(h, s, t, "elaborate_max").data
        f_si = inj.phrase_feature(h, s, t, "simple_mean").data
        ok &= f_el.shape == (4 * lam,) and f_si.shape == (2 * lam,)
        ok &= inj.feature_width(lam, "elaborate_max") == 4 * lam
        ok &= inj.feature_width(lam, "simple_mean") == 2 * lam
        # identical spans: |h_s - h_t| block exactly zero
        same = inj.phrase_feature(h, s, s, "elaborate_max").data
        ok &= bool(np.all(same[3 * lam :] == 0.0))
        # product and abs-diff blocks invariant under span swap
        swapped = inj.phrase_feature(h, t, s, "elaborate_max").data
        ok &= np.array_equal(f_el[2 * lam :], swapped[2 * lam :])
    assert report(3, "feature widths 4l/2l, zero diff block, swap invariance "
                     "on 1000 cases", ok)


def test_criterion_04_span_remapping(corpus_10k):
    records, tok = corpus_10k
    checked, correct, in_bounds = 0, 0, True
    for rec in records:
        pair = tok.encode_pair(rec.source, rec.target, 64)
        n = len(pair)
        for (js, je, ms, ne), (j, k, m, n_) in zip(
                rec.alignments, tok.remap_spans(rec.alignments, pair)):
            checked += 1
            # positions are 0-based with [CLS] at 0, so "strictly inside
            # the sentinels" reads 1 <= j <= k < m <= n <= N-2
            in_bounds &= 1 <= j <= k < m <= n_ <= n - 2
            src = tok.detokenize(pair.tokens[j : k + 1])
            tgt = tok.detokenize(pair.tokens[m : n_ + 1])
            correct += (src == rec.source[js : je + 1]
                        and tgt == rec.target[ms : ne + 1])
    ok = checked > 0 and correct == checked and in_bounds
    assert report(4, f"{correct}/{checked} spans on 10k records detokenize "
                     "to original phrases, all inside sentinels", ok)


def test_criterion_05_negative_sampler(corpus_10k):
    records, tok = corpus_10k
    data = inj.sample_negatives(records, tok, 64, ratios=(1.0, 1.0, 1.0), seed=0)
    examples = data.phrase_examples
    labels = np.array([ex.label for ex in examples])
    n = len(examples)
    hist_ok = n >= 10000 and all(
        abs((labels == cls).mean() - 1 / 3) <= 0.02
        for cls in (inj.P_PARA, inj.P_RANDOM, inj.P_INPARA))

    gold = set()
    by_pair_ids = {}
    for rec in records:
        pair = tok.encode_pair(rec.source, rec.target, 64)
        by_pair_ids[tuple(pair.ids)] = rec
        for j, k, m, n_ in tok.remap_spans(rec.alignments, pair):
            gold.add((tuple(pair.ids), (j, k), (m, n_)))
    inpara_ok = all(
        (tuple(ex.pair.ids), ex.src_span, ex.tgt_span) not in gold
        for ex in examples if ex.label == inj.P_INPARA)

    # random partners: target differs from the source's own gold target
    # (restricted to sources unique in the corpus so "own" is well defined)
    targets_of = {}
    for rec in records:
        targets_of.setdefault(tuple(rec.source), []).append(tuple(rec.target))
    random_ok = True
    for ex in data.sentence_examples:
        if ex.label != inj.S_RANDOM:
            continue
        toks = ex.pair.tokens
        src = tuple(tok.detokenize(toks[1 : ex.pair.boundary - 1]))
        tgt = tuple(tok.detokenize(toks[ex.pair.boundary : -1]))
        if len(targets_of[src]) == 1:
            random_ok &= tgt != targets_of[src][0]
    ok = hist_ok and inpara_ok and random_ok
    assert report(5, f"{n} sampled examples: uniform +-2%, in_paraphrase != "
                     "gold span, random partner != gold target", ok)


def test_criterion_06_early_stopping():
    cases = [
        ([0.2, 0.4, 0.6, 0.8], False),      # monotone: never stop
        ([0.5, 0.5, 0.5, 0.5], False),      # plateau: never stop
        ([0.8, 0.7, 0.6], True),            # immediate double drop
        ([0.5, 0.4, 0.6, 0.5], True),       # second, non-consecutive drop
        ([0.5, 0.4, 0.6, 0.7, 0.8], False), # one drop then recovery
        ([0.9, 0.1, 0.9, 0.1], True),
        ([], False),
        ([0.3], False),
        ([0.3, 0.2], False),                # a single drop is not enough
    ]
    ok = all(inj.early_stop_decision(seq) is expected for seq, expected in cases)
    assert report(6, "second-decrease rule matches all scripted sequences", ok)


def test_criterion_07_injection_learns(acc_injection, acc_tokenizer,
                                        acc_config, acc_base, acc_corpus):
    result, elapsed = acc_injection
    acc_ok = (result.dev_phrase_acc >= 0.63 and result.dev_sent_acc >= 0.90
              and result.steps_run <= 2000)
    ls = [row[3] for row in result.report_rows]
    curve_ok = len(ls) >= 2 and ls[-1] < ls[0]
    # per-batch additivity of the joint loss, checked exactly
    data = inj.sample_negatives(acc_corpus[:40], acc_tokenizer, 64, seed=0)
    heads = inj.init_heads(acc_config, "joint", 0)
    loss, l_p, l_s = inj.joint_loss(
        data.phrase_examples[:16], data.sentence_examples[:16],
        acc_base, heads, acc_config)
    sum_ok = abs(loss.item() - (l_p.item() + l_s.item())) <= 1e-12
    # and the bookkeeping of every reported row
    sum_ok &= all(abs(row[3] - (row[1] + row[2])) <= 1e-9
                  for row in result.report_rows)
    time_ok = elapsed < 900
    ok = acc_ok and curve_ok and sum_ok and time_ok
    assert report(
        7, f"dev phrasal {result.dev_phrase_acc:.3f} >= 0.63, sentential "
           f"{result.dev_sent_acc:.3f} >= 0.90 in {result.steps_run} steps, "
           f"smoothed L {ls[0]:.3f}->{ls[-1]:.3f}, L = L_p + L_s, "
           f"{elapsed:.0f}s < 900s", ok), result.report_rows


def test_criterion_08_subsample_margins(acc_injection, acc_corpus,
                                         acc_tokenizer, acc_config, acc_base):
    result, _ = acc_injection
    task = ft.TaskSpec("synthetic-paraphrase", "pair_classification", "accuracy")
    train = ft.make_paraphrase_task(acc_corpus, 2000, seed=100)
    dev = ft.make_paraphrase_task(acc_corpus, 400, seed=101)
    checkpoints = {"baseline": acc_base, "injected": result.params}
    seeds = [0, 1, 2]
    sizes = [100, 500, 2000]
    hyper = ft.FinetuneHyper(batch_size=32, lr=1e-3, epochs=16, dropout=0.1)
    grid = ft.subsample_experiment(task, train, dev, checkpoints, acc_config,
                                   acc_tokenizer, sizes, seeds, hyper)
    margins = {size: grid.mean_margin(task.name, size, seeds,
                                      injected="injected")
               for size in sizes}
    ok = (margins[100] > 0 and margins[500] > 0
          and margins[100] > margins[2000])
    assert report(
        8, f"mean margins over 3 seeds: @100 {margins[100]:+.3f} > 0, "
           f"@500 {margins[500]:+.3f} > 0, @100 > @full {margins[2000]:+.3f}",
        ok), grid.rows


def test_criterion_09_ablation_grid(small_corpus, tokenizer, tiny_config):
    splits = datagen.split_corpus(small_corpus, 15, 15, seed=0)
    base = enc.init_params(tiny_config, 0)
    task = ft.TaskSpec("para", "pair_classification", "accuracy")
    train = ft.make_paraphrase_task(small_corpus, 24, seed=0)
    dev = ft.make_paraphrase_task(small_corpus, 12, seed=1)
    inject_hyper = inj.InjectionHyper(lr=1e-3, batch_size=8, max_steps=6,
                                      eval_interval=3, seed=0)
    ft_hyper = ft.FinetuneHyper(batch_size=8, lr=1e-3, epochs=1)
    grid, results = ft.ablation_experiment(
        splits, base, tiny_config, tokenizer, [task],
        {task.name: (train, dev)}, ft.ABLATION_VARIANTS, [0],
        inject_hyper, ft_hyper)
    have = {row[0] for row in grid.rows}
    complete = have == set(ft.ABLATION_VARIANTS) and len(grid.rows) == 6
    no_phrase_head = ("head.phrase_w" not in results["sentence_only"].heads
                      and "head.phrase_b" not in results["sentence_only"].heads
                      and "head.sent_w" in results["sentence_only"].heads)
    data = inj.sample_negatives(splits[0], tokenizer, tiny_config.max_len, seed=0)
    heads = inj.init_heads(tiny_config, "joint", 0)
    batch_p = data.phrase_examples[:12]
    batch_s = data.sentence_examples[:12]
    loss, l_p, l_s = inj.joint_loss(batch_p, batch_s, base, heads, tiny_config)
    only_p, _, _ = inj.joint_loss(batch_p, batch_s, base,
                                  {k: v for k, v in heads.items()
                                   if k.startswith("head.phrase")},
                                  tiny_config)
    only_s, _, _ = inj.joint_loss(batch_p, batch_s, base,
                                  {k: v for k, v in heads.items()
                                   if k.startswith("head.sent")},
                                  tiny_config)
    additive = abs(loss.item() - (only_p.item() + only_s.item())) <= 1e-12
    ok = complete and no_phrase_head and additive
    assert report(
        9, "ablation rows complete for 6 variants, sentence_only omits the "
           "phrasal head, joint loss = sum of single-task losses", ok)


def test_criterion_10_reproducibility(tmp_path):
    corpus = tmp_path / "corpus.jsonl"
    vocab = tmp_path / "vocab.txt"
    assert cli.main(["gen-data", "--out", str(corpus), "--size", "80",
                     "--seed", "1"]) == 0
    assert cli.main(["build-vocab", "--corpus", str(corpus),
                     "--out", str(vocab), "--vocab-size", "280"]) == 0
    outputs = []
    for run in ("r1", "r2"):
        out_dir = tmp_path / run
        code = cli.main([
            "experiment", "--corpus", str(corpus), "--vocab", str(vocab),
            "--recipe", "subsample", "--sizes", "8", "--seeds", "0,1",
            "--out-dir", str(out_dir),
            "--set", "dev_n=15", "--set", "test_n=15", "--set", "max_steps=4",
            "--set", "eval_interval=2", "--set", "batch_size=8",
            "--set", "lr=1e-3", "--set", "task_size=16",
            "--set", "ft_epochs=1", "--set", "ft_batch_size=8",
            "--set", "layers=1", "--set", "hidden=16", "--set", "heads=2",
            "--set", "ff=32", "--set", "max_len=48",
        ])
        assert code == 0
        outputs.append((out_dir / "subsample_report.csv").read_bytes())
        outputs.append((out_dir / "manifest.json").read_bytes())
    ok = outputs[0] == outputs[2] and outputs[1] == outputs[3]
    assert report(10, "identical config + seed reruns emit byte-identical "
                      "metric CSVs and manifests", ok)
