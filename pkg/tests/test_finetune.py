import numpy as np
import pytest

from parainject import datagen
from parainject import encoder as enc
from parainject import finetune as ft
from parainject import injection as inj


@pytest.fixture(scope="module")
def pair_task():
    return ft.TaskSpec("para-id", "pair_classification", "accuracy")


@pytest.fixture(scope="module")
def task_examples(small_corpus):
    return ft.make_paraphrase_task(small_corpus, 80, seed=0)


# ---- task specs and files ----

def test_task_spec_validation():
    with pytest.raises(ft.TaskConfigError, match="kind"):
        ft.TaskSpec("x", "triple_classification", "accuracy")
    with pytest.raises(ft.TaskConfigError, match="metric"):
        ft.TaskSpec("x", "pair_classification", "auc")
    with pytest.raises(ft.TaskConfigError, match="pearson"):
        ft.TaskSpec("x", "pair_classification", "pearson")
    ft.TaskSpec("x", "pair_regression", "pearson")  # allowed


def test_task_file_round_trip(tmp_path, task_examples):
    path = tmp_path / "task.tsv"
    ft.save_task_file(task_examples, path)
    loaded = ft.load_task_file(path)
    assert len(loaded) == len(task_examples)
    for a, b in zip(task_examples, loaded):
        assert (a.label, a.s1, a.s2) == (b.label, b.s1, b.s2)


def test_task_file_single_sentence_round_trip(tmp_path):
    examples = [ft.TaskExample("pos", ["good", "story"]),
                ft.TaskExample("neg", ["bad", "one"])]
    path = tmp_path / "single.tsv"
    ft.save_task_file(examples, path)
    loaded = ft.load_task_file(path)
    assert all(ex.s2 is None for ex in loaded)
    assert loaded[0].s1 == ["good", "story"]


def test_task_file_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("sentence1\tlabel\na b\t1\n")
    with pytest.raises(ft.TaskConfigError, match="header"):
        ft.load_task_file(path)


def test_task_file_rejects_ragged_rows(tmp_path):
    path = tmp_path / "ragged.tsv"
    path.write_text("label\tsentence1\tsentence2\n1\tonly one field\n")
    with pytest.raises(ft.TaskConfigError, match="fields"):
        ft.load_task_file(path)


def test_make_paraphrase_task_balanced(small_corpus, task_examples):
    labels = [ex.label for ex in task_examples]
    assert labels.count("1") == labels.count("0") == 40
    own_target = {tuple(r.source): tuple(r.target) for r in small_corpus}
    for ex in task_examples:
        if ex.label == "1":
            assert own_target[tuple(ex.s1)] == tuple(ex.s2)
        else:
            assert own_target[tuple(ex.s1)] != tuple(ex.s2)


# ---- metrics ----

def test_accuracy_metric():
    assert ft.compute_metric([1, 0, 1, 1], [1, 0, 0, 1], "accuracy") == 0.75


def test_f1_metric_matches_hand_computation():
    # tp=2, fp=1, fn=1 -> precision 2/3, recall 2/3, f1 = 2/3
    preds = [1, 1, 1, 0, 0]
    golds = [1, 1, 0, 1, 0]
    assert abs(ft.compute_metric(preds, golds, "f1") - 2 / 3) < 1e-12
    assert ft.compute_metric([0, 0], [1, 1], "f1") == 0.0


def test_pearson_metric(rng):
    x = rng.normal(size=50)
    assert abs(ft.compute_metric(x, 2 * x + 1, "pearson") - 1.0) < 1e-12
    y = rng.normal(size=50)
    expected = np.corrcoef(x, y)[0, 1]
    assert abs(ft.compute_metric(x, y, "pearson") - expected) < 1e-12
    with pytest.raises(ft.MetricError, match="variance"):
        ft.compute_metric([1.0, 1.0], [0.0, 1.0], "pearson")


def test_metric_shape_validation():
    with pytest.raises(ft.MetricError):
        ft.compute_metric([1], [1], "accuracy")
    with pytest.raises(ft.MetricError):
        ft.compute_metric([1, 0], [1, 0, 1], "accuracy")


# ---- fine-tuning ----

def test_finetune_does_not_mutate_checkpoint(pair_task, task_examples,
                                             tiny_config, tiny_params,
                                             tokenizer):
    before = {k: p.data.copy() for k, p in tiny_params.items()}
    hyper = ft.FinetuneHyper(batch_size=16, lr=1e-3, epochs=1, seed=0)
    model = ft.finetune(pair_task, task_examples, tiny_params, tiny_config,
                        tokenizer, hyper)
    for k in before:
        assert np.array_equal(tiny_params[k].data, before[k]), k
    assert any(not np.array_equal(model.params[k].data, before[k])
               for k in before)


def test_finetune_learns_separable_task(tiny_config, tokenizer):
    """A task keyed on one surface word is learnable in a few epochs."""
    task = ft.TaskSpec("marker", "single_sentence_classification", "accuracy")
    pos = [ft.TaskExample("1", ["the", "cat", "saw", "the", "dog"])] * 20
    neg = [ft.TaskExample("0", ["the", "dog", "saw", "the", "bird"])] * 20
    train = pos + neg
    params = enc.init_params(tiny_config, 0)
    hyper = ft.FinetuneHyper(batch_size=8, lr=3e-3, epochs=6, seed=0)
    model = ft.finetune(task, train, params, tiny_config, tokenizer, hyper)
    assert model.evaluate(train) == 1.0


def test_finetune_regression_rescaling(tiny_config, tokenizer):
    task = ft.TaskSpec("sim", "pair_regression", "pearson")
    rng = np.random.default_rng(0)
    train = [ft.TaskExample(str(float(rng.integers(1, 6))),
                            ["the", "cat"], ["the", "feline"])
             for _ in range(12)]
    params = enc.init_params(tiny_config, 0)
    hyper = ft.FinetuneHyper(batch_size=4, lr=1e-3, epochs=1, seed=0)
    model = ft.finetune(task, train, params, tiny_config, tokenizer, hyper)
    preds = model.predict(train)
    assert preds.shape == (12,)
    assert np.all(np.isfinite(preds))
    lo, hi = model.target_range
    assert lo >= 1.0 and hi <= 5.0


def test_finetune_single_label_rejected(pair_task, tiny_config, tiny_params,
                                        tokenizer):
    train = [ft.TaskExample("1", ["the", "cat"], ["the", "feline"])] * 4
    with pytest.raises(ft.TaskConfigError, match="label"):
        ft.finetune(pair_task, train, tiny_params, tiny_config, tokenizer,
                    ft.FinetuneHyper())


def test_finetune_vocab_mismatch_rejected(pair_task, task_examples,
                                          tiny_params, tokenizer):
    wrong = enc.EncoderConfig(layers=2, hidden=16, heads=2, ff=32, max_len=48,
                              vocab_size=7)
    with pytest.raises(ft.TaskConfigError, match="vocab"):
        ft.finetune(pair_task, task_examples, tiny_params, wrong, tokenizer,
                    ft.FinetuneHyper())


def test_finetune_deterministic(pair_task, task_examples, tiny_config,
                                tiny_params, tokenizer):
    hyper = ft.FinetuneHyper(batch_size=16, lr=1e-3, epochs=1, seed=4)
    m1 = ft.finetune(pair_task, task_examples[:32], tiny_params, tiny_config,
                     tokenizer, hyper)
    m2 = ft.finetune(pair_task, task_examples[:32], tiny_params, tiny_config,
                     tokenizer, hyper)
    assert np.array_equal(m1.head_w.data, m2.head_w.data)
    assert np.array_equal(m1.predict(task_examples), m2.predict(task_examples))


# ---- report and grids ----

def test_report_rejects_duplicates():
    r = ft.ExperimentReport()
    r.add("joint", "t", 100, "accuracy", 0.9, 0)
    with pytest.raises(ValueError, match="duplicate"):
        r.add("joint", "t", 100, "accuracy", 0.8, 0)
    r.add("joint", "t", 100, "accuracy", 0.8, 1)  # new seed is fine


def test_report_value_and_margin():
    r = ft.ExperimentReport()
    for seed, (j, b) in enumerate([(0.9, 0.6), (0.8, 0.7)]):
        r.add("joint", "t", 100, "accuracy", j, seed)
        r.add("baseline", "t", 100, "accuracy", b, seed)
    assert r.value("joint", "t", 100, 1) == 0.8
    assert abs(r.mean_margin("t", 100, [0, 1]) - 0.2) < 1e-12
    with pytest.raises(KeyError):
        r.value("joint", "t", 500, 0)


def test_report_csv_round_trip(tmp_path):
    r = ft.ExperimentReport()
    r.add("joint", "t", 100, "accuracy", 0.912345678, 0)
    path = tmp_path / "report.csv"
    r.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "model_variant,task,train_size,metric_name,value,seed"
    assert lines[1] == "joint,t,100,accuracy,0.912346,0"


def test_subsample_experiment_grid(pair_task, task_examples, tiny_config,
                                   tokenizer):
    checkpoints = {"baseline": enc.init_params(tiny_config, 0),
                   "joint": enc.init_params(tiny_config, 1)}
    dev = task_examples[:20]
    hyper = ft.FinetuneHyper(batch_size=8, lr=1e-3, epochs=1)
    report = ft.subsample_experiment(
        pair_task, task_examples, dev, checkpoints, tiny_config, tokenizer,
        sizes=[8, 16], seeds=[0, 1], hyper=hyper)
    assert len(report.rows) == 2 * 2 * 2  # sizes x seeds x checkpoints
    for name in checkpoints:
        for size in (8, 16):
            for seed in (0, 1):
                v = report.value(name, pair_task.name, size, seed)
                assert 0.0 <= v <= 1.0


def test_subsample_experiment_size_validation(pair_task, task_examples,
                                              tiny_config, tokenizer):
    with pytest.raises(ValueError, match="exceeds"):
        ft.subsample_experiment(
            pair_task, task_examples[:10], task_examples[:10],
            {"baseline": {}}, tiny_config, tokenizer, sizes=[50], seeds=[0],
            hyper=ft.FinetuneHyper())


def test_subsamples_are_nested_prefixes(task_examples):
    # the grid draws prefix subsets of a per-seed permutation; verify the
    # nesting property the protocol relies on
    order = np.random.default_rng(3).permutation(len(task_examples))
    small = {task_examples[i].label + " ".join(task_examples[i].s1)
             for i in order[:8]}
    large = {task_examples[i].label + " ".join(task_examples[i].s1)
             for i in order[:16]}
    assert small <= large


def test_ablation_experiment_grid(small_corpus, tiny_config, tokenizer,
                                  pair_task):
    splits = datagen.split_corpus(small_corpus, 15, 15, seed=0)
    base = enc.init_params(tiny_config, 0)
    train = ft.make_paraphrase_task(small_corpus, 24, seed=0)
    dev = ft.make_paraphrase_task(small_corpus, 12, seed=1)
    inject_hyper = inj.InjectionHyper(lr=1e-3, batch_size=8, max_steps=6,
                                      eval_interval=3, seed=0)
    ft_hyper = ft.FinetuneHyper(batch_size=8, lr=1e-3, epochs=1)
    variants = ("baseline", "sentence_only", "joint")
    report, results = ft.ablation_experiment(
        splits, base, tiny_config, tokenizer, [pair_task],
        {pair_task.name: (train, dev)}, variants, [0], inject_hyper, ft_hyper)
    assert len(report.rows) == len(variants)
    assert results["baseline"] is None
    assert "head.phrase_w" not in results["sentence_only"].heads
    assert "head.phrase_w" in results["joint"].heads
    # the baseline checkpoint itself must not have been trained on
    fresh = enc.init_params(tiny_config, 0)
    for k in fresh:
        assert np.array_equal(base[k].data, fresh[k].data)


def test_ablation_unknown_variant(small_corpus, tiny_config, tokenizer,
                                  pair_task):
    with pytest.raises(ft.TaskConfigError, match="variant"):
        ft.ablation_experiment(
            (None, None, None), {}, tiny_config, tokenizer, [pair_task], {},
            ("baseline", "mystery"), [0], inj.InjectionHyper(),
            ft.FinetuneHyper())
