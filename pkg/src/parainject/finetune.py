"""Downstream fine-tuning and the experiment grids built on it.

Adds a single affine head on the [CLS] representation (cross-entropy
for classification, squared error for regression), plus the metric
functions, the training-size subsample grid, and the ablation grid over
injection variants.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from . import injection
from . import tensor as T

TASK_KINDS = ("pair_classification", "pair_regression",
              "single_sentence_classification")
METRICS = ("accuracy", "f1", "pearson")
ABLATION_VARIANTS = ("baseline", "sentence_only", "phrase_3way",
                     "phrase_binary", "joint", "joint_simple_feature")


class TaskConfigError(ValueError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TaskSpec:
    name: str
    kind: str
    metric: str
    train_path: str = None
    dev_path: str = None
    test_path: str = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise TaskConfigError(f"unknown task kind {self.kind!r}")
        if self.metric not in METRICS:
            raise TaskConfigError(f"unknown metric {self.metric!r}")
        if self.kind != "pair_regression" and self.metric == "pearson":
            raise TaskConfigError("pearson is only defined for regression tasks")


@dataclass
class FinetuneHyper:
    batch_size: int = 32
    lr: float = 3e-5
    epochs: int = 4
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class TaskExample:
    label: str
    s1: list
    s2: list = None


def load_task_file(path):
    """Tab-separated rows with header label<TAB>sentence1[<TAB>sentence2]."""
    examples = []
    with open(path, encoding="utf-8") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header is None or header[0] != "label":
            raise TaskConfigError(f"{path}: expected a 'label...' header row")
        pair = len(header) == 3
        for row in reader:
            if len(row) != len(header):
                raise TaskConfigError(
                    f"{path}: row with {len(row)} fields, expected {len(header)}")
            s1 = row[1].lower().split()
            s2 = row[2].lower().split() if pair else None
            examples.append(TaskExample(row[0], s1, s2))
    return examples


def save_task_file(examples, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t")
        pair = examples and examples[0].s2 is not None
        writer.writerow(["label", "sentence1"] + (["sentence2"] if pair else []))
        for ex in examples:
            row = [ex.label, " ".join(ex.s1)]
            if pair:
                row.append(" ".join(ex.s2))
            writer.writerow(row)


def make_paraphrase_task(records, n, seed=0):
    """Balanced paraphrase-identification examples from aligned records.

    Positives pair each record's source with its gold target (label "1");
    negatives pair a source with a different record's target (label "0").
    """
    rng = np.random.default_rng(seed)
    if len(records) < 2:
        raise TaskConfigError("need at least 2 records to build pair tasks")
    examples = []
    for i in range(n):
        rec = records[int(rng.integers(len(records)))]
        if i % 2 == 0:
            examples.append(TaskExample("1", list(rec.source), list(rec.target)))
        else:
            other = records[int(rng.integers(len(records)))]
            while other is rec:
                other = records[int(rng.integers(len(records)))]
            examples.append(TaskExample("0", list(rec.source), list(other.target)))
    return examples


def compute_metric(preds, golds, metric):
    preds = np.asarray(preds, dtype=np.float64)
    golds = np.asarray(golds, dtype=np.float64)
    if preds.shape != golds.shape or preds.size < 2:
        raise MetricError(
            f"need matching prediction/gold vectors of length >= 2, got "
            f"{preds.shape} vs {golds.shape}")
    if metric == "accuracy":
        return float((preds == golds).mean())
    if metric == "f1":
        tp = float(((preds == 1) & (golds == 1)).sum())
        fp = float(((preds == 1) & (golds != 1)).sum())
        fn = float(((preds != 1) & (golds == 1)).sum())
        if tp == 0.0:
            return 0.0
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        return 2 * precision * recall / (precision + recall)
    if metric == "pearson":
        if preds.std() == 0.0 or golds.std() == 0.0:
            raise MetricError("pearson correlation undefined at zero variance")
        return float(np.corrcoef(preds, golds)[0, 1])
    raise MetricError(f"unknown metric {metric!r}")


class FinetunedModel:
    """Encoder + one affine head on h_[CLS], trained for a fixed epoch count."""

    def __init__(self, task, params, config, tokenizer):
        self.task = task
        self.params = params
        self.config = config
        self.tokenizer = tokenizer
        self.labels = None  # classification: sorted label strings
        self.target_range = None  # regression: (min, max) for rescaling
        self.head_w = None
        self.head_b = None

    def _encode(self, ex):
        if self.task.kind == "single_sentence_classification":
            return self.tokenizer.encode_single(ex.s1, self.config.max_len)
        return self.tokenizer.encode_pair(ex.s1, ex.s2, self.config.max_len,
                                          truncate=True)

    def _cls_batch(self, examples, train=False, rng=None):
        pairs = [self._encode(ex) for ex in examples]
        ids, segs = enc.pad_batch(pairs)
        h = enc.encode(ids, segs, self.params, self.config, train=train, rng=rng)
        return T.stack([T.select(T.select(h, b), 0) for b in range(len(pairs))])

    def _targets(self, examples):
        if self.task.kind == "pair_regression":
            lo, hi = self.target_range
            span = hi - lo if hi > lo else 1.0
            return np.array([(float(ex.label) - lo) / span for ex in examples])
        return np.array([self.labels.index(ex.label) for ex in examples])

    def fit(self, train_examples, hyper):
        regression = self.task.kind == "pair_regression"
        if regression:
            vals = [float(ex.label) for ex in train_examples]
            self.target_range = (min(vals), max(vals))
            out_dim = 1
        else:
            self.labels = sorted({ex.label for ex in train_examples})
            if len(self.labels) < 2:
                raise TaskConfigError(
                    f"classification task needs >= 2 label values, got "
                    f"{self.labels}")
            out_dim = len(self.labels)
        rng = np.random.default_rng(hyper.seed)
        self.head_w = T.Tensor(
            enc._trunc_normal(rng, (self.config.hidden, out_dim)),
            requires_grad=True)
        self.head_b = T.Tensor(np.zeros(out_dim), requires_grad=True)
        all_params = dict(self.params)
        all_params["finetune_head_w"] = self.head_w
        all_params["finetune_head_b"] = self.head_b
        opt = T.Adam(all_params, lr=hyper.lr)

        for _ in range(hyper.epochs):
            order = rng.permutation(len(train_examples))
            for start in range(0, len(order), hyper.batch_size):
                batch = [train_examples[i] for i in order[start : start + hyper.batch_size]]
                opt.zero_grad()
                h_cls = self._cls_batch(batch, train=True, rng=rng)
                h_cls = T.dropout(h_cls, hyper.dropout, rng, True)
                out = T.add(T.matmul(h_cls, self.head_w), self.head_b)
                if regression:
                    loss = T.mse_loss(T.reshape(out, (len(batch),)),
                                      self._targets(batch))
                else:
                    loss = T.softmax_cross_entropy(out, self._targets(batch))
                loss.backward()
                opt.step()
        return self

    def predict(self, examples, chunk=64):
        """Label indices (classification) or rescaled values (regression)."""
        outs = []
        for start in range(0, len(examples), chunk):
            batch = examples[start : start + chunk]
            h_cls = self._cls_batch(batch)
            out = T.add(T.matmul(h_cls, self.head_w), self.head_b).data
            outs.append(out)
        out = np.concatenate(outs, axis=0)
        if self.task.kind == "pair_regression":
            lo, hi = self.target_range
            return out[:, 0] * (hi - lo) + lo
        return out.argmax(axis=-1)

    def evaluate(self, examples):
        preds = self.predict(examples)
        if self.task.kind == "pair_regression":
            golds = [float(ex.label) for ex in examples]
        else:
            golds = [self.labels.index(ex.label) for ex in examples]
        return compute_metric(preds, golds, self.task.metric)


def finetune(task, train_examples, checkpoint_params, config, tokenizer, hyper):
    """Fine-tune a copy of the checkpoint; the input params are not mutated."""
    if config.vocab_size != len(tokenizer.vocab):
        raise TaskConfigError(
            f"checkpoint vocab size {config.vocab_size} does not match "
            f"tokenizer vocabulary of {len(tokenizer.vocab)}")
    params = enc.clone_params(checkpoint_params)
    model = FinetunedModel(task, params, config, tokenizer)
    return model.fit(train_examples, hyper)


@dataclass
class ExperimentReport:
    """Rows of (model_variant, task, train_size, metric_name, value, seed)."""

    rows: list = field(default_factory=list)
    _keys: set = field(default_factory=set, repr=False)

    def add(self, variant, task, train_size, metric_name, value, seed):
        key = (variant, task, train_size, seed)
        if key in self._keys:
            raise ValueError(f"duplicate report cell {key}")
        self._keys.add(key)
        self.rows.append((variant, task, train_size, metric_name, value, seed))

    def value(self, variant, task, train_size, seed):
        for row in self.rows:
            if (row[0], row[1], row[2], row[5]) == (variant, task, train_size, seed):
                return row[4]
        raise KeyError((variant, task, train_size, seed))

    def mean_margin(self, task, train_size, seeds, injected="joint",
                    baseline="baseline"):
        deltas = [
            self.value(injected, task, train_size, s)
            - self.value(baseline, task, train_size, s)
            for s in seeds
        ]
        return float(np.mean(deltas))

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["model_variant", "task", "train_size",
                             "metric_name", "value", "seed"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2], row[3],
                                 f"{row[4]:.6f}", row[5]])


def subsample_experiment(task, train_examples, dev_examples, checkpoints,
                         config, tokenizer, sizes, seeds, hyper):
    """Fine-tune every checkpoint on nested subsamples of the train set.

    Subsamples are prefix-nested per seed (the size-100 sample is a subset
    of the size-1000 sample) and shared across checkpoints so deltas
    compare like with like.
    """
    report = ExperimentReport()
    for size in sizes:
        if size > len(train_examples):
            raise ValueError(
                f"subsample size {size} exceeds train set of {len(train_examples)}")
    for seed in seeds:
        order = np.random.default_rng(seed).permutation(len(train_examples))
        for size in sizes:
            subset = [train_examples[i] for i in order[:size]]
            for name, params in checkpoints.items():
                h = FinetuneHyper(batch_size=hyper.batch_size, lr=hyper.lr,
                                  epochs=hyper.epochs, dropout=hyper.dropout,
                                  seed=seed)
                model = finetune(task, subset, params, config, tokenizer, h)
                report.add(name, task.name, size, task.metric,
                           model.evaluate(dev_examples), seed)
    return report


def ablation_experiment(splits, base_params, config, tokenizer, tasks,
                        task_data, variants, seeds, inject_hyper, ft_hyper):
    """Train each injection variant from the same base checkpoint and
    fine-tune it on every task; emits the full variant x task grid.

    ``task_data`` maps task name -> (train_examples, dev_examples).
    Returns (report, {variant: InjectionResult or None}).
    """
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise TaskConfigError(
                f"unknown variant {v!r}; choose from {ABLATION_VARIANTS}")
    report = ExperimentReport()
    results = {}
    for variant in variants:
        if variant == "baseline":
            params, results[variant] = base_params, None
        else:
            res = injection.inject_train(
                splits, enc.clone_params(base_params), config, inject_hyper,
                tokenizer, variant=variant)
            params, results[variant] = res.params, res
        for task in tasks:
            train_ex, dev_ex = task_data[task.name]
            for seed in seeds:
                h = FinetuneHyper(batch_size=ft_hyper.batch_size,
                                  lr=ft_hyper.lr, epochs=ft_hyper.epochs,
                                  dropout=ft_hyper.dropout, seed=seed)
                model = finetune(task, train_ex, params, config, tokenizer, h)
                report.add(variant, task.name, len(train_ex), task.metric,
                           model.evaluate(dev_ex), seed)
    return report, results
