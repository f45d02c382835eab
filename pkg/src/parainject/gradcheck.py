"""Finite-difference verification of every differentiable primitive and of
the full joint loss through the encoder.

Used both by the test suite and the `gradcheck` CLI subcommand.
"""

import numpy as np

from . import datagen, encoder as enc, injection
from . import tensor as T
from .tokenizer import Tokenizer, build_vocab


def _scalarize(out, proj):
    """Random linear projection of any-shaped output to a scalar."""
    flat = T.reshape(out, (1, out.data.size))
    return T.reshape(T.matmul(flat, proj[: out.data.size].reshape(-1, 1)), ())


def primitive_gradchecks(seed=0, step=1e-5):
    """Max relative error per primitive, reverse-mode vs central differences."""
    rng = np.random.default_rng(seed)
    proj = rng.normal(size=4096)
    a = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    g = T.Tensor(rng.normal(size=6), requires_grad=True)
    bias = T.Tensor(rng.normal(size=6), requires_grad=True)
    table = T.Tensor(rng.normal(size=(7, 6)), requires_grad=True)
    logits = T.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    pred = T.Tensor(rng.normal(size=3), requires_grad=True)
    ids = rng.integers(0, 7, size=(2, 3))
    labels = rng.integers(0, 5, size=4)
    targets = rng.normal(size=3)

    def drop_rng():
        return np.random.default_rng(1234)  # fixed mask, deterministic f

    cases = {
        "add": ({"a": a, "b": b}, lambda: _scalarize(T.add(a, b), proj)),
        "sub": ({"a": a, "b": b}, lambda: _scalarize(T.sub(a, b), proj)),
        "mul": ({"a": a, "b": b}, lambda: _scalarize(T.mul(a, b), proj)),
        "matmul": ({"a": a, "w": w}, lambda: _scalarize(T.matmul(a, w), proj)),
        "absolute": ({"a": a}, lambda: _scalarize(T.absolute(a), proj)),
        "concat": ({"a": a, "b": b},
                   lambda: _scalarize(T.concat([a, b], axis=-1), proj)),
        "stack": ({"a": a, "b": b},
                  lambda: _scalarize(T.stack([a, b]), proj)),
        "select": ({"a": a}, lambda: _scalarize(T.select(a, 1), proj)),
        "reshape": ({"a": a}, lambda: _scalarize(T.reshape(a, (2, 12)), proj)),
        "swapaxes": ({"a": a}, lambda: _scalarize(T.swapaxes(a, 0, 1), proj)),
        "scale": ({"a": a}, lambda: _scalarize(T.scale(a, 2.5), proj)),
        "softmax": ({"a": a}, lambda: _scalarize(T.softmax(a), proj)),
        "layer_norm": ({"a": a, "g": g, "bias": bias},
                       lambda: _scalarize(T.layer_norm(a, g, bias), proj)),
        "gelu": ({"a": a}, lambda: _scalarize(T.gelu(a), proj)),
        "dropout": ({"a": a},
                    lambda: _scalarize(T.dropout(a, 0.3, drop_rng(), True), proj)),
        "embedding": ({"table": table},
                      lambda: _scalarize(T.embedding(table, ids), proj)),
        "max_pool_span": ({"a": a},
                          lambda: _scalarize(T.max_pool_span(a, (1, 3)), proj)),
        "mean_pool_span": ({"a": a},
                           lambda: _scalarize(T.mean_pool_span(a, (0, 2)), proj)),
        "softmax_cross_entropy": (
            {"logits": logits},
            lambda: T.softmax_cross_entropy(logits, labels)),
        "mse_loss": ({"pred": pred}, lambda: T.mse_loss(pred, targets)),
    }
    errors = {}
    for name, (params, f) in cases.items():
        errors[name] = T.grad_check(
            f, params, step=step, samples_per_param=6,
            rng=np.random.default_rng(seed + 1))
    return errors


def _toy_setup(seed=0, layers=2, hidden=64):
    cfg = datagen.SynthConfig(size=6, seed=seed)
    records, _ = datagen.generate_synthetic(cfg)
    vocab = build_vocab((r.source + r.target for r in records), 200)
    tok = Tokenizer(vocab)
    config = enc.EncoderConfig(layers=layers, hidden=hidden, heads=4,
                               ff=hidden * 4, max_len=48,
                               vocab_size=len(vocab), dropout=0.0)
    params = enc.init_params(config, seed)
    heads = injection.init_heads(config, "joint", seed + 1)
    data = injection.sample_negatives(records, tok, config.max_len, seed=seed)
    return config, params, heads, data


def joint_loss_gradcheck(seed=0, layers=2, hidden=64, step=1e-4,
                         samples_per_param=3):
    """Gradient check of L = L_p + L_s through the full encoder."""
    config, params, heads, data = _toy_setup(seed, layers, hidden)
    phrase = data.phrase_examples[:6]
    sent = data.sentence_examples[:4]
    all_params = dict(params)
    all_params.update(heads)

    def f():
        loss, _, _ = injection.joint_loss(
            phrase, sent, params, heads, config, train=False)
        return loss

    return T.grad_check(f, all_params, step=step,
                        samples_per_param=samples_per_param,
                        rng=np.random.default_rng(seed + 2))


def corrupted_adjoint_error(seed=0, step=1e-5):
    """Negative control: a deliberately wrong backward must be detected."""
    rng = np.random.default_rng(seed)

    def broken_gelu(a):
        out = T.gelu(a)
        # inflate the adjoint by 50%
        inner_backward = out._backward

        def backward(g):
            inner_backward(1.5 * g)

        return T.Tensor(out.data, _parents=out._parents, _backward=backward)

    a = T.Tensor(rng.normal(size=(4, 6)) + 0.5, requires_grad=True)
    proj = rng.normal(size=64)

    def f():
        return _scalarize(broken_gelu(a), proj)

    return T.grad_check(f, {"a": a}, step=step, samples_per_param=10,
                        rng=np.random.default_rng(seed + 1))


def run_suite(seed=0):
    """Everything the `gradcheck` subcommand reports."""
    prim = primitive_gradchecks(seed)
    joint = joint_loss_gradcheck(seed)
    control = corrupted_adjoint_error(seed)
    return {
        "primitive_errors": prim,
        "max_primitive_error": max(prim.values()),
        "joint_loss_error": joint,
        "max_error": max(max(prim.values()), joint),
        "corrupted_control_error": control,
    }
