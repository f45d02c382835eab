"""Miniature bidirectional transformer encoder.

Post-layer-norm blocks with learned absolute position and segment
embeddings (the BERT arrangement), sized for desk-scale runs where full
gradient checks stay cheap.
"""

import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T

PAD_ID = 0
CHECKPOINT_MAGIC = "parainject-checkpoint v1"


@dataclass
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff: int = 256
    max_len: int = 64
    vocab_size: int = 1000
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ff", "max_len", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(
                f"hidden size {self.hidden} not divisible by {self.heads} heads"
            )


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with |x| > 2*std resampled."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def param_shapes(config):
    """Name -> shape map for every encoder parameter."""
    d, f = config.hidden, config.ff
    shapes = {
        "tok_emb": (config.vocab_size, d),
        "pos_emb": (config.max_len, d),
        "seg_emb": (2, d),
        "emb_ln_g": (d,),
        "emb_ln_b": (d,),
    }
    for i in range(config.layers):
        p = f"l{i}."
        for m in ("wq", "wk", "wv", "wo"):
            shapes[p + m] = (d, d)
            shapes[p + m[1] + "b"] = (d,)
        shapes[p + "attn_ln_g"] = (d,)
        shapes[p + "attn_ln_b"] = (d,)
        shapes[p + "ff1_w"] = (d, f)
        shapes[p + "ff1_b"] = (f,)
        shapes[p + "ff2_w"] = (f, d)
        shapes[p + "ff2_b"] = (d,)
        shapes[p + "ff_ln_g"] = (d,)
        shapes[p + "ff_ln_b"] = (d,)
    return shapes


def init_params(config, seed):
    """Deterministic init: truncated normal matrices, zero biases, unit LN."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("_g",)):
            data = np.ones(shape)
        elif name.endswith(("_b", "qb", "kb", "vb", "ob")):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = T.Tensor(data, requires_grad=True)
    return params


def encode(ids, segments, params, config, train=False, rng=None):
    """Run the encoder; returns hidden states (B, N, hidden).

    ``ids``/``segments`` are int arrays of shape (B, N), padded with
    PAD_ID; attention is masked so pad positions contribute nothing to
    other rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    segments = np.asarray(segments, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids, segments = ids[None, :], segments[None, :]
    b, n = ids.shape
    if n > config.max_len:
        raise ValueError(f"sequence length {n} exceeds max_len {config.max_len}")
    if ids.max() >= config.vocab_size:
        raise ValueError(f"token id {ids.max()} out of vocab {config.vocab_size}")
    if train and rng is None:
        raise ValueError("train-mode encoding needs an rng for dropout")

    heads = config.heads
    dh = config.hidden // heads
    inv_sqrt_dh = 1.0 / np.sqrt(dh)
    pad = ids == PAD_ID
    # additive bias on attention logits: large negative at pad keys
    mask_bias = np.where(pad, -1e9, 0.0)[:, None, None, :]
    p = config.dropout

    x = T.add(
        T.add(T.embedding(params["tok_emb"], ids), T.embedding(params["seg_emb"], segments)),
        T.embedding(params["pos_emb"], np.arange(n)),
    )
    x = T.layer_norm(x, params["emb_ln_g"], params["emb_ln_b"])
    x = T.dropout(x, p, rng, train)

    def split_heads(t):
        return T.swapaxes(T.reshape(t, (b, n, heads, dh)), 1, 2)

    for i in range(config.layers):
        pre = f"l{i}."
        q = split_heads(T.add(T.matmul(x, params[pre + "wq"]), params[pre + "qb"]))
        k = split_heads(T.add(T.matmul(x, params[pre + "wk"]), params[pre + "kb"]))
        v = split_heads(T.add(T.matmul(x, params[pre + "wv"]), params[pre + "vb"]))
        scores = T.add(T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), inv_sqrt_dh), mask_bias)
        attn = T.softmax(scores)
        attn = T.dropout(attn, p, rng, train)
        ctx = T.reshape(T.swapaxes(T.matmul(attn, v), 1, 2), (b, n, config.hidden))
        ctx = T.add(T.matmul(ctx, params[pre + "wo"]), params[pre + "ob"])
        ctx = T.dropout(ctx, p, rng, train)
        x = T.layer_norm(T.add(x, ctx), params[pre + "attn_ln_g"], params[pre + "attn_ln_b"])
        ff = T.gelu(T.add(T.matmul(x, params[pre + "ff1_w"]), params[pre + "ff1_b"]))
        ff = T.add(T.matmul(ff, params[pre + "ff2_w"]), params[pre + "ff2_b"])
        ff = T.dropout(ff, p, rng, train)
        x = T.layer_norm(T.add(x, ff), params[pre + "ff_ln_g"], params[pre + "ff_ln_b"])

    return T.select(x, 0) if squeeze else x


def pad_batch(pairs, pad_id=PAD_ID):
    """Stack EncodedPairs into (B, N) id/segment arrays."""
    n = max(len(p) for p in pairs)
    ids = np.full((len(pairs), n), pad_id, dtype=np.int64)
    segs = np.zeros((len(pairs), n), dtype=np.int64)
    for i, p in enumerate(pairs):
        ids[i, : len(p)] = p.ids
        segs[i, : len(p)] = p.segments
    return ids, segs


def save_checkpoint(path, config, params, extra=None):
    """Versioned text header (config key=value) + named flat float64 arrays.

    ``extra`` holds non-encoder arrays (classifier heads); they are saved
    alongside with their shapes.
    """
    arrays = {name: p.data for name, p in params.items()}
    if extra:
        arrays.update({name: p.data for name, p in extra.items()})
    with open(path, "wb") as f:
        header = [CHECKPOINT_MAGIC]
        for k, v in asdict(config).items():
            header.append(f"{k}={v}")
        header.append("")
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            shape = ",".join(str(s) for s in arr.shape)
            f.write(f"{name}\t{shape}\n".encode("utf-8"))
            f.write(struct.pack("<Q", arr.size))
            f.write(arr.tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Load (config, encoder params, extra arrays); validates shapes."""
    with open(path, "rb") as f:
        magic = f.readline().decode("utf-8").rstrip("\n")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint header: {magic!r}")
        cfg = {}
        while True:
            line = f.readline().decode("utf-8").rstrip("\n")
            if not line:
                break
            k, _, v = line.partition("=")
            cfg[k] = v
        config = EncoderConfig(
            layers=int(cfg["layers"]),
            hidden=int(cfg["hidden"]),
            heads=int(cfg["heads"]),
            ff=int(cfg["ff"]),
            max_len=int(cfg["max_len"]),
            vocab_size=int(cfg["vocab_size"]),
            dropout=float(cfg["dropout"]),
        )
        arrays = {}
        while True:
            head = f.readline()
            if not head:
                break
            name, _, shape_s = head.decode("utf-8").rstrip("\n").partition("\t")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            (count,) = struct.unpack("<Q", f.read(8))
            data = np.frombuffer(f.read(count * 8), dtype="<f8").reshape(shape)
            arrays[name] = np.array(data, dtype=np.float64)
    expected = param_shapes(config)
    params, extra = {}, {}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing encoder array '{name}'")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"array '{name}' has shape {arrays[name].shape}, "
                f"config implies {shape}"
            )
        params[name] = T.Tensor(arrays.pop(name), requires_grad=True)
    for name, arr in arrays.items():
        extra[name] = T.Tensor(arr, requires_grad=True)
    return config, params, extra


def clone_params(params):
    return {k: T.Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}
