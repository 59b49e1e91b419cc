"""Miniature conditional caption decoder with reverse-mode differentiation."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .errors import AllMasked, BadPrefix, EmptyDataset, InvalidConfig
from .textproc import BOS, PAD

PARAM_SHAPES = (
    # name, shape expression over (V, d, L, F)
    ("tok_emb", lambda V, d, L, F: (V, d)),
    ("pos_emb", lambda V, d, L, F: (L, d)),
    ("feat_proj", lambda V, d, L, F: (F, d)),
    ("sa_q", lambda V, d, L, F: (d, d)),
    ("sa_k", lambda V, d, L, F: (d, d)),
    ("sa_v", lambda V, d, L, F: (d, d)),
    ("sa_o", lambda V, d, L, F: (d, d)),
    ("ca_q", lambda V, d, L, F: (d, d)),
    ("ca_k", lambda V, d, L, F: (d, d)),
    ("ca_v", lambda V, d, L, F: (d, d)),
    ("ca_o", lambda V, d, L, F: (d, d)),
    ("ff_w1", lambda V, d, L, F: (d, 4 * d)),
    ("ff_w2", lambda V, d, L, F: (4 * d, d)),
    ("ln1_g", lambda V, d, L, F: (d,)),
    ("ln1_b", lambda V, d, L, F: (d,)),
    ("ln2_g", lambda V, d, L, F: (d,)),
    ("ln2_b", lambda V, d, L, F: (d,)),
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    feature_dim: int
    d_model: int = 64
    n_heads: int = 2
    max_len: int = 24
    seed: int = 0

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig("d_model must be divisible by n_heads")
        if self.vocab_size < 5:
            raise InvalidConfig("vocab_size must be >= 5")
        if self.max_len < 2:
            raise InvalidConfig("max_len must be >= 2")
        if self.feature_dim < 1 or self.d_model < 1:
            raise InvalidConfig("dimensions must be positive")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict  # name -> float64 ndarray

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.seed)
    V, d, L, F = config.vocab_size, config.d_model, config.max_len, config.feature_dim
    tensors = {}
    for name, shape_fn in PARAM_SHAPES:
        shape = shape_fn(V, d, L, F)
        if name.startswith("ln"):
            tensors[name] = (
                np.ones(shape) if name.endswith("_g") else np.zeros(shape)
            )
        else:
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], shape[0])
            s = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(config=config, tensors=tensors)


@dataclass
class ForwardTrace:
    logits: ad.Var
    tape: ad.Tape
    param_vars: dict


def _attention(tape, q, k, v, n_heads: int, causal: bool):
    d = ad.val(q).shape[1]
    dh = d // n_heads
    Lq = ad.val(q).shape[0]
    Lk = ad.val(k).shape[0]
    mask = None
    if causal:
        mask = np.triu(np.full((Lq, Lk), -1e9), k=1)
    heads = []
    for h in range(n_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(tape, q, lo, hi)
        kh = ad.slice_cols(tape, k, lo, hi)
        vh = ad.slice_cols(tape, v, lo, hi)
        scores = ad.scale(tape, ad.matmul_nt(tape, qh, kh), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(tape, scores, mask)
        attn = ad.row_softmax(tape, scores)
        heads.append(ad.matmul(tape, attn, vh))
    return ad.concat_cols(tape, heads)


def forward(params: ModelParams, features: np.ndarray, prefix_ids, train: bool = False):
    """Logits over the next token for every prefix position.

    Returns a logits matrix len(prefix) x |V|; in training mode returns a
    ForwardTrace carrying the tape and per-parameter Vars instead.
    """
    prefix_ids = list(prefix_ids)
    if not prefix_ids or prefix_ids[0] != BOS:
        raise BadPrefix("prefix must start with BOS")
    if len(prefix_ids) > params.config.max_len:
        raise BadPrefix("prefix longer than max_len")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] != params.config.feature_dim:
        raise BadPrefix("features must be T x feature_dim with T >= 1")

    tape = ad.Tape() if train else None
    if train:
        P = {k: ad.Var(v) for k, v in params.tensors.items()}
    else:
        P = params.tensors
    L = len(prefix_ids)

    x = ad.add(
        tape,
        ad.gather_rows(tape, P["tok_emb"], prefix_ids),
        ad.slice_rows(tape, P["pos_emb"], 0, L),
    )

    sa = _attention(
        tape,
        ad.matmul(tape, x, P["sa_q"]),
        ad.matmul(tape, x, P["sa_k"]),
        ad.matmul(tape, x, P["sa_v"]),
        params.config.n_heads,
        causal=True,
    )
    sa = ad.matmul(tape, sa, P["sa_o"])

    fp = ad.matmul(tape, feats, P["feat_proj"])
    ca = _attention(
        tape,
        ad.matmul(tape, x, P["ca_q"]),
        ad.matmul(tape, fp, P["ca_k"]),
        ad.matmul(tape, fp, P["ca_v"]),
        params.config.n_heads,
        causal=False,
    )
    ca = ad.matmul(tape, ca, P["ca_o"])

    x1 = ad.layer_norm(tape, ad.add(tape, x, ad.add(tape, sa, ca)), P["ln1_g"], P["ln1_b"])
    ff = ad.matmul(tape, ad.relu(tape, ad.matmul(tape, x1, P["ff_w1"])), P["ff_w2"])
    x2 = ad.layer_norm(tape, ad.add(tape, x1, ff), P["ln2_g"], P["ln2_b"])

    logits = ad.matmul_nt(tape, x2, P["tok_emb"])
    if train:
        return ForwardTrace(logits=logits, tape=tape, param_vars=P)
    return logits


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def xent_loss(logits: np.ndarray, target_ids, mask):
    """Masked length-normalized cross entropy plus its gradient w.r.t. logits."""
    logits = np.asarray(ad.val(logits), dtype=np.float64)
    targets = np.asarray(target_ids, dtype=np.intp)
    m = np.asarray(mask, dtype=np.float64)
    if not (logits.shape[0] == targets.shape[0] == m.shape[0]):
        raise ValueError("logits, targets, and mask lengths differ")
    n = m.sum()
    if n == 0:
        raise AllMasked("every position is masked out")
    lp = log_softmax(logits)
    rows = np.arange(len(targets))
    loss = -(m * lp[rows, targets]).sum() / n
    probs = np.exp(lp)
    grad = probs * (m / n)[:, None]
    grad[rows, targets] -= m / n
    return float(loss), grad


def backward(trace: ForwardTrace, loss_grad: np.ndarray) -> dict:
    """Reverse-mode gradients of the scalar loss for every parameter tensor."""
    trace.logits.grad += loss_grad
    trace.tape.run_backward()
    return {name: var.grad for name, var in trace.param_vars.items()}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ModelParams,
    grads: dict,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params.tensors[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass(frozen=True)
class TrainItem:
    """One teacher-forcing example: features plus an encoded caption."""

    features: np.ndarray  # T x feature_dim, float64
    ids: tuple  # [BOS, tokens.., EOS, PAD..]
    mask: tuple  # non-PAD indicator aligned with ids


def _accumulate(total: dict, grads: dict, weight: float) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] += weight * g
        else:
            total[name] = weight * g


def train_mle(
    params: ModelParams,
    dataset: list[TrainItem],
    epochs: int,
    batch_size: int,
    seed: int,
    lr: float = 1e-3,
):
    """Teacher-forced maximum-likelihood training; returns per-epoch mean loss."""
    if not dataset:
        raise EmptyDataset("empty MLE dataset")
    rng = np.random.default_rng(seed)
    state = AdamState()
    curve = []
    for _epoch in range(epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            total = {}
            for idx in batch:
                item = dataset[idx]
                n_real = int(sum(item.mask))
                prefix = list(item.ids[:n_real])  # drop trailing PADs, keep EOS target
                trace = forward(params, item.features, prefix[:-1], train=True)
                loss, glogits = xent_loss(
                    trace.logits.value, prefix[1:], item.mask[1:n_real]
                )
                grads = backward(trace, glogits)
                _accumulate(total, grads, 1.0 / len(batch))
                losses.append(loss)
            adam_step(params, total, state, lr=lr)
        curve.append(float(np.mean(losses)))
    return params, curve


# ---------------------------------------------------------------------------
# Incremental decoding cache

class DecoderCache:
    """Single-sequence stepwise decoding with cached attention state.

    Produces logits identical (to rounding) to a full `forward` recompute.
    """

    def __init__(self, params: ModelParams, features: np.ndarray):
        self.params = params
        cfg = params.config
        P = params.tensors
        feats = np.asarray(features, dtype=np.float64)
        fp = feats @ P["feat_proj"]
        self._ca_k = fp @ P["ca_k"]
        self._ca_v = fp @ P["ca_v"]
        self._keys = np.empty((0, cfg.d_model))
        self._vals = np.empty((0, cfg.d_model))
        self._t = 0

    def step(self, token_id: int) -> np.ndarray:
        """Feed one token, return the next-token logits row (|V|,)."""
        cfg = self.params.config
        P = self.params.tensors
        d, nh = cfg.d_model, cfg.n_heads
        dh = d // nh
        x = P["tok_emb"][token_id] + P["pos_emb"][self._t]
        self._t += 1
        q = x @ P["sa_q"]
        self._keys = np.vstack([self._keys, x @ P["sa_k"]])
        self._vals = np.vstack([self._vals, x @ P["sa_v"]])

        def mha(qv, kmat, vmat):
            out = np.empty(d)
            for h in range(nh):
                lo, hi = h * dh, (h + 1) * dh
                s = kmat[:, lo:hi] @ qv[lo:hi] / math.sqrt(dh)
                s -= s.max()
                w = np.exp(s)
                w /= w.sum()
                out[lo:hi] = w @ vmat[:, lo:hi]
            return out

        sa = mha(q, self._keys, self._vals) @ P["sa_o"]
        ca = mha(x @ P["ca_q"], self._ca_k, self._ca_v) @ P["ca_o"]

        def ln(v, g, b, eps=1e-6):
            mu = v.mean()
            return (v - mu) / math.sqrt(v.var() + eps) * g + b

        x1 = ln(x + sa + ca, P["ln1_g"], P["ln1_b"])
        x2 = ln(x1 + np.maximum(x1 @ P["ff_w1"], 0.0) @ P["ff_w2"], P["ln2_g"], P["ln2_b"])
        return x2 @ P["tok_emb"].T


# ---------------------------------------------------------------------------
# Checkpoint format: JSON header + raw float64 little-endian payload

def save_checkpoint(params: ModelParams, path: str, extra: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"config": asdict(params.config), "manifest": manifest}
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    with open(path, "rb") as f:
        raw = f.read(4)
        if len(raw) < 4:
            raise InvalidConfig("checkpoint header missing")
        (hlen,) = struct.unpack("<I", raw)
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    config = ModelConfig(**header["config"])
    tensors = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    extra = {k: v for k, v in header.items() if k not in ("config", "manifest")}
    return ModelParams(config=config, tensors=tensors), extra
