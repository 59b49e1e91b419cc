"""Self-critical sequence training: greedy baseline, sampled rollouts,
CIDEr-difference rewards, masked length-normalized policy-gradient loss."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import AllMasked, EmptyDataset, InvalidTemperature
from .metrics import IdfTable, cider_d
from .seqmodel import (
    AdamState,
    DecoderCache,
    ModelParams,
    adam_step,
    backward,
    forward,
    log_softmax,
)
from .textproc import BOS, EOS, Caption, Vocab, decode_ids


@dataclass(frozen=True)
class DecodeOutput:
    ids: tuple  # BOS-initiated; EOS-terminated or truncated at max_len
    logp: tuple  # per-step log-probability of the emitted token
    mask: tuple  # 1 up to and including EOS, 0 after


@dataclass(frozen=True)
class RewardVector:
    r: tuple
    baseline_score: float
    sample_score: float


@dataclass
class ScstBatchStats:
    mean_reward: float
    mean_baseline: float
    mean_sample: float
    loss: float
    sequences: int

    def to_dict(self) -> dict:
        return {
            "mean_reward": self.mean_reward,
            "mean_baseline": self.mean_baseline,
            "mean_sample": self.mean_sample,
            "loss": self.loss,
            "sequences": self.sequences,
        }


def decode_greedy(params: ModelParams, features: np.ndarray, max_len: int | None = None) -> DecodeOutput:
    """Argmax decoding; ties resolve to the lowest token id."""
    max_len = max_len or params.config.max_len
    cache = DecoderCache(params, features)
    ids = [BOS]
    logp = [0.0]
    while len(ids) < max_len:
        row = cache.step(ids[-1])
        lp = log_softmax(row)
        tok = int(np.argmax(row))
        ids.append(tok)
        logp.append(float(lp[tok]))
        if tok == EOS:
            break
    return DecodeOutput(ids=tuple(ids), logp=tuple(logp), mask=(1,) * len(ids))


def decode_sample(
    params: ModelParams,
    features: np.ndarray,
    max_len: int | None = None,
    seed: int = 0,
    temperature: float = 1.0,
) -> DecodeOutput:
    """Multinomial decoding at the given temperature; logp is recorded under
    the temperature-1 distribution of the drawn token."""
    if temperature <= 0.0:
        raise InvalidTemperature("temperature must be > 0")
    max_len = max_len or params.config.max_len
    rng = np.random.default_rng(seed)
    cache = DecoderCache(params, features)
    ids = [BOS]
    logp = [0.0]
    while len(ids) < max_len:
        row = cache.step(ids[-1])
        lp1 = log_softmax(row)
        probs = np.exp(log_softmax(row / temperature))
        tok = int(rng.choice(len(probs), p=probs / probs.sum()))
        ids.append(tok)
        logp.append(float(lp1[tok]))
        if tok == EOS:
            break
    return DecodeOutput(ids=tuple(ids), logp=tuple(logp), mask=(1,) * len(ids))


def compute_rewards(
    sample: DecodeOutput,
    greedy: DecodeOutput,
    ref: Caption,
    idf: IdfTable,
    vocab: Vocab,
) -> RewardVector:
    sample_score = cider_d(decode_ids(vocab, sample.ids), ref.tokens, idf)
    baseline_score = cider_d(decode_ids(vocab, greedy.ids), ref.tokens, idf)
    diff = sample_score - baseline_score
    r = tuple(diff * m for m in sample.mask)
    return RewardVector(r=r, baseline_score=baseline_score, sample_score=sample_score)


def scst_loss(logp, r, mask):
    """L = -(1/N) sum_i r_i * logp_i * m_i, N = sum m_i; returns (L, dL/dlogp)."""
    logp = np.asarray(logp, dtype=np.float64)
    rv = np.asarray(r, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if not (logp.shape == rv.shape == m.shape):
        raise ValueError("logp, r, and mask lengths differ")
    n = m.sum()
    if n == 0:
        raise AllMasked("every position is masked out")
    loss = -(rv * logp * m).sum() / n
    grad = -(rv * m) / n
    return float(loss), grad


def derive_seed(seed: int, sample_id: str, epoch: int) -> int:
    h = hashlib.blake2b(f"{seed}:{sample_id}:{epoch}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class ScstItem:
    sample_id: str
    features: np.ndarray  # T x feature_dim
    ref: Caption


def scst_train(
    params: ModelParams,
    dataset: list[ScstItem],
    idf: IdfTable,
    epochs: int,
    batch_size: int,
    seed: int,
    vocab: Vocab,
    lr: float = 1e-4,
    temperature: float = 1.0,
):
    """One sampled rollout against a greedy baseline per sample per epoch.

    The gradient flows only through the sampled sequence's log-probabilities;
    the baseline is a constant. Returns (params, per-epoch ScstBatchStats)."""
    if not dataset:
        raise EmptyDataset("empty SCST dataset")
    state = AdamState()
    history = []
    order_rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = order_rng.permutation(len(dataset))
        baselines, samples_s, losses = [], [], []
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            total = {}
            for idx in batch:
                item = dataset[idx]
                greedy = decode_greedy(params, item.features)
                roll = decode_sample(
                    params,
                    item.features,
                    seed=derive_seed(seed, item.sample_id, epoch),
                    temperature=temperature,
                )
                rewards = compute_rewards(roll, greedy, item.ref, idf, vocab)
                baselines.append(rewards.baseline_score)
                samples_s.append(rewards.sample_score)

                # Re-run the sampled prefix in training mode; positions after
                # BOS predict roll.ids[1:].
                trace = forward(params, item.features, roll.ids[:-1], train=True)
                lp_rows = log_softmax(trace.logits.value)
                targets = np.asarray(roll.ids[1:], dtype=np.intp)
                rows = np.arange(len(targets))
                logp = lp_rows[rows, targets]
                loss, dlogp = scst_loss(logp, rewards.r[1:], roll.mask[1:])
                losses.append(loss)

                probs = np.exp(lp_rows)
                glogits = dlogp[:, None] * (-probs)
                glogits[rows, targets] += dlogp
                grads = backward(trace, glogits)
                for name, g in grads.items():
                    if name in total:
                        total[name] += g / len(batch)
                    else:
                        total[name] = g / len(batch)
            adam_step(params, total, state, lr=lr)
        mean_b = float(np.mean(baselines))
        mean_s = float(np.mean(samples_s))
        history.append(
            ScstBatchStats(
                mean_reward=mean_s - mean_b,
                mean_baseline=mean_b,
                mean_sample=mean_s,
                loss=float(np.mean(losses)),
                sequences=len(order),
            )
        )
    return params, history
