"""Caption metrics: BLEU-1..4, ROUGE-L, METEOR-lite, CIDEr-D, Frechet distance."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyCorpus, LengthMismatch, TooFewSamples
from .textproc import Caption, ngrams

MAX_N = 4


# ---------------------------------------------------------------------------
# BLEU

def bleu_corpus(hyps, refs, n: int) -> float:
    """Corpus BLEU-n with pooled clipped counts, no smoothing."""
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentences to score")
    if not 1 <= n <= MAX_N:
        raise ValueError("n must be in 1..4")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_p_sum = 0.0
    for k in range(1, n + 1):
        clipped = 0
        total = 0
        for h, r in zip(hyps, refs):
            hc = ngrams(h, k)[k]
            rc = ngrams(r, k)[k]
            total += sum(hc.values())
            clipped += sum(min(c, rc[g]) for g, c in hc.items())
        if clipped == 0 or total == 0:
            return 0.0
        log_p_sum += math.log(clipped / total)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    return bp * math.exp(log_p_sum / n)


# ---------------------------------------------------------------------------
# ROUGE-L

def _lcs_len(a, b) -> int:
    la, lb = len(a), len(b)
    prev = [0] * (lb + 1)
    for i in range(1, la + 1):
        cur = [0] * (lb + 1)
        ai = a[i - 1]
        for j in range(1, lb + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[lb]


def rouge_l(hyp, ref, beta: float = 1.2) -> float:
    L = _lcs_len(hyp, ref)
    p = L / len(hyp) if hyp else 0.0
    r = L / len(ref) if ref else 0.0
    if p == 0.0 and r == 0.0:
        return 0.0
    b2 = beta * beta
    return (1.0 + b2) * p * r / (r + b2 * p)


def rouge_l_corpus(hyps, refs, beta: float = 1.2) -> float:
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentences to score")
    return sum(rouge_l(h, r, beta) for h, r in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# METEOR-lite (exact-match stage only)

def _min_chunks(hyp, ref, m: int) -> int:
    """Fewest contiguous common blocks that realize m matched unigrams.

    Exhaustive search over disjoint common substrings, longest-first with
    iterative deepening; fine for caption-length inputs.
    """
    if m == 0:
        return 0
    spans = []
    for i in range(len(hyp)):
        for j in range(len(ref)):
            k = 0
            while i + k < len(hyp) and j + k < len(ref) and hyp[i + k] == ref[j + k]:
                k += 1
            if k > 0:
                spans.append((k, i, j))
    spans.sort(reverse=True)

    def search(remaining, used_h, used_r, budget):
        if remaining == 0:
            return True
        if budget == 0:
            return False
        for k, i, j in spans:
            if k > remaining:
                continue
            hs = set(range(i, i + k))
            rs = set(range(j, j + k))
            if hs & used_h or rs & used_r:
                continue
            if search(remaining - k, used_h | hs, used_r | rs, budget - 1):
                return True
        return False

    for chunks in range(1, m + 1):
        if search(m, set(), set(), chunks):
            return chunks
    return m


def meteor_lite(hyp, ref, alpha: float = 0.9, gamma: float = 0.5, theta: float = 3.0) -> float:
    hc, rc = Counter(hyp), Counter(ref)
    m = sum(min(c, rc[t]) for t, c in hc.items())
    if m == 0:
        return 0.0
    p = m / len(hyp)
    r = m / len(ref)
    f_mean = p * r / (alpha * p + (1.0 - alpha) * r)
    chunks = _min_chunks(list(hyp), list(ref), m)
    penalty = gamma * (chunks / m) ** theta
    return f_mean * (1.0 - penalty)


def meteor_corpus(hyps, refs) -> float:
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentences to score")
    return sum(meteor_lite(h, r) for h, r in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# CIDEr-D

@dataclass(frozen=True)
class IdfTable:
    doc_count: int
    df: dict  # n -> {gram: document frequency}

    def lookup(self, n: int, gram) -> int:
        return self.df.get(n, {}).get(gram, 0)


def build_idf(refs) -> IdfTable:
    if not refs:
        raise EmptyCorpus("cannot build an IDF table from zero references")
    df = {n: Counter() for n in range(1, MAX_N + 1)}
    for r in refs:
        grams = ngrams(r, MAX_N)
        for n in range(1, MAX_N + 1):
            df[n].update(set(grams[n]))
    return IdfTable(doc_count=len(refs), df={n: dict(c) for n, c in df.items()})


def _tfidf_vec(counts: Counter, n: int, idf: IdfTable) -> dict:
    vec = {}
    for gram, c in counts.items():
        d = idf.lookup(n, gram)
        if d > 0:
            w = c * math.log(idf.doc_count / d)
            if w != 0.0:
                vec[gram] = w
    return vec


def cider_d(hyp, ref, idf: IdfTable, sigma: float = 6.0) -> float:
    hyp_grams = ngrams(hyp, MAX_N)
    ref_grams = ngrams(ref, MAX_N)
    sim_sum = 0.0
    for n in range(1, MAX_N + 1):
        clipped = Counter(
            {g: min(c, ref_grams[n][g]) for g, c in hyp_grams[n].items()}
        )
        hv = _tfidf_vec(clipped, n, idf)
        rv = _tfidf_vec(ref_grams[n], n, idf)
        hn = math.sqrt(sum(w * w for w in hv.values()))
        rn = math.sqrt(sum(w * w for w in rv.values()))
        if hn == 0.0 or rn == 0.0:
            continue
        dot = sum(w * rv.get(g, 0.0) for g, w in hv.items())
        sim_sum += max(0.0, dot / (hn * rn))
    delta = len(hyp) - len(ref)
    penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
    return 10.0 * penalty * sim_sum / MAX_N


def cider_corpus(hyps, refs, idf: IdfTable, sigma: float = 6.0) -> float:
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentences to score")
    return sum(cider_d(h, r, idf, sigma) for h, r in zip(hyps, refs)) / len(hyps)


# ---------------------------------------------------------------------------
# Frechet distance

@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch("features must be an N x D matrix")
    if x.shape[0] < 2:
        raise TooFewSamples("need at least 2 feature rows")
    mean = x.mean(axis=0)
    c = np.cov(x, rowvar=False, ddof=1)
    c = np.atleast_2d(c)
    c = (c + c.T) / 2.0
    return GaussianStats(mean=mean, cov=c, n=x.shape[0])


def jacobi_eigh(a: np.ndarray, tol: float = 1e-13, max_sweeps: int = 100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns (eigenvalues, eigenvectors) with columns of V as eigenvectors,
    A = V diag(w) V^T.
    """
    a = np.array(a, dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    scale = max(np.abs(a).max(), 1.0)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                if abs(a[p, q]) <= tol * scale * 1e-3:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = a[:, p].copy()
                rot_q = a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p = a[p, :].copy()
                rot_q = a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def _psd_sqrt(c: np.ndarray, clamp: float = 1e-12) -> np.ndarray:
    w, v = jacobi_eigh(c)
    w = np.where(w < clamp, 0.0, w)
    s = (v * np.sqrt(w)) @ v.T
    return (s + s.T) / 2.0


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(
            f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}"
        )
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.cov)
    inner = sa @ b.cov @ sa
    inner = (inner + inner.T) / 2.0
    w, _ = jacobi_eigh(inner)
    w = np.where(w < 1e-12, 0.0, w)
    tr_sqrt = float(np.sqrt(w).sum())
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(0.0, fd)


# ---------------------------------------------------------------------------
# Combined report

@dataclass
class ScoreReport:
    b1: float
    b2: float
    b3: float
    b4: float
    rouge_l: float
    meteor: float
    cider_d: float
    counts: int

    FIELDS = ("b1", "b2", "b3", "b4", "rouge_l", "meteor", "cider_d", "counts")

    def to_json(self) -> str:
        return json.dumps({f: getattr(self, f) for f in self.FIELDS})

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(**{f: d[f] for f in cls.FIELDS})


def score_all(hyps: list[Caption], refs: list[Caption], idf: IdfTable) -> ScoreReport:
    if len(hyps) != len(refs):
        raise LengthMismatch(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise EmptyCorpus("no sentences to score")
    for h, r in zip(hyps, refs):
        if h.role != r.role:
            raise LengthMismatch(f"role mismatch: {h.role} vs {r.role}")
    ht = [h.tokens for h in hyps]
    rt = [r.tokens for r in refs]
    return ScoreReport(
        b1=bleu_corpus(ht, rt, 1),
        b2=bleu_corpus(ht, rt, 2),
        b3=bleu_corpus(ht, rt, 3),
        b4=bleu_corpus(ht, rt, 4),
        rouge_l=rouge_l_corpus(ht, rt),
        meteor=meteor_corpus(ht, rt),
        cider_d=cider_corpus(ht, rt, idf),
        counts=len(hyps),
    )
