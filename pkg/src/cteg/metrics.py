"""Generation-quality metrics, the shuffle baseline, and bootstrap errors.

All functions are pure given their inputs and an explicit RngStream.
Sequences are (T, 53) float arrays; a "sampler" is a zero-argument callable
returning one freshly generated sequence.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

LOG2 = math.log(2.0)
_P_FLOOR = 1e-300  # keeps log-space accumulation finite in the far tails


@dataclass
class MetricValue:
    name: str
    value: float
    stderr: float = None
    n: int = 0
    params: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    values: list = field(default_factory=list)

    def add(self, name, value, stderr=None, n=0, **params):
        self.values.append(MetricValue(name, float(value), stderr, n, params))

    def as_dict(self):
        return {v.name: v for v in self.values}


def _nonempty(seq):
    """Metrics treat an empty decode as the single zero 'standard' face."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.shape[0] == 0:
        return np.zeros((1, 53))
    return seq


def seq_distance(a, b):
    """Mean per-frame Euclidean distance after truncating to equal length."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise ContractError("seq_distance: sequences must be nonempty")
    L = min(a.shape[0], b.shape[0])
    return float(np.linalg.norm(a[:L] - b[:L], axis=1).mean())


def diversity(sampler, n_d, rng):
    """Mean pair distance of unconditioned generations.

    sampler(rng) must return one sequence generated without text
    conditioning.  Draws n_d sequences as n_d/2 consecutive pairs and
    divides the summed pair distances by n_d (the pair-sum convention,
    hence half the mean pair distance).
    """
    if n_d % 2 != 0:
        raise ContractError(f"diversity: n_d must be even, got {n_d}")
    total = 0.0
    for _ in range(n_d // 2):
        a = _nonempty(sampler(rng))
        b = _nonempty(sampler(rng))
        total += seq_distance(a, b)
    return total / n_d


def mmodality(decode_twice, texts, n_m, rng):
    """Mean distance between two generations for the same text.

    decode_twice(text, rng_a, rng_b) -> (seq, seq); texts are drawn with
    replacement n_m times and every draw contributes one pair distance.
    """
    if not texts:
        raise ContractError("mmodality: texts must be nonempty")
    total = 0.0
    for i in range(n_m):
        text = texts[rng.integer(len(texts))]
        a, b = decode_twice(text, rng.split(2 * i + 100), rng.split(2 * i + 101))
        total += seq_distance(_nonempty(a), _nonempty(b))
    return total / n_m


def variation(seqs):
    """Mean over sequences of mean per-frame variance across components."""
    vals = []
    for s in seqs:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[0] < 1:
            raise ContractError("variation: empty sequence")
        vals.append(s.var(axis=1).mean())  # population variance per frame
    return float(np.mean(vals))


def fgd(seqs):
    """Mean Euclidean distance between adjacent frames.

    Each sequence is normalized by its own T-1 step count, then sequences
    are averaged; sequences shorter than 2 frames are skipped with a warning.
    """
    vals = []
    for s in seqs:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[0] < 2:
            warnings.warn("fgd: sequence shorter than 2 frames skipped")
            continue
        vals.append(np.linalg.norm(np.diff(s, axis=0), axis=1).mean())
    if not vals:
        raise ContractError("fgd: no sequence long enough")
    return float(np.mean(vals))


def dot(seqs):
    """Mean pairwise sequence distance, 2/(N(N-1)) * sum over i<j."""
    seqs = list(seqs)
    n = len(seqs)
    if n < 2:
        raise ContractError(f"dot: need at least 2 sequences, got {n}")
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += seq_distance(seqs[i], seqs[j])
    return 2.0 * total / (n * (n - 1))


def normal_cdf(x):
    """Standard normal CDF via erf."""
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def sequence_entropy_bits(frames, mus, delta, sigma):
    """Per-frame average of -log2 P(frame in the +-delta box around itself).

    Interval probability per dimension under N(mu_k, sigma^2), accumulated
    in log space with a floor so far-tail frames stay finite.
    """
    frames = np.asarray(frames, dtype=np.float64)
    mus = np.asarray(mus, dtype=np.float64)
    if frames.shape != mus.shape:
        raise ContractError(f"cppl: frames {frames.shape} vs means {mus.shape}")
    T = frames.shape[0]
    log2_total = 0.0
    for t in range(T):
        for k in range(frames.shape[1]):
            x, mu = frames[t, k], mus[t, k]
            p = normal_cdf((x + delta - mu) / sigma) - normal_cdf((x - delta - mu) / sigma)
            log2_total += math.log(max(p, _P_FLOOR)) / LOG2
    return -log2_total / T


def cppl(frames_and_means, delta=0.8, sigma=0.2):
    """Continuous perplexity: 2 ** mean-over-sequences entropy rate.

    frames_and_means: iterable of (frames, predictive_means) pairs; the
    means must come from the teacher-forced prior-mean context.  Returns
    (value, mean_bits, per_sequence_bits); the value saturates to inf past
    1000 bits per frame.
    """
    if delta <= 0 or sigma <= 0:
        raise ContractError("cppl: delta and sigma must be positive")
    entropies = [sequence_entropy_bits(frames, mus, delta, sigma)
                 for frames, mus in frames_and_means]
    if not entropies:
        raise ContractError("cppl: no sequences given")
    mean_h = float(np.mean(entropies))
    value = math.inf if mean_h > 1000.0 else 2.0 ** mean_h
    return value, mean_h, entropies


def shuffle_frames(seqs, rng):
    """Independently permute each sequence's frames along time."""
    out = []
    for s in seqs:
        s = np.asarray(s, dtype=np.float64)
        perm = rng.permutation(s.shape[0])
        out.append(s[perm])
    return out


def bootstrap_se(metric_fn, samples, iterations=1000, rng=None):
    """Standard error by resampling the sample units with replacement."""
    samples = list(samples)
    if not samples:
        raise ContractError("bootstrap_se: samples must be nonempty")
    n = len(samples)
    values = np.empty(iterations)
    for it in range(iterations):
        resampled = [samples[rng.integer(n)] for _ in range(n)]
        values[it] = metric_fn(resampled)
    return float(values.std(ddof=1))
