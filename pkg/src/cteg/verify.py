"""Built-in verification suite.

Four families of checks, each printable as a pass/fail row:

  * finite-difference gradient checks of the full training loss, grouped by
    parameter family, on a tiny model;
  * closed-form KL against a Monte Carlo estimate, plus exact identities;
  * every metric against an independent brute-force reference (naive loops,
    written here, sharing only the RngStream protocol with the real code);
  * binary format round-trips (sequence files, manifests, checkpoints).

``sabotage`` injects a deliberate internal fault (e.g. flipping the KL sign)
to prove the suite actually detects breakage.
"""

import math
import os
import tempfile
import time

import numpy as np

from . import metrics as M
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, serialize
from .config import ModelConfig
from .cvad import GaussianDiag, kl_term
from .dataio import (DatasetManifest, DatasetRecord, load_manifest,
                     read_sequence, write_manifest, write_sequence)
from .model import CtegModel
from .rng import RngStream
from .runtime import prepare_targets
from .tensor import Tensor, grad_check

SABOTAGE_MODES = ("kl", "grad", "metric")

PARAM_GROUPS = {
    "ewa": ("ewa.",),
    "embedder": ("embed.",),
    "trunk": ("layers.0.cross_attn.", "layers.0.self_attn.",
              "layers.0.norm_cross.", "layers.0.norm_self.", "layers.0.sentinel"),
    "gaussian-heads": ("layers.0.post_mu.", "layers.0.post_logvar.",
                       "layers.0.prior_mu.", "layers.0.prior_logvar."),
    "lta": ("layers.0.lta_attn.", "layers.0.norm_lta."),
    "generation": ("layers.0.gen_attn.", "layers.0.norm_gen_attn.",
                   "layers.0.gen_ffn.", "layers.0.norm_gen_ffn."),
    "target-guidance": ("layers.0.guide_ffn.", "f_gamma."),
    "output-projection": ("out_proj.",),
}


class CheckResult:
    def __init__(self, name, ok, detail):
        self.name = name
        self.ok = ok
        self.detail = detail


def _tiny_setup(seed=5):
    cfg = ModelConfig(d_model=16, heads=2, d_ff=32, d_attn=4, msl=16,
                      warmup=10, seed=seed, batch_size=1)
    rng = RngStream(seed)
    model = CtegModel(cfg, rng)
    frames = rng.normal((3, 53))
    inputs, targets = prepare_targets(frames, np.zeros(53), cfg.msl)
    text = rng.normal((2, cfg.d_model))
    return model, inputs, targets, text


def check_gradients(sabotage=None, entries_per_tensor=6, tol=1e-4):
    """Finite-difference check of d(total loss)/d(theta) per parameter group."""
    model, inputs, targets, text = _tiny_setup()
    params = model.parameters()

    def objective():
        out = model.teacher_forced_forward(inputs, targets, text, RngStream(123))
        return out["l_rec"] + out["l_kl"] + out["l_g"]

    eps = 1e-12 if sabotage == "grad" else 1e-5
    results = []
    for group, prefixes in PARAM_GROUPS.items():
        group_params = [p for name, p in params.items()
                        if any(name.startswith(pre) or name == pre.rstrip(".")
                               for pre in prefixes)]
        if not group_params:
            results.append(CheckResult(f"grad/{group}", False, "no parameters matched"))
            continue
        err = grad_check(objective, group_params, eps=eps,
                         max_entries_per_param=entries_per_tensor)
        results.append(CheckResult(
            f"grad/{group}", err < tol, f"max rel err {err:.3e} (tol {tol:g})"))
    return results


def check_kl(sabotage=None, n_pairs=20, n_samples=100_000, tol=0.02):
    """Closed-form KL identities plus Monte Carlo agreement."""
    results = []

    # exact identity on q == q
    rng = RngStream(11)
    mu = rng.normal((4, 3))
    lv = rng.normal((4, 3)) * 0.3
    q = GaussianDiag(Tensor(mu), Tensor(lv))
    self_kl = kl_term(q, q).item()
    results.append(CheckResult("kl/self-zero", self_kl == 0.0, f"kl(q,q) = {self_kl!r}"))

    # hand case: mu_q=1, sigma_q=1, mu_p=0, sigma_p=1 -> 0.5 per dim
    for dims in (1, 5):
        q1 = GaussianDiag(Tensor(np.ones((1, dims))), Tensor(np.zeros((1, dims))))
        p1 = GaussianDiag(Tensor(np.zeros((1, dims))), Tensor(np.zeros((1, dims))))
        val = kl_term(q1, p1).item()
        ok = abs(val - 0.5 * dims) < 1e-12
        results.append(CheckResult(f"kl/hand-{dims}d", ok, f"{val} vs {0.5 * dims}"))

    # Monte Carlo agreement on randomized pairs.  Means are redrawn until
    # they are at least sqrt(2) apart (a closer pair has too small a KL for
    # a relative comparison to be statistically meaningful at 1e5 samples);
    # the sample is first-moment matched, a standard variance reduction.
    worst = 0.0
    for i in range(n_pairs):
        pair_rng = RngStream(1000 + i)
        d = 2 + pair_rng.integer(4)
        while True:
            mu_q = 2.0 * (2.0 * pair_rng.uniform((d,)) - 1.0)
            mu_p = 2.0 * (2.0 * pair_rng.uniform((d,)) - 1.0)
            if np.sum((mu_q - mu_p) ** 2) >= 2.0:
                break
        sig_q = 0.5 + 1.5 * pair_rng.uniform((d,))
        sig_p = 0.5 + 1.5 * pair_rng.uniform((d,))
        q = GaussianDiag(Tensor(mu_q[None]), Tensor(2.0 * np.log(sig_q)[None]))
        p = GaussianDiag(Tensor(mu_p[None]), Tensor(2.0 * np.log(sig_p)[None]))
        closed = kl_term(q, p).item()
        if sabotage == "kl":
            closed = -closed
        eps = pair_rng.normal((n_samples, d))
        z = mu_q + sig_q * (eps - eps.mean(axis=0))
        log_q = -0.5 * (((z - mu_q) / sig_q) ** 2 + np.log(2 * np.pi)
                        + 2 * np.log(sig_q)).sum(axis=1)
        log_p = -0.5 * (((z - mu_p) / sig_p) ** 2 + np.log(2 * np.pi)
                        + 2 * np.log(sig_p)).sum(axis=1)
        mc = float((log_q - log_p).mean())
        rel = abs(closed - mc) / max(abs(mc), 1e-9)
        worst = max(worst, rel)
    results.append(CheckResult(
        "kl/monte-carlo", worst < tol,
        f"worst rel diff {worst:.4f} over {n_pairs} pairs x {n_samples} samples"))
    return results


# -- independent brute-force metric references (naive loops, no shared code) --

def ref_seq_distance(a, b):
    L = min(len(a), len(b))
    total = 0.0
    for j in range(L):
        s = 0.0
        for k in range(len(a[j])):
            diff = a[j][k] - b[j][k]
            s += diff * diff
        total += math.sqrt(s)
    return total / L


def ref_variation(seqs):
    acc = 0.0
    for s in seqs:
        per_seq = 0.0
        for frame in s:
            n = len(frame)
            mean = sum(frame) / n
            per_seq += sum((v - mean) ** 2 for v in frame) / n
        acc += per_seq / len(s)
    return acc / len(seqs)


def ref_fgd(seqs):
    acc = 0.0
    kept = 0
    for s in seqs:
        if len(s) < 2:
            continue
        per_seq = 0.0
        for j in range(len(s) - 1):
            d2 = 0.0
            for k in range(len(s[j])):
                diff = s[j + 1][k] - s[j][k]
                d2 += diff * diff
            per_seq += math.sqrt(d2)
        acc += per_seq / (len(s) - 1)
        kept += 1
    return acc / kept


def ref_dot(seqs):
    n = len(seqs)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            total += ref_seq_distance(seqs[i], seqs[j])
    return 2.0 * total / (n * (n - 1))


def ref_diversity(sampler, n_d, rng):
    total = 0.0
    for _ in range(n_d // 2):
        total += ref_seq_distance(sampler(rng), sampler(rng))
    return total / n_d


def ref_shuffle(seqs, rng):
    out = []
    for s in seqs:
        perm = rng.permutation(len(s))
        out.append([s[p] for p in perm])
    return out


def ref_bootstrap_se(metric_fn, samples, iterations, rng):
    vals = []
    for _ in range(iterations):
        vals.append(metric_fn([samples[rng.integer(len(samples))]
                               for _ in range(len(samples))]))
    mean = sum(vals) / len(vals)
    var = sum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return math.sqrt(var)


def _normal_pdf(u, mu, sigma):
    return math.exp(-0.5 * ((u - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def _simpson_interval(lo, hi, mu, sigma, n=400):
    h = (hi - lo) / n
    acc = _normal_pdf(lo, mu, sigma) + _normal_pdf(hi, mu, sigma)
    for i in range(1, n):
        acc += _normal_pdf(lo + i * h, mu, sigma) * (4 if i % 2 else 2)
    return acc * h / 3.0


def ref_cppl(frames_and_means, delta, sigma):
    """Interval probabilities by Simpson quadrature instead of the CDF."""
    entropies = []
    for frames, mus in frames_and_means:
        log2_total = 0.0
        for t in range(len(frames)):
            for k in range(len(frames[t])):
                p = _simpson_interval(frames[t][k] - delta, frames[t][k] + delta,
                                      mus[t][k], sigma)
                log2_total += math.log(max(p, 1e-300)) / math.log(2.0)
        entropies.append(-log2_total / len(frames))
    return 2.0 ** (sum(entropies) / len(entropies))


def check_metric_oracles(sabotage=None, n_seqs=10, tol=1e-9):
    """All metrics vs the brute-force references on random small sequences."""
    rng = RngStream(42)
    seqs = []
    for _ in range(n_seqs):
        T = 2 + rng.integer(7)  # T in [2, 8]
        seqs.append(rng.normal((T, 53)))

    results = []

    def close(name, got, want, scale=1.0):
        err = abs(got - want) / scale
        results.append(CheckResult(f"oracle/{name}", err < tol,
                                   f"|{got:.12g} - {want:.12g}| = {err:.2e}"))

    close("seq_distance", M.seq_distance(seqs[0], seqs[1]),
          ref_seq_distance(seqs[0].tolist(), seqs[1].tolist()))
    close("variation", M.variation(seqs), ref_variation([s.tolist() for s in seqs]))
    close("fgd", M.fgd(seqs), ref_fgd([s.tolist() for s in seqs]))
    close("dot", M.dot(seqs), ref_dot([s.tolist() for s in seqs]))

    def sampler(r):
        return seqs[r.integer(len(seqs))]

    div = M.diversity(sampler, 10, RngStream(7))
    if sabotage == "metric":
        div *= 1.01
    ref_div = ref_diversity(lambda r: sampler(r).tolist(), 10, RngStream(7))
    close("diversity", div, ref_div)

    texts = ["a", "b", "c"]

    def decode_twice(text, ra, rb):
        return sampler(ra), sampler(rb)

    mm = M.mmodality(decode_twice, texts, 6, RngStream(9))
    # replicate the exact draw pattern with the reference distance
    r = RngStream(9)
    want = 0.0
    for i in range(6):
        r.integer(len(texts))
        a = sampler(r.split(2 * i + 100))
        b = sampler(r.split(2 * i + 101))
        want += ref_seq_distance(a.tolist(), b.tolist())
    close("mmodality", mm, want / 6)

    shuffled = M.shuffle_frames(seqs, RngStream(13))
    ref_shuffled = ref_shuffle([s.tolist() for s in seqs], RngStream(13))
    shuffle_ok = all(np.allclose(a, np.asarray(b)) for a, b in zip(shuffled, ref_shuffled))
    sorted_ok = all(
        np.allclose(np.sort(np.asarray(a), axis=0), np.sort(s, axis=0))
        for a, s in zip(shuffled, seqs))
    results.append(CheckResult("oracle/shuffle", shuffle_ok and sorted_ok,
                               "permutation matches reference and preserves frames"))

    se = M.bootstrap_se(M.variation, seqs, iterations=200, rng=RngStream(21))
    ref_se = ref_bootstrap_se(lambda s: ref_variation([x.tolist() for x in s]),
                              list(seqs), 200, RngStream(21))
    close("bootstrap_se", se, ref_se)

    pairs = [(s, s + 0.05 * RngStream(100 + i).normal(s.shape))
             for i, s in enumerate(seqs[:4])]
    got, _, _ = M.cppl(pairs, delta=0.8, sigma=0.2)
    want = ref_cppl([(f.tolist(), m.tolist()) for f, m in pairs], 0.8, 0.2)
    close("cppl", got, want, scale=max(1.0, abs(want)))

    anchor, _, _ = M.cppl([(np.zeros((1, 1)), np.zeros((1, 1)))], delta=0.8, sigma=0.2)
    results.append(CheckResult(
        "oracle/cppl-anchor", abs(anchor - 1.0000633) < 1e-6,
        f"perfect 1-dim prediction -> {anchor:.9f} (expect 1.0000633)"))
    return results


def check_formats():
    """Round-trips for sequence files, manifests, and checkpoints."""
    results = []
    rng = RngStream(3)
    with tempfile.TemporaryDirectory() as tmp:
        seq = rng.normal((10, 53))
        path = os.path.join(tmp, "a.exp")
        write_sequence(seq, path)
        back = read_sequence(path)
        ok = np.array_equal(back, seq.astype(np.float32).astype(np.float64))
        results.append(CheckResult("format/sequence", ok, "write/read round-trip"))

        recs = [DatasetRecord("r1", "train", "hello there", "a.exp"),
                DatasetRecord("r2", "test", "bye now", "a.exp")]
        mpath = os.path.join(tmp, "manifest.tsv")
        write_manifest(DatasetManifest(tmp, recs), mpath)
        loaded = load_manifest(mpath)
        ok = [(r.id, r.split, r.text, r.expr_path) for r in loaded.records] == \
             [(r.id, r.split, r.text, r.expr_path) for r in recs]
        results.append(CheckResult("format/manifest", ok, "write/load round-trip"))

        model, _, _, _ = _tiny_setup()
        ckpt = Checkpoint.from_model(model, np.zeros(53), rng=rng)
        cpath = os.path.join(tmp, "m.ckpt")
        save_checkpoint(ckpt, cpath)
        reloaded = load_checkpoint(cpath)
        ok = serialize(reloaded) == serialize(ckpt)
        results.append(CheckResult("format/checkpoint", ok, "save/load/save bitwise"))
    return results


def run_all(sabotage=None):
    if sabotage is not None and sabotage not in SABOTAGE_MODES:
        raise ValueError(f"unknown sabotage mode {sabotage!r}; known: {SABOTAGE_MODES}")
    t0 = time.time()
    results = []
    results += check_gradients(sabotage)
    results += check_kl(sabotage)
    results += check_metric_oracles(sabotage)
    results += check_formats()
    elapsed = time.time() - t0
    return results, elapsed


def format_results(results, elapsed):
    lines = []
    for r in results:
        lines.append(f"[{'PASS' if r.ok else 'FAIL'}] {r.name:<24} {r.detail}")
    n_bad = sum(1 for r in results if not r.ok)
    lines.append(f"{len(results) - n_bad}/{len(results)} checks passed "
                 f"in {elapsed:.1f}s")
    return "\n".join(lines), n_bad == 0
