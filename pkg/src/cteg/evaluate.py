"""Evaluation driver: decode from a checkpoint and score the metric suite."""

import numpy as np

from . import metrics as M
from .config import EXPR_DIM
from .rng import RngStream
from .runtime import decode, predictive_means_for
from .tensor import ContractError

GENERATED_METRICS = ("diversity", "mmodality", "variation", "fgd", "dot",
                     "cppl", "cppl-shuffled")
DEFAULT_METRICS = GENERATED_METRICS


def _metric_units(name, ctx):
    """(samples, metric_fn) pairs used for bootstrap resampling."""
    if name == "variation":
        return ctx["gen_seqs"], M.variation
    if name == "fgd":
        return ctx["gen_seqs"], M.fgd
    if name == "dot":
        return ctx["gen_seqs"], M.dot
    if name == "diversity":
        return ctx["div_pairs"], lambda d: float(np.mean(d)) / 2.0
    if name == "mmodality":
        return ctx["mm_pairs"], lambda d: float(np.mean(d))
    if name in ("cppl", "cppl-shuffled"):
        key = "cppl_bits" if name == "cppl" else "cppl_shuffled_bits"
        return ctx[key], lambda h: 2.0 ** float(np.mean(h))
    raise ContractError(f"no bootstrap units for metric {name!r}")


def run_evaluation(model, avg, manifest, encoder, requested, rng_seed=0,
                   split="test", n_diversity=32, n_mmodality=16,
                   gen_per_text=1, msl=None, threshold=None,
                   bootstrap_iterations=0, delta=0.8, sigma=0.2):
    """Compute the requested metrics plus the ground-truth reference row."""
    unknown = [m for m in requested if m not in GENERATED_METRICS]
    if unknown:
        raise ContractError(
            f"unknown metrics {unknown}; valid: {', '.join(GENERATED_METRICS)}")
    records = manifest.by_split(split)
    if not records:
        raise ContractError(f"evaluate: no records in split {split!r}")
    gt_seqs = [manifest.load_frames(r) for r in records]
    texts = [r.text for r in records]

    report = M.MetricReport()
    ctx = {}
    root = RngStream(rng_seed)

    needs_generation = any(m in requested for m in ("variation", "fgd", "dot"))
    if needs_generation:
        gen_rng = root.split(1)
        gen_seqs = []
        for i, r in enumerate(records):
            emb = encoder.encode(r.text, r.id)
            for _ in range(gen_per_text):
                seq, _ = decode(model, avg, emb, gen_rng.split(len(gen_seqs)),
                                msl=msl, threshold=threshold)
                gen_seqs.append(seq if seq.shape[0] else np.zeros((1, EXPR_DIM)))
        ctx["gen_seqs"] = gen_seqs

    if "diversity" in requested:
        null_text = np.zeros((1, model.cfg.d_model))
        div_rng = root.split(2)
        pair_count = n_diversity // 2
        div_pairs = []
        for i in range(pair_count):
            a, _ = decode(model, avg, null_text, div_rng.split(2 * i), msl=msl,
                          threshold=threshold)
            b, _ = decode(model, avg, null_text, div_rng.split(2 * i + 1), msl=msl,
                          threshold=threshold)
            a = a if a.shape[0] else np.zeros((1, EXPR_DIM))
            b = b if b.shape[0] else np.zeros((1, EXPR_DIM))
            div_pairs.append(M.seq_distance(a, b))
        ctx["div_pairs"] = div_pairs
        report.add("diversity", float(np.sum(div_pairs)) / n_diversity,
                   n=n_diversity, N_d=n_diversity)

    if "mmodality" in requested:
        mm_rng = root.split(3)
        mm_pairs = []
        for i in range(n_mmodality):
            r = records[mm_rng.integer(len(records))]
            emb = encoder.encode(r.text, r.id)
            a, _ = decode(model, avg, emb, mm_rng.split(2 * i + 10), msl=msl,
                          threshold=threshold)
            b, _ = decode(model, avg, emb, mm_rng.split(2 * i + 11), msl=msl,
                          threshold=threshold)
            a = a if a.shape[0] else np.zeros((1, EXPR_DIM))
            b = b if b.shape[0] else np.zeros((1, EXPR_DIM))
            mm_pairs.append(M.seq_distance(a, b))
        ctx["mm_pairs"] = mm_pairs
        report.add("mmodality", float(np.mean(mm_pairs)), n=n_mmodality,
                   N_m=n_mmodality)

    if "variation" in requested:
        report.add("variation", M.variation(ctx["gen_seqs"]), n=len(ctx["gen_seqs"]))
    if "fgd" in requested:
        report.add("fgd", M.fgd(ctx["gen_seqs"]), n=len(ctx["gen_seqs"]))
    if "dot" in requested:
        report.add("dot", M.dot(ctx["gen_seqs"]), n=len(ctx["gen_seqs"]))

    if "cppl" in requested or "cppl-shuffled" in requested:
        def pairs_for(seqs):
            out = []
            for r, frames in zip(records, seqs):
                emb = encoder.encode(r.text, r.id)
                mus = predictive_means_for(model, avg, frames, emb)
                out.append((frames[: mus.shape[0]], mus))
            return out

        if "cppl" in requested:
            value, bits, per_seq = M.cppl(pairs_for(gt_seqs), delta, sigma)
            ctx["cppl_bits"] = per_seq
            report.add("cppl", value, n=len(per_seq), delta=delta, sigma=sigma,
                       bits=bits)
        if "cppl-shuffled" in requested:
            shuffled = M.shuffle_frames(gt_seqs, root.split(4))
            value, bits, per_seq = M.cppl(pairs_for(shuffled), delta, sigma)
            ctx["cppl_shuffled_bits"] = per_seq
            report.add("cppl-shuffled", value, n=len(per_seq), delta=delta,
                       sigma=sigma, bits=bits)

    # ground-truth reference row
    report.add("variation-gt", M.variation(gt_seqs), n=len(gt_seqs))
    report.add("fgd-gt", M.fgd(gt_seqs), n=len(gt_seqs))
    if len(gt_seqs) >= 2:
        report.add("dot-gt", M.dot(gt_seqs), n=len(gt_seqs))

    if bootstrap_iterations > 0:
        boot_rng = root.split(5)
        for idx, v in enumerate(report.values):
            if v.name.endswith("-gt"):
                continue
            try:
                samples, fn = _metric_units(v.name, ctx)
            except ContractError:
                continue
            if len(samples) < 2:
                continue
            v.stderr = M.bootstrap_se(fn, samples, bootstrap_iterations,
                                      boot_rng.split(idx))
            v.params["iterations"] = bootstrap_iterations
    return report
