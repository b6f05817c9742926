"""Command-line surface: synth, train, generate, eval, verify.

Exit codes: 0 success, 1 runtime/data error, 2 usage error.  Reports go to
stdout, diagnostics to stderr.  CTEG_SEED serves as the seed fallback when a
command takes --seed and none is given.
"""

import argparse
import os
import sys

import numpy as np

from . import verify as V
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import load_run_config
from .dataio import (DataFormatError, PrecomputedTextEncoder, SynthConfig,
                     ToyTextEncoder, load_manifest, synth_dataset,
                     write_sequence)
from .evaluate import DEFAULT_METRICS, GENERATED_METRICS, run_evaluation
from .report import format_metric_table, write_metric_report, write_train_log
from .rng import RngStream
from .runtime import TrainingDiverged, decode, train
from .tensor import ContractError


class UsageError(ValueError):
    pass


def _env_seed(value):
    if value is not None:
        return value
    env = os.environ.get("CTEG_SEED")
    return int(env) if env else 0


def _make_encoder(kind, d_model, seed, embeddings_dir, max_text_len=128):
    if kind == "toy":
        return ToyTextEncoder(d_model, seed=seed, max_text_len=max_text_len)
    if embeddings_dir is None:
        raise UsageError("--embeddings-dir is required with the precomputed encoder")
    return PrecomputedTextEncoder(embeddings_dir, d_model, max_text_len)


def cmd_synth(args):
    cfg = SynthConfig(n_pairs=args.pairs, n_classes=args.classes,
                      min_len=args.min_len, max_len=args.max_len,
                      noise=args.noise, one_to_many_frac=args.one_to_many,
                      seed=_env_seed(args.seed))
    manifest = synth_dataset(cfg, args.out)
    n_frames = sum(manifest.load_frames(r).shape[0] for r in manifest.records)
    texts = {}
    for r in manifest.records:
        texts[r.text] = texts.get(r.text, 0) + 1
    n_multi = sum(1 for c in texts.values() if c > 1)
    print(f"wrote {len(manifest.records)} pairs ({n_frames} frames) to {args.out}")
    print(f"splits: train={len(manifest.by_split('train'))} "
          f"valid={len(manifest.by_split('valid'))} test={len(manifest.by_split('test'))}")
    print(f"one-to-many texts: {n_multi}")
    return 0


def cmd_train(args):
    cfg, run = load_run_config(args.config)
    manifest = load_manifest(os.path.join(run["data_dir"], "manifest.tsv"))
    encoder = _make_encoder(run["encoder"], cfg.d_model, run["encoder_seed"],
                            run.get("embeddings_dir"), cfg.max_text_len)
    out_dir = run["out_dir"]
    os.makedirs(out_dir, exist_ok=True)

    def progress(entry):
        if entry["step"] % 50 == 0 or entry["step"] == 1:
            print(f"step {entry['step']:>6}  lr {entry['lr']:.3e}  "
                  f"total {entry['total']:.4f}  rec {entry['l_rec']:.4f}  "
                  f"kl {entry['l_kl']:.4f}  lg {entry['l_g']:.4f}", file=sys.stderr)

    result = train(cfg, manifest, encoder, progress=progress)
    save_checkpoint(result.final, os.path.join(out_dir, "final.ckpt"))
    save_checkpoint(result.best, os.path.join(out_dir, "best.ckpt"))
    tsv, fig = write_train_log(result.log, out_dir)
    print(f"trained {len(result.log)} steps; "
          f"final total loss {result.log[-1]['total']:.5f}")
    print(f"checkpoints: {os.path.join(out_dir, 'final.ckpt')}, "
          f"{os.path.join(out_dir, 'best.ckpt')}")
    print(f"loss log: {tsv}")
    if run.get("save_figures", True):
        print(f"loss curves: {fig}")
    return 0


def cmd_generate(args):
    if not args.text.strip():
        raise UsageError("--text must be a nonempty string")
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    encoder = _make_encoder(args.encoder, model.cfg.d_model, args.encoder_seed,
                            args.embeddings_dir, model.cfg.max_text_len)
    emb = encoder.encode(args.text)
    os.makedirs(args.out, exist_ok=True)
    seed = _env_seed(args.seed)
    for k in range(args.samples):
        rng = RngStream(seed).split(k)
        seq, reason = decode(model, ckpt.avg_expression, emb, rng,
                             msl=args.msl, threshold=args.threshold)
        path = os.path.join(args.out, f"gen_{seed}_{k:03d}.exp")
        if seq.shape[0] == 0:
            print(f"sample {k}: empty (stopped by {reason} at step 0); not written")
            continue
        write_sequence(seq, path)
        print(f"sample {k}: {seq.shape[0]} frames, stop={reason} -> {path}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    manifest = load_manifest(os.path.join(args.data, "manifest.tsv"))
    encoder = _make_encoder(args.encoder, model.cfg.d_model, args.encoder_seed,
                            args.embeddings_dir, model.cfg.max_text_len)
    requested = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in requested if m not in GENERATED_METRICS]
    if unknown:
        raise UsageError(
            f"unknown metrics {unknown}; valid: {', '.join(GENERATED_METRICS)}")
    report = run_evaluation(
        model, ckpt.avg_expression, manifest, encoder, requested,
        rng_seed=_env_seed(args.seed), split=args.split,
        n_diversity=args.n_diversity, n_mmodality=args.n_mmodality,
        msl=args.msl, threshold=args.threshold,
        bootstrap_iterations=args.bootstrap)
    print(format_metric_table(report))
    if args.out:
        tsv, kv, fig = write_metric_report(report, args.out)
        print(f"report: {tsv}, {kv}", file=sys.stderr)
        print(f"figure: {fig}", file=sys.stderr)
    return 0


def cmd_verify(args):
    results, elapsed = V.run_all(sabotage=args.sabotage)
    text, ok = V.format_results(results, elapsed)
    print(text)
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(
        prog="cteg",
        description="Text-to-3D-expression generation: data synthesis, training, "
                    "decoding, evaluation, and self-verification.")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate a synthetic dataset")
    ps.add_argument("--out", required=True, help="output directory")
    ps.add_argument("--pairs", type=int, default=200)
    ps.add_argument("--classes", type=int, default=7)
    ps.add_argument("--min-len", type=int, default=8)
    ps.add_argument("--max-len", type=int, default=24)
    ps.add_argument("--noise", type=float, default=0.05)
    ps.add_argument("--one-to-many", type=float, default=0.15,
                    help="fraction of texts mapped to several sequences")
    ps.add_argument("--seed", type=int, default=None)
    ps.set_defaults(func=cmd_synth)

    pt = sub.add_parser("train", help="train from a key=value config file")
    pt.add_argument("--config", required=True)
    pt.set_defaults(func=cmd_train)

    pg = sub.add_parser("generate", help="decode expression sequences from text")
    pg.add_argument("--ckpt", required=True)
    pg.add_argument("--text", required=True)
    pg.add_argument("--seed", type=int, default=None)
    pg.add_argument("--msl", type=int, default=None)
    pg.add_argument("--threshold", type=float, default=None)
    pg.add_argument("--samples", type=int, default=1)
    pg.add_argument("--out", default="generated")
    pg.add_argument("--encoder", choices=("toy", "precomputed"), default="toy")
    pg.add_argument("--encoder-seed", type=int, default=7)
    pg.add_argument("--embeddings-dir", default=None)
    pg.set_defaults(func=cmd_generate)

    pe = sub.add_parser("eval", help="run the metric suite on a checkpoint")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--metrics", default=",".join(DEFAULT_METRICS))
    pe.add_argument("--bootstrap", type=int, default=0)
    pe.add_argument("--seed", type=int, default=None)
    pe.add_argument("--split", default="test")
    pe.add_argument("--n-diversity", type=int, default=32)
    pe.add_argument("--n-mmodality", type=int, default=16)
    pe.add_argument("--msl", type=int, default=None)
    pe.add_argument("--threshold", type=float, default=None)
    pe.add_argument("--out", default=None, help="directory for tsv/kv/figure output")
    pe.add_argument("--encoder", choices=("toy", "precomputed"), default="toy")
    pe.add_argument("--encoder-seed", type=int, default=7)
    pe.add_argument("--embeddings-dir", default=None)
    pe.set_defaults(func=cmd_eval)

    pv = sub.add_parser("verify", help="run the built-in verification suite")
    pv.add_argument("--sabotage", choices=V.SABOTAGE_MODES, default=None,
                    help="inject an internal fault to prove the suite catches it")
    pv.set_defaults(func=cmd_verify)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    except (ContractError, DataFormatError, CheckpointFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
