"""Training loop, sequence preparation, and autoregressive decoding."""

import warnings

import numpy as np

from .config import EXPR_DIM
from .tensor import Tensor, ContractError, backward
from .checkpoint import Checkpoint
from .model import CtegModel
from .optim import Adam, global_norm_clip, lr_at
from .rng import RngStream


class TrainingDiverged(RuntimeError):
    def __init__(self, step, batch_ids, components):
        super().__init__(
            f"non-finite loss at step {step} on batch {batch_ids}: {components}")
        self.step = step
        self.batch_ids = batch_ids
        self.components = components


def prepare_targets(frames, avg, msl=256):
    """Build the teacher-forcing pair for one sequence.

    inputs  = [avg, f_0 .. f_{T-1}]   (the average expression primes decoding)
    targets = [f_0 .. f_{T-1}, 0]     (the zero "standard" face terminates)

    The prepended average is input-only and never scored.  Sequences longer
    than msl - 1 are truncated with a warning.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != EXPR_DIM:
        raise ContractError(f"prepare_targets: frames must be (T, {EXPR_DIM})")
    T = frames.shape[0]
    if T < 1:
        raise ContractError("prepare_targets: empty sequence")
    if T > msl - 1:
        warnings.warn(f"sequence of length {T} truncated to {msl - 1} (msl={msl})")
        frames = frames[: msl - 1]
    avg = np.asarray(avg, dtype=np.float64).reshape(1, EXPR_DIM)
    inputs = np.concatenate([avg, frames], axis=0)
    targets = np.concatenate([frames, np.zeros((1, EXPR_DIM))], axis=0)
    return inputs, targets


class TrainResult:
    def __init__(self, final, best, log):
        self.final = final      # Checkpoint
        self.best = best        # Checkpoint
        self.log = log          # list of per-step dicts


def train(cfg, manifest, encoder, resume_from=None, stop_after_steps=None,
          progress=None):
    """Teacher-forced training over the manifest's train split.

    Deterministic given (cfg, cfg.seed, data): batch order comes from
    per-epoch streams split off the seed, and all sampling noise from one
    positioned stream that is checkpointed, so a resumed run continues the
    exact same trajectory.  The text encoder is frozen; embeddings are
    computed once up front.
    """
    records = manifest.by_split("train")
    if not records:
        raise ContractError("train: empty train split")

    pairs = []
    for r in records:
        frames = manifest.load_frames(r)
        emb = encoder.encode(r.text, r.id)
        pairs.append((r.id, frames, emb))
    avg = _average_from_pairs(pairs)

    prepared = []
    for rid, frames, emb in pairs:
        inputs, targets = prepare_targets(frames, avg, cfg.msl)
        prepared.append((rid, inputs, targets, emb))

    if resume_from is not None:
        model = resume_from.build_model()
        opt = Adam(model.parameters())
        if resume_from.optimizer_state is None or resume_from.rng_state is None:
            raise ContractError("resume checkpoint lacks optimizer or rng state")
        opt.load_state(resume_from.optimizer_state)
        noise_rng = RngStream.from_state(resume_from.rng_state)
        start_step = resume_from.optimizer_state["t"]
    else:
        init_rng = RngStream(cfg.seed)
        model = CtegModel(cfg, init_rng)
        opt = Adam(model.parameters())
        noise_rng = RngStream(cfg.seed).split(1)
        start_step = 0

    params = model.parameters()
    shuffle_root = RngStream(cfg.seed).split(2)

    log = []
    step = 0
    best_epoch_loss = np.inf
    best_ckpt = None
    done = False
    for epoch in range(cfg.epochs):
        epoch_rng = shuffle_root.split(epoch)
        order = epoch_rng.permutation(len(prepared))
        order.sort(key=lambda i: prepared[i][1].shape[0])  # stable: length buckets
        batches = [order[i:i + cfg.batch_size]
                   for i in range(0, len(order), cfg.batch_size)]
        epoch_loss = 0.0
        for batch in batches:
            step += 1
            if step <= start_step:
                continue
            total = None
            comp = {"l_rec": 0.0, "l_kl": 0.0, "l_g": 0.0, "kl_step": 0.0}
            scale = 1.0 / len(batch)
            for i in batch:
                rid, inputs, targets, emb = prepared[i]
                out = model.teacher_forced_forward(inputs, targets, emb, noise_rng)
                sample_loss = out["l_rec"] + out["l_kl"]
                if out["l_g"] is not None:
                    sample_loss = sample_loss + out["l_g"]
                total = sample_loss * scale if total is None else total + sample_loss * scale
                comp["l_rec"] += out["l_rec"].item() * scale
                comp["l_kl"] += out["l_kl"].item() * scale
                comp["l_g"] += (out["l_g"].item() if out["l_g"] is not None else 0.0) * scale
                comp["kl_step"] += float(out["kl_per_step"].mean()) * scale
            if not np.isfinite(total.item()):
                raise TrainingDiverged(step, [prepared[i][0] for i in batch], comp)
            backward(total)
            global_norm_clip(params, cfg.clip_norm)
            lr = lr_at(step, cfg.d_model, cfg.warmup)
            opt.step(lr)
            epoch_loss += total.item()
            entry = {"step": step, "epoch": epoch, "lr": lr,
                     "total": total.item(), **comp}
            log.append(entry)
            if progress is not None:
                progress(entry)
            if stop_after_steps is not None and step >= start_step + stop_after_steps:
                done = True
                break
        if done:
            break
        if step > start_step:
            epoch_mean = epoch_loss / max(1, len(batches))
            if epoch_mean < best_epoch_loss:
                best_epoch_loss = epoch_mean
                best_ckpt = Checkpoint.from_model(model, avg, opt, noise_rng)

    final = Checkpoint.from_model(model, avg, opt, noise_rng)
    if best_ckpt is None:
        best_ckpt = final
    return TrainResult(final, best_ckpt, log)


def _average_from_pairs(pairs):
    total = np.zeros(EXPR_DIM)
    count = 0
    for _, frames, _ in pairs:
        total += frames.sum(axis=0)
        count += frames.shape[0]
    return total / count


def decode(model, avg, text_embed, rng, msl=None, threshold=None):
    """Autoregressive decoding primed by the average expression.

    Samples z_t from the prior at every step, emits the mean frame
    (plus unit output noise when cfg.sample_reconstruction), and stops when
    the predicted frame comes within `threshold` of the zero "standard"
    face, or at msl frames.  The priming frame and the stop-triggering frame
    are not part of the returned sequence.
    """
    cfg = model.cfg
    msl = cfg.msl if msl is None else msl
    threshold = cfg.stop_threshold if threshold is None else threshold
    x = Tensor(np.asarray(text_embed, dtype=np.float64))

    history = [np.asarray(avg, dtype=np.float64)]
    gen = []
    z_lists = [[] for _ in model.layers]
    stop_reason = "msl"
    for t in range(msl):
        frame = model.decode_next(gen, np.asarray(history), z_lists, x, rng)
        if cfg.sample_reconstruction:
            frame = frame + rng.normal(frame.shape)
        if float(np.linalg.norm(frame)) < threshold:
            stop_reason = "threshold"
            break
        gen.append(frame)
        history.append(frame)
    return np.asarray(gen).reshape(len(gen), EXPR_DIM), stop_reason


def predictive_means_for(model, avg, frames, text_embed):
    """Per-step predictive means over a ground-truth sequence.

    Teacher-forced context with prior-mean latents; returns an (T, 53)
    array of means aligned with the sequence's frames (the artificial
    terminator step is computed but dropped).
    """
    inputs, targets = prepare_targets(frames, avg, model.cfg.msl)
    mus = model.predictive_means(inputs, targets, Tensor(np.asarray(text_embed)))
    return mus[: targets.shape[0] - 1]
