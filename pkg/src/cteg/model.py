"""The full text-to-expression model: frame encoder + stacked decoder layers.

Training runs teacher-forced over a prepared (inputs, targets) pair where
inputs = [average-expression, frame_0 .. frame_{T-1}] and targets =
[frame_0 .. frame_{T-1}, zero terminator].  The posterior view embeds the
targets (so step t sees frames <= t), the prior view is the same embedding
right-shifted behind a learned sentinel (frames < t), and the generation
queries come from the embedded inputs (the frame-level shift, primed by the
average expression).
"""

import numpy as np

from .config import EXPR_DIM, ModelConfig
from .tensor import Tensor, ContractError, concat, matmul, mse, transpose
from .blocks import Linear
from .ewa import EwaWeights, FrameEmbedder, embed_sequence
from .cvad import (CvadLayerWeights, GaussianDiag, generation_mean, guided_mix,
                   kl_steps, lta, posterior_params, prior_params,
                   reparameterize, shift_rows, trunk)

PARAMS_VERSION = 1


class CtegModel:
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.version = PARAMS_VERSION
        self.ewa = EwaWeights(rng, cfg)
        self.embedder = FrameEmbedder(rng, cfg)
        self.layers = [CvadLayerWeights(rng, cfg) for _ in range(cfg.n_layers)]
        self.f_gamma = Linear(rng, cfg.d_model, EXPR_DIM)
        self.out_proj = Linear(rng, cfg.d_model, EXPR_DIM)

    def parameters(self):
        out = {}
        for k, v in self.ewa.parameters().items():
            out[f"ewa.{k}"] = v
        for k, v in self.embedder.parameters().items():
            out[f"embed.{k}"] = v
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"layers.{i}.{k}"] = v
        for k, v in self.f_gamma.parameters().items():
            out[f"f_gamma.{k}"] = v
        for k, v in self.out_proj.parameters().items():
            out[f"out_proj.{k}"] = v
        return out

    def embed(self, frames):
        return embed_sequence(frames, self.ewa, self.embedder, self.cfg.use_ewa)

    def project_out(self, mu_g):
        """Model space -> 53-dim expression codes.

        With share_projection the transpose of the frame embedder is reused
        instead of the independent output projection.
        """
        if self.cfg.share_projection:
            return matmul(mu_g, transpose(self.embedder.lin.w))
        return self.out_proj(mu_g)

    # -- teacher-forced training pass ------------------------------------

    def teacher_forced_forward(self, inputs, targets, x, rng, text_mask=None):
        """Full training pass on one prepared sequence pair.

        inputs/targets: (S, 53) arrays from prepare_targets; x: (L, d_model)
        frozen text embedding.  Returns a dict of scalar loss Tensors plus
        plain-number diagnostics.
        """
        cfg = self.cfg
        inputs = np.asarray(inputs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if inputs.shape != targets.shape or inputs.shape[1] != EXPR_DIM:
            raise ContractError(
                f"teacher_forced_forward: inputs {inputs.shape} vs targets {targets.shape}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        S = targets.shape[0]

        h_post = self.embed(targets)   # carrier of frames <= t
        h_query = self.embed(inputs)   # average-primed frame-level shift

        z_layers = []
        kl_step_values = []
        l_kl_total = None
        mu_g = None
        for m, w in enumerate(self.layers):
            if m > 0:
                # deeper layers consume a sample around the previous mean
                eps = rng.normal(mu_g.shape)
                h_m = mu_g + Tensor(eps)
                h_post = h_m
                h_query = h_m
            o_post = trunk(h_post, x, False, w, text_mask)
            o_pri = trunk(h_post, x, True, w, text_mask)
            q = posterior_params(o_post, w)
            p = prior_params(o_pri, w)
            z = reparameterize(q, rng)
            z_layers.append(z)
            ks = kl_steps(q, p)
            kl_step_values.append(ks.data.copy())
            l_kl_total = ks.sum() if l_kl_total is None else l_kl_total + ks.sum()
            z_t = lta(z, w, cfg.lta_mode, enabled=cfg.use_lta)
            mu_g = generation_mean(h_query, z_t, x, w, text_mask)

        mu_psi = self.project_out(mu_g)
        target_t = Tensor(targets)
        # reconstruction and guidance are per-step MSEs summed over steps,
        # matching the summed-over-time KL term
        if cfg.sample_reconstruction:
            noise = Tensor(rng.normal(mu_psi.shape))
            l_rec = mse(mu_psi + noise, target_t) * float(S)
        else:
            l_rec = mse(mu_psi, target_t) * float(S)

        if cfg.use_lg:
            o_g = guided_mix(z_layers, self.layers)
            l_g = mse(self.f_gamma(o_g), target_t) * float(S)
        else:
            l_g = None

        kl_per_step = np.mean(kl_step_values, axis=0)  # (S,), averaged over layers
        return {
            "l_rec": l_rec,
            "l_kl": l_kl_total,
            "l_g": l_g,
            "mu_psi": mu_psi.data.copy(),
            "kl_per_step": kl_per_step,
            "z_abs_mean": float(np.mean([np.abs(z.data).mean() for z in z_layers])),
        }

    # -- inference-side passes --------------------------------------------

    def decode_next(self, gen_frames, history, z_lists, x, rng, text_mask=None):
        """One autoregressive step: sample new latents, return the next mean.

        gen_frames: (t, 53) frames emitted so far; history: (t+1, 53) array
        [avg, frames...]; z_lists: per-layer lists of past latent vectors,
        appended to in place.  z_t is drawn from each layer's prior; the
        frame itself depends only on strictly-past latents.
        """
        cfg = self.cfg
        t = len(gen_frames)
        if t == 0:
            h_post = Tensor(np.zeros((1, cfg.d_model)))  # dropped by the shift
        else:
            h_post = _pad_row(self.embed(np.asarray(gen_frames)))
        h_query = self.embed(np.asarray(history))
        mu_g = None
        for m, w in enumerate(self.layers):
            if m > 0:
                h_m = mu_g + Tensor(rng.normal(mu_g.shape))
                h_post = h_m
                h_query = h_m
            o_pri = trunk(h_post, x, True, w, text_mask)
            p = prior_params(o_pri, w)
            z_t = (p.mu.data[t]
                   + np.exp(0.5 * p.log_var.data[t]) * rng.normal((cfg.d_model,)))
            z_lists[m].append(z_t)
            z = Tensor(np.asarray(z_lists[m]))
            z_sum = lta(z, w, cfg.lta_mode, enabled=cfg.use_lta)
            mu_g = generation_mean(h_query, z_sum, x, w, text_mask)
        return self.project_out(mu_g).data[t].copy()

    def predictive_means(self, inputs, targets, x, text_mask=None):
        """Teacher-forced per-step predictive means with prior-mean latents.

        The continuous-perplexity context: ground-truth history, z set to
        the prior mean (no sampling).  Returns an (S, 53) array.
        """
        cfg = self.cfg
        x = x if isinstance(x, Tensor) else Tensor(x)
        h_post = self.embed(np.asarray(targets))
        h_query = self.embed(np.asarray(inputs))
        mu_g = None
        for m, w in enumerate(self.layers):
            if m > 0:
                h_post = mu_g
                h_query = mu_g
            o_pri = trunk(h_post, x, True, w, text_mask)
            p = prior_params(o_pri, w)
            z_t = lta(p.mu, w, cfg.lta_mode, enabled=cfg.use_lta)
            mu_g = generation_mean(h_query, z_t, x, w, text_mask)
        return self.project_out(mu_g).data.copy()


def _pad_row(h):
    """Append a zero row; the right-shift drops it, so its value is moot."""
    return concat([h, Tensor(np.zeros((1, h.shape[1])))], axis=0)
