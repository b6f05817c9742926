"""Conditional variational autoregressive decoder layer.

Per step t the layer holds two Gaussians over a latent z_t: the posterior
conditions on frames up to and including t, the prior only on frames before
t.  Both heads read the same trunk (cross attention into the text, then
causally masked self attention); the conditioning sets differ because the
prior reads a right-shifted view that starts with a learned sentinel.

Latent temporal attention (LTA) turns the sampled latent sequence into a
per-step summary of strictly-past latents; the generation network cross-
attends the (shifted frame embedding + latent summary) queries into the text
to produce the model-space mean of the next frame.
"""

import numpy as np

from .tensor import (Tensor, ContractError, concat, exp, matmul, power,
                     reshape, tsum)
from .blocks import (AttentionWeights, FFNWeights, LayerNormWeights, Linear,
                     causal_mask, ffn, multi_head_attention)


class GaussianDiag:
    """Diagonal Gaussian batch: mu and log-variance of shape (T, d_z)."""

    def __init__(self, mu, log_var):
        if mu.shape != log_var.shape:
            raise ContractError(f"gaussian: mu {mu.shape} vs log_var {log_var.shape}")
        self.mu = mu
        self.log_var = log_var

    @property
    def shape(self):
        return self.mu.shape


def reparameterize(g, rng=None, eps=None):
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I).

    Differentiable w.r.t. mu and log_var; pass eps explicitly to pin noise.
    """
    if eps is None:
        eps = rng.normal(g.shape)
    return g.mu + exp(g.log_var * 0.5) * Tensor(np.asarray(eps))


def kl_steps(q, p):
    """Per-step KL(q || p), summed over latent dims: shape (T,).

    Written so that q == p gives exactly zero per entry.
    """
    if q.shape != p.shape:
        raise ContractError(f"kl: shapes differ: {q.shape} vs {p.shape}")
    dlv = q.log_var - p.log_var
    per_dim = (0.5 * (p.log_var - q.log_var)
               + 0.5 * exp(dlv)
               + 0.5 * power(q.mu - p.mu, 2.0) * exp(-p.log_var)
               - 0.5)
    return tsum(per_dim, axis=-1)


def kl_term(q, p):
    """Total closed-form diagonal-Gaussian KL, summed over dims and steps."""
    return tsum(kl_steps(q, p))


def shift_rows(h, sentinel):
    """Right-shift rows by one; row 0 becomes the sentinel, last row drops."""
    T = h.shape[0]
    srow = reshape(sentinel, (1, h.shape[1])) if isinstance(sentinel, Tensor) \
        else Tensor(np.asarray(sentinel).reshape(1, h.shape[1]))
    if T == 1:
        return srow
    return concat([srow, h[: T - 1]], axis=0)


class CvadLayerWeights:
    def __init__(self, rng, cfg):
        d = cfg.d_model
        self.cross_attn = AttentionWeights(rng, d, cfg.heads)
        self.self_attn = AttentionWeights(rng, d, cfg.heads)
        self.norm_cross = LayerNormWeights(d)
        self.norm_self = LayerNormWeights(d)
        self.sentinel = Tensor(rng.normal((d,)) * 0.02, requires_grad=True)
        # mean heads start at full scale so the latent carries frame
        # information from the first step (the guidance loss needs a signal
        # to latch onto); variance heads start small, sigma near 1
        self.post_mu = Linear(rng, d, d)
        self.post_logvar = Linear(rng, d, d, init_scale=0.1)
        self.prior_mu = Linear(rng, d, d)
        self.prior_logvar = Linear(rng, d, d, init_scale=0.1)
        self.lta_attn = AttentionWeights(rng, d, cfg.heads)
        self.norm_lta = LayerNormWeights(d)
        self.gen_attn = AttentionWeights(rng, d, cfg.heads)
        self.norm_gen_attn = LayerNormWeights(d)
        self.gen_ffn = FFNWeights(rng, d, cfg.d_ff)
        self.norm_gen_ffn = LayerNormWeights(d)
        self.guide_ffn = FFNWeights(rng, d, cfg.d_ff)

    def parameters(self):
        out = {"sentinel": self.sentinel}
        groups = {
            "cross_attn": self.cross_attn, "self_attn": self.self_attn,
            "norm_cross": self.norm_cross, "norm_self": self.norm_self,
            "post_mu": self.post_mu, "post_logvar": self.post_logvar,
            "prior_mu": self.prior_mu, "prior_logvar": self.prior_logvar,
            "lta_attn": self.lta_attn, "norm_lta": self.norm_lta,
            "gen_attn": self.gen_attn, "norm_gen_attn": self.norm_gen_attn,
            "gen_ffn": self.gen_ffn, "norm_gen_ffn": self.norm_gen_ffn,
            "guide_ffn": self.guide_ffn,
        }
        for gname, group in groups.items():
            for k, v in group.parameters().items():
                out[f"{gname}.{k}"] = v
        return out


def trunk(h, x, shifted, w, text_mask=None):
    """Cross attention into the text, then causally masked self attention.

    shifted=False: row t conditions on frames <= t (posterior view).
    shifted=True: h is right-shifted behind a learned sentinel first, so
    row t conditions on frames < t (prior view).
    Both sub-blocks are pre-norm residual.
    """
    if x.shape[0] < 1:
        raise ContractError("trunk: text embedding must be nonempty")
    hv = shift_rows(h, w.sentinel) if shifted else h
    T = hv.shape[0]
    a = hv + multi_head_attention(w.norm_cross(hv), x, x, text_mask, w.cross_attn)
    an = w.norm_self(a)
    return a + multi_head_attention(an, an, an, causal_mask(T), w.self_attn)


def posterior_params(o, w):
    return GaussianDiag(w.post_mu(o), w.post_logvar(o))


def prior_params(o, w):
    return GaussianDiag(w.prior_mu(o), w.prior_logvar(o))


def lta(z, w, mode="attention", enabled=True):
    """Summarize strictly-past latents: row t is a function of z_{<t} only.

    z is right-shifted behind a fixed zero sentinel, then either causally
    self-attended (pre-norm residual) or, in mean_pool mode, replaced by the
    running mean of past latents.  Disabled (enabled=False) it degrades to
    the shifted pass-through.
    """
    T, d = z.shape
    if not enabled:
        return shift_rows(z, np.zeros(d))
    if mode == "mean_pool":
        m = np.zeros((T, T))
        for t in range(1, T):
            m[t, :t] = 1.0 / t
        return matmul(Tensor(m), z)
    z_sh = shift_rows(z, np.zeros(d))
    zn = w.norm_lta(z_sh)
    return z_sh + multi_head_attention(zn, zn, zn, causal_mask(T), w.lta_attn)


def generation_mean(shifted_embed, z_tilde, x, w, text_mask=None):
    """Model-space mean sequence from (shifted frames + latent summary).

    Queries are per-position (already causal by construction of the inputs);
    keys/values come from the text.  Cross attention and FFN are pre-norm
    residual sub-blocks.
    """
    q_in = shifted_embed + z_tilde
    a = q_in + multi_head_attention(w.norm_gen_attn(q_in), x, x, text_mask, w.gen_attn)
    return a + ffn(w.norm_gen_ffn(a), w.gen_ffn)


def guided_mix(z_layers, layer_weights):
    """Sum over layers of FFN_i applied to the shifted latent sequence."""
    total = None
    for z, w in zip(z_layers, layer_weights):
        z_sh = shift_rows(z, np.zeros(z.shape[1]))
        term = ffn(z_sh, w.guide_ffn)
        total = term if total is None else total + term
    return total
