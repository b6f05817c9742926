"""Expression-wise attention over a single frame's coefficients.

Each 53-dim frame splits into the above-jaw part (first ``face_dim`` values)
and the jaw part (the rest).  Every coefficient becomes one token (its scalar
value times a learned direction, plus a learned per-index embedding); jaw
tokens query the face tokens through cross attention, the attended jaw tokens
are reduced back to jaw width, and the correction is added onto the raw jaw
values.  The face part always passes through untouched.
"""

import numpy as np

from .config import EXPR_DIM
from .tensor import Tensor, ContractError, concat, matmul, reshape
from .blocks import AttentionWeights, Linear, multi_head_attention, sinusoidal_pe


def split_frame(frame, face_dim=50):
    """(face, jaw) views of one 53-dim frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (EXPR_DIM,):
        raise ContractError(f"frame must have {EXPR_DIM} entries, got {frame.shape}")
    return frame[:face_dim], frame[face_dim:]


class EwaWeights:
    def __init__(self, rng, cfg):
        d_attn = cfg.d_attn
        self.face_dim = cfg.face_dim
        self.jaw_dim = cfg.jaw_dim
        # per-coefficient token embedders: value * direction + index embedding
        self.face_dirs = Tensor(rng.normal((self.face_dim, d_attn)) * 0.3, requires_grad=True)
        self.face_idx = Tensor(rng.normal((self.face_dim, d_attn)) * 0.02, requires_grad=True)
        self.jaw_dirs = Tensor(rng.normal((self.jaw_dim, d_attn)) * 0.3, requires_grad=True)
        self.jaw_idx = Tensor(rng.normal((self.jaw_dim, d_attn)) * 0.02, requires_grad=True)
        self.attn = AttentionWeights(rng, d_attn, cfg.heads)
        self.reduce = Linear(rng, self.jaw_dim * d_attn, self.jaw_dim)

    def parameters(self):
        out = {
            "face_dirs": self.face_dirs,
            "face_idx": self.face_idx,
            "jaw_dirs": self.jaw_dirs,
            "jaw_idx": self.jaw_idx,
        }
        for k, v in self.attn.parameters().items():
            out[f"attn.{k}"] = v
        for k, v in self.reduce.parameters().items():
            out[f"reduce.{k}"] = v
        return out


def ewa_enhance(frames, w):
    """Apply expression-wise attention to every frame of a (T, 53) tensor."""
    T = frames.shape[0]
    fd, jd = w.face_dim, w.jaw_dim
    face = frames[:, :fd]                                   # (T, fd)
    jaw = frames[:, fd:]                                    # (T, jd)

    face_tok = reshape(face, (T, fd, 1)) * w.face_dirs + w.face_idx   # (T, fd, d_attn)
    jaw_tok = reshape(jaw, (T, jd, 1)) * w.jaw_dirs + w.jaw_idx       # (T, jd, d_attn)

    attended = multi_head_attention(jaw_tok, face_tok, face_tok, None, w.attn)
    correction = w.reduce(reshape(attended, (T, jd * attended.shape[-1])))  # (T, jd)
    return concat([face, jaw + correction], axis=1)


class FrameEmbedder:
    """53 -> d_model projection shared by both decoder input views."""

    def __init__(self, rng, cfg):
        self.lin = Linear(rng, EXPR_DIM, cfg.d_model)

    def __call__(self, frames):
        return self.lin(frames)

    def parameters(self):
        return self.lin.parameters()


def embed_sequence(frames, ewa_w, embedder, use_ewa=True):
    """Frames (T, 53) -> model space (T, d_model) with positional encoding."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    if frames.shape[0] < 1:
        raise ContractError("embed_sequence: need at least one frame")
    if use_ewa:
        frames = ewa_enhance(frames, ewa_w)
    h = embedder(frames)
    pe = sinusoidal_pe(h.shape[0], h.shape[1])
    return h + Tensor(pe)
