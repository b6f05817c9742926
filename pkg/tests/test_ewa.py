import numpy as np
import pytest

from cteg.config import EXPR_DIM, ModelConfig
from cteg.blocks import sinusoidal_pe
from cteg.ewa import (EwaWeights, FrameEmbedder, embed_sequence, ewa_enhance,
                      split_frame)
from cteg.rng import RngStream
from cteg.tensor import Tensor, ContractError, grad_check, mse


@pytest.fixture
def cfg():
    return ModelConfig(d_model=16, heads=2, d_ff=32, d_attn=4, seed=0)


@pytest.fixture
def weights(cfg):
    return EwaWeights(RngStream(3), cfg)


class TestSplitFrame:
    def test_zero_frame(self):
        face, jaw = split_frame(np.zeros(EXPR_DIM))
        assert face.shape == (50,) and jaw.shape == (3,)
        assert not face.any() and not jaw.any()

    def test_jaw_position(self):
        frame = np.zeros(EXPR_DIM)
        frame[50] = 7.0
        _, jaw = split_frame(frame)
        np.testing.assert_array_equal(jaw, [7., 0., 0.])

    def test_round_trip(self):
        frame = RngStream(1).normal((EXPR_DIM,))
        face, jaw = split_frame(frame)
        np.testing.assert_array_equal(np.concatenate([face, jaw]), frame)

    def test_wrong_size_rejected(self):
        with pytest.raises(ContractError, match="53"):
            split_frame(np.zeros(52))


class TestEwaEnhance:
    def test_zero_reduction_is_identity(self, weights):
        weights.reduce.w.data[...] = 0.0
        weights.reduce.b.data[...] = 0.0
        frames = RngStream(2).normal((4, EXPR_DIM))
        out = ewa_enhance(Tensor(frames), weights)
        np.testing.assert_array_equal(out.data, frames)

    def test_face_part_passes_through(self, weights):
        frames = RngStream(4).normal((5, EXPR_DIM))
        out = ewa_enhance(Tensor(frames), weights)
        np.testing.assert_array_equal(out.data[:, :50], frames[:, :50])
        assert not np.allclose(out.data[:, 50:], frames[:, 50:])

    def test_face_perturbation_moves_jaw(self, weights):
        frames = RngStream(5).normal((2, EXPR_DIM))
        base = ewa_enhance(Tensor(frames), weights).data
        frames2 = frames.copy()
        frames2[0, 10] += 1.0
        pert = ewa_enhance(Tensor(frames2), weights).data
        # the jaw correction of the perturbed frame must move
        assert np.linalg.norm(pert[0, 50:] - base[0, 50:]) > 0
        # other frames are untouched (per-frame operation)
        np.testing.assert_array_equal(pert[1], base[1])

    def test_deterministic(self, weights):
        frames = RngStream(6).normal((3, EXPR_DIM))
        a = ewa_enhance(Tensor(frames), weights).data
        b = ewa_enhance(Tensor(frames), weights).data
        np.testing.assert_array_equal(a, b)


class TestEmbedSequence:
    def test_zero_everything_gives_pe_row(self, cfg, weights):
        emb = FrameEmbedder(RngStream(7), cfg)
        emb.lin.w.data[...] = 0.0
        emb.lin.b.data[...] = 0.0
        weights.reduce.w.data[...] = 0.0
        weights.reduce.b.data[...] = 0.0
        out = embed_sequence(np.zeros((1, EXPR_DIM)), weights, emb)
        np.testing.assert_array_equal(out.data, sinusoidal_pe(1, cfg.d_model))

    def test_output_shape(self, cfg, weights):
        emb = FrameEmbedder(RngStream(8), cfg)
        out = embed_sequence(RngStream(9).normal((5, EXPR_DIM)), weights, emb)
        assert out.shape == (5, cfg.d_model)

    def test_empty_rejected(self, cfg, weights):
        emb = FrameEmbedder(RngStream(10), cfg)
        with pytest.raises(ContractError):
            embed_sequence(np.zeros((0, EXPR_DIM)), weights, emb)

    def test_use_ewa_false_skips_enhancement(self, cfg, weights):
        emb = FrameEmbedder(RngStream(11), cfg)
        frames = RngStream(12).normal((3, EXPR_DIM))
        plain = embed_sequence(frames, weights, emb, use_ewa=False).data
        manual = frames @ emb.lin.w.data + emb.lin.b.data + sinusoidal_pe(3, cfg.d_model)
        np.testing.assert_allclose(plain, manual, atol=1e-14)

    def test_grad(self, cfg, weights):
        emb = FrameEmbedder(RngStream(13), cfg)
        frames = Tensor(RngStream(14).normal((3, EXPR_DIM)), requires_grad=True)
        tgt = Tensor(RngStream(15).normal((3, cfg.d_model)))
        params = ([frames] + list(weights.parameters().values())
                  + list(emb.parameters().values()))
        err = grad_check(lambda: mse(embed_sequence(frames, weights, emb), tgt),
                         params, max_entries_per_param=6)
        assert err < 1e-4
