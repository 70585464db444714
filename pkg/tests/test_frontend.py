import numpy as np
import pytest
import torch

import flowcsi as fc
from flowcsi import frontend as fe
from flowcsi.errors import (DimensionMismatchError, InvalidConfigError,
                            MalformedBitsError, TrainingDivergedError)
from flowcsi.nn import DTYPE


def make_frontend(n=16, latent=8, q=4, kind="uniform", objective="mse", seed=0):
    torch.manual_seed(seed)
    return fc.FrontendModel(n, latent, fc.QuantizerSpec(kind, q), objective=objective)


def random_channels(n, N, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, N)) + 1j * rng.standard_normal((n, N))) / np.sqrt(2)


# ---------------------------------------------------------------------------
# quantizers
# ---------------------------------------------------------------------------

def test_uniform_one_bit_tie_toward_lower():
    spec = fc.QuantizerSpec("uniform", 1)
    idx, val = fc.quantize(spec, np.array([0.0, -0.2, 0.2]))
    assert idx.tolist() == [0, 0, 1]
    assert val.tolist() == [-0.5, -0.5, 0.5]


def test_uniform_levels_are_cell_midpoints():
    lv = fe.uniform_levels(3)
    assert lv.shape == (8,)
    assert abs(lv[0] + 1 - 0.125) < 1e-15
    assert np.allclose(np.diff(lv), 0.25)


def test_quantizer_roundtrip_idempotent():
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, size=(50, 8))
    for kind in ("uniform", "mulaw"):
        spec = fc.QuantizerSpec(kind, 3)
        i1, v1 = fc.quantize(spec, z)
        i2, v2 = fc.quantize(spec, v1)
        assert np.array_equal(i1, i2)
        assert np.array_equal(v1, v2)
        assert np.all(np.abs(v1) <= 1.0)


def test_mulaw_zero_maps_to_negative_smallest_level():
    # companded 0 ties to the lower midpoint level, then expands back
    spec = fc.QuantizerSpec("mulaw", 4, mu=255.0)
    _, val = fc.quantize(spec, np.zeros(8))
    y_level = -1.0 / 16  # lower midpoint adjacent to zero on the companded axis
    expected = np.sign(y_level) * ((1 + 255.0) ** abs(y_level) - 1) / 255.0
    assert np.allclose(val, expected, atol=1e-15)
    assert np.allclose(val, -(np.sqrt(2) - 1) / 255.0, atol=1e-15)


def test_mulaw_compand_expand_inverse():
    z = np.linspace(-1, 1, 2001)
    back = fe.mulaw_expand(fe.mulaw_compand(z, 255.0), 255.0)
    assert np.max(np.abs(back - z)) < 1e-12


def test_learned_levels_nearest_assignment():
    spec = fc.QuantizerSpec("per_latent_learned", 2,
                            levels=((-1.0, 0.0, 0.9, 1.0),))
    idx, val = fc.quantize(spec, np.array([[0.4]]))
    assert idx[0, 0] == 1 and val[0, 0] == 0.0
    # exact midpoint between levels 0.9 and 1.0 ties to the lower index
    idx, val = fc.quantize(spec, np.array([[0.95]]))
    assert idx[0, 0] == 2 and val[0, 0] == 0.9


def test_quantize_clips_and_counts():
    fe.clip_stats.reset()
    spec = fc.QuantizerSpec("uniform", 2)
    idx, val = fc.quantize(spec, np.array([[1.7, -3.0, 0.2, 0.0]]))
    assert fe.clip_stats.count == 2
    assert idx[0, 0] == 3 and idx[0, 1] == 0


def test_quantizer_spec_validation():
    with pytest.raises(InvalidConfigError):
        fc.QuantizerSpec("vector", 4)
    with pytest.raises(InvalidConfigError):
        fc.QuantizerSpec("uniform", 0)
    with pytest.raises(InvalidConfigError):
        fc.QuantizerSpec("per_latent_learned", 2, levels=((0.0, 1.0),))


def test_dequantize_matches_quantize_values():
    rng = np.random.default_rng(1)
    z = rng.uniform(-1, 1, size=(20, 8))
    for kind in ("uniform", "mulaw"):
        spec = fc.QuantizerSpec(kind, 4)
        idx, val = fc.quantize(spec, z)
        assert np.array_equal(fc.dequantize(spec, idx), val)


# ---------------------------------------------------------------------------
# bits
# ---------------------------------------------------------------------------

def test_bits_msb_first_latent_major():
    bits = fe.indices_to_bits(np.array([5, 2]), 3)
    assert bits.tolist() == [1, 0, 1, 0, 1, 0]
    assert fe.bits_to_indices(bits, 3).tolist() == [5, 2]


def test_bits_roundtrip_and_packing():
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 16, size=(10, 8))
    bits = fe.indices_to_bits(idx, 4)
    assert bits.shape == (10, 32)
    assert np.array_equal(fe.bits_to_indices(bits, 4), idx)
    packed = fe.pack_bits(bits[0])
    assert np.array_equal(fe.unpack_bits(packed, 32), bits[0])


def test_bits_validation():
    with pytest.raises(MalformedBitsError):
        fe.bits_to_indices(np.array([0, 1, 1]), 2)
    with pytest.raises(MalformedBitsError):
        fe.bits_to_indices(np.array([0, 2]), 2)
    with pytest.raises(MalformedBitsError):
        fe.unpack_bits(b"\x00", 16)


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def test_encode_deterministic_and_length():
    front = make_frontend()
    h = random_channels(1, 16, seed=3)[0]
    b1, b2 = front.encode(h), front.encode(h)
    assert np.array_equal(b1, b2)
    assert b1.shape == (32,)  # L=8, q=4
    assert set(np.unique(b1)).issubset({0, 1})


def test_encode_stable_within_quantizer_cells():
    front = make_frontend(seed=4)
    h = random_channels(1, 16, seed=5)[0]
    bits = front.encode(h)
    # a perturbation small enough to keep every latent inside its cell
    for scale in (1e-9, 1e-7):
        h2 = h + scale * (1 + 1j)
        z1, z2 = front.latents(h[None, :]), front.latents(h2[None, :])
        assert np.any(z1 != z2)  # the latent genuinely moved
        spec = front.spec
        i1, _ = fc.quantize(spec, z1)
        i2, _ = fc.quantize(spec, z2)
        if np.array_equal(i1, i2):  # same cells -> identical bits, by contract
            assert np.array_equal(front.encode(h2), bits)


def test_encoder_bounded_for_large_inputs():
    front = make_frontend(seed=6)
    h = 1e6 * random_channels(5, 16, seed=7)
    z = front.latents(h)
    assert np.all(np.abs(z) <= 1.0)


def test_decode_total_and_reserialization_invariant():
    front = make_frontend(seed=8)
    zero_bits = np.zeros(32, dtype=np.uint8)
    out = front.decode(zero_bits)
    assert out.shape == (16,)
    assert np.all(np.isfinite(out.view(float)))
    # all-zero bits decode through the all-lowest-level latent vector
    lowest = fc.dequantize(front.spec, np.zeros((1, 8), dtype=int))
    with torch.no_grad():
        x = front.net.decoder(torch.as_tensor(lowest, dtype=DTYPE)).numpy()
    expected = fc.from_stacked_real(x.reshape(1, 2, 16))[0]
    assert np.array_equal(out, expected)
    # re-serialization does not change the decode
    again = fe.unpack_bits(fe.pack_bits(zero_bits), 32)
    assert np.array_equal(front.decode(again), out)


def test_dimension_and_bit_length_validation():
    front = make_frontend()
    with pytest.raises(DimensionMismatchError):
        front.encode(random_channels(1, 8, seed=9)[0])
    with pytest.raises(MalformedBitsError):
        front.decode(np.zeros(16, dtype=np.uint8))


# ---------------------------------------------------------------------------
# straight-through estimator
# ---------------------------------------------------------------------------

def test_ste_gradient_is_identity_on_level_points():
    # latents already on quantizer levels: quantized forward == identity
    # forward, so the gradients must agree exactly
    quant = fe.LatentQuantizer(fc.QuantizerSpec("uniform", 2), 4)
    levels = fe.uniform_levels(2)
    z0 = torch.tensor(np.array([levels[[0, 3, 1, 2]]]), dtype=DTYPE)
    w = torch.randn(1, 4, dtype=DTYPE)

    za = z0.clone().requires_grad_()
    (quant(za) * w).sum().backward()
    zb = z0.clone().requires_grad_()
    (zb * w).sum().backward()
    assert torch.equal(za.grad, zb.grad)


def test_ste_backward_treats_quantizer_as_identity():
    # dL/dz through the quantizer equals dL/dv evaluated at the quantized
    # point, for a nonlinear downstream map
    torch.manual_seed(10)
    quant = fe.LatentQuantizer(fc.QuantizerSpec("mulaw", 3), 6)
    post = torch.nn.Sequential(torch.nn.Linear(6, 5), torch.nn.Tanh(),
                               torch.nn.Linear(5, 1)).to(DTYPE)
    z = (0.8 * torch.randn(4, 6, dtype=DTYPE)).clamp(-1, 1).requires_grad_()
    v = quant(z)
    post(v).sum().backward()

    v_detached = v.detach().requires_grad_()
    post(v_detached).sum().backward()
    assert torch.allclose(z.grad, v_detached.grad, atol=0, rtol=0)


def test_ste_learned_levels_receive_gradient():
    quant = fe.LatentQuantizer(fc.QuantizerSpec("per_latent_learned", 2), 3)
    z = torch.rand(8, 3, dtype=DTYPE) * 2 - 1
    out = quant(z).sum()
    out.backward()
    assert quant.levels.grad is not None
    assert torch.any(quant.levels.grad != 0)


# ---------------------------------------------------------------------------
# objectives and training
# ---------------------------------------------------------------------------

def test_chordal_loss_scale_and_phase_invariant():
    rng = np.random.default_rng(11)
    h = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
    x = torch.as_tensor(np.concatenate([h.real, h.imag], axis=1), dtype=DTYPE)
    for c in (2.0, -0.5, 1.3 * np.exp(1j * 2.1)):
        hc = c * h
        xc = torch.as_tensor(np.concatenate([hc.real, hc.imag], axis=1), dtype=DTYPE)
        assert float(fe.chordal_loss(x, xc)) < 1e-12


def test_mse_loss_zero_on_identity():
    x = torch.randn(3, 10, dtype=DTYPE)
    assert float(fe.mse_loss(x, x)) == 0.0


def test_train_frontend_reduces_loss():
    front = make_frontend(seed=12)
    H = random_channels(100, 16, seed=13)
    fc.train_frontend(H, front, steps=200, batch_size=32, lr=1e-3, seed=12)
    assert len(front.loss_curve) == 200
    assert front.loss_curve[-1] < front.loss_curve[0]


def test_train_frontend_chordal_objective():
    front = make_frontend(seed=14, objective="chordal")
    H = random_channels(80, 16, seed=15)
    fc.train_frontend(H, front, steps=150, batch_size=32, lr=1e-3, seed=14)
    assert front.loss_curve[-1] < front.loss_curve[0]
    assert 0.0 <= front.loss_curve[-1] <= 1.0


def test_train_frontend_aborts_on_nonfinite():
    front = make_frontend(seed=16)
    H = random_channels(10, 16, seed=17)
    H[0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        fc.train_frontend(H, front, steps=50, batch_size=10, seed=16)


def test_train_frontend_empty_dataset():
    front = make_frontend()
    with pytest.raises(InvalidConfigError):
        fc.train_frontend(np.zeros((0, 16), dtype=complex), front, steps=1)


def test_trained_frontend_beats_untrained_nmse():
    torch.manual_seed(18)
    H = random_channels(400, 16, seed=19)
    front = make_frontend(seed=18)
    before = fc.nmse_db(H, front.decode(front.encode(H)))
    fc.train_frontend(H, front, steps=400, batch_size=64, seed=18)
    after = fc.nmse_db(H, front.decode(front.encode(H)))
    assert after < before
