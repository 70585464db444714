"""Quantized autoencoder front end: encoder, scalar quantizers, decoder.

Trains a small front end end-to-end with the straight-through estimator
and compares the three quantizer kinds on the same latents.
"""

import numpy as np
import torch

import flowcsi as fc

geom = fc.ArrayGeometry(2, 8)
ds = fc.build_dataset(geom, fc.ClusterModelConfig(seed=1), 2000, 400, 20, 4)

# 8 latents at 4 bits each -> 32 feedback bits per user
torch.manual_seed(0)
front = fc.FrontendModel(geom.num_antennas, latent_dim=8,
                         spec=fc.QuantizerSpec("uniform", 4), objective="mse")
fc.train_frontend(ds.train, front, steps=1500, batch_size=64, seed=0)
print(f"training loss: {front.loss_curve[0]:.3f} -> {front.loss_curve[-1]:.3f}")

bits = front.encode(ds.test)
print("bits per user:", bits.shape[1])
h_hat = front.decode(bits)
print(f"NMSE: {fc.nmse_db(ds.test, h_hat):.2f} dB")

# the three scalar quantizers on the same latent vector
z = front.latents(ds.test[:1])
for kind in ("uniform", "mulaw"):
    idx, vals = fc.quantize(fc.QuantizerSpec(kind, 4), z)
    print(f"{kind:>8}: indices {idx[0][:4]}... values {np.round(vals[0][:4], 4)}")

# mu-law spends resolution near zero: compare the smallest-magnitude levels
u_levels = fc.dequantize(fc.QuantizerSpec("uniform", 4), np.arange(16)[None, :])
m_levels = fc.dequantize(fc.QuantizerSpec("mulaw", 4), np.arange(16)[None, :])
print("uniform levels near 0:", np.round(np.sort(np.abs(u_levels[0]))[:2], 5))
print("mu-law  levels near 0:", np.round(np.sort(np.abs(m_levels[0]))[:2], 5))

# a chordal-objective front end targets the direction, not the raw error
torch.manual_seed(0)
front_ch = fc.FrontendModel(geom.num_antennas, 8, fc.QuantizerSpec("uniform", 4),
                            objective="chordal")
fc.train_frontend(ds.train, front_ch, steps=1500, batch_size=64, seed=0)
h_ch = front_ch.decode(front_ch.encode(ds.test))


def mean_chordal(H, Hh):
    U = H / np.linalg.norm(H, axis=1, keepdims=True)
    V = Hh / np.linalg.norm(Hh, axis=1, keepdims=True)
    return np.mean(1 - np.abs(np.einsum("ij,ij->i", U.conj(), V)) ** 2)


print(f"mean chordal distance, MSE objective:     {mean_chordal(ds.test, h_hat):.4f}")
print(f"mean chordal distance, chordal objective: {mean_chordal(ds.test, h_ch):.4f}")
