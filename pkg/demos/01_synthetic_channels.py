"""Synthetic clustered-multipath channels for a planar array.

Builds a small dataset, looks at steering-vector structure and
beam-domain (DFT) profiles, and round-trips the binary container.
"""

import numpy as np

import flowcsi as fc

geom = fc.ArrayGeometry(rows=2, cols=8)          # N = 16 antennas
print(f"array: {geom.rows}x{geom.cols}, N={geom.num_antennas}")

# a steering vector has unit-modulus entries; boresight is the all-ones vector
a = fc.steering_vector(geom, azimuth=0.3, elevation=-0.1)
print("steering entry magnitudes:", np.round(np.abs(a[:4]), 12))

cfg = fc.ClusterModelConfig(num_paths=6, angle_spread=0.05, power_decay=0.8, seed=7)
ds = fc.build_dataset(geom, cfg, n_train=2000, n_test=500, n_sets=50, K=4)
print(f"dataset: {ds.train.shape[0]} train / {ds.test.shape[0]} test channels, "
      f"{ds.multiuser_sets.shape[0]} multiuser sets of K={ds.multiuser_sets.shape[1]}")

# dataset-level normalization: average per-antenna power is one on the train split
print("mean ||h||^2 / N:", np.mean(np.sum(np.abs(ds.train) ** 2, 1)) / geom.num_antennas)

# clustered rays concentrate energy in a few DFT bins
h = ds.test[0]
profile = fc.dft_profile(h)
top = np.argsort(profile)[::-1][:4]
print("dominant DFT bins:", top, "magnitudes:", np.round(profile[top], 3))
print("Parseval check:", np.allclose(np.sum(profile ** 2), np.linalg.norm(h) ** 2))

# channels decompose into a norm and a unit direction
rho, u = fc.norm_direction(h)
print(f"rho={rho:.3f}, ||u||={np.linalg.norm(u):.6f}")

# persistence: binary container and CSV export
fc.save_dataset("/tmp/demo_dataset.mcsd", ds)
ds2 = fc.load_dataset("/tmp/demo_dataset.mcsd")
print("container round trip exact:", np.array_equal(ds.train, ds2.train))
fc.export_channels_csv("/tmp/demo_channels.csv", ds.test[:10])
print("wrote /tmp/demo_dataset.mcsd and /tmp/demo_channels.csv")
