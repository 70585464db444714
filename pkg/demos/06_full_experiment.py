"""A miniature end-to-end experiment through the orchestration layer.

Equivalent to the CLI sequence
    flowcsi gen-data --config c.json --out runs/demo
    flowcsi train    --config c.json --out runs/demo --method uniform_mse
    flowcsi train    --config c.json --out runs/demo --method flow_refiner
    flowcsi eval     --config c.json --out runs/demo
    flowcsi analyze-cells --config c.json --out runs/demo --method uniform_mse
but scaled down to run in about a minute.
"""

import tempfile
from collections import defaultdict

import numpy as np

import flowcsi as fc
from flowcsi.experiments import Workspace

# an 8-bit budget (4 latents, 2 bits each) keeps the feedback cells well
# populated at this dataset size, so the cell analysis has something to show
config = fc.ExperimentConfig(
    rows=2, cols=8, K_list=[4], snr_db_list=[0.0, 20.0], bits_list=[8],
    latent_dim=4, methods=["uniform_mse", "flow_refiner", "full_csi"],
    n_train=1500, n_test=400, n_sets=60,
    frontend_steps=1200, flow_steps=600, min_cell_count=4, seed=1)

ws = Workspace(tempfile.mkdtemp(prefix="flowcsi_demo_"))
print("workspace:", ws.out)
print("config hash:", config.hash())

fc.gen_data(config, ws)
for method in ("uniform_mse", "flow_refiner"):
    fc.train_method(config, method, 8, ws)
    print(f"trained {method}")

records, skipped = fc.eval_methods(config, ws)
print(f"\n{len(records)} metric rows ({skipped} singular sets skipped) "
      f"-> {ws.metrics_path}")

table = defaultdict(list)
for r in records:
    table[(r.method, r.snr_db)].append(r)
print(f"{'method':>14} {'SNR':>4} {'sum-rate':>9} {'NMSE dB':>8} {'interf':>7}")
for (method, snr), rows in sorted(table.items()):
    print(f"{method:>14} {snr:>4.0f} "
          f"{np.mean([r.sum_rate for r in rows]):>9.2f} "
          f"{np.mean([r.nmse_db for r in rows]):>8.2f} "
          f"{np.mean([r.agg_interference for r in rows]):>7.3f}")

cell_records, below = fc.analyze_cells(config, "uniform_mse", 8, ws)
gaps_mean = [r["gap_mean"] for r in cell_records]
gaps_flow = [r["gap_method"] for r in cell_records]
print(f"\n{len(cell_records)} cells analyzed ({below} below the size floor)")
if cell_records:
    print(f"mean alignment gap: cell mean {np.mean(gaps_mean):.4f}, "
          f"front-end reconstruction {np.mean(gaps_flow):.4f}")
print("cell reports ->", ws.cells_path("uniform_mse", 8))
