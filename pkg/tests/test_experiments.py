import hashlib
import json

import numpy as np
import pytest

import flowcsi as fc
from flowcsi.cli import main as cli_main
from flowcsi.errors import InvalidConfigError, MissingDependencyError
from flowcsi.experiments import Workspace, stage_seed


def tiny_config(**overrides):
    cfg = dict(rows=1, cols=8, n_train=80, n_test=40, n_sets=6,
               K_list=[2], snr_db_list=[10.0], bits_list=[8], latent_dim=4,
               methods=["uniform_mse", "full_csi"],
               frontend_steps=40, flow_steps=5, flow_batch=16,
               frontend_batch=16, unet_levels=2, unet_base_width=8,
               unet_channel_mult=[1, 2], min_cell_count=2, seed=123)
    cfg.update(overrides)
    return fc.ExperimentConfig(**cfg)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def test_config_json_roundtrip(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "config.json"
    cfg.to_json(path)
    cfg2 = fc.ExperimentConfig.from_json(path)
    assert cfg2 == cfg
    assert cfg2.hash() == cfg.hash()


def test_config_hash_stable_under_field_reordering(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "config.json"
    data = json.loads(json.dumps(cfg.__dict__))
    reordered = {k: data[k] for k in sorted(data, reverse=True)}
    path.write_text(json.dumps(reordered))
    assert fc.ExperimentConfig.from_json(path).hash() == cfg.hash()


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        tiny_config(bits_list=[10])  # not divisible by latent_dim=4
    with pytest.raises(InvalidConfigError):
        tiny_config(methods=["nonexistent"])


def test_config_unknown_key(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"rows": 2, "bogus_field": 1}))
    with pytest.raises(InvalidConfigError):
        fc.ExperimentConfig.from_json(path)


def test_stage_seed_deterministic_and_distinct():
    assert stage_seed(1, "train", "x", 16) == stage_seed(1, "train", "x", 16)
    assert stage_seed(1, "train", "x", 16) != stage_seed(1, "train", "x", 32)
    assert stage_seed(1, "train", "x", 16) != stage_seed(2, "train", "x", 16)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def test_gen_data_deterministic_and_sized(tmp_path):
    cfg = tiny_config()
    ws1, ws2 = Workspace(tmp_path / "a"), Workspace(tmp_path / "b")
    ds1 = fc.gen_data(cfg, ws1)
    fc.gen_data(cfg, ws2)
    h1 = hashlib.sha256(ws1.dataset_path.read_bytes()).digest()
    h2 = hashlib.sha256(ws2.dataset_path.read_bytes()).digest()
    assert h1 == h2
    assert ds1.train.shape == (80, 8)
    assert ds1.test.shape == (40, 8)
    assert ds1.multiuser_sets.shape == (6, 2)


def test_gen_data_split_disjoint(tmp_path):
    cfg = tiny_config()
    ds = fc.gen_data(cfg, Workspace(tmp_path / "run"))
    train_keys = {h.tobytes() for h in ds.train}
    assert all(h.tobytes() not in train_keys for h in ds.test)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def test_train_flow_requires_frontend_checkpoint(tmp_path):
    cfg = tiny_config()
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    with pytest.raises(MissingDependencyError):
        fc.train_method(cfg, "flow_refiner", 8, ws)


def test_train_records_curve_and_is_reproducible(tmp_path):
    cfg = tiny_config()
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    p1 = fc.train_method(cfg, "uniform_mse", 8, ws)
    curve = ws.curve_path("uniform_mse", 8).read_text().strip().splitlines()
    assert len(curve) == cfg.frontend_steps + 1  # header + one row per step
    h1 = hashlib.sha256(p1.read_bytes()).digest()
    fc.train_method(cfg, "uniform_mse", 8, ws)  # rerun same seed
    assert hashlib.sha256(p1.read_bytes()).digest() == h1


def test_train_rejects_untrainable_or_unknown(tmp_path):
    cfg = tiny_config()
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    with pytest.raises(InvalidConfigError):
        fc.train_method(cfg, "full_csi", 8, ws)
    with pytest.raises(InvalidConfigError):
        fc.train_method(cfg, "quantum", 8, ws)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_full_csi_single_user_rate(tmp_path):
    cfg = tiny_config(K_list=[1], methods=["full_csi"], snr_db_list=[20.0])
    ws = Workspace(tmp_path / "run")
    ds = fc.gen_data(cfg, ws)
    records, skipped = fc.eval_methods(cfg, ws)
    assert skipped == 0
    P = 10.0 ** 2
    for s, rec in enumerate(records):
        h = ds.test[ds.multiuser_sets[s, 0]]
        expected = np.log2(1 + P * np.linalg.norm(h) ** 2)
        assert abs(rec.sum_rate - expected) < 1e-10
        assert rec.nmse_db == -200.0


def test_eval_row_count_and_csv_columns(tmp_path):
    cfg = tiny_config()
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    fc.train_method(cfg, "uniform_mse", 8, ws)
    records, skipped = fc.eval_methods(cfg, ws)
    assert len(records) + skipped == len(cfg.methods) * len(cfg.snr_db_list) * cfg.n_sets
    lines = ws.metrics_path.read_text().strip().splitlines()
    header = lines[0].split(",")
    assert header == ["seed", "K", "N", "B", "snr_db", "method", "sum_rate",
                      "nmse_db", "agg_desired", "agg_interference", "config_hash"]
    assert len(lines) == 1 + len(records)
    assert all(line.endswith(cfg.hash()) for line in lines[1:])


def test_eval_untrained_flow_matches_frontend_rows(tmp_path):
    cfg = tiny_config(methods=["uniform_mse", "flow_refiner"], flow_steps=0)
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    fc.train_method(cfg, "uniform_mse", 8, ws)
    fc.train_method(cfg, "flow_refiner", 8, ws)
    records, _ = fc.eval_methods(cfg, ws)
    by_method = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(
            (rec.sum_rate, rec.nmse_db, rec.agg_desired, rec.agg_interference))
    assert by_method["uniform_mse"] == by_method["flow_refiner"]


def test_eval_requires_checkpoints(tmp_path):
    cfg = tiny_config(methods=["uniform_mse"])
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    with pytest.raises(FileNotFoundError):
        fc.eval_methods(cfg, ws)


def test_every_method_trains_and_evaluates(tmp_path):
    methods = ["uniform_mse", "uniform_chordal", "mulaw_mse", "perlat_mse",
               "unet_dec_mse", "flow_refiner", "flow_direct", "full_csi"]
    cfg = tiny_config(methods=methods, frontend_steps=250, flow_steps=5, n_sets=3)
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    for method in methods:
        if method != "full_csi":
            fc.train_method(cfg, method, 8, ws)
            assert ws.checkpoint_path(method, 8).exists()
    records, skipped = fc.eval_methods(cfg, ws)
    seen = {r.method for r in records}
    assert seen == set(methods)
    for rec in records:
        assert np.isfinite(rec.sum_rate) and rec.sum_rate >= 0
        assert np.isfinite(rec.agg_interference)


# ---------------------------------------------------------------------------
# analyze-cells
# ---------------------------------------------------------------------------

def test_analyze_cells_gaps_and_reproducibility(tmp_path):
    cfg = tiny_config()
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    fc.train_method(cfg, "uniform_mse", 8, ws)
    records, below = fc.analyze_cells(cfg, "uniform_mse", 8, ws)
    assert records, "expected at least one analyzable cell"
    for rec in records:
        assert rec["gap_mean"] >= -1e-9
        assert rec["gap_method"] >= -1e-9
        assert rec["count"] >= cfg.min_cell_count
        assert 0.0 < rec["lambda_max"] <= 1.0 + 1e-12
    content1 = ws.cells_path("uniform_mse", 8).read_bytes()
    fc.analyze_cells(cfg, "uniform_mse", 8, ws)
    assert ws.cells_path("uniform_mse", 8).read_bytes() == content1


def test_analyze_cells_counts_below_min(tmp_path):
    cfg = tiny_config(min_cell_count=10_000)
    ws = Workspace(tmp_path / "run")
    fc.gen_data(cfg, ws)
    fc.train_method(cfg, "uniform_mse", 8, ws)
    records, below = fc.analyze_cells(cfg, "uniform_mse", 8, ws)
    assert records == []
    assert below > 0


# ---------------------------------------------------------------------------
# command-line interface
# ---------------------------------------------------------------------------

def test_cli_pipeline_and_exit_codes(tmp_path, capsys):
    cfg = tiny_config()
    cfg_path = tmp_path / "config.json"
    cfg.to_json(cfg_path)
    out = str(tmp_path / "run")

    assert cli_main(["gen-data", "--config", str(cfg_path), "--out", out]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", out,
                     "--method", "uniform_mse", "--bits", "8"]) == 0
    assert cli_main(["eval", "--config", str(cfg_path), "--out", out]) == 0
    assert cli_main(["analyze-cells", "--config", str(cfg_path), "--out", out,
                     "--method", "uniform_mse", "--bits", "8"]) == 0
    capsys.readouterr()

    # missing dependency -> configuration error exit code
    out2 = str(tmp_path / "run2")
    assert cli_main(["gen-data", "--config", str(cfg_path), "--out", out2]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", out2,
                     "--method", "flow_direct", "--bits", "8"]) == 2
    # unknown method -> configuration error
    assert cli_main(["train", "--config", str(cfg_path), "--out", out,
                     "--method", "bogus", "--bits", "8"]) == 2
    # missing dataset -> configuration error
    assert cli_main(["eval", "--config", str(cfg_path),
                     "--out", str(tmp_path / "empty")]) == 2


def test_cli_flow_overrides(tmp_path):
    cfg = tiny_config(methods=["uniform_mse", "flow_refiner"])
    cfg_path = tmp_path / "config.json"
    cfg.to_json(cfg_path)
    out = str(tmp_path / "run")
    assert cli_main(["gen-data", "--config", str(cfg_path), "--out", out]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", out,
                     "--method", "uniform_mse", "--bits", "8"]) == 0
    assert cli_main(["train", "--config", str(cfg_path), "--out", out,
                     "--method", "flow_refiner", "--bits", "8",
                     "--n-step", "2", "--sigma0", "0.05",
                     "--ema-decay", "0.99"]) == 0
    model = fc.load_flow(Workspace(out).checkpoint_path("flow_refiner", 8))
    assert model.config.n_step == 2
    assert model.config.sigma0 == 0.05
    assert model.ema.decay == 0.99
