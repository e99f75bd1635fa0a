import csv
import json
import time

import pytest

from diffdistill.cli import main
from diffdistill.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from diffdistill.pipeline import Experiment, alpha_beta_grid, run_pipeline, run_sweep

TINY = {
    "gmm": {"C": 2, "d": 2, "n_train": 100, "n_test": 50},
    "pretrain": {"epochs": 15, "batch_size": 32},
    "finetune": {"epochs": 1, "batch_size": 16, "n_inv_steps": 4},
    "features": {"epochs": 5},
    "selection": {"G": 2, "ipc": 1, "K_i": 50, "sample_steps": 10},
    "eval": {"seeds": [0, 1], "epochs": 20},
}


def tiny_cfg(**overrides) -> ExperimentConfig:
    return config_from_dict(json.loads(json.dumps(TINY))).replace(**overrides)


@pytest.fixture(scope="module")
def tiny_exp():
    return Experiment(tiny_cfg())


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_and_json_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert (cfg.gmm.C, cfg.gmm.d, cfg.selection.ipc, cfg.selection.G, cfg.eval.seeds) == (5, 8, 10, 8, [0, 1, 2])
    assert cfg.finetune.lambda_im == 0.002 and cfg.finetune.epochs == 8 and cfg.finetune.batch_size == 8
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert load_config(tmp_path / "c.json") == cfg
    assert config_from_dict({}) == cfg


@pytest.mark.parametrize("bad", [{"sed": 1}, {"gmm": {"CC": 3}}, {"selection": {"alpha": 0.0}},
                                 {"finetune": {"backprop_depth": "all"}}, {"gmm": 3}])
def test_bad_configs_rejected(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_fingerprint_tracks_every_field():
    base = ExperimentConfig()
    mutations = []
    for k in range(10):
        mutations += [
            {"seed": k + 1}, {"gmm.scale": 1.0 + 0.1 * (k + 1)}, {"gmm.n_train": 400 + k},
            {"finetune.lambda_im": 0.003 + k * 1e-3}, {"selection.alpha": 0.05 + 0.01 * k},
            {"selection.G": 9 + k}, {"eval.seeds": [0, 1, 3 + k]}, {"pretrain.lr": 1e-4 * (k + 1)},
            {"out_dir": f"runs/x{k}"}, {"denoiser.hidden": 65 + k},
        ]
    hashes = {base.fingerprint()}
    for m in mutations:
        cfg = base.replace(**m)
        assert cfg.fingerprint() == base.replace(**m).fingerprint()
        hashes.add(cfg.fingerprint())
    assert len(mutations) == 100 and len(hashes) == 101
    assert base.replace(**{"seed": 0}).fingerprint() == base.fingerprint()


def test_minimal_pipeline_run(tmp_path):
    t0 = time.perf_counter()
    out = run_pipeline(tiny_cfg(), tmp_path / "run")
    assert time.perf_counter() - t0 < 60
    summary = read_csv(out / "summary.csv")
    assert [r["method"] for r in summary] == ["random_real", "vanilla", "im_only", "s3_only", "im_s3"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == tiny_cfg().fingerprint() and manifest["seed"] == 0
    assert len(manifest["methods"]) == 5
    assert len(read_csv(out / "results.csv")) == 10
    for name in ("denoiser_base.ckpt", "denoiser_im.ckpt", "assignment_im.json", "pool_im_centroids.csv",
                 "distilled_im_s3.csv", "finetune_log.csv", "config.json"):
        assert (out / name).exists() and name in manifest["files"]


def test_single_value_sweeps_match_pipeline(tiny_exp, tmp_path):
    cfg = tiny_exp.cfg
    out = run_pipeline(cfg, tmp_path / "run", tiny_exp)
    row = read_csv(out / "summary.csv")[-1]
    s = cfg.selection
    for axis, value in (("lambda_im", cfg.finetune.lambda_im), ("alpha_beta_grid", (s.alpha, s.beta)),
                        ("G", s.G), ("K_i", s.K_i)):
        (r,) = run_sweep(cfg, axis, [value], tmp_path / f"{axis}.csv", tiny_exp)
        assert repr(r["mean"]) == row["mean"] and repr(r["std"]) == row["std"]


def test_alpha_beta_grid_reuses_generator(tiny_exp, tmp_path):
    grid = alpha_beta_grid()
    assert len(grid) == 81 and grid[0] == (0.1, 0.1) and grid[-1] == (0.9, 0.9)
    run_sweep(tiny_exp.cfg, "alpha_beta_grid", grid, tmp_path / "ab.csv", tiny_exp)
    rows = read_csv(tmp_path / "ab.csv")
    assert len(rows) == 81
    assert len({r["generator"] for r in rows}) == 1
    assert set(rows[0]) >= {"value", "mean", "std"}


def test_lambda_sweep(tiny_exp, tmp_path):
    rows = run_sweep(tiny_exp.cfg, "lambda_im", [0.002, 0.008, 0.4, 0.8], tmp_path / "lam.csv", tiny_exp)
    assert len(read_csv(tmp_path / "lam.csv")) == 4
    assert len({r["generator"] for r in rows}) == 4


def test_cli_stages_and_exit_codes(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    out = tmp_path / "cli"
    common = ["--config", str(cfg_path), "--out", str(out)]

    assert main(["finetune", *common]) == 1
    assert "finetune" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"gmm": {"CC": 1}}))
    assert main(["pipeline", "--config", str(bad), "--out", str(out)]) == 2
    assert "config" in capsys.readouterr().err

    for cmd in (["pretrain"], ["finetune"], ["pool", "--generator", "base"], ["pool"], ["select"], ["eval"]):
        assert main([cmd[0], *common, *cmd[1:]]) == 0, cmd
    staged = (out / "summary.csv").read_bytes()
    assert json.loads((out / "assignment_im.json").read_text())["assignment"].keys() == {"0", "1"}

    assert main(["pipeline", *common, "--out", str(tmp_path / "full")]) == 0
    assert (tmp_path / "full" / "summary.csv").read_bytes() == staged

    assert main(["instability", *common, "--probes", "3", "--steps", "5"]) == 0
    assert main(["export-embeddings", *common]) == 0
    assert (out / "embeddings_real.csv").exists()
    assert main(["sweep", *common, "--axis", "G", "--values", "[2, 3]"]) == 0
    assert len(read_csv(out / "sweep_G.csv")) == 2
    assert main(["sweep", *common, "--axis", "K_i"]) == 1
    assert "sweep" in capsys.readouterr().err
