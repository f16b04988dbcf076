import json

import pytest

from mtsattack import cli
from mtsattack.harness import OUTPUT_ENV, ResultTable
from mtsattack.models import load_checkpoint


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    cfg = {
        "dataset": {"source": "synthetic", "kind": "coupled-var", "d": 4, "length": 300, "seed": 0},
        "attack": {"targets": [0], "horizons": [4], "eta": 0.5, "iterations": 3, "n_grad": 4},
        "sweep": [1, 2],
        "defenses": {"none": {}, "augmentation": {"sigma": 0.1},
                     "smoothing": {"sigma": 0.1, "n": 20, "attack_paths": 4},
                     "minimax": {"epochs": 3, "draws": 2, "mean_paths": 2}},
        "T": 12, "tau": 4, "n_eval": 2, "eval_paths": 20,
        "output_dir": str(tmp_path / "out"),
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_every_subcommand_accepts_config_and_seed():
    parser = cli.build_parser()
    for name in ("train", "attack", "defend", "evaluate", "sweep", "report"):
        args = parser.parse_args([name, "--config", "c.json", "--seed", "5"])
        assert args.config == "c.json" and args.seed == 5


def test_train_attack_evaluate_pipeline(config, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["train", "--config", str(config), "--seed", "1"]) == 0
    model = out / "model.json"
    assert load_checkpoint(model).kind == "linear-var"
    assert cli.main(["attack", "--config", str(config), "--checkpoint", str(model)]) == 0
    perts = json.loads((out / "perturbations.json").read_text())
    # 2 windows x 2 target scales x 2 sparsity levels
    assert len(perts) == 8
    assert cli.main(["evaluate", "--config", str(config), "--checkpoint", str(model),
                     "--perturbations", str(out / "perturbations.json")]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert "no attack" in metrics and len(metrics) == 5


def test_defend_writes_checkpoints(config, tmp_path):
    assert cli.main(["defend", "--config", str(config)]) == 0
    meta = load_checkpoint(tmp_path / "out" / "model_minimax.json").metadata
    assert meta["defense"]["kind"] == "minimax"
    assert (tmp_path / "out" / "model_augmentation.json").exists()


def test_sweep_and_report(config, tmp_path, monkeypatch):
    alt = tmp_path / "env_out"
    monkeypatch.setenv(OUTPUT_ENV, str(alt))
    assert cli.main(["sweep", "--config", str(config), "--seed", "0"]) == 0
    table = ResultTable.from_json((alt / "table.json").read_text())
    assert table.complete() and table.columns == ["none", "augmentation", "smoothing", "minimax"]
    (alt / "table.csv").unlink()
    assert cli.main(["report", "--config", str(config), "--format", "csv"]) == 0
    assert (alt / "table.csv").read_text().startswith("sparsity,none,augmentation,smoothing,minimax")


def test_bad_config_exits_with_code_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"sweep": [99]}))
    assert cli.main(["sweep", "--config", str(path)]) == 2
    assert "sweep value" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == 2
