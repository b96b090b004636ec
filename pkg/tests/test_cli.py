import json
import os

import numpy as np
import pytest
import yaml

from bbb.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, dataset_stats, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """End-to-end pipeline: gen -> split -> stats -> train -> eval -> report."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run")
    config = {
        "gen": {
            "models": ["rondo", "ghost"],
            "ids_per_model": 5,
            "renders_per_id": 4,
            "image_size": 64,
        },
        "split": {
            "dataset_dir": data,
            "train_models": ["rondo", "ghost"],
            "val_seen_models": ["ghost"],
            "val_ids_per_seen_model": 2,
        },
        "train": {
            "dataset_dir": data,
            "epochs": 2,
            "warmup_epochs": 1,
            "batch_size": 8,
            "pk_p": 4,
            "pk_k": 2,
            "iters_per_epoch": 2,
            "model": {"embed_dim": 16, "depth": 2, "num_heads": 2},
        },
        "eval": {"dataset_dir": data, "split": "val",
                 "checkpoint": os.path.join(run, "checkpoint.pt")},
        "report": {"dataset_dir": data, "split": "val",
                   "checkpoint": os.path.join(run, "checkpoint.pt")},
        "stats": {"dataset_dir": data},
    }
    cfg_path = str(root / "config.yaml")
    with open(cfg_path, "w") as f:
        yaml.safe_dump(config, f)
    return {"root": root, "data": data, "run": run, "config": cfg_path}


def _run(workspace, command, *extra):
    return main([command, "--config", workspace["config"], "--seed", "11",
                 "--out", workspace["run"], *extra])


class TestPipeline:
    def test_a_gen(self, workspace, capsys):
        assert main(["gen", "--config", workspace["config"], "--seed", "11",
                     "--out", workspace["data"]]) == EXIT_OK
        counts = json.loads(capsys.readouterr().out.strip())
        assert counts["images"] == 40 and counts["ids"] == 10
        assert os.path.isfile(os.path.join(workspace["data"], "metadata.jsonl"))

    def test_b_split(self, workspace, capsys):
        assert _run(workspace, "split") == EXIT_OK
        sizes = json.loads(capsys.readouterr().out.strip())
        assert sizes == {"train": 32, "val": 4, "stress": 0}
        assert os.path.isfile(os.path.join(workspace["data"], "splits.json"))

    def test_c_stats(self, workspace, capsys):
        code = _run(workspace, "stats")
        table = capsys.readouterr().out
        assert "after_frame_damaged" in table
        assert code in (EXIT_OK, EXIT_DATA)  # desk n is CI-audit scale, not 5k
        rows = dataset_stats(workspace["data"])
        assert {r["label"] for r in rows} >= {
            "after_frame_damaged", "before_dirt", "after_missing_seat"}

    def test_d_train(self, workspace, capsys):
        assert _run(workspace, "train") == EXIT_OK
        out = json.loads(capsys.readouterr().out.strip())
        assert out["epochs"] == 2
        assert os.path.isfile(os.path.join(workspace["run"], "checkpoint.pt"))
        log_path = os.path.join(workspace["run"], "train_log.jsonl")
        entries = [json.loads(line) for line in open(log_path)]
        assert len(entries) == 2
        assert all("total" in e and "lr" in e for e in entries)

    def test_e_eval(self, workspace, capsys):
        assert _run(workspace, "eval") == EXIT_OK
        summary = json.loads(capsys.readouterr().out.strip())
        assert "reid" in summary and "dd_synthetic" in summary
        report = json.load(open(os.path.join(workspace["run"], "report.json")))
        reid = report["summary"]["reid"]
        for key in ("map", "cmc1", "cmc5", "cmc10"):
            assert 0.0 <= reid[key]["mean"] <= 1.0

    def test_f_report(self, workspace, capsys):
        assert _run(workspace, "report") == EXIT_OK
        run = workspace["run"]
        assert os.path.isfile(os.path.join(run, "retrieval.png"))
        table = open(os.path.join(run, "retrieval.txt")).read()
        assert table.startswith("query_id\trank\tgallery_id")
        emb = np.loadtxt(os.path.join(run, "query_embeddings.txt"))
        assert emb.ndim == 2 and emb.shape[1] == 1 + 16 * 5

    def test_g_override_changes_config(self, workspace, tmp_path, capsys):
        out = str(tmp_path / "gen2")
        assert main(["gen", "--config", workspace["config"], "--seed", "1",
                     "--out", out,
                     "--override", "gen.ids_per_model=2",
                     "--override", "gen.renders_per_id=2"]) == EXIT_OK
        counts = json.loads(capsys.readouterr().out.strip())
        assert counts["images"] == 8


class TestExitCodes:
    def test_missing_config_file(self, capsys):
        assert main(["gen", "--config", "/nonexistent.yaml",
                     "--out", "/tmp/x"]) == EXIT_CONFIG

    def test_bad_override_format(self, capsys):
        assert main(["gen", "--override", "no_equals",
                     "--out", "/tmp/x"]) == EXIT_CONFIG

    def test_split_without_dataset(self, capsys):
        assert main(["split"]) == EXIT_CONFIG

    def test_split_missing_metadata(self, tmp_path, capsys):
        assert main(["split", "--dataset", str(tmp_path),
                     "--override", "split.train_models=[rondo]"]) == EXIT_DATA

    def test_eval_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--out", str(tmp_path),
                     "--checkpoint", str(tmp_path / "none.pt"),
                     "--dataset", str(tmp_path)]) == EXIT_DATA

    def test_unknown_gen_key(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path),
                     "--override", "gen.styles=5"]) == EXIT_CONFIG

    def test_stats_without_dataset(self, capsys):
        assert main(["stats"]) == EXIT_CONFIG
