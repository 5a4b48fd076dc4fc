import json

import pytest

from iotlab.cli import main, parse_override, UsageError

CONFIG = {
    "task": {"kind": "reverse", "vocab": 10, "min_len": 2, "max_len": 5, "n_train": 120, "n_dev": 20, "n_test": 10},
    "model": {"d_model": 16, "d_ff": 32, "heads": 2, "layers": 1, "dropout": 0.0, "max_len": 10},
    "train": {"mode": "iot", "dec_codes": [4, 6], "lr": 5e-3, "warmup": 20, "batch_size": 40, "max_steps": 12},
    "seed": 3,
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(CONFIG))
    fixed = dict(CONFIG, train=dict(CONFIG["train"], mode="fixed", fixed_code=1))
    (root / "fixed.json").write_text(json.dumps(fixed))
    assert main(["train", "--config", str(root / "cfg.json"), "--seed", "7", "--out", str(root / "run1")]) == 0
    assert main(["train", "--config", str(root / "fixed.json"), "--out", str(root / "fx1")]) == 0
    fixed["train"]["fixed_code"] = 4
    (root / "fixed4.json").write_text(json.dumps(fixed))
    assert main(["train", "--config", str(root / "fixed4.json"), "--out", str(root / "fx4")]) == 0
    return root


def test_train_writes_run(run_dir):
    for name in ("best.ckpt", "log.jsonl", "steps.jsonl", "summary.json"):
        assert (run_dir / "run1" / name).exists()
    summary = json.loads((run_dir / "run1" / "summary.json").read_text())
    assert summary["seed"] == 7 and summary["config"]["seed"] == 7


def test_eval_metrics_json(run_dir, capsys):
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run_dir / "run1/best.ckpt"), "--split", "dev"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"exact_match", "token_acc", "bleu", "usage_dec"} <= set(report)
    assert sum(report["usage_dec"].values()) == 20
    assert report["meta"]["seed"] == 7


def test_eval_with_override(run_dir, capsys):
    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run_dir / "run1/best.ckpt"), "--order-override", "6"]) == 0
    assert json.loads(capsys.readouterr().out)["usage_dec"] == {"4": 0, "6": 20}
    assert main(["eval", "--ckpt", str(run_dir / "run1/best.ckpt"), "--order-override", "1,4"]) == 0
    assert main(["eval", "--ckpt", str(run_dir / "run1/best.ckpt"), "--order-override", "3"]) == 2


def test_robustness_csv_and_determinism(run_dir):
    args = ["robustness", "--ckpt", str(run_dir / "fx1/best.ckpt")]
    assert main(args + ["--out", str(run_dir / "r1")]) == 0
    assert main(args + ["--out", str(run_dir / "r2")]) == 0
    rows = (run_dir / "r1" / "robustness.csv").read_text().splitlines()
    assert rows[0] == "order_code,score" and [r.split(",")[0] for r in rows[1:]] == ["1", "2", "3", "4", "5", "6"]
    for name in ("robustness.csv", "robustness.json"):
        assert (run_dir / "r1" / name).read_bytes() == (run_dir / "r2" / name).read_bytes()
    meta = json.loads((run_dir / "r1" / "robustness.json").read_text())["meta"]
    assert meta["config"]["train"]["fixed_code"] == 1 and "seed" in meta


@pytest.mark.parametrize("command", ["subsets", "params"])
def test_single_checkpoint_studies(run_dir, command):
    assert main([command, "--ckpt", str(run_dir / "run1/best.ckpt"), "--out", str(run_dir / command)]) == 0
    assert (run_dir / command / f"{command}.csv").exists()


@pytest.mark.parametrize("command", ["ratios", "variance", "ensemble"])
def test_multi_checkpoint_studies(run_dir, command):
    ckpts = f"{run_dir / 'fx1/best.ckpt'},{run_dir / 'fx4/best.ckpt'}"
    assert main([command, "--ckpts", ckpts, "--out", str(run_dir / command)]) == 0
    data = json.loads((run_dir / command / f"{command}.json").read_text())["data"]
    if command == "ratios":
        assert abs(sum(data["ratios"]) - 1) < 1e-9


def test_ensemble_of_one_warns(run_dir, caplog):
    assert main(["ensemble", "--ckpts", str(run_dir / "run1/best.ckpt")]) == 0
    assert "single checkpoint" in caplog.text


def test_params_does_not_touch_checkpoint(run_dir):
    before = (run_dir / "run1/best.ckpt").read_bytes()
    main(["params", "--ckpt", str(run_dir / "run1/best.ckpt")])
    assert (run_dir / "run1/best.ckpt").read_bytes() == before


def test_gen_data(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["gen-data", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "data")]) == 0
    lines = (tmp_path / "data" / "dev.txt").read_text().splitlines()
    assert len(lines) == 20
    src, tgt = lines[0].split("\t")
    assert src.split()[::-1] == tgt.split()


def test_dump_config(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["train", "--config", str(tmp_path / "cfg.json"), "--seed", "11", "--dump-config"]) == 0
    resolved = json.loads(capsys.readouterr().out)
    assert resolved["seed"] == 11 and resolved["train"]["mode"] == "iot"
    assert resolved["loss"]["c1"] == 0.1


@pytest.mark.parametrize(
    "argv",
    [[], ["bogus"], ["eval"], ["train"], ["eval", "--ckpt", "x", "--split", "train"], ["eval", "--ckpt", "x", "--order-override", "a"]],
)
def test_usage_errors_exit_1(argv):
    assert main(argv) == 1


def test_missing_files_exit_2(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt")]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text('{"train": {"mode": "nope"}}')
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2


def test_parse_override():
    assert parse_override("4") == 4
    assert parse_override("2,6") == (2, 6)
    assert parse_override(None) is None
    with pytest.raises(UsageError):
        parse_override("1,2,3")
