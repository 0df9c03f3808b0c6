import json
import os

import pytest

from cvlm.cli import main

TINY = """
seed = 0

[world]
n_entities = 8
knowledge_layouts = 1
layouts_per_combo = 1
host_corpus = 32

[model.vision]
d_model = 16

[model.vka]
d_model = 16
n_blocks = 1
n_heads = 2
n_query = 2
max_seq_len = 20

[model.fka]
n_layers = 1
n_heads = 2
per_layer_len = 1

[model.host]
d_model = 32
n_layers = 2
n_heads = 2
max_seq_len = 48
lora_rank = 2
lora_alpha = 4.0

[stages.host_pretrain]
steps = 2
batch_size = 4

[stages.vka_pretrain]
steps = 3

[stages.vka_align]
steps = 2

[stages.instruction_tune]
steps = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    c = str(cfg)
    codes = {
        "pretrain": main(["pretrain-vka", "--config", c, "--out", str(root / "s1")]),
        "align": main(["align-vka", "--config", c, "--out", str(root / "s2"),
                       "--init", str(root / "s1" / "checkpoint.cvlm")]),
        "finetune": main(["finetune", "--config", c, "--out", str(root / "s3"),
                          "--init", str(root / "s2" / "checkpoint.cvlm")]),
    }
    return root, c, codes


def test_pipeline_runs_and_writes_run_dirs(pipeline):
    root, _, codes = pipeline
    assert codes == {"pretrain": 0, "align": 0, "finetune": 0}
    for d in ("s1", "s2", "s3"):
        files = set(os.listdir(root / d))
        assert {"config.resolved.json", "metrics.csv", "checkpoint.cvlm",
                "summary.json"} <= files
    assert "metrics_host_pretrain.csv" in os.listdir(root / "s1")
    summary = json.loads((root / "s3" / "summary.json").read_text())
    assert summary["stage"] == "instruction_tune" and summary["completed_step"] == 2


def test_evaluate_and_inspect(pipeline, capsys):
    root, c, _ = pipeline
    ck = str(root / "s3" / "checkpoint.cvlm")
    assert main(["evaluate", "--config", c, "--checkpoint", ck, "--split", "held_out",
                 "--out", str(root / "ev")]) == 0
    lines = (root / "ev" / "eval_held_out.csv").read_text().splitlines()
    assert lines[0] == "category,n,accuracy" and lines[-1].startswith("all,")
    capsys.readouterr()
    assert main(["inspect-checkpoint", ck]) == 0
    out = capsys.readouterr().out
    assert "stage: instruction_tune" in out and "host.tok_emb  f8  [" in out


def test_ablation_flags_and_sweep(pipeline):
    root, c, _ = pipeline
    init = str(root / "s2" / "checkpoint.cvlm")
    assert main(["finetune", "--config", c, "--init", init, "--no-vka", "--ld", "0",
                 "--out", str(root / "abl")]) == 0
    summary = json.loads((root / "abl" / "summary.json").read_text())
    assert summary["use_vka"] is False and summary["ld"] == 0
    assert main(["sweep", "--config", c, "--init", init, "--steps", "1", "--ld", "0", "1",
                 "--out", str(root / "sw")]) == 0
    rows = (root / "sw" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "use_vka,ld,split,category,n,accuracy"
    assert {r.split(",")[0] + r.split(",")[1] for r in rows[1:]} == {"on0", "on1", "off0",
                                                                     "off1"}


def test_resume_continues_the_stage(pipeline):
    root, c, _ = pipeline
    init = str(root / "s1" / "checkpoint.cvlm")
    out = root / "resume"
    assert main(["align-vka", "--config", c, "--init", init, "--out", str(out),
                 "--stop-after", "1"]) == 0
    assert json.loads((out / "summary.json").read_text())["completed_step"] == 1
    assert main(["align-vka", "--config", c, "--resume", str(out / "checkpoint.cvlm"),
                 "--out", str(out)]) == 0
    assert len((out / "metrics.csv").read_text().splitlines()) == 3


def test_same_seed_same_summary(pipeline, tmp_path):
    _, c, _ = pipeline
    for d in ("a", "b"):
        assert main(["pretrain-vka", "--config", c, "--seed", "4", "--steps", "2",
                     "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == \
        (tmp_path / "b" / "summary.json").read_bytes()


def test_gen_data_then_train_from_manifest(pipeline, tmp_path):
    _, c, _ = pipeline
    assert main(["gen-data", "--config", c, "--out", str(tmp_path / "data")]) == 0
    man = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert set(man["splits"]) >= {"knowledge", "train", "held_in", "held_out"}
    cfg2 = tmp_path / "disk.toml"
    cfg2.write_text(open(c).read().replace("seed = 0", "seed = 0\nhost_pretrain = false")
                    + f'\n[paths]\ndata = "{tmp_path / "data" / "manifest.json"}"\n')
    assert main(["pretrain-vka", "--config", str(cfg2), "--steps", "1",
                 "--out", str(tmp_path / "run")]) == 0


def test_gradcheck_command(pipeline, capsys):
    _, c, _ = pipeline
    assert main(["gradcheck", "--config", c]) == 0
    out = capsys.readouterr().out
    assert "cvlm_full_step" in out and "FAIL" not in out


@pytest.mark.parametrize("argv", [
    [],
    ["evaluate"],
    ["pretrain-vka"],
    ["finetune", "--config", "x.toml", "--ld", "two"],
    ["launch", "--config", "x.toml"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_errors_exit_2(pipeline, tmp_path, capsys):
    root, c, _ = pipeline
    assert main(["align-vka", "--config", c, "--out", str(tmp_path / "x")]) == 2
    assert "--init" in capsys.readouterr().err
    assert main(["finetune", "--config", c, "--init", str(root / "s1" / "checkpoint.cvlm"),
                 "--out", str(tmp_path / "y")]) == 2
    assert "vka_align" in capsys.readouterr().err
    assert main(["pretrain-vka", "--config", str(tmp_path / "none.toml")]) == 2
    bad = tmp_path / "bad.cvlm"
    bad.write_bytes(b"nope")
    assert main(["inspect-checkpoint", str(bad)]) == 2
    (tmp_path / "typo.toml").write_text("[world]\nn_entites = 3\n")
    assert main(["gen-data", "--config", str(tmp_path / "typo.toml")]) == 2
    assert "world.n_entites" in capsys.readouterr().err
