import json
import subprocess
import sys

import pytest

from fraudgan.cli import main
from fraudgan.config import desk_config, dump_config

TINY = dict(T=16, synth_size=240, synth_vocab=60, synth_min_len=4, synth_max_len=12, embed_dim=8,
            gen_embed_dim=8, gen_hidden_dim=8, noise_dim=4, score_dim=4, filters=4, g_pretrain_epochs=2,
            d_pretrain_epochs=1, adv_iterations=2, rollouts=2, gen_batch=10, igm_batch=8,
            disc_steps_per_epoch=3)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(dump_config(desk_config(**TINY)))
    assert main(["train", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def call(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_usage_errors_exit_2(capsys):
    for argv in (["train"], ["generate", "--out", "x", "--checkpoint", "c", "--score", "9"], ["nope"],
                 ["experiment", "--out", "x", "--kind", "everything"], ["train", "--out", "x", "--seed", "-1"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_runtime_errors_exit_1_with_json(tmp_path, capsys):
    code, _, err = call(capsys, "generate", "--checkpoint", str(tmp_path / "missing.sgan"), "--score", "5",
                        "--out", str(tmp_path / "g.jsonl"))
    assert code == 1 and json.loads(err)["command"] == "generate"
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = blue\n")
    code, _, err = call(capsys, "train", "--config", str(bad), "--out", str(tmp_path / "r"))
    assert code == 1 and "colour" in json.loads(err)["message"]


def test_train_outputs(run, capsys):
    root, _ = run
    lines = (root / "run" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [0, 1, 2]
    assert (root / "run" / "model.sgan").read_bytes()[:4] == b"SGAN"
    assert "adv_iterations = 2" in (root / "run" / "config.cfg").read_text()


def test_generate_tags_requested_score(run, capsys, tmp_path):
    root, _ = run
    out = tmp_path / "gen.jsonl"
    code, stdout, _ = call(capsys, "generate", "--checkpoint", str(root / "run" / "model.sgan"), "--score", "5",
                           "--n", "3", "--out", str(out))
    assert code == 0 and json.loads(stdout)["written"] == 3
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 3 and all(r["score"] == 5 and r["label"] == "fraud" for r in rows)


def test_detect_then_evaluate(run, capsys, tmp_path):
    root, cfg = run
    data = tmp_path / "data.jsonl"
    assert call(capsys, "synth-data", "--config", str(cfg), "--n", "60", "--out", str(data))[0] == 0
    scored = tmp_path / "scored.jsonl"
    code, _, _ = call(capsys, "detect", "--checkpoint", str(root / "run" / "model.sgan"), "--input", str(data),
                      "--out", str(scored))
    assert code == 0
    before = [json.loads(line) for line in data.read_text().splitlines()]
    after = [json.loads(line) for line in scored.read_text().splitlines()]
    assert len(after) == len(before)
    for a, b in zip(after, before):
        assert 0.0 <= a.pop("fraud_probability") <= 1.0
        assert a == b  # every input field survives unchanged
    report = tmp_path / "eval.json"
    code, stdout, _ = call(capsys, "evaluate", "--input", str(scored), "--out", str(report))
    assert code == 0
    result = json.loads(report.read_text())
    assert result == json.loads(stdout) and 0 <= result["auc"] <= 1


def test_detect_refuses_to_overwrite_input(run, capsys, tmp_path):
    root, cfg = run
    data = tmp_path / "data.jsonl"
    call(capsys, "synth-data", "--config", str(cfg), "--n", "20", "--out", str(data))
    original = data.read_bytes()
    code, _, err = call(capsys, "detect", "--checkpoint", str(root / "run" / "model.sgan"), "--input", str(data),
                        "--out", str(data))
    assert code == 1 and data.read_bytes() == original


def test_repeated_commands_are_byte_identical(run, capsys, tmp_path):
    root, cfg = run
    ckpt = str(root / "run" / "model.sgan")
    outputs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        call(capsys, "synth-data", "--config", str(cfg), "--seed", "4", "--out", str(d / "data.jsonl"))
        call(capsys, "generate", "--checkpoint", ckpt, "--score", "2", "--n", "5", "--out", str(d / "gen.jsonl"))
        call(capsys, "detect", "--checkpoint", ckpt, "--input", str(d / "data.jsonl"), "--out", str(d / "s.jsonl"))
        call(capsys, "train", "--config", str(cfg), "--seed", "4", "--iterations", "1", "--out", str(d / "run"))
        outputs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    assert outputs[0].keys() == outputs[1].keys() and len(outputs[0]) == 6
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], name


def test_resume_matches_uninterrupted_metrics(run, capsys, tmp_path):
    root, cfg = run
    assert call(capsys, "train", "--config", str(cfg), "--iterations", "1", "--out", str(tmp_path / "part"))[0] == 0
    code, _, _ = call(capsys, "train", "--config", str(cfg), "--resume", str(tmp_path / "part" / "model.sgan"),
                      "--out", str(tmp_path / "resumed"))
    assert code == 0
    assert (tmp_path / "resumed" / "metrics.jsonl").read_bytes() == (root / "run" / "metrics.jsonl").read_bytes()
    assert (tmp_path / "resumed" / "model.sgan").read_bytes() == (root / "run" / "model.sgan").read_bytes()


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.jsonl"
    proc = subprocess.run([sys.executable, "-m", "fraudgan", "synth-data", "--n", "10", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["written"] == 10
    assert len(out.read_text().splitlines()) == 10


def test_detect_rescoring_overwrites_probability_only(run, capsys, tmp_path):
    root, cfg = run
    ckpt = str(root / "run" / "model.sgan")
    data = tmp_path / "data.jsonl"
    call(capsys, "synth-data", "--config", str(cfg), "--n", "20", "--out", str(data))
    rows = [json.loads(line) for line in data.read_text().splitlines()]
    for r in rows:
        r["fraud_probability"] = -5.0
        r["note"] = "kept"
    stale = tmp_path / "stale.jsonl"
    stale.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert call(capsys, "detect", "--checkpoint", ckpt, "--input", str(stale), "--out", str(tmp_path / "s.jsonl"))[0] == 0
    out = [json.loads(line) for line in (tmp_path / "s.jsonl").read_text().splitlines()]
    for before, after in zip(rows, out):
        assert 0.0 <= after["fraud_probability"] <= 1.0
        assert {k: v for k, v in after.items() if k != "fraud_probability"} == \
            {k: v for k, v in before.items() if k != "fraud_probability"}
