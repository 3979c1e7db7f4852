import hashlib
import json

import pytest

from bistet.cli import main
from bistet.model import ModelConfig, count_parameters

TINY = {
    "model": {"n_layers": 1, "heads": 2, "d_model": 16, "d_ff": 32, "max_decode_len": 6},
    "train": {"total_iterations": 4, "batch_size": 8, "eval_every": 2, "eval_size": 8, "checkpoint_every": 2},
    "data": {"count": 24, "min_len": 1, "max_len": 6},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(root / "train")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--seed", "2", "--count", "10", "--out", str(root / "test")]) == 0
    rc = main(["train", "--config", str(cfg), "--seed", "7", "--train-dir", str(root / "train"),
               "--test-dir", str(root / "test"), "--out", str(root / "run")])
    assert rc == 0
    return root, cfg


def test_gen_data_layout(workspace):
    root, _ = workspace
    assert len((root / "test" / "labels.tsv").read_text().splitlines()) == 10
    assert len(list((root / "train").glob("*.pgm"))) == 24


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "run"
    assert (run / "final.bst").exists() and (run / "ckpt_000002.bst").exists()
    assert (run / "train_log.tsv").read_text().startswith("iteration\t")
    resolved = json.loads((run / "config.json").read_text())
    assert resolved["train"]["seed"] == 7 and resolved["model"]["d_model"] == 16


def test_train_reproducible(workspace, tmp_path):
    root, cfg = workspace
    rc = main(["train", "--config", str(cfg), "--seed", "7", "--train-dir", str(root / "train"),
               "--test-dir", str(root / "test"), "--out", str(tmp_path)])
    assert rc == 0
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()  # noqa: E731
    assert digest(tmp_path / "final.bst") == digest(root / "run" / "final.bst")


@pytest.mark.parametrize("direction", ["ltr", "rtl", "bi"])
def test_eval_report(workspace, capsys, direction, tmp_path):
    root, _ = workspace
    out = tmp_path / "report.tsv"
    rc = main(["eval", "--checkpoint", str(root / "run" / "final.bst"), "--test-dir", str(root / "test"),
               "--direction", direction, "--out", str(out)])
    assert rc == 0
    text = capsys.readouterr().out
    assert text == out.read_text()
    lines = text.splitlines()
    assert lines[0] == "length\tcount\taccuracy" and lines[-1].startswith("all\t10\t")


def test_eval_with_lexicon(workspace, capsys, tmp_path):
    root, _ = workspace
    lex = tmp_path / "lex.txt"
    lex.write_text("".join(r.split("\t")[1] + "\n" for r in (root / "test" / "labels.tsv").read_text().splitlines()))
    assert main(["eval", "--checkpoint", str(root / "run" / "final.bst"), "--test-dir", str(root / "test"),
                 "--lexicon", str(lex)]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("all\t10\t")


def test_predict_lines(workspace, capsys):
    root, _ = workspace
    assert main(["predict", "--checkpoint", str(root / "run" / "final.bst"), str(root / "test")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 10
    for line in lines:
        name, text, direction, prob = line.split("\t")
        assert name.endswith(".pgm") and direction in ("ltr", "rtl")
        assert 0.0 < float(prob) <= 1.0


def test_attention_dumps(workspace, capsys, tmp_path):
    root, _ = workspace
    img = sorted((root / "test").glob("*.pgm"))[0]
    rc = main(["attention", "--checkpoint", str(root / "run" / "final.bst"), "--out", str(tmp_path), str(img)])
    assert rc == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("image\tdirection") and len(lines) == 3
    # 2 directions x (self + cross) x 1 layer x 2 heads, PGM + CSV each
    assert len(list(tmp_path.glob("*.pgm"))) == 8 and len(list(tmp_path.glob("*.csv"))) == 8


def test_params_matches_count(capsys):
    assert main(["params"]) == 0
    rows = dict(line.split("\t") for line in capsys.readouterr().out.splitlines()[1:])
    assert int(rows["total"]) == count_parameters(ModelConfig())["total"]


def test_unknown_config_key_is_user_error(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"d_model": 16, "colour": 1}}))
    assert main(["params", "--config", str(cfg)]) == 1
    err = capsys.readouterr().err
    assert "colour" in err and "Traceback" not in err


def test_unknown_top_level_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"optimiser": {}}))
    assert main(["params", "--config", str(cfg)]) == 1


def test_missing_checkpoint_is_user_error(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "nope.bst"), "--test-dir", str(tmp_path)]) == 1
    assert "Traceback" not in capsys.readouterr().err


def test_corrupt_checkpoint_is_user_error(tmp_path, capsys):
    bad = tmp_path / "bad.bst"
    bad.write_bytes(b"BST1\x01\x00")
    assert main(["params", "--checkpoint", str(bad)]) == 1
    assert "offset" in capsys.readouterr().err


def test_bad_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0
