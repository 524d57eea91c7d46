import json
import os

import pytest

from racg.cli import main

FAST_TRAIN = ["--epochs", "1", "--copy-warmup", "1", "--retriever-warmup", "0",
              "--batch-size", "4", "--grad-accum", "2", "--beam", "2",
              "--max-decode-len", "12", "--max-positions", "128",
              "--hidden-size", "32", "--num-layers", "1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    run = str(root / "run_joint")
    assert main(["prepare", "--synthetic", "4", "12", "--seed", "1",
                 "--out", data]) == 0
    assert main(["train", "--data", data, "--mode", "joint", "--out", run,
                 "--seed", "7"] + FAST_TRAIN) == 0
    return {"root": root, "data": data, "run": run}


def test_prepare_writes_expected_artifacts(workspace):
    names = set(os.listdir(workspace["data"]))
    assert {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.tsv",
            "templates.json", "config.json"} <= names


def test_prepare_rerun_is_byte_identical(workspace, tmp_path):
    out = str(tmp_path / "data2")
    assert main(["prepare", "--synthetic", "4", "12", "--seed", "1",
                 "--out", out]) == 0
    for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.tsv"):
        with open(os.path.join(workspace["data"], name), "rb") as a, \
                open(os.path.join(out, name), "rb") as b:
            assert a.read() == b.read()


def test_prepare_requires_input_source(tmp_path):
    assert main(["prepare", "--out", str(tmp_path / "x")]) == 1


def test_train_writes_checkpoint_layout(workspace):
    names = set(os.listdir(workspace["run"]))
    assert {"manifest.json", "config.json", "generator.pt", "retriever.pt",
            "index.npz", "index.meta.json", "train_log.jsonl"} <= names
    with open(os.path.join(workspace["run"], "manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["retriever_kind"] == "joint-dense"


def test_train_rejects_k_one(workspace, tmp_path):
    code = main(["train", "--data", workspace["data"], "--mode", "joint",
                 "--k", "1", "--out", str(tmp_path / "x")] + FAST_TRAIN)
    assert code == 1


def test_train_missing_data_dir_is_data_error(tmp_path):
    code = main(["train", "--data", str(tmp_path / "nope"), "--mode", "joint",
                 "--out", str(tmp_path / "x")] + FAST_TRAIN)
    assert code == 2


def test_bad_flags_are_usage_errors(capsys):
    assert main(["train", "--no-such-flag"]) == 1
    assert main(["frobnicate"]) == 1


def test_config_file_provides_defaults(workspace, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"k": 1}))
    code = main(["train", "--config", str(cfg), "--data", workspace["data"],
                 "--mode", "joint", "--out", str(tmp_path / "x")] + FAST_TRAIN)
    assert code == 1  # config-supplied k=1 still hits the k>=2 check
    code = main(["train", "--config", str(cfg), "--k", "2", "--data",
                 workspace["data"], "--mode", "joint",
                 "--out", str(tmp_path / "y"), "--epochs", "0",
                 "--copy-warmup", "0", "--retriever-warmup", "0",
                 "--batch-size", "4", "--grad-accum", "2", "--beam", "2",
                 "--max-decode-len", "8", "--max-positions", "128",
                 "--hidden-size", "32", "--num-layers", "1"])
    assert code == 0  # flag overrides the config file


def test_eval_writes_report_and_predictions(workspace, tmp_path):
    out = str(tmp_path / "eval")
    assert main(["eval", "--run", workspace["run"], "--out", out,
                 "--beam", "2"]) == 0
    with open(os.path.join(out, "report.json")) as f:
        report = json.load(f)
    assert set(report["scores"]) == {"corpus_bleu", "mean_sentence_bleu",
                                     "rouge_l", "meteor", "cider"}
    with open(os.path.join(out, "predictions.jsonl")) as f:
        rows = [json.loads(line) for line in f]
    assert rows and all("prediction" in r and "exemplar_id" in r for r in rows)


def test_eval_same_checkpoint_twice_identical(workspace, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert main(["eval", "--run", workspace["run"], "--out", out,
                     "--beam", "2"]) == 0
    for name in ("report.json", "predictions.jsonl"):
        with open(os.path.join(a, name)) as fa, open(os.path.join(b, name)) as fb:
            assert fa.read() == fb.read()


def test_eval_retriever_swap_and_compare(workspace, tmp_path):
    base = str(tmp_path / "base")
    assert main(["eval", "--run", workspace["run"], "--out", base,
                 "--beam", "2"]) == 0
    swapped = str(tmp_path / "swapped")
    assert main(["eval", "--run", workspace["run"], "--retriever", "random",
                 "--out", swapped, "--beam", "2",
                 "--compare", os.path.join(base, "report.json")]) == 0
    with open(os.path.join(swapped, "report.json")) as f:
        report = json.load(f)
    assert "wilcoxon_p_values" in report
    assert set(report["wilcoxon_p_values"]) <= {"sentence_bleu", "rouge_l",
                                                "meteor", "cider"}


def test_predict_from_file(workspace, tmp_path, capsys):
    with open(os.path.join(workspace["data"], "test.jsonl")) as f:
        sample = json.loads(f.readline())
    snippet = tmp_path / "snippet.py"
    snippet.write_text(sample["code"])
    assert main(["predict", "--run", workspace["run"], "--code", str(snippet),
                 "--beam", "2", "--show-exemplar"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0].startswith("exemplar ")
    assert len(out) == 2


def test_predict_beam_one_matches_itself(workspace, tmp_path, capsys):
    with open(os.path.join(workspace["data"], "test.jsonl")) as f:
        sample = json.loads(f.readline())
    snippet = tmp_path / "snippet.py"
    snippet.write_text(sample["code"])
    outputs = []
    for _ in range(2):
        assert main(["predict", "--run", workspace["run"], "--code",
                     str(snippet), "--beam", "1"]) == 0
        outputs.append(capsys.readouterr().out)
    assert outputs[0] == outputs[1]


def test_predict_untrained_dir_is_data_error(tmp_path):
    assert main(["predict", "--run", str(tmp_path / "ghost"),
                 "--code", "-"]) == 2
