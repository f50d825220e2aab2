import json
import socket

import pytest

from adaptrace.cli import main


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d / "data"), "--seed", "5", "--windows-per-class", "12",
                 "--processes-per-class", "2"]) == 0
    assert main(["train", "--trace", str(d / "data/trace.jsonl"), "--modules", str(d / "data/modules.json"),
                 "--labels", str(d / "data/labels.jsonl"), "--out", str(d / "model"),
                 "--n-trees", "15", "--test-fraction", "0.3"]) == 0
    return d


def _collect_args(d, *extra):
    return ["collect", "--trace", str(d / "data/trace.jsonl"), "--modules", str(d / "data/modules.json"),
            "--selection", str(d / "model/selection.json"), "--model", str(d / "model/model.json"), *extra]


def test_gen_outputs(run_dir):
    names = {p.name for p in (run_dir / "data").iterdir()}
    assert names == {"modules.json", "trace.jsonl", "labels.jsonl"}
    assert {p.name for p in (run_dir / "model").iterdir()} >= {"selection.json", "model.json", "config.json", "split.json"}


def test_collect_detect_eval_stats(run_dir, capsys, tmp_path):
    d = run_dir
    assert main(_collect_args(d, "--out", str(tmp_path / "w.bin"), "--ledger", str(tmp_path / "ledger.json"))) == 0
    assert "Loop Compression" in capsys.readouterr().out
    assert main(["detect", "--model", str(d / "model/model.json"), "--input", str(tmp_path / "w.bin"),
                 "--alerts", str(tmp_path / "alerts.jsonl")]) == 0
    rows = [json.loads(l) for l in (tmp_path / "alerts.jsonl").read_text().splitlines()]
    assert rows and all(r["predicted"] != "Benign" for r in rows)
    assert main(["eval", "--trace", str(d / "data/trace.jsonl"), "--modules", str(d / "data/modules.json"),
                 "--labels", str(d / "data/labels.jsonl"), "--selection", str(d / "model/selection.json"),
                 "--model", str(d / "model/model.json"), "--split", str(d / "model/split.json"),
                 "--json", str(tmp_path / "eval.json")]) == 0
    rep = json.loads((tmp_path / "eval.json").read_text())
    assert rep["accuracy"] > 0.8
    capsys.readouterr()
    assert main(["stats", "--ledger", str(tmp_path / "ledger.json"), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["rows"][0]["stage"] == "Raw Data"
    assert main(["stats", "--selection", str(d / "model/selection.json")]) == 0
    assert "vocabulary" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["gen"],
    ["train", "--trace", "x"],
    ["stats"],
    ["detect", "--model", "m.json"],
    ["gen", "--out", "o", "--windows-per-class", "0"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_bad_endpoint_is_usage_error(run_dir):
    assert main(_collect_args(run_dir, "--connect", "nowhere")) == 1


def test_data_errors_exit_2(run_dir, tmp_path):
    assert main(["stats", "--ledger", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "trace.jsonl"
    bad.write_text("not json\n")
    args = _collect_args(run_dir, "--out", str(tmp_path / "w.bin"))
    args[args.index("--trace") + 1] = str(bad)
    assert main(args) == 2
    (tmp_path / "junk.bin").write_bytes(b"JUNK" + bytes(10))
    assert main(["detect", "--model", str(run_dir / "model/model.json"), "--input", str(tmp_path / "junk.bin")]) == 2


def test_lenient_skips_bad_lines(run_dir, tmp_path):
    src = (run_dir / "data/trace.jsonl").read_text().splitlines()
    bad = tmp_path / "trace.jsonl"
    bad.write_text("\n".join(src[:50] + ["garbage"] + src[50:200]) + "\n")
    args = _collect_args(run_dir, "--out", str(tmp_path / "w.bin"), "--lenient")
    args[args.index("--trace") + 1] = str(bad)
    assert main(args) == 0


def test_unreachable_detector_exit_3(run_dir, tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert main(_collect_args(run_dir, "--connect", f"127.0.0.1:{port}", "--retries", "1")) == 3
