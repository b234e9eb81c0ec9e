import json

import pytest

from app.cli import main
from app.errors import RecordDecodeError
from app.schemas import read_traces, write_traces


@pytest.fixture(scope="module")
def model_dir(tmp_path_factory, fbs_bundle):
    path = tmp_path_factory.mktemp("models")
    fbs_bundle.save(str(path))
    return path


def test_gen_is_reproducible(tmp_path):
    """Two runs with the same seed write byte-identical datasets and a manifest."""
    argv = ["gen", "--scenario", "fbs", "--level", "2", "--traces", "4", "--seed", "42", "--workers", "1"]
    assert main(argv + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(argv + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    manifest = json.loads((tmp_path / "a.manifest.json").read_text())
    assert manifest["n_traces"] == 4


def test_gen_from_config_and_split(tmp_path):
    """A scenario file drives generation; split writes disjoint train/test files."""
    config = tmp_path / "scenarios.yaml"
    config.write_text("scenarios:\n  - {scenario: benign, traces: 5}\n  - {scenario: fbs, level: 0, traces: 5}\n")
    data = tmp_path / "data.jsonl"
    assert main(["gen", "--config", str(config), "--out", str(data), "--workers", "1"]) == 0
    assert main(["split", "--data", str(data), "--ratio", "0.8",
                 "--train-out", str(tmp_path / "train.jsonl"), "--test-out", str(tmp_path / "test.jsonl")]) == 0
    train = read_traces(str(tmp_path / "train.jsonl"))
    test = read_traces(str(tmp_path / "test.jsonl"))
    assert len(train) == 8 and len(test) == 2
    assert not {t.trace_id for t in train} & {t.trace_id for t in test}


def test_featurize_writes_matrix_and_codebook(tmp_path, fbs_traces):
    """Featurize writes a CSV and its fitted codebook."""
    data = tmp_path / "data.jsonl"
    write_traces(str(data), fbs_traces[:3])
    assert main(["featurize", "--data", str(data), "--layer", "nas", "--out", str(tmp_path / "nas.csv")]) == 0
    assert (tmp_path / "nas.csv").exists()
    assert (tmp_path / "nas.codebook.json").exists()


def test_detect_matches_eval(tmp_path, capsys, model_dir, fbs_traces):
    """Streaming detect and batch eval produce the same verdict lines."""
    data = tmp_path / "data.jsonl"
    write_traces(str(data), fbs_traces[:4])
    predictions = tmp_path / "pred.jsonl"
    assert main(["eval", "--model", str(model_dir), "--data", str(data),
                 "--predictions", str(predictions), "--report", str(tmp_path / "report.json")]) == 0
    capsys.readouterr()

    assert main(["detect", "--models", str(model_dir), "--data", str(data)]) == 0
    streamed = capsys.readouterr().out.splitlines()
    assert streamed == predictions.read_text().splitlines()
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["n_traces"] == 4


def test_detect_skips_undecodable_lines(tmp_path, capsys, model_dir, fbs_traces):
    """Bad lines are reported and skipped; the exit code signals the schema error."""
    data = tmp_path / "data.jsonl"
    write_traces(str(data), fbs_traces[:1])
    with open(data, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    assert main(["detect", "--models", str(model_dir), "--data", str(data)]) == 4
    assert len(capsys.readouterr().out.splitlines()) == 1


def test_detect_skips_lines_that_are_not_utf8(tmp_path, capsys, model_dir, fbs_traces):
    """A line with invalid UTF-8 is skipped; the lines around it still get verdicts."""
    good = tmp_path / "good.jsonl"
    write_traces(str(good), fbs_traces[:2])
    first, second = good.read_bytes().splitlines(keepends=True)
    data = tmp_path / "data.jsonl"
    data.write_bytes(first + b'{"trace_id": "\xff\xfe"}\n' + second)
    assert main(["detect", "--models", str(model_dir), "--data", str(data)]) == 4
    verdicts = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [v["trace_id"] for v in verdicts] == [t.trace_id for t in fbs_traces[:2]]


def test_read_traces_rejects_invalid_utf8(tmp_path):
    """Batch readers surface invalid UTF-8 as a record decode error."""
    data = tmp_path / "bad.jsonl"
    data.write_bytes(b'{"trace_id": "\xff"}\n')
    with pytest.raises(RecordDecodeError):
        read_traces(str(data))


def test_eval_with_constant_packet_models(tmp_path, model_dir, fbs_traces):
    """--ablate-packet refits the trace models and needs --train-data to do so."""
    data = tmp_path / "data.jsonl"
    write_traces(str(data), fbs_traces)
    report_path = tmp_path / "report.json"
    assert main(["eval", "--model", str(model_dir), "--data", str(data), "--ablate-packet", "0.5"]) == 2
    assert main(["eval", "--model", str(model_dir), "--data", str(data), "--ablate-packet", "0.5",
                 "--train-data", str(data), "--report", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["trace"]["accuracy"] <= 0.6


def test_error_exit_codes(tmp_path):
    """Validation errors exit 2 and missing artifacts exit 3."""
    assert main(["gen", "--out", str(tmp_path / "x.jsonl")]) == 2
    data = tmp_path / "empty.jsonl"
    data.write_text("")
    assert main(["detect", "--models", str(tmp_path / "nowhere"), "--data", str(data)]) == 3


def test_fuse_check_report(capsys):
    """fuse-check passes and prints its report to standard output."""
    assert main(["fuse-check", "--report", "-"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["mismatches"] == 0
