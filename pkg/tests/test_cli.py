import csv
import json
import math

import pytest

import gradiveq.pipeline as pipeline
from gradiveq.cli import main
from gradiveq.rar import IterationResult
from gradiveq.sources import DumpReader
from gradiveq.sources.dump import header_size
from gradiveq.sources.toy import CONV

SMALL = {
    "source": {"layers": [[2, 2, 4, 8]], "rank": 2},
    "layout": {"slice_size": 32},
    "schedule": {"warmup": 3, "sample_iters": 5, "compressed_iters": 5},
}


def _config(tmp_path, data=SMALL):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(data))
    return str(p)


def _csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_raw_two_nodes(tmp_path, capsys):
    code = main(["simulate", "--config", _config(tmp_path), "--mode", "raw", "--nodes", "2", "--iterations", "6",
                 "--out-dir", str(tmp_path / "out")])
    assert code == 0
    rows = _csv(tmp_path / "out" / "metrics.csv")
    assert {r["mode"] for r in rows} == {"raw"}
    assert len([r for r in rows if r["node"] != ""]) == 12
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["config"]["nodes"] == 2 and manifest["seed"] == 0
    assert json.loads(capsys.readouterr().out.splitlines()[0])["mode"] == "raw"


def test_simulate_all_modes(tmp_path):
    code = main(["simulate", "--config", _config(tmp_path), "--mode", "all", "--nodes", "2", "--iterations", "14",
                 "--out-dir", str(tmp_path / "out")])
    assert code == 0
    for mode in ("raw", "gvq", "scalar"):
        assert (tmp_path / "out" / mode / "summary.json").exists()
    phases = {r["phase"] for r in _csv(tmp_path / "out" / "gvq" / "metrics.csv")}
    assert phases == {"WARMUP", "SAMPLE", "COMPRESSED"}


def test_invalid_config_exits_two(tmp_path, capsys):
    cfg = _config(tmp_path, {"schedule": {"sample_iters": 1}})
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path)]) == 2
    assert "schedule.sample_iters" in capsys.readouterr().err


def test_invariant_violation_exits_three(tmp_path, monkeypatch):
    real = pipeline.run_iteration

    def corrupt(*args, **kwargs):
        res = real(*args, **kwargs)
        outs = [o.copy() for o in res.outputs]
        outs[0][0] += 1.0
        return IterationResult(outs, res.nodes, res.bytes_sent)

    monkeypatch.setattr(pipeline, "run_iteration", corrupt)
    assert main(["simulate", "--config", _config(tmp_path), "--nodes", "2", "--iterations", "2",
                 "--out-dir", str(tmp_path / "out")]) == 3


def test_gen_dump_size_and_replay(tmp_path):
    out = tmp_path / "g.gvq"
    assert main(["gen-dump", "--config", _config(tmp_path), "--nodes", "3", "--iterations", "4",
                 "--output", str(out)]) == 0
    M = 2 * 2 * 4 * 8
    assert out.stat().st_size == header_size(1) + 4 * M * 3 * 4
    replay = dict(SMALL, source={"kind": "replay", "dump": str(out), "layers": [[2, 2, 4, 8]]})
    assert main(["simulate", "--config", _config(tmp_path, replay), "--nodes", "3", "--iterations", "4",
                 "--mode", "raw", "--out-dir", str(tmp_path / "r")]) == 0
    assert main(["simulate", "--config", _config(tmp_path, replay), "--nodes", "2", "--iterations", "4",
                 "--out-dir", str(tmp_path / "r")]) == 2


def test_gen_dump_zero_iterations_and_toy(tmp_path):
    out = tmp_path / "e.gvq"
    assert main(["gen-dump", "--config", _config(tmp_path), "--iterations", "0", "--output", str(out)]) == 0
    assert out.stat().st_size == header_size(1)
    toy = {"source": {"kind": "toy"}, "layout": {"slice_size": 24}}
    out = tmp_path / "t.gvq"
    assert main(["gen-dump", "--config", _config(tmp_path, toy), "--nodes", "2", "--iterations", "3",
                 "--output", str(out)]) == 0
    r = DumpReader(out)
    assert r.layers == (CONV,) and out.stat().st_size == header_size(1) + 4 * CONV.size * 2 * 3


def test_slice_sweep_toy(tmp_path, capsys):
    toy = {"source": {"kind": "toy"}, "schedule": {"warmup": 20, "sample_iters": 30}, "nodes": 2}
    with pytest.warns(UserWarning, match="exceeds"):
        code = main(["slice-sweep", "--config", _config(tmp_path, toy), "--slice-sizes", f"24,{CONV.size},999",
                     "--out-dir", str(tmp_path)])
    assert code == 0
    rows = _csv(tmp_path / "slice_sweep.csv")
    assert [int(r["K"]) for r in rows] == [24, CONV.size]
    assert math.isnan(float(rows[1]["transfer_loss"]))
    assert float(rows[0]["transfer_loss"]) >= 0
    assert "K=24" in capsys.readouterr().out


def test_slice_sweep_dump(tmp_path):
    out = tmp_path / "g.gvq"
    main(["gen-dump", "--config", _config(tmp_path), "--nodes", "2", "--iterations", "12", "--output", str(out)])
    assert main(["slice-sweep", "--source", "dump", "--dump", str(out), "--slice-sizes", "32,64",
                 "--out-dir", str(tmp_path)]) == 0
    assert len(_csv(tmp_path / "slice_sweep.csv")) == 2
    assert main(["slice-sweep", "--source", "dump", "--out-dir", str(tmp_path)]) == 2


def test_bench(tmp_path, capsys):
    assert main(["bench", "--config", _config(tmp_path), "--nodes", "2", "--out-dir", str(tmp_path)]) == 0
    rows = {r["mode"]: r for r in _csv(tmp_path / "bench.csv")}
    assert set(rows) == {"raw", "gvq", "scalar"}
    assert float(rows["gvq"]["bytes_per_node"]) < float(rows["raw"]["bytes_per_node"])
    assert main(["bench", "--config", _config(tmp_path), "--nodes", "1", "--out-dir", str(tmp_path)]) == 0
    rows = _csv(tmp_path / "bench.csv")
    assert all(float(r["sim_agg_s"]) == 0.0 and float(r["bytes_per_node"]) == 0.0 for r in rows)
