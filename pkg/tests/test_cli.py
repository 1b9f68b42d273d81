"""Command-line interface: subcommands, exit codes, artifacts."""

import json

import pytest

from minispmd.cli import main

FFW = """\
graph @ffw (mesh=[2,2]) {
  %x = f32[8,8] parameter(0), sharding={devices=[2,2]0,1,2,3}
  %w = f32[8,8] parameter(1), sharding={devices=[2,2]0,2,1,3}
  %y = f32[8,8] dot(%x, %w), lhs_batch=[], rhs_batch=[], lhs_contracting=[1], rhs_contracting=[0], sharding={devices=[2,2]0,1,2,3}
  return %y
}
"""

REPLICATED = """\
graph @r {
  %x = f32[4] parameter(0)
  %y = f32[4] relu(%x)
  return %y
}
"""


@pytest.fixture
def ffw(tmp_path):
    p = tmp_path / "ffw.txt"
    p.write_text(FFW)
    return p


class TestPropagate:
    def test_annotates_all(self, ffw, capsys):
        assert main(["propagate", str(ffw)]) == 0
        out = capsys.readouterr().out
        assert out.count("sharding=") >= 3

    def test_trace_artifact(self, ffw, tmp_path):
        assert main(["propagate", str(ffw), "--trace"]) == 0
        trace = json.loads((tmp_path / "ffw.trace.json").read_text())
        assert "changes" in trace and "iterations" in trace

    def test_deterministic_output(self, ffw, capsys):
        main(["propagate", str(ffw)])
        a = capsys.readouterr().out
        main(["propagate", str(ffw)])
        assert capsys.readouterr().out == a


class TestPartition:
    def test_artifacts(self, ffw, tmp_path, capsys):
        assert main(["partition", str(ffw), "--devices", "4", "--dot"]) == 0
        assert (tmp_path / "ffw.spmd.txt").exists()
        stats = json.loads((tmp_path / "ffw.stats.json").read_text())
        assert "collective_counts" in stats and "sent_bytes" in stats
        dot = (tmp_path / "ffw.dot").read_text()
        assert dot.startswith("digraph")
        assert "orange" in dot          # collectives highlighted


class TestRunVerify:
    def test_run_single(self, tmp_path, capsys):
        p = tmp_path / "g.txt"
        p.write_text(REPLICATED)
        assert main(["run", str(p)]) == 0
        assert "%y" in capsys.readouterr().out

    def test_run_spmd_matches_single(self, ffw, capsys):
        import re

        import numpy as np

        def numbers(text):
            return np.array([float(t) for t in
                             re.findall(r"-?\d+\.\d*(?:e-?\d+)?", text)])

        main(["run", str(ffw)])
        single = numbers(capsys.readouterr().out)
        main(["run", str(ffw), "--devices", "4"])
        spmd = numbers(capsys.readouterr().out)
        assert single.size == spmd.size > 0
        np.testing.assert_allclose(single, spmd, rtol=1e-4)

    def test_run_with_inputs_file(self, tmp_path, capsys):
        p = tmp_path / "g.txt"
        p.write_text(REPLICATED)
        inputs = tmp_path / "inputs.json"
        inputs.write_text("[[1.0, -2.0, 3.0, -4.0]]")
        assert main(["run", str(p), "--inputs", str(inputs)]) == 0
        assert "[1. 0. 3. 0.]" in capsys.readouterr().out

    def test_verify_replicated_passes(self, tmp_path, capsys):
        p = tmp_path / "g.txt"
        p.write_text(REPLICATED)
        assert main(["verify", str(p), "--devices", "4"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_verify_sharded_passes(self, ffw):
        assert main(["verify", str(ffw), "--devices", "4", "--tol", "1e-4"]) == 0


class TestStats:
    def test_stats_json(self, ffw, capsys):
        assert main(["stats", str(ffw), "--devices", "4"]) == 0
        stats = json.loads(capsys.readouterr().out)
        assert set(stats) == {"collective_counts", "exchanged_bytes",
                              "total_exchanged_bytes", "sent_bytes"}


class TestPipeline:
    def test_bubble_ratio_3_19(self, capsys):
        assert main(["pipeline", "--stages", "4", "--microbatches", "16"]) == 0
        out = capsys.readouterr().out
        payload = json.loads(out[out.rindex("\n{") + 1:])
        assert payload["bubble_ratio"] == [3, 19]

    def test_circular_schedule(self, capsys):
        assert main(["pipeline", "--stages", "2", "--microbatches", "4",
                     "--schedule", "circular:2"]) == 0

    def test_bad_schedule(self, capsys):
        assert main(["pipeline", "--stages", "2", "--microbatches", "4",
                     "--schedule", "zigzag"]) == 2


class TestExitCodes:
    def test_missing_file(self):
        assert main(["propagate", "no-such-file.txt"]) == 2

    def test_parse_error(self, tmp_path, capsys):
        p = tmp_path / "bad.txt"
        p.write_text("graph @g {\n  %x = f32[8 parameter(0)\n  return %x\n}")
        assert main(["propagate", str(p)]) == 2
        err = capsys.readouterr().err
        assert "line 2" in err          # provenance: line of the failure

    def test_duplicate_device_sharding(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("%x = f32[8] parameter(0), sharding={devices=[2]0,0}")
        assert main(["propagate", str(p)]) == 2

    def test_bare_instruction_accepted(self, tmp_path):
        p = tmp_path / "one.txt"
        p.write_text("%x = f32[8] parameter(0), sharding={devices=[2]0,1}")
        assert main(["propagate", str(p)]) == 0
