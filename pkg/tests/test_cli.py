import json

import pytest

from tadakv.cli import cli_main
from tadakv.search import report_rows_from_csv


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture
def wide_config(tmp_path):
    return write_json(
        tmp_path / "wide.json",
        {
            "num_layers": 32,
            "num_q_heads": 32,
            "num_kv_heads": 32,
            "head_dim": 128,
            "model_dim": 4096,
            "vocab_size": 256,
            "residual_length": 128,
            "plan": [4],
        },
    )


class TestMemoryCommand:
    def test_uniform_four_bit_headline(self, wide_config, capsys):
        assert cli_main(["memory", "--config", wide_config, "--plan", "uniform:4"]) == 0
        out = capsys.readouterr().out
        assert "memory_ratio=0.296875" in out

    def test_mixed_plan(self, wide_config, tmp_path, capsys):
        plan_file = write_json(tmp_path / "plan.json", [4] * 24 + [2] * 8)
        assert cli_main(["memory", "--config", wide_config, "--plan", plan_file]) == 0
        out = capsys.readouterr().out
        assert "memory_ratio=0.265625" in out
        assert "mean_bits=3.5" in out

    def test_default_config_runs(self, capsys):
        assert cli_main(["memory"]) == 0
        assert "memory_ratio=" in capsys.readouterr().out


class TestGenerateCommand:
    def test_byte_identical_outputs(self, tmp_path, capsys):
        args = [
            "generate",
            "--seed",
            "5",
            "--prompt-ids",
            "1,2,3",
            "--max-new",
            "12",
        ]
        out_a = tmp_path / "a.txt"
        out_b = tmp_path / "b.txt"
        assert cli_main(args + ["--out", str(out_a)]) == 0
        assert cli_main(args + ["--out", str(out_b)]) == 0
        capsys.readouterr()
        assert out_a.read_bytes() == out_b.read_bytes()

    def test_prompt_echoed_in_output(self, capsys):
        assert cli_main(["generate", "--prompt-ids", "7,9", "--max-new", "4"]) == 0
        out = capsys.readouterr().out.strip()
        ids = [int(t) for t in out.split(",")]
        assert ids[:2] == [7, 9]
        assert len(ids) == 6

    def test_block_size_does_not_change_output(self, capsys):
        outputs = set()
        for block in ("1", "3", "64"):
            assert cli_main(["generate", "--prompt-ids", "4,5", "--max-new", "10", "--block", block]) == 0
            outputs.add(capsys.readouterr().out)
        assert len(outputs) == 1

    def test_bad_prompt_is_usage_error(self, capsys):
        assert cli_main(["generate", "--prompt-ids", "1,x"]) == 2
        err = capsys.readouterr().err
        assert json.loads(err.strip())["type"] == "DataError"

    def test_weight_container_matches_seeded_model(self, tmp_path, capsys):
        from tadakv.model import parse_config, random_model, save_weights

        cfg, vocab, _, max_len = parse_config({})
        model = random_model(cfg, vocab, seed=9, max_seq_len=max_len)
        weights_path = tmp_path / "weights.tadaw"
        save_weights(weights_path, model.weights)

        args = ["generate", "--prompt-ids", "3,1,4", "--max-new", "8"]
        assert cli_main(args + ["--seed", "9"]) == 0
        from_seed = capsys.readouterr().out
        assert cli_main(args + ["--model", str(weights_path)]) == 0
        from_file = capsys.readouterr().out
        assert from_seed == from_file


class TestSearchCommand:
    def test_singleton_four_bit_pool(self, tmp_path, capsys):
        plan_out = tmp_path / "plan.json"
        code = cli_main(
            [
                "search",
                "--candidates",
                "1",
                "--bits",
                "4",
                "--seed",
                "3",
                "--plan-out",
                str(plan_out),
            ]
        )
        assert code == 0
        capsys.readouterr()
        assert json.loads(plan_out.read_text()) == [4, 4, 4, 4]

    def test_reports_written_and_parseable(self, tmp_path, capsys):
        report_json = tmp_path / "report.json"
        report_csv = tmp_path / "report.csv"
        calib = write_json(tmp_path / "calib.json", [[1, 2, 3, 4, 5, 6], [9, 8, 7, 6, 5]])
        code = cli_main(
            [
                "search",
                "--candidates",
                "3",
                "--seed",
                "11",
                "--calib",
                calib,
                "--out",
                str(report_json),
                "--csv",
                str(report_csv),
            ]
        )
        assert code == 0
        capsys.readouterr()
        payload = json.loads(report_json.read_text())
        assert len(payload["candidates"]) == 6  # 3 anchors + 3 samples
        rows = report_rows_from_csv(report_csv.read_text())
        assert [r["candidate_index"] for r in rows] == list(range(6))

    def test_seeded_reports_byte_identical(self, tmp_path, capsys):
        paths = []
        for name in ("r1.json", "r2.json"):
            out = tmp_path / name
            assert (
                cli_main(["search", "--candidates", "2", "--seed", "21", "--out", str(out)]) == 0
            )
            paths.append(out)
        capsys.readouterr()
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_infeasible_budget_fails_with_error_line(self, capsys):
        code = cli_main(["search", "--candidates", "2", "--budget", "0.05", "--seed", "2"])
        assert code == 1
        err = capsys.readouterr().err.strip()
        assert json.loads(err)["type"] == "BudgetInfeasibleError"


class TestAblateCommand:
    def test_csv_on_stdout(self, capsys):
        assert cli_main(["ablate", "--seed", "4", "--bits", "4"]) == 0
        out = capsys.readouterr().out
        header = out.splitlines()[0]
        assert header == "layer_idx,method,bits,frobenius_k,frobenius_v"
        assert "tada-uniform" in out
        assert "direct" in out

    def test_with_searched_plan_file(self, tmp_path, capsys):
        plan_file = write_json(tmp_path / "plan.json", [2, 4, 4, 8])
        out_file = tmp_path / "ablate.csv"
        assert cli_main(["ablate", "--plan", plan_file, "--out", str(out_file)]) == 0
        capsys.readouterr()
        text = out_file.read_text()
        assert "tada," in text or ",tada," in text


class TestUsageErrors:
    def test_unknown_flag_exits_two(self, capsys):
        assert cli_main(["memory", "--bogus"]) == 2
        capsys.readouterr()

    def test_unknown_subcommand_exits_two(self, capsys):
        assert cli_main(["frobnicate"]) == 2
        capsys.readouterr()

    def test_malformed_config_exits_two(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert cli_main(["memory", "--config", str(bad)]) == 2
        err = capsys.readouterr().err.strip()
        assert json.loads(err)["type"] == "ConfigError"

    def test_unknown_config_key_exits_two(self, tmp_path, capsys):
        cfg = write_json(tmp_path / "cfg.json", {"layers": 4})
        assert cli_main(["memory", "--config", cfg]) == 2
        capsys.readouterr()

    def test_missing_plan_file_exits_two(self, capsys):
        assert cli_main(["memory", "--plan", "/does/not/exist.json"]) == 2
        capsys.readouterr()


class TestSelftest:
    def test_prints_pass_lines_and_succeeds(self, capsys):
        assert cli_main(["selftest"]) == 0
        out = capsys.readouterr().out
        lines = [line for line in out.splitlines() if line]
        assert lines
        assert all(line.startswith("PASS ") for line in lines)
