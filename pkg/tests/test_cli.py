import json
import re
from pathlib import Path

import pytest

from fedcollm.cli import main
from fedcollm.config import ExperimentConfig, canonical_json, load_config
from fedcollm.errors import ConfigError


def tiny_config_dict(out_dir, **extra):
    cfg = {
        "seed": 321,
        "out_dir": str(out_dir),
        "clients": 2,
        "rounds": 1,
        "local_epochs": 1,
        "distill_steps": 1,
        "distill_batch_size": 2,
        "batch_size": 2,
        "slm": {"n_layers": 1, "d_model": 16, "n_heads": 2, "context_len": 32},
        "llm": {"n_layers": 1, "d_model": 24, "n_heads": 2, "context_len": 32},
        "slm_lora": {"rank": 2, "alpha": 4.0},
        "llm_lora": {"rank": 2, "alpha": 4.0},
        "data": {"n_docs": 60},
        "eval": {"mcq_n": 4},
    }
    cfg.update(extra)
    return cfg


def write_config(tmp_path, name="config.json", **extra):
    out_dir = Path(extra.pop("out_dir", tmp_path / "run"))
    cfg = tiny_config_dict(out_dir, **extra)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path, out_dir


class TestConfigLoading:
    def test_defaults_validate(self):
        ExperimentConfig().validate()

    def test_flag_overrides_beat_file(self, tmp_path):
        path, _ = write_config(tmp_path)
        cfg = load_config(str(path), {"seed": 999, "transport": "secure"})
        assert cfg.seed == 999
        assert cfg.transport == "secure"
        assert cfg.clients == 2  # from file

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"no_such_field": 1}')
        with pytest.raises(ConfigError, match="no_such_field"):
            load_config(str(path))

    def test_invalid_values_name_fields(self):
        cfg = ExperimentConfig()
        cfg.lr_theta = -1.0
        cfg.data.beta = 0.0
        with pytest.raises(ConfigError) as err:
            cfg.validate()
        assert "lr_theta" in str(err.value)
        assert "data.beta" in str(err.value)

    def test_canonical_json_is_stable(self):
        assert canonical_json(ExperimentConfig()) == canonical_json(ExperimentConfig())


class TestCliRuns:
    def test_fedcollm_writes_run_directory(self, tmp_path, capsys):
        path, out_dir = write_config(tmp_path)
        assert main(["fedcollm", "--config", str(path)]) == 0
        for name in ("config.json", "metrics.jsonl", "transcripts.jsonl",
                     "eval_report.json"):
            assert (out_dir / name).exists(), name
        assert (out_dir / "checkpoints" / "slm_adapters.fclm").exists()
        assert (out_dir / "checkpoints" / "llm_adapters.fclm").exists()
        report = json.loads(capsys.readouterr().out)
        assert report["method"] == "fedcollm"
        assert report["slm"]["perplexity"] > 0

    def test_zero_rounds_is_eval_only(self, tmp_path, capsys):
        path, out_dir = write_config(tmp_path, rounds=0)
        assert main(["fedcollm", "--config", str(path)]) == 0
        metrics = [json.loads(l) for l in (out_dir / "metrics.jsonl").read_text().splitlines()]
        assert {m["phase"] for m in metrics} == {"eval"}
        assert (out_dir / "transcripts.jsonl").read_text() == ""

    def test_invalid_config_nonzero_exit(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{"lr_theta": -5}')
        assert main(["fedcollm", "--config", str(path)]) == 1
        assert "lr_theta" in capsys.readouterr().err

    def test_baseline_reports_share_schema(self, tmp_path, capsys):
        import jsonschema

        schema = {
            "type": "object",
            "required": ["run_id", "method", "config_digest", "slm", "llm", "clients"],
            "properties": {
                "run_id": {"type": "string"},
                "method": {"type": "string"},
                "config_digest": {"type": "string"},
                "slm": {"$ref": "#/$defs/metrics"},
                "llm": {"$ref": "#/$defs/metrics"},
                "clients": {"type": "object"},
            },
            "$defs": {
                "metrics": {
                    "type": "object",
                    "required": ["perplexity", "mcq_accuracy"],
                    "properties": {
                        "perplexity": {"type": ["number", "null"]},
                        "mcq_accuracy": {"type": ["number", "null"]},
                    },
                }
            },
        }
        reports = {}
        for kind in ("zero_shot", "standalone", "fedavg", "centralized"):
            path, _ = write_config(tmp_path, name=f"{kind}.json",
                                   out_dir=str(tmp_path / kind))
            assert main(["baseline", kind, "--config", str(path)]) == 0
            reports[kind] = json.loads(capsys.readouterr().out)
        path, _ = write_config(tmp_path, name="full.json",
                               out_dir=str(tmp_path / "full"))
        assert main(["fedcollm", "--config", str(path)]) == 0
        reports["fedcollm"] = json.loads(capsys.readouterr().out)

        keysets = set()
        for kind, report in reports.items():
            jsonschema.validate(report, schema)
            keysets.add(tuple(sorted(report)))
        assert len(keysets) == 1

    def test_zero_shot_independent_of_training_hparams(self, tmp_path, capsys):
        path1, _ = write_config(tmp_path, name="a.json", out_dir=str(tmp_path / "a"))
        main(["baseline", "zero_shot", "--config", str(path1)])
        rep1 = json.loads(capsys.readouterr().out)

        path2, _ = write_config(tmp_path, name="b.json", out_dir=str(tmp_path / "b"),
                                rounds=3, lr_theta=0.4, distill_steps=5)
        main(["baseline", "zero_shot", "--config", str(path2)])
        rep2 = json.loads(capsys.readouterr().out)
        assert rep1["slm"] == rep2["slm"] and rep1["llm"] == rep2["llm"]

    def test_run_reproducible_from_its_snapshot(self, tmp_path, capsys):
        path, out_dir = write_config(tmp_path)
        assert main(["fedcollm", "--config", str(path)]) == 0
        first = json.loads(capsys.readouterr().out)
        snapshot = out_dir / "config.json"
        replay_out = tmp_path / "replay"
        assert main(["fedcollm", "--config", str(snapshot),
                     "--out", str(replay_out)]) == 0
        second = json.loads(capsys.readouterr().out)
        assert first == second

    def test_eval_subcommand_loads_checkpoints(self, tmp_path, capsys):
        path, out_dir = write_config(tmp_path)
        assert main(["fedcollm", "--config", str(path)]) == 0
        full_report = json.loads(capsys.readouterr().out)
        ckpt = out_dir / "checkpoints" / "slm_adapters.fclm"
        eval_out = tmp_path / "eval_run"
        assert main(["eval", "--config", str(path), "--out", str(eval_out),
                     "--slm-adapters", str(ckpt),
                     "--llm-adapters", str(out_dir / "checkpoints" / "llm_adapters.fclm"),
                     ]) == 0
        eval_report = json.loads(capsys.readouterr().out)
        assert eval_report["slm"]["perplexity"] == pytest.approx(
            full_report["slm"]["perplexity"], abs=1e-12)


class TestCommcost:
    def test_gpt2_preset_matches_hand_arithmetic(self, capsys):
        assert main(["commcost", "--preset", "gpt2"]) == 0
        out = capsys.readouterr().out
        assert "294912" in out
        pct = float(re.search(r"(\d+\.\d+)%", out).group(1))
        assert abs(pct - 0.238) < 0.01

    def test_opt_preset(self, capsys):
        assert main(["commcost", "--preset", "opt"]) == 0
        out = capsys.readouterr().out
        assert "3145728" in out
        pct = float(re.search(r"(\d+\.\d+)%", out).group(1))
        assert abs(pct - 0.239) < 0.01

    def test_rank_doubling_doubles_params(self, capsys):
        main(["commcost", "--n-layers", "4", "--d-model", "32", "--rank", "2",
              "--full-params", "1000000"])
        first = int(capsys.readouterr().out.split()[-4])
        main(["commcost", "--n-layers", "4", "--d-model", "32", "--rank", "4",
              "--full-params", "1000000"])
        second = int(capsys.readouterr().out.split()[-4])
        assert second == 2 * first

    def test_missing_dims_is_usage_error(self, capsys):
        assert main(["commcost", "--rank", "2"]) == 1


class TestReportCommand:
    def test_report_renders_figures_and_csv(self, tmp_path, capsys):
        path, out_dir = write_config(tmp_path)
        assert main(["fedcollm", "--config", str(path)]) == 0
        capsys.readouterr()
        assert main(["report", "--run", str(out_dir)]) == 0
        written = capsys.readouterr().out.splitlines()
        names = {Path(p).name for p in written}
        assert "metrics_summary.csv" in names
        assert "training_curves.png" in names
        assert "eval_metrics.png" in names
        csv_text = (out_dir / "metrics_summary.csv").read_text().splitlines()
        assert csv_text[0] == "round,phase,step,name,value"
        assert len(csv_text) > 3
