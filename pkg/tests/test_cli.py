import csv
import json
from collections import Counter

import pytest

from copyforge.cli import EXIT_ERROR, EXIT_OK, EXIT_USAGE, dispatch
from copyforge.config import RunConfig, load_run_config
from copyforge.d2t_synth import RARE_NAME_MIN_FREQ, read_games_jsonl
from copyforge.pipeline import build_corpus_vocab
from copyforge.vocab import read_pairs


def read_csv(path):
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


class TestDispatch:
    """Test exit codes"""

    def test_unknown_command(self):
        assert dispatch(["paint"]) == EXIT_USAGE

    def test_missing_required_option(self):
        assert dispatch(["evaluate"]) == EXIT_USAGE

    def test_malformed_set(self, tmp_path):
        assert dispatch(["train", "--set", "lr", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_unknown_config_key_is_data_error(self, tmp_path):
        assert dispatch(["train", "--set", "learning_rate=0.1", "--out", str(tmp_path)]) == EXIT_ERROR

    def test_missing_training_corpus(self, tmp_path):
        assert dispatch(["train", "--out", str(tmp_path / "run")]) == EXIT_ERROR

    def test_help(self):
        assert dispatch(["--help"]) == EXIT_OK


class TestGradCheckCommand:
    """Test the gradient-check command"""

    def test_passes_and_writes_report(self, tmp_path, capsys):
        out = tmp_path / "grad.csv"
        code = dispatch(["grad-check", "--seed", "7", "--mode", "mixture", "--coords", "20", "--output", str(out)])
        assert code == EXIT_OK
        assert "mixture: PASS" in capsys.readouterr().out
        rows = read_csv(out)
        assert [r["mode"] for r in rows] == ["mixture"]
        assert rows[0]["n_checked"] == "20"

    def test_failure_exit_code(self):
        assert dispatch(["grad-check", "--mode", "force_copy", "--coords", "50", "--tol", "0"]) == EXIT_ERROR


class TestDataToTextCommands:
    """Test d2t-gen and d2t-eval"""

    def test_generate_and_score_gold(self, tmp_path):
        out = tmp_path / "d2t"
        assert dispatch(["d2t-gen", "--seed", "3", "--games", "20", "--out", str(out)]) == EXIT_OK
        for name in ("train", "valid", "test"):
            assert (out / f"{name}.jsonl").exists()
            assert (out / f"{name}_games.jsonl").exists()
        assert len((out / "train.jsonl").read_text(encoding="utf-8").splitlines()) == 16
        assert "block_ngram=10" in (out / "run.cfg").read_text(encoding="utf-8")

        games = read_games_jsonl(out / "test_games.jsonl")
        gen_path = tmp_path / "gen.jsonl"
        gen_path.write_text(
            "".join(
                json.dumps({"src": g.linearized_src, "tgt": g.summary, "hyp": g.summary, "avg_p_copy": 0.5}) + "\n"
                for g in games
            ),
            encoding="utf-8",
        )
        report = tmp_path / "d2t.csv"
        args = ["d2t-eval", "--generations", str(gen_path), "--games", str(out / "test_games.jsonl")]
        assert dispatch(args + ["--output", str(report)]) == EXIT_OK
        row = read_csv(report)[0]
        assert float(row["rg_precision"]) == 100.0
        assert float(row["co"]) == 100.0

    def test_summarization_task(self, tmp_path):
        out = tmp_path / "sum"
        assert dispatch(["d2t-gen", "--task", "summarization", "--games", "10", "--out", str(out)]) == EXIT_OK
        assert len((out / "train.jsonl").read_text(encoding="utf-8").splitlines()) == 8
        assert not (out / "train_games.jsonl").exists()
        assert "length_norm=true" in (out / "run.cfg").read_text(encoding="utf-8")

    def test_rare_names_out_of_vocabulary_under_defaults(self, tmp_path):
        out = tmp_path / "d2t"
        assert dispatch(["d2t-gen", "--games", "300", "--out", str(out)]) == EXIT_OK
        cfg = load_run_config(out / "run.cfg")
        assert cfg.data.min_freq == RARE_NAME_MIN_FREQ
        vocab = build_corpus_vocab(list(read_pairs(cfg.data.train_path)), cfg.data)
        games = read_games_jsonl(out / "train_games.jsonl")
        per_game = Counter(name for g in games for name in {r.entity for r in g.records})
        rare = [name for name, n in per_game.items() if n == 1]
        assert rare
        assert all(name not in vocab for name in rare)

    def test_mismatched_generations(self, tmp_path):
        out = tmp_path / "d2t"
        dispatch(["d2t-gen", "--seed", "3", "--games", "20", "--out", str(out)])
        gen_path = tmp_path / "gen.jsonl"
        gen_path.write_text("", encoding="utf-8")
        code = dispatch(["d2t-eval", "--generations", str(gen_path), "--games", str(out / "test_games.jsonl")])
        assert code == EXIT_ERROR


@pytest.mark.integration
class TestExperimentPipeline:
    """Test train, generate, evaluate and report end to end"""

    def test_full_cycle(self, tmp_path, tiny_run_config):
        config_dir = tmp_path / "cfg"
        tiny_run_config.write(config_dir)
        run_dir = tmp_path / "runs" / "force_copy"
        code = dispatch(
            ["train", "--config", str(config_dir / "run.cfg"), "--mode", "force_copy", "--out", str(run_dir)]
        )
        assert code == EXIT_OK
        assert (run_dir / "best.ckpt").exists()

        gen_path = run_dir / "generations.jsonl"
        valid = tiny_run_config.data.valid_path
        code = dispatch(
            ["generate", "--run", str(run_dir), "--input", valid, "--output", str(gen_path), "--beam", "2"]
        )
        assert code == EXIT_OK
        lines = gen_path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 4
        assert {"src", "tgt", "hyp", "avg_p_copy"} <= set(json.loads(lines[0]))

        assert dispatch(["evaluate", "--input", str(gen_path)]) == EXIT_OK
        assert (run_dir / "metrics.csv").exists()

        report = tmp_path / "report.csv"
        assert dispatch(["report", "--runs", str(tmp_path / "runs"), "--output", str(report)]) == EXIT_OK
        rows = read_csv(report)
        assert [r["run"] for r in rows] == ["force_copy"]
        assert rows[0]["mode"] == "force_copy"
        assert rows[0]["val_loss"] != ""

    def test_rerun_writes_identical_history(self, tmp_path, tiny_run_config):
        config_dir = tmp_path / "cfg"
        tiny_run_config.write(config_dir)
        for name in ("a", "b"):
            assert dispatch(["train", "--config", str(config_dir / "run.cfg"), "--out", str(tmp_path / name)]) == 0
        assert (tmp_path / "a" / "train.csv").read_bytes() == (tmp_path / "b" / "train.csv").read_bytes()


class TestConfigEcho:
    """Test that report-writing commands leave the config beside their outputs"""

    def write_generations(self, path):
        record = {"src": "a b c", "tgt": "a b", "hyp": "a c", "avg_p_copy": 0.5}
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        return path

    def test_evaluate_reuses_run_config(self, tmp_path):
        run_dir = tmp_path / "run"
        run_dir.mkdir()
        RunConfig.from_flat({"beam_size": "3", "seed": "9"}).write(run_dir)
        gen_path = self.write_generations(run_dir / "generations.jsonl")
        out = tmp_path / "reports" / "metrics.csv"
        assert dispatch(["evaluate", "--input", str(gen_path), "--output", str(out)]) == EXIT_OK
        echoed = (out.parent / "run.cfg").read_text(encoding="utf-8")
        assert echoed == (run_dir / "run.cfg").read_text(encoding="utf-8")
        assert (out.parent / "run.json").exists()

    def test_evaluate_without_run_config(self, tmp_path):
        gen_path = self.write_generations(tmp_path / "generations.jsonl")
        assert dispatch(["evaluate", "--input", str(gen_path)]) == EXIT_OK
        assert (tmp_path / "metrics.csv").exists()
        assert load_run_config(tmp_path / "run.cfg") == load_run_config(None)

    def test_grad_check_and_report(self, tmp_path):
        out = tmp_path / "grad" / "grad.csv"
        assert dispatch(["grad-check", "--mode", "mixture", "--coords", "5", "--output", str(out)]) == EXIT_OK
        assert (out.parent / "run.cfg").exists()
        assert (out.parent / "run.json").exists()

        runs = tmp_path / "runs"
        runs.mkdir()
        assert dispatch(["report", "--runs", str(runs)]) == EXIT_OK
        assert (runs / "report.csv").exists()
        assert (runs / "run.cfg").exists()

    def test_d2t_eval(self, tmp_path):
        out = tmp_path / "d2t"
        dispatch(["d2t-gen", "--seed", "3", "--games", "20", "--out", str(out)])
        games = read_games_jsonl(out / "test_games.jsonl")
        gen_dir = tmp_path / "gen"
        gen_dir.mkdir()
        gen_path = gen_dir / "gen.jsonl"
        lines = [
            json.dumps({"src": g.linearized_src, "tgt": g.summary, "hyp": g.summary, "avg_p_copy": 0.5})
            for g in games
        ]
        gen_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        assert dispatch(["d2t-eval", "--generations", str(gen_path), "--games", str(out / "test_games.jsonl")]) == 0
        assert (gen_dir / "d2t.csv").exists()
        assert (gen_dir / "run.cfg").exists()
