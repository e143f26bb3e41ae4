"""CLI contract tests: subcommands, exit codes, output files."""

import json
from pathlib import Path

from kgt5lab.cli import main
from kgt5lab.harness import parse_report_csv

FIXTURES = Path(__file__).parent / "fixtures"

TINY_CONFIG = {
    "kg_spec": {"n_people": 12, "n_cities": 4, "n_countries": 2,
                "occupations": ["weaver", "smith"], "seed": 0},
    "per_category": {"hop1": 8, "context": 8, "hop2": 8},
    "split_ratios": [0.75, 0.25],
    "model": {"vocab_size": 1, "d_model": 16, "n_layers": 1, "n_heads": 2,
              "d_ff": 24, "dropout_p": 0.1, "max_len": 48, "d_kg": 8},
    "transe": {"epochs": 5, "batch_size": 16},
    "pretrain": {"max_steps": 6, "batch_size": 4},
    "finetune": {"max_steps": 8, "batch_size": 4},
    "decode_steps": 3,
}


def write_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


class TestUsageErrors:
    def test_unknown_subcommand_exits_1(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["gen-kg", "--out", "x", "--frobnicate"]) == 1

    def test_no_args_exits_1(self):
        assert main([]) == 1

    def test_missing_required_flag(self):
        assert main(["gen-qa", "--out", "somewhere"]) == 1


class TestGenPipeline:
    def test_gen_kg_writes_outputs(self, tmp_path, capsys):
        out = tmp_path / "kg"
        code = main(["gen-kg", "--people", "10", "--cities", "4",
                     "--countries", "2", "--seed", "3", "--out", str(out)])
        assert code == 0
        assert (out / "kg.tsv").exists()
        assert (out / "corpus.txt").exists()
        assert (out / "manifest.json").exists()

    def test_gen_qa_then_train_embed(self, tmp_path):
        kg_dir = tmp_path / "kg"
        assert main(["gen-kg", "--people", "10", "--cities", "4",
                     "--countries", "2", "--out", str(kg_dir)]) == 0
        qa_dir = tmp_path / "qa"
        assert main(["gen-qa", "--kg", str(kg_dir / "kg.tsv"), "--hop1", "5",
                     "--context", "5", "--hop2", "5", "--out", str(qa_dir)]) == 0
        assert (qa_dir / "qa.jsonl").exists()
        assert len((qa_dir / "qa.jsonl").read_text().splitlines()) == 15
        emb_dir = tmp_path / "emb"
        assert main(["train-embed", "--kg", str(kg_dir / "kg.tsv"), "--dim", "8",
                     "--epochs", "3", "--out", str(emb_dir)]) == 0
        assert (emb_dir / "embeddings.kge").exists()

    def test_gen_qa_infeasible_count_exits_1(self, tmp_path, capsys):
        kg_dir = tmp_path / "kg"
        main(["gen-kg", "--people", "3", "--cities", "2", "--countries", "2",
              "--out", str(kg_dir)])
        code = main(["gen-qa", "--kg", str(kg_dir / "kg.tsv"), "--hop1", "50",
                     "--context", "0", "--hop2", "0", "--out", str(tmp_path / "qa")])
        assert code == 1


class TestTrainEvalPipeline:
    def test_pretrain_finetune_eval(self, tmp_path):
        kg_dir, qa_dir = tmp_path / "kg", tmp_path / "qa"
        main(["gen-kg", "--people", "12", "--cities", "4", "--countries", "2",
              "--out", str(kg_dir)])
        main(["gen-qa", "--kg", str(kg_dir / "kg.tsv"), "--hop1", "6",
              "--context", "6", "--hop2", "6", "--out", str(qa_dir)])
        emb_dir = tmp_path / "emb"
        main(["train-embed", "--kg", str(kg_dir / "kg.tsv"), "--dim", "8",
              "--epochs", "3", "--out", str(emb_dir)])
        pre_dir = tmp_path / "pre"
        code = main(["pretrain", "--corpus", str(kg_dir / "corpus.txt"),
                     "--qa", str(qa_dir / "qa.jsonl"), "--kg", str(kg_dir / "kg.tsv"),
                     "--steps", "5", "--dim", "8", "--out", str(pre_dir)])
        assert code == 0
        ft_dir = tmp_path / "ft"
        code = main(["finetune", "--checkpoint", str(pre_dir / "model.ckpt"),
                     "--qa", str(qa_dir / "qa.jsonl"), "--kg", str(kg_dir / "kg.tsv"),
                     "--embeddings", str(emb_dir / "embeddings.kge"),
                     "--variant", "both", "--steps", "6", "--out", str(ft_dir)])
        assert code == 0
        assert (ft_dir / "trace.csv").exists()
        ev_dir = tmp_path / "ev"
        code = main(["eval", "--checkpoint", str(ft_dir / "model.ckpt"),
                     "--qa", str(qa_dir / "qa.jsonl"), "--kg", str(kg_dir / "kg.tsv"),
                     "--variant", "both", "--out", str(ev_dir)])
        assert code == 0
        rows = parse_report_csv(ev_dir / "metrics.csv")
        assert len(rows) == 1


class TestExperimentCommands:
    def test_ablate_report_count_and_files(self, tmp_path):
        out = tmp_path / "ab"
        code = main(["ablate", "--seeds", "1,2", "--lambda", "-0.1",
                     "--config", write_config(tmp_path), "--out", str(out)])
        assert code == 0
        rows = parse_report_csv(out / "metrics.csv")
        assert len(rows) == 8  # 2 seeds x 4 variants
        assert (out / "report.md").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["experiment"] == "ablation"
        assert manifest["seeds"] == [1, 2]

    def test_seed_range_syntax(self, tmp_path):
        out = tmp_path / "ab2"
        code = main(["ablate", "--seeds", "1..3",
                     "--config", write_config(tmp_path), "--out", str(out)])
        assert code == 0
        assert len(parse_report_csv(out / "metrics.csv")) == 12

    def test_scale_sweep_counts(self, tmp_path):
        out = tmp_path / "sw"
        code = main(["scale-sweep", "--seeds", "1,2", "--fractions", "0.5,1.0",
                     "--config", write_config(tmp_path), "--out", str(out)])
        assert code == 0
        assert len(parse_report_csv(out / "metrics.csv")) == 4

    def test_report_rerender(self, tmp_path):
        out = tmp_path / "ab3"
        main(["ablate", "--seeds", "1", "--config", write_config(tmp_path),
              "--out", str(out)])
        md = tmp_path / "again.md"
        assert main(["report", "--metrics", str(out / "metrics.csv"),
                     "--format", "markdown", "--out", str(md)]) == 0
        assert md.exists()


class TestIngestSquadCommand:
    def test_valid_fixture_exit_0(self, capsys):
        code = main(["ingest-squad", "--path",
                     str(FIXTURES / "squad_v11_fixture.json")])
        assert code == 0
        assert "3 examples" in capsys.readouterr().out

    def test_offset_error_exit_1(self, tmp_path, capsys):
        doc = json.loads((FIXTURES / "squad_v11_fixture.json").read_text())
        doc["data"][0]["paragraphs"][0]["qas"][0]["answers"][0]["answer_start"] = 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["ingest-squad", "--path", str(bad)]) == 1

    def test_missing_file_exit_2(self):
        assert main(["ingest-squad", "--path", "/nonexistent/squad.json"]) == 2
