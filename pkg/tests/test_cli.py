import json
import os
import shutil
from pathlib import Path

import pytest

from kgcot.cli import build_parser, main

from conftest import FIXTURES

SNAPSHOTS = Path(__file__).parent / "snapshots"
SUBCOMMANDS = ("build-index", "run", "inspect", "stats")


@pytest.fixture
def fx(tmp_path):
    for name in ("graph.csv", "qa.jsonl", "rules.yaml", "config.yaml"):
        shutil.copy(FIXTURES / name, tmp_path / name)
    return tmp_path


def cli(*argv):
    return main([str(a) for a in argv])


def build(fx):
    return cli("build-index", "--config", fx / "config.yaml")


def run(fx, *extra):
    return cli("run", "--config", fx / "config.yaml", "--input", fx / "qa.jsonl", *extra)


def help_text(capsys, *argv):
    with pytest.raises(SystemExit) as exc:
        main(list(argv) + ["--help"])
    assert exc.value.code == 0
    return capsys.readouterr().out


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_snapshots(sub, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    text = help_text(capsys, sub)
    snap = SNAPSHOTS / f"help_{sub}.txt"
    if os.environ.get("KGCOT_UPDATE_SNAPSHOTS"):
        snap.parent.mkdir(exist_ok=True)
        snap.write_text(text)
    assert text == snap.read_text()


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_documents_every_flag(sub, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    text = help_text(capsys, sub)
    parser = build_parser()
    subparser = parser._subparsers._group_actions[0].choices[sub]
    for action in subparser._actions:
        for flag in action.option_strings:
            assert flag in text
        if action.help is None and action.option_strings != ["-h", "--help"]:
            pytest.fail(f"{sub}: {action.dest} has no help text")


def test_build_index_fixture(fx, capsys):
    assert build(fx) == 0
    out = capsys.readouterr().out
    assert "6 nodes, 5 edges, 6 vectors" in out
    assert (fx / "work" / "index.bin").is_file()


def test_build_index_missing_graph(fx, capsys):
    assert cli("build-index", "--config", fx / "config.yaml", "--graph", fx / "nope.csv") != 0
    assert "nope.csv" in capsys.readouterr().err


def test_build_index_dimension_mismatch(fx, capsys):
    rules = fx / "bad_rules.yaml"
    rules.write_text("version: 1\nembed:\n  dimension: 8\n  vectors:\n"
                     "    ataxia: [1, 0, 0, 0, 0, 0, 0, 0]\n"
                     "    brain: [1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]\n")
    assert cli("build-index", "--config", fx / "config.yaml", "--rules", rules) == 1
    err = capsys.readouterr().err
    assert "dimension" in err and "batch" in err
    assert not (fx / "work" / "index.bin").exists()


def test_run_fixture(fx, capsys):
    assert build(fx) == 0
    capsys.readouterr()
    assert run(fx) == 0
    out = capsys.readouterr().out
    assert "raw / generated / filtered: 12 / 10 / 8" in out
    assert out.splitlines()[0].split() == ["Datasets", "MedQA", "MedMCQA", "PubmedQA", "Huatuo", "Total"]
    outdir = fx / "work" / "out"
    assert len((outdir / "filtered.jsonl").read_text().splitlines()) == 8
    assert len((outdir / "audit.jsonl").read_text().splitlines()) == 12


def test_run_without_index_is_usage_error(fx, capsys):
    assert run(fx) == 2
    assert "build-index" in capsys.readouterr().err


def test_run_malformed_line_names_line(fx, capsys):
    assert build(fx) == 0
    lines = (fx / "qa.jsonl").read_text().splitlines()
    lines[2] = lines[2][:40]
    (fx / "bad.jsonl").write_text("\n".join(lines) + "\n")
    code = cli("run", "--config", fx / "config.yaml", "--input", fx / "bad.jsonl")
    assert code == 2
    assert "line 3" in capsys.readouterr().err
    assert not (fx / "work" / "out").exists()


def test_invalid_config_has_no_side_effects(fx, capsys):
    assert build(fx) == 0
    cache_before = sorted(p.name for p in (fx / "work" / "cache").rglob("*"))
    assert run(fx, "--tau", "1.5") == 2
    assert "tau" in capsys.readouterr().err
    assert not (fx / "work" / "out").exists() and not (fx / "work" / "checkpoint").exists()
    assert sorted(p.name for p in (fx / "work" / "cache").rglob("*")) == cache_before


def test_resume_is_byte_identical(fx):
    assert build(fx) == 0
    assert run(fx, "--output-dir", fx / "a") == 0
    # simulate an interrupted run: keep only a few checkpoint records
    records = sorted((fx / "work" / "checkpoint" / "records").glob("*.json"))
    for p in records[5:]:
        p.unlink()
    assert run(fx, "--output-dir", fx / "b", "--resume") == 0
    for name in ("filtered.jsonl", "audit.jsonl", "stats.json", "stats.txt"):
        assert (fx / "a" / name).read_bytes() == (fx / "b" / name).read_bytes()


def test_inspect_views(fx, capsys):
    assert build(fx) == 0 and run(fx) == 0
    capsys.readouterr()
    assert cli("inspect", "fx-01", "--config", fx / "config.yaml") == 0
    out = capsys.readouterr().out
    assert "difficulty walking —phenotype of→ ataxia —phenotype of→ medulloblastoma" in out
    assert "answer: B. Medulloblastoma" in out
    assert "[similarity, 0.870]" in out
    assert "verdict:" in out and "(matched)" in out

    assert cli("inspect", "paths", "fx-01", "--config", fx / "config.yaml") == 0
    assert capsys.readouterr().out.startswith("paths:")
    assert cli("inspect", "mapping", "fx-02", "--config", fx / "config.yaml") == 0
    assert "llm_selected" in capsys.readouterr().out
    assert cli("inspect", "stats", "--config", fx / "config.yaml") == 0
    assert "Quality Filtered" in capsys.readouterr().out
    assert cli("inspect", "fx-11", "--config", fx / "config.yaml") == 0
    assert "excluded (no-entities)" in capsys.readouterr().out


def test_inspect_unknown_id(fx, capsys):
    assert build(fx) == 0 and run(fx) == 0
    assert cli("inspect", "fx-99", "--config", fx / "config.yaml") == 1
    assert cli("inspect", "paths", "--config", fx / "config.yaml") == 2


def test_inspect_no_paths_record(tmp_path, capsys):
    rec = {"id": "n1", "source": "medqa", "question": "Q?", "answer": {"text": "island"},
           "status": "excluded", "reason": "no-paths", "detail": None,
           "mentions": [], "mappings": [
               {"surface": "ataxia", "origin": "question", "ordinal": 0, "node": 1, "stage": "exact",
                "score": None, "name": "ataxia"},
               {"surface": "island", "origin": "answer", "ordinal": 0, "node": 6, "stage": "exact",
                "score": None, "name": "island"}],
           "bundle": {"pairs": [{"question": 1, "answer": 6, "status": "disconnected", "raw_count": 0,
                                 "truncated": False, "fallback": False, "paths": []}]},
           "reasoning": None, "verdict": None}
    (tmp_path / "audit.jsonl").write_text(json.dumps(rec) + "\n")
    assert cli("inspect", "n1", "--audit", tmp_path / "audit.jsonl") == 0
    out = capsys.readouterr().out
    assert "excluded (no-paths)" in out and "ataxia x island: disconnected" in out
    assert "reasoning:\n  (none)" in out


def test_stats_consistency(fx, capsys):
    assert build(fx) == 0 and run(fx) == 0
    outdir = fx / "work" / "out"
    assert cli("stats", "--config", fx / "config.yaml") == 0
    lines = (outdir / "audit.jsonl").read_text().splitlines()
    (outdir / "audit.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    capsys.readouterr()
    assert cli("stats", "--config", fx / "config.yaml") == 1
    assert "MISMATCH" in capsys.readouterr().err


def test_stats_empty_audit(tmp_path, capsys):
    (tmp_path / "audit.jsonl").write_text("")
    assert cli("stats", "--audit", tmp_path / "audit.jsonl") == 0
    out = capsys.readouterr().out
    assert out.splitlines()[1].split() == ["Raw", "0"]


def test_stats_unreadable_audit(tmp_path, capsys):
    assert cli("stats", "--audit", tmp_path / "missing.jsonl") == 1
