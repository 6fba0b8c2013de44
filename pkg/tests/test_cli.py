import hashlib
import shutil

import pytest

from causal_sfda.cli import main
from causal_sfda.config import read_descriptor
from causal_sfda.evaluation import read_results, reference_results_path, write_results


def digest_tree(root):
    return {p.relative_to(root): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_synth_writes_manifests_and_descriptor(synth_dir):
    for name in ("source.manifest", "target.manifest", "scenario.ini", "config.ini"):
        assert (synth_dir / name).is_file()


def test_synth_is_byte_reproducible(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a"), "--seed", "3", "--samples-per-class", "20"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--seed", "3", "--samples-per-class", "20"]) == 0
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")


def test_synth_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CAUSAL_SFDA_SEED", "3")
    assert main(["synth", "--out", str(tmp_path / "env"), "--samples-per-class", "20"]) == 0
    assert main(["synth", "--out", str(tmp_path / "flag"), "--seed", "3", "--samples-per-class", "20"]) == 0
    assert digest_tree(tmp_path / "env") == digest_tree(tmp_path / "flag")
    assert read_descriptor(tmp_path / "env" / "scenario.ini").seed == 3


def test_synth_partial_relation(tmp_path):
    out = tmp_path / "p"
    assert main(["synth", "--out", str(out), "--setting", "partial", "--target-classes", "0,1",
                 "--samples-per-class", "20"]) == 0
    d = read_descriptor(out / "scenario.ini")
    assert set(d.scenario.source_classes) > set(d.scenario.target_classes) == {0, 1}


def test_synth_invalid_input(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), "--setting", "partial", "--target-classes", "0,9"]) == 2
    assert main(["synth", "--out", str(tmp_path / "y"), "--n-classes", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_adapt_missing_manifest_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[meta]\nformat = causal-sfda-config\nversion = 1\n[scenario]\nsource_manifest = gone.manifest\n")
    assert main(["adapt", "--config", str(cfg)]) == 2
    assert "gone.manifest" in capsys.readouterr().err


def test_adapt_bad_config(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[meta]\nformat = causal-sfda-config\nversion = 1\n[adapt]\nepochs = lots\n")
    assert main(["adapt", "--config", str(cfg)]) == 2


def test_adapt_run_and_rerun(synth_dir, tmp_path, capsys):
    before = digest_tree(synth_dir)
    assert main(["adapt", "--config", str(synth_dir / "config.ini"), "--out", str(tmp_path / "r1")]) == 0
    assert main(["adapt", "--config", str(synth_dir / "config.ini"), "--out", str(tmp_path / "r2")]) == 0
    assert digest_tree(synth_dir) == before  # inputs untouched
    for name in ("losses.csv", "metrics.csv", "summary.txt", "checkpoint.bin", "source_checkpoint.bin",
                 "results.tsv", "evaluation.csv", "pseudo_labels.csv", "label_audit.txt", "config.ini"):
        assert (tmp_path / "r1" / name).is_file()
    assert (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert "optimization = 0" in (tmp_path / "r1" / "label_audit.txt").read_text()
    res = read_results(tmp_path / "r1" / "results.tsv")
    assert res.records[0][:2] == ("CausalDA", "closed") and res.metadata["open_threshold"] == "0.5"

    capsys.readouterr()
    assert main(["eval", str(tmp_path / "r1"), "--out", str(tmp_path / "eval.csv")]) == 0
    assert "accuracy" in capsys.readouterr().out
    assert (tmp_path / "eval.csv").read_text().startswith("run,setting,metric,source,adapted")


def test_eval_needs_runs():
    assert main(["eval"]) == 2


def test_verify_counts(capsys, tmp_path):
    assert main(["verify", "--trials", "10", "--grad-trials", "1", "--dump", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("lemma1: 10/10, theorem1: 10/10, grad: all < 1e-4")
    assert {p.name for p in tmp_path.iterdir()} == {"lemma1.csv", "theorem1.csv", "grad.csv"}


def test_verify_detects_injected_fault(capsys):
    assert main(["verify", "--trials", "5", "--grad-trials", "1", "--inject-fault", "vmi"]) == 1
    assert "FAIL grad vmi" in capsys.readouterr().out


def test_report_reference(capsys, tmp_path):
    assert main(["report", str(reference_results_path()), "--out", str(tmp_path / "u.csv")]) == 0
    out = capsys.readouterr().out
    assert "max-probability rejection" in out and "CausalDA" in out
    assert (tmp_path / "u.csv").read_text().splitlines()[0].startswith("method,H_wrg")


def test_report_merges_files(tmp_path, capsys):
    write_results(tmp_path / "a.tsv", [("A", "closed", 50.0), ("A", "open", 60.0)])
    write_results(tmp_path / "b.tsv", [("B", "closed", 55.0), ("B", "open", 40.0)])
    assert main(["report", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "\nA " in out and "\nB " in out and "H_all" in out


def test_report_input_errors(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(empty)]) == 2
    bad = tmp_path / "bad.tsv"
    shutil.copy(reference_results_path(), bad)
    bad.write_text(bad.read_text() + "ProDe\topen\n")
    assert main(["report", str(bad)]) == 2
    assert f"{bad}:22:" in capsys.readouterr().err
    assert main(["report", str(tmp_path / "missing.tsv")]) == 2


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
