import filecmp
from pathlib import Path

import pytest

from vfbayes.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main


def _run(*argv):
    return main([str(a) for a in argv])


def _same_tree(a: Path, b: Path, pattern="**/*"):
    files = sorted(p.relative_to(a) for p in a.glob(pattern) if p.is_file() and p.name != "run.cfg")
    assert files
    for rel in files:
        assert filecmp.cmp(a / rel, b / rel, shallow=False), rel
    return files


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Model-1 toy pushed through every subcommand."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "sim"
    assert _run("simulate", "--model", 1, "--individuals", 3, "--visits", 4, "--seed", 7, "--out", data) == EXIT_OK
    run = root / "run"
    assert _run("fit-stage1", "--in", data / "data.csv", "--out", run, "--model", 1, "--iterations", 600,
                "--burn-in", 300, "--thin", 3, "--seed", 1, "--jobs", 1) == EXIT_OK
    assert _run("fit-stage2", "--in", run, "--iterations", 400, "--burn-in", 200, "--seed", 2) == EXIT_OK
    assert _run("recover-effects", "--in", run, "--draws", 20, "--iterations", 100, "--seed", 3) == EXIT_OK
    assert _run("evaluate", "--in", run, "--draws", 20, "--seed", 4) == EXIT_OK
    return root, data, run


def test_simulate_is_deterministic(pipeline, tmp_path, capsys):
    _, data, _ = pipeline
    assert _run("simulate", "--model", 1, "--individuals", 3, "--visits", 4, "--seed", 7, "--out", tmp_path) == 0
    assert (tmp_path / "data.csv").read_bytes() == (data / "data.csv").read_bytes()
    assert (tmp_path / "truth.txt").read_bytes() == (data / "truth.txt").read_bytes()
    assert "censoring rate" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path, capsys):
    assert _run("simulate", "--individuals", 0, "--visits", 3, "--seed", 1, "--out", tmp_path) == EXIT_USAGE
    assert _run("simulate", "--individuals", 2, "--visits", 3, "--out", tmp_path) == EXIT_USAGE  # no seed
    with pytest.raises(SystemExit) as exc:
        _run("fit-stage1", "--model", 4)
    assert exc.value.code == EXIT_USAGE
    capsys.readouterr()


def test_unwritable_output_exit_2(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert _run("simulate", "--individuals", 1, "--visits", 2, "--seed", 1, "--out", blocker / "sub") == EXIT_IO


def test_summary_schema_and_rhat(pipeline):
    _, _, run = pipeline
    text = (run / "stage2" / "summary.csv").read_text().splitlines()
    header = text[0].split(",")
    assert "rhat" in header
    rows = {line.split(",")[0]: line.split(",") for line in text[1:]}
    for name in ("beta0", "beta1", "sigma2"):
        assert name in rows
    k = header.index("rhat")
    assert all(r[k] not in ("", "nan") for r in rows.values())


def test_evaluation_outputs(pipeline):
    _, _, run = pipeline
    ppp = (run / "evaluation" / "ppp.csv").read_text().splitlines()[1:]
    values = [float(line.split(",")[1]) for line in ppp]
    assert values == sorted(values)
    assert "DIC" in (run / "evaluation" / "report.txt").read_text()


def test_evaluate_runs_recovery_when_absent(pipeline, tmp_path, capsys):
    root, data, run = pipeline
    import shutil
    other = tmp_path / "run"
    shutil.copytree(run, other, ignore=shutil.ignore_patterns("recovered", "evaluation"))
    # the copied run.cfg points at the original stage directories; drop those entries
    lines = [l for l in (other / "run.cfg").read_text().splitlines() if not l.startswith(("stage1_dir", "stage2_dir",
                                                                                          "recovered_dir"))]
    (other / "run.cfg").write_text("\n".join(lines) + "\n")
    assert _run("evaluate", "--in", other, "--draws", 10, "--seed", 4) == EXIT_OK
    assert "running recovery" in capsys.readouterr().err
    assert any((other / "recovered").iterdir())


def test_evaluate_rejects_model_mismatch(pipeline, capsys):
    _, _, run = pipeline
    assert _run("evaluate", "--in", run, "--model", 3, "--seed", 4) == EXIT_USAGE
    assert "model 1" in capsys.readouterr().err


def test_missing_pool_names_individual(pipeline, tmp_path, capsys):
    _, _, run = pipeline
    import shutil
    other = tmp_path / "run"
    shutil.copytree(run, other)
    lines = [l for l in (other / "run.cfg").read_text().splitlines() if not l.startswith(("stage1_dir", "stage2_dir"))]
    (other / "run.cfg").write_text("\n".join(lines) + "\n")
    victim = sorted((other / "stage1").glob("pool_*.csv"))[0]
    victim.unlink()
    assert _run("fit-stage2", "--in", other, "--iterations", 50, "--burn-in", 10, "--seed", 2) == EXIT_IO
    err = capsys.readouterr().err
    assert victim.stem.removeprefix("pool_") in err


def test_truncated_pool_warns_and_runs(pipeline, tmp_path, capsys):
    _, _, run = pipeline
    import shutil
    other = tmp_path / "run"
    shutil.copytree(run, other)
    lines = [l for l in (other / "run.cfg").read_text().splitlines() if not l.startswith(("stage1_dir", "stage2_dir"))]
    (other / "run.cfg").write_text("\n".join(lines) + "\n")
    victim = sorted((other / "stage1").glob("pool_*.csv"))[0]
    victim.write_text("\n".join(victim.read_text().splitlines()[:11]) + "\n")
    with pytest.warns(UserWarning, match="only 10 draws"):
        assert _run("fit-stage2", "--in", other, "--iterations", 50, "--burn-in", 10, "--seed", 2) == EXIT_OK
    capsys.readouterr()


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    _, data, _ = pipeline
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("# toy\nmodel = 1\nindividuals = 3\nvisits = 4\nseed = 99\n")
    assert _run("simulate", "--config", cfg, "--seed", 7, "--out", tmp_path / "o") == EXIT_OK
    assert (tmp_path / "o" / "data.csv").read_bytes() == (data / "data.csv").read_bytes()
    cfg.write_text("bogus = 1\n")
    assert _run("simulate", "--config", cfg, "--seed", 7, "--out", tmp_path / "o") == EXIT_USAGE


def test_outputs_identical_across_jobs(pipeline, tmp_path):
    """Same seeds give byte-identical pools, chains and reports whatever the worker count."""
    _, data, run = pipeline
    other = tmp_path / "run"
    assert _run("fit-stage1", "--in", data / "data.csv", "--out", other, "--model", 1, "--iterations", 600,
                "--burn-in", 300, "--thin", 3, "--seed", 1, "--jobs", 2) == EXIT_OK
    assert _run("fit-stage2", "--in", other, "--iterations", 400, "--burn-in", 200, "--seed", 2) == EXIT_OK
    assert _run("recover-effects", "--in", other, "--draws", 20, "--iterations", 100, "--seed", 3) == EXIT_OK
    assert _run("evaluate", "--in", other, "--draws", 20, "--seed", 4) == EXIT_OK
    _same_tree(run, other)


def test_summarize_prints_table(pipeline, capsys):
    _, _, run = pipeline
    assert _run("summarize", "--in", run) == EXIT_OK
    out = capsys.readouterr().out
    assert "beta0" in out and "rhat" in out
