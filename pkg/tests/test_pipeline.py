import csv
import json

import pytest
import yaml
from pydantic import ValidationError

from gridpure.cli import main
from gridpure.corpus import make_corpus, write_corpus
from gridpure.pipeline import PipelineConfig, PipelineError, load_config, protected_subset, run_pipeline

METRICS = ["eps-loss", "ssim", "psnr"]


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    dataset, clean = write_corpus(make_corpus(n_images=3, size=16, seed=1), root)
    return dataset, clean


def matrix(dataset, clean, out, **extra):
    cfg = {
        "corpus_dir": str(clean),
        "output_dir": str(out),
        "denoiser": f"oracle:{dataset}",
        "seed": 5,
        "eps_loss_samples": 32,
        "stages": [
            {"id": "clean", "kind": "source", "metrics": METRICS},
            {"id": "advdm", "kind": "attack", "method": "advdm", "steps": 3, "mc": 2, "metrics": METRICS},
            {"id": "advdm+blur", "kind": "transform", "input": "advdm", "op": "blur", "metrics": METRICS},
            {"id": "advdm+gridpure", "kind": "purify", "input": "advdm", "iterations": 2, "metrics": METRICS},
        ],
    }
    cfg.update(extra)
    return cfg


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_full_matrix_row_count(desk, tmp_path):
    dataset, clean = desk
    res = run_pipeline(PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "run")))
    rows = read_csv(res.report_path)
    assert len(rows) == 4 * 3 * 3
    assert list(rows[0]) == ["image", "stage", "metric", "value", "ms"]
    keys = {(r["image"], r["stage"], r["metric"]) for r in rows}
    assert len(keys) == len(rows)
    for stage in ("clean", "advdm", "advdm+blur", "advdm+gridpure"):
        assert len(list((tmp_path / "run" / stage).glob("*.png"))) == 3


def test_protect_ratio_extremes(desk, tmp_path):
    dataset, clean = desk
    none = run_pipeline(PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "r0", protect_ratio=0.0)))
    assert none.attacked == [] and none.protected == []
    rows = read_csv(none.report_path)
    by = {(r["image"], r["stage"], r["metric"]): r["value"] for r in rows}
    for img in {r["image"] for r in rows}:
        assert by[(img, "advdm", "psnr")] == "99.0"
    full = run_pipeline(PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "r1", protect_ratio=1.0)))
    assert len(full.attacked) == 3


def test_protected_subset_is_seeded():
    ids = [f"img{i:03d}" for i in range(10)]
    a = protected_subset(ids, 0.3, 1)
    assert len(a) == 3 and a == protected_subset(ids, 0.3, 1)
    assert protected_subset(ids, 0.0, 1) == set() and protected_subset(ids, 1.0, 1) == set(ids)


def test_resume_skips_and_report_identical(desk, tmp_path):
    dataset, clean = desk
    cfg = PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "run"))
    first = run_pipeline(cfg)
    report = first.report_path.read_bytes()
    second = run_pipeline(cfg)
    assert first.skipped == 0 and second.skipped == 12
    assert second.report_path.read_bytes() == report
    # a damaged intermediate is recomputed
    victim = sorted((tmp_path / "run" / "advdm+blur").glob("*.png"))[0]
    victim.write_bytes(b"junk")
    third = run_pipeline(cfg)
    assert third.skipped == 11
    # the recomputed stage has a fresh wall time; everything else matches
    strip = lambda rows: [{k: v for k, v in r.items() if k != "ms"} for r in rows]
    assert strip(read_csv(third.report_path)) == strip(read_csv(first.report_path))


def test_deterministic_without_timing_and_jobs_invariant(desk, tmp_path, monkeypatch):
    dataset, clean = desk
    a = run_pipeline(PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "a", timing=False)))
    monkeypatch.setenv("GRIDPURE_JOBS", "3")
    b = run_pipeline(PipelineConfig.model_validate(matrix(dataset, clean, tmp_path / "b", timing=False)), jobs=1)
    assert a.report_path.read_bytes() == b.report_path.read_bytes()
    for stage in ("advdm", "advdm+gridpure"):
        for png in (tmp_path / "a" / stage).glob("*.png"):
            assert png.read_bytes() == (tmp_path / "b" / stage / png.name).read_bytes()


def test_jsonl_report(desk, tmp_path):
    dataset, clean = desk
    cfg = matrix(dataset, clean, tmp_path / "j", report_format="jsonl")
    cfg["stages"] = cfg["stages"][:1]
    res = run_pipeline(PipelineConfig.model_validate(cfg))
    lines = [json.loads(line) for line in res.report_path.read_text().splitlines()]
    assert len(lines) == 9 and set(lines[0]) == {"image", "stage", "metric", "value", "ms"}


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: c.update(colour="blue"),
        lambda c: c["stages"][1].update(stepz=3),
        lambda c: c["stages"][2].update(input="nowhere"),
        lambda c: c["stages"].append({"id": "clean", "kind": "source"}),
        lambda c: c["stages"][0].update(kind="teleport"),
        lambda c: c.update(protect_ratio=1.5),
    ],
)
def test_strict_config_rejects(desk, tmp_path, mutate):
    dataset, clean = desk
    cfg = matrix(dataset, clean, tmp_path / "x")
    mutate(cfg)
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate(cfg)


def test_load_config_resolves_relative_paths(desk, tmp_path):
    dataset, clean = desk
    cfg = matrix(dataset, clean, "out")
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    loaded = load_config(path)
    assert loaded.output_dir == tmp_path / "out"


def test_failure_names_image_and_stage_and_keeps_partial_report(desk, tmp_path, capsys):
    dataset, clean = desk
    cfg = matrix(dataset, clean, tmp_path / "f")
    # the oracle only accepts 16x16 inputs; this purify stage feeds it 8x8 tiles
    cfg["stages"][3].update(grid_size=8)
    with pytest.raises(PipelineError) as exc:
        run_pipeline(PipelineConfig.model_validate(cfg))
    assert exc.value.stage == "advdm+gridpure" and exc.value.image.startswith("img")
    report = tmp_path / "f" / "report.csv"
    assert report.is_file()
    # stages that finished before the failure are still reported
    partial = read_csv(report)
    mine = [r for r in partial if r["image"] == exc.value.image]
    assert {r["stage"] for r in mine} == {"clean", "advdm", "advdm+blur"}
    assert all(r["stage"] != "advdm+gridpure" for r in partial)

    path = tmp_path / "f.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["pipeline", "--config", str(path)]) == 2
    assert "advdm+gridpure" in capsys.readouterr().err


def test_cli_pipeline_bad_config_exit_1(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("corpus_dir: x\nsurprise: 1\n")
    assert main(["pipeline", "--config", str(path)]) == 1


@pytest.mark.slow
def test_end_to_end_loss_ordering(tmp_path):
    """Mean eps-loss over a 16-image oracle corpus: clean < gridpure(attacked) < attacked."""
    dataset, clean = write_corpus(make_corpus(n_images=16, size=32, seed=0), tmp_path / "corpus")
    cfg = {
        "corpus_dir": str(clean),
        "output_dir": str(tmp_path / "run"),
        "denoiser": f"oracle:{dataset}",
        "eps_loss_samples": 256,
        "stages": [
            {"id": "clean", "kind": "source", "metrics": ["eps-loss"]},
            {"id": "advdm", "kind": "attack", "metrics": ["eps-loss"]},
            {"id": "advdm+gridpure", "kind": "purify", "input": "advdm", "metrics": ["eps-loss"]},
        ],
    }
    rows = read_csv(run_pipeline(PipelineConfig.model_validate(cfg)).report_path)
    mean = {s: sum(float(r["value"]) for r in rows if r["stage"] == s) / 16 for s in ("clean", "advdm", "advdm+gridpure")}
    assert mean["advdm+gridpure"] < mean["advdm"], mean
    assert mean["clean"] < mean["advdm+gridpure"], mean
