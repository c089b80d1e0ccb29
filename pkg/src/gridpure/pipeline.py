"""Batch experiment runner: attack -> transform -> purify -> metrics over a corpus.

Configuration is YAML validated against :class:`PipelineConfig`; unknown keys
are rejected. Example::

    corpus_dir: corpus/clean
    output_dir: runs/demo
    denoiser: oracle:corpus/dataset
    seed: 0
    protect_ratio: 1.0
    stages:
      - {id: clean, kind: source, metrics: [eps-loss, ssim, psnr]}
      - {id: advdm, kind: attack, method: advdm, metrics: [eps-loss, ssim, psnr]}
      - {id: advdm+blur, kind: transform, input: advdm, op: blur, metrics: [eps-loss, ssim, psnr]}
      - {id: advdm+gridpure, kind: purify, input: advdm, method: gridpure, metrics: [eps-loss, ssim, psnr]}

Every stage output is written to ``<output_dir>/<stage>/<image>.png`` with a
JSON manifest; a rerun skips stages whose manifest key and output hash match.
Downstream stages always consume the 8-bit image as stored, so fresh and
resumed runs see identical inputs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import attack as attack_mod
from .diffusion import (
    AffineDenoiser,
    DenoiserBackend,
    ExternalDenoiser,
    NoiseSchedule,
    OracleDenoiser,
    build_schedule,
    diffusion_loss,
)
from .imagecore import RngState, load_image, save_image, to_bytes
from .metrics import mse, psnr, ssim
from .purify import PurifyConfig, diffpure, gridpure
from .transforms import DEFAULT_EOT, gaussian_blur, jpeg_roundtrip

log = logging.getLogger(__name__)

Metric = Literal["eps-loss", "ssim", "psnr", "mse"]
REPORT_FIELDS = ("image", "stage", "metric", "value", "ms")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SourceStage(_Strict):
    kind: Literal["source"]
    id: str
    metrics: list[Metric] = []


class AttackStage(_Strict):
    kind: Literal["attack"]
    id: str
    input: str | None = None
    metrics: list[Metric] = []
    method: Literal["advdm", "eot", "adaptive"] = "advdm"
    budget: float = 8 / 255
    step: float = 2 / 255
    steps: int = 100
    mc: int = 4
    p: float = 0.2
    chain_t: int = 100
    chain_substeps: int = 2
    transforms: list[str] = list(DEFAULT_EOT)
    t_range: tuple[int, int] | None = None


class TransformStage(_Strict):
    kind: Literal["transform"]
    id: str
    input: str | None = None
    metrics: list[Metric] = []
    op: Literal["blur", "jpeg"]
    kernel: int = 7
    sigma: float = 1.5
    quality: int = 40


class PurifyStage(_Strict):
    kind: Literal["purify"]
    id: str
    input: str | None = None
    metrics: list[Metric] = []
    method: Literal["gridpure", "diffpure"] = "gridpure"
    iterations: int = 10
    steps: int = 10
    substeps: int | None = None
    gamma: float = 0.1
    grid_size: int = 256
    with_corner: bool = True


Stage = Annotated[Union[SourceStage, AttackStage, TransformStage, PurifyStage], Field(discriminator="kind")]


class PipelineConfig(_Strict):
    corpus_dir: Path
    output_dir: Path
    denoiser: str
    stages: list[Stage]
    seed: int = 0
    report_format: Literal["csv", "jsonl"] = "csv"
    schedule_steps: int = 1000
    protect_ratio: float = Field(1.0, ge=0.0, le=1.0)
    eps_loss_samples: int = Field(256, ge=1)
    jobs: int = Field(1, ge=1)
    timing: bool = True

    @model_validator(mode="after")
    def _check_stages(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        seen: list[str] = []
        for stage in self.stages:
            if stage.id in seen:
                raise ValueError(f"duplicate stage id {stage.id!r}")
            if "/" in stage.id or stage.id in ("", ".", ".."):
                raise ValueError(f"stage id {stage.id!r} is not a valid directory name")
            src = getattr(stage, "input", None)
            if src is not None and src not in seen:
                raise ValueError(f"stage {stage.id!r} reads from unknown or later stage {src!r}")
            seen.append(stage.id)
        return self


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a mapping")
    base = Path(path).parent
    for key in ("corpus_dir", "output_dir"):
        if key in raw and not Path(raw[key]).is_absolute():
            raw[key] = str(base / raw[key])
    den = raw.get("denoiser")
    if isinstance(den, str):
        kind, _, arg = den.partition(":")
        if kind in ("oracle", "affine") and arg and not Path(arg).is_absolute():
            raw["denoiser"] = f"{kind}:{base / arg}"
    return PipelineConfig.model_validate(raw)


def make_backend(spec: str, timeout: float = 60.0) -> DenoiserBackend:
    """``oracle:<dir>``, ``affine:<file.npz>`` or ``external:<command>``."""
    kind, sep, arg = spec.partition(":")
    if not sep or not arg:
        raise ValueError(f"denoiser spec must look like kind:argument, got {spec!r}")
    if kind == "oracle":
        return OracleDenoiser.from_dir(arg)
    if kind == "affine":
        return AffineDenoiser.load(arg)
    if kind == "external":
        return ExternalDenoiser(arg, timeout=timeout)
    raise ValueError(f"unknown denoiser kind {kind!r}")


class PipelineError(RuntimeError):
    def __init__(self, image: str, stage: str, cause: BaseException):
        super().__init__(f"image {image!r}, stage {stage!r}: {cause}")
        self.image, self.stage, self.cause = image, stage, cause
        self.rows: list[dict] = []  # rows the failing image produced before the error


@dataclass
class PipelineResult:
    rows: list[dict]
    protected: list[str]
    attacked: list[str]
    skipped: int
    report_path: Path


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_hash(img: np.ndarray) -> str:
    return _sha(to_bytes(img).tobytes() + repr(img.shape).encode())


def protected_subset(ids: list[str], ratio: float, seed: int) -> set[str]:
    """Seeded shuffle of the corpus; the first ``round(ratio * N)`` images are protected."""
    n = int(math.floor(ratio * len(ids) + 0.5))
    order = RngState(seed).child("protect").generator().permutation(len(ids))
    return {ids[k] for k in order[:n]}


class _Runner:
    def __init__(self, cfg: PipelineConfig, backend: DenoiserBackend, sched: NoiseSchedule):
        self.cfg, self.backend, self.sched = cfg, backend, sched
        self.root = RngState(cfg.seed)
        self.skipped = 0
        self._lock = threading.Lock()

    def _execute(self, stage, image_id: str, x: np.ndarray, protected: bool) -> tuple[np.ndarray, bool]:
        """Returns ``(output, attack_ran)``."""
        rng = self.root.child("image", image_id, stage.id)
        if isinstance(stage, SourceStage):
            return x, False
        if isinstance(stage, AttackStage):
            if not protected:
                return x, False
            acfg = attack_mod.AttackConfig(
                budget=stage.budget,
                step=stage.step,
                n_steps=stage.steps,
                n_mc=stage.mc,
                eot_transforms=tuple(stage.transforms),
                adaptive_p=stage.p,
                purify_chain=(stage.chain_t, stage.chain_substeps),
                seed=self.cfg.seed,
                t_range=stage.t_range,
            )
            fn = {
                "advdm": attack_mod.pgd_attack,
                "eot": attack_mod.eot_attack,
                "adaptive": attack_mod.adaptive_attack,
            }[stage.method]
            return fn(x, acfg, self.backend, self.sched, rng), True
        if isinstance(stage, TransformStage):
            if stage.op == "blur":
                return gaussian_blur(x, stage.kernel, stage.sigma), False
            return jpeg_roundtrip(x, stage.quality), False
        if isinstance(stage, PurifyStage):
            substeps = stage.substeps or stage.steps
            if stage.method == "diffpure":
                return diffpure(x, stage.steps, substeps, self.backend, self.sched, rng), False
            pcfg = PurifyConfig(
                t_pure=stage.steps,
                substeps=substeps,
                iterations=stage.iterations,
                gamma=stage.gamma,
                grid_size=stage.grid_size,
                with_corner=stage.with_corner,
                seed=self.cfg.seed,
            )
            return gridpure(x, pcfg, self.backend, self.sched, rng), False
        raise AssertionError(stage)

    def _metric(self, name: str, img: np.ndarray, ref: np.ndarray, image_id: str) -> float:
        if name == "eps-loss":
            # common random numbers across stages of one image
            rng = self.root.child("eval", image_id)
            return diffusion_loss(self.backend, img, self.cfg.eps_loss_samples, rng, self.sched).value
        return {"ssim": ssim, "psnr": psnr, "mse": mse}[name](img, ref)

    def run_image(self, path: Path, protected: bool) -> tuple[list[dict], bool]:
        image_id = path.stem
        clean = load_image(path)
        outputs: dict[str, np.ndarray] = {}
        rows, attacked = [], False
        prev = None
        for stage in self.cfg.stages:
            try:
                src_id = getattr(stage, "input", None) or prev
                x = clean if src_id is None else outputs[src_id]
                key = _sha(
                    json.dumps(
                        {
                            "stage": stage.model_dump(mode="json"),
                            "input": _png_hash(x),
                            "seed": self.cfg.seed,
                            "denoiser": self.cfg.denoiser,
                            "schedule_steps": self.cfg.schedule_steps,
                            "protected": protected,
                        },
                        sort_keys=True,
                    ).encode()
                )
                stage_dir = self.cfg.output_dir / stage.id
                png, manifest = stage_dir / f"{image_id}.png", stage_dir / f"{image_id}.json"
                out, ms = self._cached(png, manifest, key)
                if out is None:
                    t0 = time.perf_counter()
                    out, ran = self._execute(stage, image_id, x, protected)
                    ms = (time.perf_counter() - t0) * 1000.0
                    stage_dir.mkdir(parents=True, exist_ok=True)
                    save_image(out, png)
                    out = load_image(png)
                    manifest.write_text(
                        json.dumps(
                            {"key": key, "output": _sha(png.read_bytes()), "ms": ms, "attacked": ran},
                            sort_keys=True,
                        )
                    )
                else:
                    ran = json.loads(manifest.read_text()).get("attacked", False)
                    with self._lock:
                        self.skipped += 1
                attacked = attacked or ran
                outputs[stage.id] = out
                prev = stage.id
                for metric in stage.metrics:
                    value = float(self._metric(metric, out, clean, image_id))
                    if not math.isfinite(value):
                        raise ValueError(f"metric {metric} is not finite")
                    rows.append(
                        {
                            "image": image_id,
                            "stage": stage.id,
                            "metric": metric,
                            "value": value,
                            "ms": round(ms, 3) if self.cfg.timing else 0,
                        }
                    )
            except Exception as exc:
                err = PipelineError(image_id, stage.id, exc)
                err.rows = rows
                raise err from exc
        return rows, attacked

    def _cached(self, png: Path, manifest: Path, key: str):
        if not (png.is_file() and manifest.is_file()):
            return None, 0.0
        try:
            meta = json.loads(manifest.read_text())
        except json.JSONDecodeError:
            return None, 0.0
        if meta.get("key") != key or meta.get("output") != _sha(png.read_bytes()):
            return None, 0.0
        return load_image(png), float(meta.get("ms", 0.0))


def write_report(rows: list[dict], path: Path, fmt: str) -> None:
    buf = io.StringIO()
    if fmt == "csv":
        writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": repr(row["value"])})
    else:
        for row in rows:
            buf.write(json.dumps(row, sort_keys=False) + "\n")
    path.write_text(buf.getvalue())


def run_pipeline(cfg: PipelineConfig, jobs: int | None = None) -> PipelineResult:
    env_jobs = os.environ.get("GRIDPURE_JOBS")
    if env_jobs:
        jobs = int(env_jobs)
    jobs = max(1, jobs or cfg.jobs)

    files = sorted(Path(cfg.corpus_dir).glob("*.png"))
    if not files:
        raise ValueError(f"corpus {cfg.corpus_dir} has no PNG images")
    ids = [f.stem for f in files]
    protected = protected_subset(ids, cfg.protect_ratio, cfg.seed)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    report = cfg.output_dir / ("report.csv" if cfg.report_format == "csv" else "report.jsonl")
    sched = build_schedule(cfg.schedule_steps)
    backend = make_backend(cfg.denoiser)
    runner = _Runner(cfg, backend, sched)

    results: dict[str, tuple[list[dict], bool]] = {}
    failure: PipelineError | None = None
    try:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {f.stem: pool.submit(runner.run_image, f, f.stem in protected) for f in files}
            for image_id in ids:
                fut = futures[image_id]
                if fut.cancelled():
                    continue
                try:
                    results[image_id] = fut.result()
                except PipelineError as exc:
                    results[image_id] = (exc.rows, False)
                    if failure is None:
                        failure = exc
                        for other in futures.values():
                            other.cancel()
    finally:
        backend.close()
        rows = [row for image_id in ids if image_id in results for row in results[image_id][0]]
        write_report(rows, report, cfg.report_format)
    if failure is not None:
        log.error("pipeline failed at %s; partial report at %s", failure, report)
        raise failure

    attacked = [i for i in ids if results[i][1]]
    return PipelineResult(rows, sorted(protected), attacked, runner.skipped, report)
