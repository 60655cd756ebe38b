"""End-to-end experiment: data, classifier, biased generator, fine-tuning, reports.

Every stage writes its artifacts into the output directory and records them
in ``stages.json`` under a key derived from the stage's configuration and the
digests of its inputs, so ``resume=True`` can skip stages whose inputs have
not changed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .fairness import BiasReport, evaluate
from .numerics import MlpParams, mlp_forward
from .testbed import (
    PopulationSpec,
    TargetDataset,
    TrainingFailure,
    generate_batch,
    make_embedder,
    predict_labels,
    pretrain_generator,
    sample_population,
    stratified_counts,
    train_classifier,
)
from .tuning import consistency_reg, dataset_sampler, sdat_finetune

log = logging.getLogger(__name__)

STAGES = (
    "gen-data",
    "train-classifier",
    "pretrain-generator",
    "evaluate-before",
    "finetune",
    "evaluate-after",
)
_STREAMS = {
    "gen-data": 1,
    "train-classifier": 2,
    "heldout": 3,
    "pretrain-generator": 4,
    "evaluate": 5,
    "finetune": 6,
    "snapshot": 7,
    "probe": 8,
}

FILES = {
    "target_bin": "target.bin",
    "target_csv": "target.csv",
    "classifier": "classifier.bin",
    "generator_pretrained": "generator_pretrained.bin",
    "generator_tuned": "generator_tuned.bin",
    "losses": "losses.csv",
    "samples_before": "samples_before.csv",
    "samples_after": "samples_after.csv",
}
LOSS_COLUMNS = ["step", "L_align", "L_reg", "total", "gate_rate", "transport_cost"]


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_rng(seed: int, stream: str, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _STREAMS[stream], attempt]))


def _key(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_dir=None, resume: bool = False):
        self.cfg = cfg
        self.out = Path(out_dir or cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.resume = resume
        self.manifest_path = self.out / "stages.json"
        self.manifest = {}
        if resume and self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        self.info: dict = {}

    # -- bookkeeping -------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.out / FILES[name]

    def digest(self, name: str) -> str:
        return io.file_digest(self.path(name))

    def _fresh(self, stage: str, key: str) -> bool:
        entry = self.manifest.get(stage)
        if not self.resume or not entry or entry.get("key") != key:
            return False
        for name, digest in entry["files"].items():
            p = self.path(name)
            if not p.exists() or io.file_digest(p) != digest:
                return False
        log.info("resume: reusing %s", stage)
        self.info[stage] = entry.get("info", {})
        return True

    def _record(self, stage: str, key: str, files, info=None):
        self.manifest[stage] = {
            "key": key,
            "files": {n: self.digest(n) for n in files},
            "info": info or {},
        }
        self.info[stage] = info or {}
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2) + "\n")

    def _guard(self, stage, fn, *args):
        marker = self.out / "FAILED_STAGE"
        try:
            return fn(*args)
        except Exception as exc:
            marker.write_text(f"{stage}\n{type(exc).__name__}: {exc}\n")
            raise StageFailure(stage, exc) from exc

    # -- stages ------------------------------------------------------------

    def gen_data(self) -> TargetDataset:
        c = self.cfg
        key = _key("gen-data", list(c.target_weights), c.target_samples, c.seed)
        if not self._fresh("gen-data", key):
            ds = sample_population(
                PopulationSpec(tuple(c.target_weights)), c.target_samples, stage_rng(c.seed, "gen-data")
            )
            io.save_dataset(ds, self.path("target_bin"))
            io.write_points_csv(self.path("target_csv"), ds.samples, ds.labels)
            counts = ds.label_counts()
            info = {
                "label_counts": counts,
                "expected_counts": stratified_counts(c.target_weights, c.target_samples),
            }
            info["stratification_exact"] = info["label_counts"] == info["expected_counts"]
            self._record("gen-data", key, ["target_bin", "target_csv"], info)
        return io.load_dataset(self.path("target_bin"))

    def train_classifier(self, ds: TargetDataset | None = None) -> MlpParams:
        c = self.cfg
        ds = io.load_dataset(self.path("target_bin")) if ds is None else ds
        key = _key("train-classifier", c.classifier_epochs, c.classifier_lr, c.seed, self.digest("target_bin"))
        if not self._fresh("train-classifier", key):
            clf = train_classifier(ds, c.classifier_epochs, stage_rng(c.seed, "train-classifier"), lr=c.classifier_lr)
            io.save_params(clf, self.path("classifier"))
            held = sample_population(PopulationSpec(tuple(c.target_weights)), 2000, stage_rng(c.seed, "heldout"))
            acc = float(np.mean(predict_labels(clf, held.samples) == held.labels))
            self._record("train-classifier", key, ["classifier"], {"fresh_sample_accuracy": acc})
        return io.load_params(self.path("classifier"))

    def pretrain_generator(self, clf: MlpParams | None = None) -> MlpParams:
        c = self.cfg
        clf = io.load_params(self.path("classifier")) if clf is None else clf
        key = _key(
            "pretrain-generator", list(c.pretrain_weights), c.pretrain_samples, c.pretrain_steps,
            c.pretrain_batch, c.pretrain_lr, c.pretrain_retries, c.seed, self.digest("classifier"),
        )
        if not self._fresh("pretrain-generator", key):
            failures = []
            for attempt in range(c.pretrain_retries + 1):
                try:
                    gen = pretrain_generator(
                        c.pretrain_weights, c.pretrain_samples, c.pretrain_steps,
                        stage_rng(c.seed, "pretrain-generator", attempt),
                        batch_size=c.pretrain_batch, lr=c.pretrain_lr, classifier=clf,
                    )
                    break
                except TrainingFailure as exc:
                    log.warning("pretraining attempt %d failed: %s", attempt, exc)
                    failures.append(str(exc))
            else:
                raise TrainingFailure("; ".join(failures))
            io.save_params(gen, self.path("generator_pretrained"))
            self._record(
                "pretrain-generator", key, ["generator_pretrained"],
                {"attempts": attempt + 1, "failed_attempts": failures},
            )
        return io.load_params(self.path("generator_pretrained"))

    def evaluate(self, gen: MlpParams, clf: MlpParams, tag: str) -> BiasReport:
        c = self.cfg
        report = evaluate(gen, clf, c.target_weights, c.eval_samples, stage_rng(c.seed, "evaluate"), c.counting)
        points, _ = generate_batch(gen, c.eval_samples, stage_rng(c.seed, "evaluate"))
        name = f"samples_{tag}"
        io.write_points_csv(self.path(name), points, predict_labels(clf, points))
        if c.svg:
            try:
                write_scatter_svg(self.out / f"samples_{tag}.svg", points, predict_labels(clf, points))
            except OSError as exc:
                log.warning("svg not written: %s", exc)
        self._record(f"evaluate-{tag}", "", [name], report.to_dict())
        return report

    def finetune(self, gen0: MlpParams, clf: MlpParams, ds: TargetDataset):
        c = self.cfg
        key = _key(
            "finetune", c.sdat().__dict__, c.eval_every, c.eval_samples, c.counting, c.seed,
            self.digest("generator_pretrained"), self.digest("classifier"), self.digest("target_bin"),
        )
        if self._fresh("finetune", key):
            return io.load_params(self.path("generator_tuned"))
        embedder = make_embedder()

        def snapshot(g):
            r = evaluate(g, clf, c.target_weights, c.eval_samples, stage_rng(c.seed, "snapshot"), c.counting)
            return {"bias": r.bias, "abs_target_gap": r.abs_target_gap}

        gen, history, snaps = sdat_finetune(
            gen0.copy(frozen=False), gen0.freeze(), clf, embedder, dataset_sampler(ds.samples),
            c.sdat(), stage_rng(c.seed, "finetune"), eval_every=c.eval_every, evaluator=snapshot,
        )
        io.save_params(gen, self.path("generator_tuned"))
        io.write_rows_csv(
            self.path("losses"),
            LOSS_COLUMNS,
            ([m.step, m.l_align, m.l_reg, m.total, m.gate_rate, m.transport_cost] for m in history),
        )
        info = {
            "snapshots": snaps,
            "curves": {
                "l_align": [m.l_align for m in history],
                "l_reg": [m.l_reg for m in history],
                "total": [m.total for m in history],
                "gate_rate": [m.gate_rate for m in history],
                "transport_cost": [m.transport_cost for m in history],
            },
        }
        self._record("finetune", key, ["generator_tuned", "losses"], info)
        return gen

    def reg_probe(self, gen: MlpParams, gen0: MlpParams) -> float:
        """Distillation term between tuned and pretrained generators on fixed noise."""
        noise = stage_rng(self.cfg.seed, "probe").standard_normal((self.cfg.reg_probe_samples, gen.sizes[0]))
        emb = make_embedder()
        return consistency_reg(
            mlp_forward(emb, mlp_forward(gen, noise)), mlp_forward(emb, mlp_forward(gen0, noise))
        )

    # -- driver ------------------------------------------------------------

    def run(self) -> dict:
        t0 = time.perf_counter()
        ds = self._guard("gen-data", self.gen_data)
        clf = self._guard("train-classifier", self.train_classifier, ds)
        gen0 = self._guard("pretrain-generator", self.pretrain_generator, clf)
        before = self._guard("evaluate-before", self.evaluate, gen0, clf, "before")
        gen = self._guard("finetune", self.finetune, gen0, clf, ds)
        after = self._guard("evaluate-after", self.evaluate, gen, clf, "after")
        probe = self.reg_probe(gen, gen0)
        report = self._report(before, after, probe, time.perf_counter() - t0)
        (self.out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
        marker = self.out / "FAILED_STAGE"
        if marker.exists():
            marker.unlink()
        return report

    def _report(self, before: BiasReport, after: BiasReport, probe: float, seconds: float) -> dict:
        c = self.cfg
        ft = self.info.get("finetune", {})
        names = [n for n in FILES if self.path(n).exists()]
        return {
            "format": "sdat-report/1",
            "seed": c.seed,
            "config": c.to_dict(),
            "target_data": self.info.get("gen-data", {}),
            "classifier": self.info.get("train-classifier", {}),
            "pretraining": self.info.get("pretrain-generator", {}),
            "before": before.to_dict(),
            "after": after.to_dict(),
            "bias_reduction": before.bias - after.bias,
            "reg_probe": {"samples": c.reg_probe_samples, "value": probe},
            "snapshots": ft.get("snapshots", []),
            "curves": ft.get("curves", {}),
            "artifacts": {n: {"path": FILES[n], "sha256": self.digest(n)} for n in names},
            "wall_clock_seconds": seconds,
        }


def _run_one(args):
    cfg, out, resume = args
    return Pipeline(cfg, out, resume).run()


def run_sweep(cfg: ExperimentConfig, seeds, out_dir, resume=False, workers=None) -> list[dict]:
    """Independent pipelines per seed, each in ``out_dir/seed_<s>``."""
    out = Path(out_dir)
    jobs = [(cfg.replace(seed=s), out / f"seed_{s}", resume) for s in seeds]
    if workers == 1 or len(jobs) == 1:
        return [_run_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


def format_table(report: dict) -> str:
    """Two-row before/after bias table for a run."""
    pct = 100 * report["config"]["target_weights"][0]
    head = f"Bias (target {pct:g}% subgroup 0)"
    rows = [
        ("w/o SDAT", report["before"]),
        ("with SDAT", report["after"]),
    ]
    lines = [f"{'Method':<10} | {head} | target gap", "-" * (len(head) + 27)]
    for label, r in rows:
        lines.append(f"{label:<10} | {r['bias']:>{len(head)}.3f} | {r['abs_target_gap']:.3f}")
    return "\n".join(lines)


def write_scatter_svg(path, points, labels, size=400) -> Path:
    """Minimal scatter plot; not covered by the determinism guarantees."""
    pts = np.asarray(points)
    lo, hi = pts.min(axis=0) - 0.5, pts.max(axis=0) + 0.5
    scale = (size - 20) / np.maximum(hi - lo, 1e-9)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    dots = []
    for (x, y), lab in zip(pts, labels):
        cx = 10 + (x - lo[0]) * scale[0]
        cy = size - 10 - (y - lo[1]) * scale[1]
        dots.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="1.5" fill="{colors[int(lab) % 4]}"/>')
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
        + "".join(dots)
        + "</svg>\n"
    )
    path = Path(path)
    path.write_text(svg)
    return path
