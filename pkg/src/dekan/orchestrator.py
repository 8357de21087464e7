"""End-to-end pipeline: teachers, two synthesis stages, distillation,
baselines and reports, with digest-keyed resumable artifacts on disk."""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .errors import DekanError, InputError, StageError, TrainingError
from .bench import MultiDomainBenchmark, build_benchmark, leave_one_out_splits, load_benchmark, save_benchmark
from .models import ConvNet, ClassifierSpec, StudentModel, TeacherModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train_classifier
from .inversion import (SyntheticDataset, config_for_domain, load_synthetic_dataset,
                        save_synthetic_dataset, synthesize_domain_dataset)
from .fusion import config_for_pair, synthesize_cross_domain_dataset
from .distillation import train_student
from .baselines import avg_pred, best_teacher_oracle, highest_conf, train_erm
from .evaluation import (ExperimentResult, accuracy, aggregate_table,
                         export_embeddings, model_predictor, run_protocol)
from .config import ExperimentConfig, KNOWN_METHODS, save_config
from .seeds import derive_seed
from . import tensorio

OUTPUT_DIR_ENV = "DEKAN_OUTPUT_DIR"

METHOD_FLAGS = {
    "dekan": {},
    "multi_di": {},
    "avg_pred": {},
    "highest_conf": {},
    "best_teacher": {"oracle": True},
    "erm": {"not_data_free": True},
}


def resolve_output_dir(config: ExperimentConfig, out_dir=None) -> Path:
    """CLI flag wins, then the environment override, then the config value."""
    if out_dir:
        return Path(out_dir)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(config.output_dir)


def train_teachers(bench: MultiDomainBenchmark, teacher_cfg, run_seed: int,
                   domain_ids=None) -> dict[int, TeacherModel]:
    """Fit one frozen teacher per domain on that domain's train split.

    Every teacher must reach teacher_cfg.min_val_accuracy on its own val
    split, otherwise TrainingError: downstream synthesis is meaningless with
    a weak teacher.
    """
    if domain_ids is None:
        domain_ids = [d.domain_id for d in bench.domains]
    spec = ClassifierSpec(input_shape=bench.image_shape,
                          num_classes=bench.num_classes,
                          channels=teacher_cfg.channels)
    teachers = {}
    for i in domain_ids:
        dom = next(d for d in bench.domains if d.domain_id == i)
        seed = derive_seed(run_seed, "teacher", i)
        torch.manual_seed(derive_seed(seed, "init"))
        net = ConvNet(spec)
        cfg = TrainConfig(epochs=teacher_cfg.epochs,
                          learning_rate=teacher_cfg.learning_rate,
                          batch_size=teacher_cfg.batch_size,
                          weight_decay=teacher_cfg.weight_decay,
                          seed=derive_seed(seed, "train"))
        history = train_classifier(net, dom.splits["train"].images,
                                   dom.splits["train"].labels, cfg,
                                   dom.splits["val"].images,
                                   dom.splits["val"].labels)
        val_acc = history["val_accuracy"][-1]
        if val_acc < teacher_cfg.min_val_accuracy:
            raise TrainingError(
                f"teacher for domain {dom.name!r} reached val accuracy "
                f"{val_acc:.3f} < required {teacher_cfg.min_val_accuracy}")
        teachers[i] = TeacherModel(net, i, training_seed=seed, val_accuracy=val_acc)
    return teachers


class PipelineContext:
    """Caches and persists every pipeline artifact, keyed by config digests.

    With resume enabled, an artifact whose stored digest matches the expected
    one is loaded from disk instead of recomputed; any upstream config change
    shifts the digest and forces recomputation downstream.
    """

    def __init__(self, config: ExperimentConfig, out_dir=None, resume: bool = True):
        self.config = config
        self.out = resolve_output_dir(config, out_dir)
        self.resume = resume
        self.audit: list[dict] = []
        self._bench = None
        self._teachers: dict = {}
        self._stage1: dict = {}
        self._stage2: dict = {}
        self._students: dict = {}
        self._erm: dict = {}

    # -- digest bookkeeping ------------------------------------------------

    def _fresh(self, marker: Path, expected: str) -> bool:
        if not self.resume or not marker.is_file():
            return False
        try:
            return tensorio.read_json(marker).get("digest") == expected
        except DekanError:
            return False

    def _mark(self, marker: Path, digest: str) -> None:
        tensorio.write_json(marker, {"digest": digest})

    def record(self, stage: str, inputs: list[str], data_free: bool, **extra):
        entry = {"stage": stage, "inputs": sorted(set(inputs)),
                 "data_free": data_free}
        entry.update(extra)
        self.audit.append(entry)

    @staticmethod
    def _staged(stage: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except DekanError as e:
            raise StageError(stage, str(e)) from e

    # -- artifacts ----------------------------------------------------------

    def benchmark(self) -> MultiDomainBenchmark:
        if self._bench is not None:
            return self._bench
        bdir = self.out / "bench"
        digest = tensorio.config_digest(self.config.benchmark.describe())
        def build():
            if self._fresh(bdir / "digest.json", digest):
                return load_benchmark(bdir)
            bench = build_benchmark(self.config.benchmark)
            save_benchmark(bench, bdir)
            self._mark(bdir / "digest.json", digest)
            return bench

        self._bench = self._staged("benchmark", build)
        return self._bench

    def bench_digest(self) -> str:
        return tensorio.config_digest(self.config.benchmark.describe())

    def teacher(self, domain_id: int, run_seed: int) -> TeacherModel:
        key = (domain_id, run_seed)
        if key in self._teachers:
            return self._teachers[key]
        digest = tensorio.config_digest({
            "bench": self.bench_digest(),
            "teacher": self.config.teacher.describe(),
            "domain": domain_id, "seed": run_seed,
        })
        path = self.out / "teachers" / f"seed_{run_seed}" / f"domain_{domain_id}.pt"
        marker = path.with_suffix(".digest.json")
        if self._fresh(marker, digest):
            try:
                model = load_checkpoint(path)
                if isinstance(model, TeacherModel):
                    self._teachers[key] = model
                    return model
            except DekanError:
                pass
        bench = self.benchmark()
        dom = next(d for d in bench.domains if d.domain_id == domain_id)
        model = self._staged(
            "teachers",
            lambda: train_teachers(bench, self.config.teacher, run_seed,
                                   domain_ids=[domain_id])[domain_id])
        self.record("train_teacher",
                    [dom.splits["train"].origin, dom.splits["val"].origin],
                    data_free=True, domain=domain_id, seed=run_seed,
                    note="teacher fitting consumes only its own domain's data")
        save_checkpoint(model, path)
        self._mark(marker, digest)
        self._teachers[key] = model
        return model

    def teachers_for(self, domain_ids, run_seed: int) -> dict[int, TeacherModel]:
        return {i: self.teacher(i, run_seed) for i in sorted(domain_ids)}

    def _teacher_digest(self, domain_id: int, run_seed: int) -> str:
        return tensorio.config_digest({
            "bench": self.bench_digest(),
            "teacher": self.config.teacher.describe(),
            "domain": domain_id, "seed": run_seed,
        })

    def stage1(self, domain_id: int, run_seed: int) -> SyntheticDataset:
        key = (domain_id, run_seed)
        if key in self._stage1:
            return self._stage1[key]
        cfg = config_for_domain(self.config.inversion, run_seed, domain_id)
        digest = tensorio.config_digest({
            "teacher": self._teacher_digest(domain_id, run_seed),
            "inversion": cfg.describe(),
        })
        sdir = self.out / "stage1" / f"seed_{run_seed}" / f"domain_{domain_id}"
        if self._fresh(sdir / "digest.json", digest):
            try:
                ds = load_synthetic_dataset(sdir)
                self._stage1[key] = ds
                return ds
            except DekanError:
                pass
        teacher = self.teacher(domain_id, run_seed)
        ds = self._staged("stage1", lambda: synthesize_domain_dataset(teacher, cfg))
        self.record("stage1_synthesis",
                    [f"teacher_weights:domain_{domain_id}", "random_noise"],
                    data_free=True, domain=domain_id, seed=run_seed,
                    provenance=ds.provenance.label())
        save_synthetic_dataset(ds, sdir)
        self._mark(sdir / "digest.json", digest)
        self._stage1[key] = ds
        return ds

    def stage2(self, a: int, b: int, run_seed: int) -> SyntheticDataset:
        key = (a, b, run_seed)
        if key in self._stage2:
            return self._stage2[key]
        cfg = config_for_pair(self.config.fusion, run_seed, a, b)
        stage1_b = self.stage1(b, run_seed)
        digest = tensorio.config_digest({
            "teacher_a": self._teacher_digest(a, run_seed),
            "teacher_b": self._teacher_digest(b, run_seed),
            "stage1_b": stage1_b.config_digest,
            "fusion": cfg.describe(),
        })
        sdir = self.out / "stage2" / f"seed_{run_seed}" / f"pair_{a}_{b}"
        if self._fresh(sdir / "digest.json", digest):
            try:
                ds = load_synthetic_dataset(sdir)
                self._stage2[key] = ds
                return ds
            except DekanError:
                pass
        teacher_a = self.teacher(a, run_seed)
        teacher_b = self.teacher(b, run_seed)
        ds = self._staged(
            "stage2",
            lambda: synthesize_cross_domain_dataset(teacher_a, teacher_b, stage1_b, cfg))
        self.record("stage2_synthesis",
                    [f"teacher_weights:domain_{a}", f"teacher_weights:domain_{b}",
                     f"synthetic:{stage1_b.provenance.label()}", "random_noise"],
                    data_free=True, pair=[a, b], seed=run_seed,
                    provenance=ds.provenance.label())
        save_synthetic_dataset(ds, sdir)
        self._mark(sdir / "digest.json", digest)
        self._stage2[key] = ds
        return ds

    def _distilled(self, method: str, target_id: int, run_seed: int) -> StudentModel:
        key = (method, target_id, run_seed)
        if key in self._students:
            return self._students[key]
        bench = self.benchmark()
        sources, _ = leave_one_out_splits(bench, target_id)
        source_ids = [d.domain_id for d in sources]
        datasets = [self.stage1(i, run_seed) for i in source_ids]
        if method == "dekan":
            datasets += [self.stage2(a, b, run_seed)
                         for a in source_ids for b in source_ids if a != b]
        dcfg = replace(self.config.distill,
                       seed=derive_seed(run_seed, "distill", method, target_id))
        digest = tensorio.config_digest({
            "method": method,
            "inputs": [ds.config_digest for ds in datasets],
            "teachers": [self._teacher_digest(i, run_seed) for i in source_ids],
            "distill": dcfg.describe(),
        })
        sdir = self.out / "students" / f"seed_{run_seed}" / method / f"target_{target_id}"
        path = sdir / "student.pt"
        if self._fresh(sdir / "digest.json", digest):
            try:
                model = load_checkpoint(path)
                if isinstance(model, StudentModel):
                    self._students[key] = model
                    return model
            except DekanError:
                pass
        teachers = self.teachers_for(source_ids, run_seed)
        student, trace = self._staged(
            "distill", lambda: train_student(teachers, datasets, dcfg))
        self.record("distillation",
                    [f"synthetic:{ds.provenance.label()}" for ds in datasets],
                    data_free=True, method=method, target=target_id,
                    seed=run_seed)
        save_checkpoint(student, path)
        tensorio.write_json(sdir / "trace.json", {"kd_loss": trace})
        self._mark(sdir / "digest.json", digest)
        self._students[key] = student
        return student

    def _erm_net(self, target_id: int, run_seed: int):
        key = (target_id, run_seed)
        if key in self._erm:
            return self._erm[key]
        bench = self.benchmark()
        sources, _ = leave_one_out_splits(bench, target_id)
        spec = ClassifierSpec(input_shape=bench.image_shape,
                              num_classes=bench.num_classes,
                              channels=self.config.teacher.channels)
        cfg = TrainConfig(epochs=self.config.teacher.epochs,
                          learning_rate=self.config.teacher.learning_rate,
                          batch_size=self.config.teacher.batch_size,
                          weight_decay=self.config.teacher.weight_decay,
                          seed=derive_seed(run_seed, "erm", target_id))
        digest = tensorio.config_digest({
            "benchmark": self.config.benchmark.describe(),
            "trainer": asdict(cfg),
            "target": target_id,
        })
        sdir = self.out / "students" / f"seed_{run_seed}" / "erm" / f"target_{target_id}"
        path = sdir / "student.pt"
        if self._fresh(sdir / "digest.json", digest):
            try:
                net = load_checkpoint(path)
                self._erm[key] = net
                return net
            except DekanError:
                pass
        net, _ = self._staged("erm", lambda: train_erm(sources, spec, cfg))
        self.record("erm_training",
                    [d.splits["train"].origin for d in sources],
                    data_free=False, method="erm", target=target_id,
                    seed=run_seed, note="flagged baseline, pooled source data")
        save_checkpoint(net, path)
        self._mark(sdir / "digest.json", digest)
        self._erm[key] = net
        return net

    # -- method runners -----------------------------------------------------

    def run_method(self, method: str, target_id: int, run_seed: int):
        """Build (predictor, flags) for one (method, held-out domain, seed)."""
        if method not in KNOWN_METHODS:
            raise InputError(f"unknown method {method!r}; known: {KNOWN_METHODS}")
        bench = self.benchmark()
        sources, target = leave_one_out_splits(bench, target_id)
        source_ids = [d.domain_id for d in sources]
        flags = dict(METHOD_FLAGS[method])

        if method in ("dekan", "multi_di"):
            student = self._distilled(method, target_id, run_seed)
            return model_predictor(student), flags

        teachers = self.teachers_for(source_ids, run_seed)
        teacher_list = [teachers[i] for i in source_ids]
        if method == "avg_pred":
            self.record("ensemble", [f"teacher_weights:domain_{i}" for i in source_ids],
                        data_free=True, method=method, target=target_id, seed=run_seed)
            return _ensemble_predictor(avg_pred, teacher_list), flags
        if method == "highest_conf":
            self.record("ensemble", [f"teacher_weights:domain_{i}" for i in source_ids],
                        data_free=True, method=method, target=target_id, seed=run_seed)
            return _ensemble_predictor(highest_conf, teacher_list), flags
        if method == "best_teacher":
            val = target.splits["val"]
            best, _ = best_teacher_oracle(teacher_list, val.images, val.labels)
            self.record("oracle_selection", [val.origin], data_free=False,
                        method=method, target=target_id, seed=run_seed,
                        note="selection peeks at target validation data")
            return model_predictor(teacher_list[best]), flags
        # erm
        net = self._erm_net(target_id, run_seed)
        return model_predictor(net), flags

    def runner(self):
        return lambda method, target_id, seed: self.run_method(method, target_id, seed)


def _ensemble_predictor(combine, teacher_list, batch_size: int = 256):
    def predict(images: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        outs = [combine(teacher_list, x[s:s + batch_size]).numpy()
                for s in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs)
    return predict


def run_all(config: ExperimentConfig, out_dir=None, resume: bool = True):
    """Execute the full protocol for every configured method and write reports.

    Returns {"results": [ExperimentResult...], "paths": {...}, "out": Path}.
    Stage failures abort with StageError naming the stage.
    """
    ctx = PipelineContext(config, out_dir=out_dir, resume=resume)
    started = time.time()
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_config(config, ctx.out / "config.yaml")

    bench = ctx.benchmark()

    results = []
    for method in config.methods:
        try:
            results.append(run_protocol(bench, method, config.seeds, ctx.runner()))
        except StageError:
            raise
        except DekanError as e:
            raise StageError("evaluate", f"method {method}: {e}") from e

    paths = write_reports(ctx, results, started)
    return {"results": results, "paths": paths, "out": ctx.out}


def write_reports(ctx: PipelineContext, results, started=None) -> dict:
    """records.jsonl, rendered and csv tables, summary, audit, embeddings."""
    out = ctx.out
    rdir = out / "results"
    rdir.mkdir(parents=True, exist_ok=True)
    table = aggregate_table(results)

    records_path = rdir / "records.jsonl"
    with records_path.open("w") as fh:
        for r in results:
            for rec in r.records:
                rec = dict(rec)
                rec["flags"] = r.flags
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (rdir / "table.txt").write_text(table.render_text())
    (rdir / "table.csv").write_text(table.to_csv())
    summary = {
        "config_digest": ctx.config.digest(),
        "elapsed_seconds": None if started is None else time.time() - started,
        "results": [r.to_dict() for r in results],
    }
    tensorio.write_json(rdir / "summary.json", summary)

    violations = [e for e in ctx.audit
                  if not e["data_free"] and e.get("method") not in ("erm", "best_teacher")]
    tensorio.write_json(out / "audit.json", {
        "entries": ctx.audit,
        "violations": violations,
        "note": "erm and best_teacher consume original data by design and are "
                "flagged in every report row",
    })

    paths = {"records": records_path, "table": rdir / "table.txt",
             "csv": rdir / "table.csv", "summary": rdir / "summary.json",
             "audit": out / "audit.json"}

    if ctx.config.export_embeddings and any(r.method == "dekan" for r in results):
        bench = ctx.benchmark()
        seed = ctx.config.seeds[0]
        for dom in bench.domains:
            student = ctx._distilled("dekan", dom.domain_id, seed)
            test = dom.splits["test"]
            edir = export_embeddings(
                student, test.images, test.labels,
                [dom.name] * len(test), out / "embeddings" / f"target_{dom.name}")
            paths[f"embeddings:{dom.name}"] = edir
    return paths
