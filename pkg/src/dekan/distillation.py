"""Stage 3: distill the frozen teachers into one student on synthetic data.

Each synthetic image is soft-labeled by the teacher(s) named in its
provenance: its own teacher for stage-1 images, the mean of both teachers'
softmax outputs for cross-domain images. The student minimizes KL divergence
against those targets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataFreenessError, InputError, TrainingError
from .models import ClassifierSpec, ConvNet, StudentModel, TeacherModel, load_checkpoint
from .inversion import Provenance, SyntheticDataset
from .seeds import derive_seed

KL_DIRECTIONS = ("student_first", "teacher_first")
PROB_FLOOR = 1e-8
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 128
    temperature: float = 1.0
    kl_direction: str = "student_first"
    student_init: str = "random"          # or "pretrained"
    pretrained_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("epochs/batch_size must be >=1, learning_rate > 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")
        if self.student_init not in ("random", "pretrained"):
            raise ConfigError("student_init must be 'random' or 'pretrained'")
        if self.student_init == "pretrained" and not self.pretrained_path:
            raise ConfigError("pretrained student_init needs pretrained_path")

    def describe(self) -> dict:
        return {
            "epochs": self.epochs, "learning_rate": self.learning_rate,
            "batch_size": self.batch_size, "temperature": self.temperature,
            "kl_direction": self.kl_direction, "student_init": self.student_init,
            "pretrained_path": self.pretrained_path, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "DistillConfig":
        return DistillConfig(**dict(d))


def soft_target(batch: torch.Tensor, provenance: Provenance,
                teachers: dict, temperature: float = 1.0) -> torch.Tensor:
    """Soft labels for one synthetic batch.

    Stage-1 provenance: softmax of its teacher. Cross-domain provenance:
    mean of both teachers' softmax outputs. Rows always sum to one.
    """
    if not isinstance(provenance, Provenance):
        raise InputError("provenance must be a Provenance value")
    if temperature <= 0:
        raise InputError("temperature must be positive")
    missing = [i for i in provenance.teacher_ids if i not in teachers]
    if missing:
        raise InputError(f"no teacher available for domain(s) {missing}")
    probs = []
    with torch.no_grad():
        for i in provenance.teacher_ids:
            teacher = teachers[i]
            net = teacher.net if isinstance(teacher, TeacherModel) else teacher
            net.eval()
            probs.append(F.softmax(net(batch) / temperature, dim=1))
    return torch.stack(probs).mean(dim=0)


def kd_loss(student_probs: torch.Tensor, target_probs: torch.Tensor,
            kl_direction: str = "student_first") -> torch.Tensor:
    """Mean per-example KL divergence between two probability tables.

    Inputs must be row-stochastic within 1e-6. Probabilities are floored at
    1e-8 and renormalized before the log, so hard targets stay finite.
    student_first gives KL(student || target), teacher_first the reverse.
    """
    if kl_direction not in KL_DIRECTIONS:
        raise InputError(f"kl_direction must be one of {KL_DIRECTIONS}")
    for name, p in (("student_probs", student_probs), ("target_probs", target_probs)):
        if not isinstance(p, torch.Tensor) or p.dim() != 2:
            raise InputError(f"{name} must be a (N,K) tensor")
        pd = p.detach()
        if bool((pd < 0).any()):
            raise InputError(f"{name} has negative entries")
        if float((pd.sum(dim=1) - 1.0).abs().max()) > ROW_SUM_TOL:
            raise InputError(f"{name} rows must sum to 1 within {ROW_SUM_TOL}")
    if student_probs.shape != target_probs.shape:
        raise InputError("probability tables must share a shape")

    def floor(p):
        p = torch.clamp(p, min=PROB_FLOOR)
        return p / p.sum(dim=1, keepdim=True)

    s, t = floor(student_probs), floor(target_probs)
    if kl_direction == "student_first":
        rows = (s * (s.log() - t.log())).sum(dim=1)
    else:
        rows = (t * (t.log() - s.log())).sum(dim=1)
    return rows.mean()


def _validate_datasets(datasets, teachers):
    if not datasets:
        raise ConfigError("distillation needs at least one synthetic dataset")
    shapes = set()
    classes = set()
    for ds in datasets:
        if not isinstance(ds, SyntheticDataset):
            raise DataFreenessError(
                "distillation only accepts synthetic datasets with provenance, "
                f"got {type(ds).__name__}")
        for i in ds.provenance.teacher_ids:
            if i not in teachers:
                raise InputError(
                    f"dataset {ds.provenance.label()} needs teacher {i}")
        shapes.add(tuple(ds.images.shape[1:]))
        classes.add(ds.num_classes)
    if len(shapes) != 1 or len(classes) != 1:
        raise InputError("synthetic datasets disagree on shape or classes")


def train_student(teachers: dict, datasets: list, config: DistillConfig,
                  spec: ClassifierSpec | None = None):
    """Distill all datasets into one student; returns (StudentModel, trace).

    Soft targets are precomputed once per example (teachers are frozen, so
    they never change across epochs), then the student runs normal epoch
    shuffles over the pooled synthetic data.
    """
    _validate_datasets(datasets, teachers)
    if spec is None:
        spec = next(iter(teachers.values())).spec

    x = torch.cat([ds.images for ds in datasets])
    targets = []
    for ds in datasets:
        for start in range(0, len(ds), config.batch_size):
            chunk = ds.images[start:start + config.batch_size]
            targets.append(soft_target(chunk, ds.provenance, teachers,
                                       config.temperature))
    p = torch.cat(targets)

    if config.student_init == "pretrained":
        loaded = load_checkpoint(config.pretrained_path)
        net = loaded.net if hasattr(loaded, "net") else loaded
        if net.spec != spec:
            raise ConfigError("pretrained student has a different spec")
    else:
        torch.manual_seed(derive_seed(config.seed, "student-init"))
        net = ConvNet(spec)

    gen = torch.Generator().manual_seed(derive_seed(config.seed, "shuffle"))
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    trace = []
    n = x.shape[0]
    for epoch in range(config.epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            student_probs = F.softmax(net(x[idx]) / config.temperature, dim=1)
            loss = kd_loss(student_probs, p[idx], config.kl_direction)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite distillation loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        trace.append(float(np.mean(losses)))
    net.eval()
    return StudentModel(net, training_seed=config.seed), trace
