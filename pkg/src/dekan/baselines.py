"""Reference points: teacher ensembles, a target-val oracle, plain
multi-teacher inversion without the cross-domain stage, and pooled-source ERM.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .models import ClassifierSpec, ConvNet, TeacherModel
from .trainer import TrainConfig, train_classifier, eval_accuracy
from .inversion import InversionConfig, config_for_domain, synthesize_domain_dataset
from .distillation import DistillConfig, train_student
from .seeds import derive_seed

ENTROPY_FLOOR = 1e-12


def _teacher_prob_stack(teachers: list, batch: torch.Tensor) -> torch.Tensor:
    """(M, N, K) softmax outputs of every teacher on the batch."""
    if not teachers:
        raise ConfigError("ensemble needs at least one teacher")
    if not isinstance(batch, torch.Tensor) or batch.dim() != 4:
        raise InputError("batch must be a (N,C,H,W) tensor")
    probs = []
    classes = set()
    with torch.no_grad():
        for t in teachers:
            net = t.net if isinstance(t, TeacherModel) else t
            net.eval()
            out = F.softmax(net(batch), dim=1)
            classes.add(out.shape[1])
            probs.append(out)
    if len(classes) != 1:
        raise InputError("teachers disagree on the number of classes")
    return torch.stack(probs)


def avg_pred(teachers: list, batch: torch.Tensor) -> torch.Tensor:
    """Mean of the teachers' softmax outputs; rows stay stochastic."""
    return _teacher_prob_stack(teachers, batch).mean(dim=0)


def highest_conf(teachers: list, batch: torch.Tensor) -> torch.Tensor:
    """Per example, the prediction of the lowest-entropy teacher.

    Entropy is -sum(p * ln(max(p, 1e-12))); ties pick the lowest teacher
    index, so the output rows are always exact copies of some teacher's row.
    """
    stack = _teacher_prob_stack(teachers, batch)          # (M, N, K)
    p = stack.numpy()
    entropy = -(p * np.log(np.maximum(p, ENTROPY_FLOOR))).sum(axis=2)  # (M, N)
    winner = entropy.argmin(axis=0)                       # first minimum wins
    n = p.shape[1]
    return stack[torch.from_numpy(winner), torch.arange(n)]


def best_teacher_oracle(teachers: list, val_images, val_labels):
    """Pick the teacher with the best accuracy on the given validation data.

    This peeks at target-domain data, so every report flags it as an oracle.
    Ties resolve to the lowest teacher index. Returns (index, accuracies).
    """
    if not teachers:
        raise InputError("need at least one teacher")
    val_images = np.asarray(val_images)
    if val_images.shape[0] == 0:
        raise InputError("validation set is empty")
    accs = []
    for t in teachers:
        net = t.net if isinstance(t, TeacherModel) else t
        accs.append(eval_accuracy(net, val_images, val_labels))
    best = int(np.argmax(accs))
    return best, accs


def run_multi_di(teachers: dict, inversion_cfg: InversionConfig,
                 distill_cfg: DistillConfig, run_seed: int,
                 stage1: dict | None = None):
    """Multi-teacher inversion baseline: stage 1 + distillation, no fusion.

    Returns (student, trace, stage1_datasets); pass precomputed stage-1
    datasets to share them with the full pipeline.
    """
    if not teachers:
        raise ConfigError("need at least one teacher")
    if stage1 is None:
        stage1 = {
            i: synthesize_domain_dataset(t, config_for_domain(inversion_cfg, run_seed, i))
            for i, t in sorted(teachers.items())
        }
    datasets = [stage1[i] for i in sorted(stage1)]
    student, trace = train_student(teachers, datasets, distill_cfg)
    return student, trace, stage1


def train_erm(source_domains: list, spec: ClassifierSpec, cfg: TrainConfig):
    """Train the student architecture on pooled original source data.

    Not data-free; reports must flag it. Returns (net, history).
    """
    if not source_domains:
        raise ConfigError("ERM needs at least one source domain")
    images = np.concatenate([d.splits["train"].images for d in source_domains])
    labels = np.concatenate([d.splits["train"].labels for d in source_domains])
    val_images = np.concatenate([d.splits["val"].images for d in source_domains])
    val_labels = np.concatenate([d.splits["val"].labels for d in source_domains])
    torch.manual_seed(derive_seed(cfg.seed, "erm-init"))
    net = ConvNet(spec)
    history = train_classifier(net, images, labels, cfg, val_images, val_labels)
    return net, history
