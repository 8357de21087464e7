"""Cross-domain synthesis: images that carry one domain's content statistics
through another domain's teacher.

For an ordered teacher pair (a, b), the moment targets are teacher a's
BN-input statistics measured on the stage-1 dataset generated from teacher b,
and both teachers must classify the new images correctly. The pair is
asymmetric by construction: (a, b) and (b, a) yield different targets.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataFreenessError, InputError
from .models import BNStats, TeacherModel, check_layer_alignment, forward_with_bn_stats
from .inversion import (
    AugmentPolicy,
    GapSamples,
    Provenance,
    RelaxationMargins,
    SyntheticDataset,
    _check_labels,
    _optimize_batches,
    image_prior_loss,
    moment_matching_loss,
    relaxation_margins,
)
from .seeds import derive_seed
from . import tensorio


@dataclass(frozen=True)
class FusionConfig:
    """Cross-domain synthesis settings (stage 2), per ordered teacher pair."""

    alpha1: float = 1.0           # weight of the image prior
    alpha2: float = 1.0           # weight of the relaxed moment match
    tv_weight: float = 1e-4
    l2_weight: float = 1e-5
    epsilon: float = 95.0         # percentile over per-batch stored-vs-data gaps
    steps_per_batch: int = 1000
    learning_rate: float = 0.1
    batch_size: int = 64
    num_images: int = 512
    augment: AugmentPolicy = AugmentPolicy()
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 100.0:
            raise ConfigError("epsilon must be a percentile in [0, 100]")
        if min(self.steps_per_batch, self.batch_size, self.num_images) < 1:
            raise ConfigError("steps/batch_size/num_images must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def describe(self) -> dict:
        return {
            "alpha1": self.alpha1, "alpha2": self.alpha2,
            "tv_weight": self.tv_weight, "l2_weight": self.l2_weight,
            "epsilon": self.epsilon, "steps_per_batch": self.steps_per_batch,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "num_images": self.num_images, "augment": self.augment.describe(),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "FusionConfig":
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentPolicy.from_dict(d["augment"])
        return FusionConfig(**d)


def config_for_pair(cfg: FusionConfig, run_seed: int, a: int, b: int) -> FusionConfig:
    return replace(cfg, seed=derive_seed(run_seed, "fuse", a, b))


@dataclass
class CrossDomainTargets:
    """Moment targets and margins for one ordered pair (model a, data b).

    `targets` are teacher a's BN-input moments over all of domain b's
    generated images, `margins` the epsilon-th percentile of the per-batch
    stored-vs-generated gaps, and `gap_samples` the raw gaps they came from.
    """

    source_model_domain: int
    data_domain: int
    targets: BNStats
    margins: RelaxationMargins
    gap_samples: GapSamples

    def __post_init__(self):
        if self.source_model_domain == self.data_domain:
            raise InputError("cross-domain pair needs two distinct domains")
        check_layer_alignment(self.targets, self.margins,
                              what="cross-domain targets")

    def to_manifest(self) -> dict:
        return {
            "source_model_domain": self.source_model_domain,
            "data_domain": self.data_domain,
            "moments_from": f"teacher {self.source_model_domain} on generated data "
                            f"of domain {self.data_domain}",
            "targets": self.targets.to_manifest(),
            "margins": self.margins.to_manifest(),
        }


def compute_cross_domain_targets(teacher_a: TeacherModel,
                                 dataset_b: SyntheticDataset,
                                 batch_size: int,
                                 epsilon: float) -> CrossDomainTargets:
    """Run domain b's generated images through teacher a; pool the per-batch
    moments into dataset-level targets and set margins at the epsilon-th
    percentile of the per-batch gaps.

    Pooling uses the law of total variance in float64, so a single batch
    reproduces its own statistics exactly and multiple batches combine into
    true dataset-level moments.
    """
    if not isinstance(teacher_a, TeacherModel):
        raise InputError("teacher_a must be a TeacherModel")
    if not isinstance(dataset_b, SyntheticDataset):
        raise DataFreenessError(
            "cross-domain targets must come from synthetic data, got "
            f"{type(dataset_b).__name__}")
    if dataset_b.provenance.kind != "domain_specific":
        raise InputError("dataset_b must be a stage-1 (domain_specific) dataset")
    if dataset_b.provenance.source_domain == teacher_a.domain_id:
        raise InputError("cross-domain pair needs two distinct domains")
    if batch_size < 1:
        raise InputError("batch_size must be positive")

    stored = teacher_a.stored_stats
    n_layers = stored.num_layers
    batch_stats: list[BNStats] = []
    sizes: list[int] = []
    with torch.no_grad():
        for start in range(0, len(dataset_b), batch_size):
            chunk = dataset_b.images[start:start + batch_size]
            _, stats = forward_with_bn_stats(teacher_a, chunk)
            check_layer_alignment(stats, stored, what="cross-domain capture")
            batch_stats.append(stats.detached())
            sizes.append(chunk.shape[0])

    num_batches = len(batch_stats)
    mean_gaps = np.empty((n_layers, num_batches), dtype=np.float64)
    var_gaps = np.empty((n_layers, num_batches), dtype=np.float64)
    for k, stats in enumerate(batch_stats):
        for l in range(n_layers):
            mean_gaps[l, k] = torch.linalg.vector_norm(
                stats.means[l] - stored.means[l]).item()
            var_gaps[l, k] = torch.linalg.vector_norm(
                stats.variances[l] - stored.variances[l]).item()
    gaps = GapSamples(stored.layer_ids, mean_gaps, var_gaps)
    margins = relaxation_margins(gaps, epsilon)

    if num_batches == 1:
        targets = batch_stats[0]
    else:
        weights = np.asarray(sizes, dtype=np.float64)
        weights = weights / weights.sum()
        means, variances = [], []
        for l in range(n_layers):
            mus = np.stack([s.means[l].numpy().astype(np.float64) for s in batch_stats])
            sig = np.stack([s.variances[l].numpy().astype(np.float64) for s in batch_stats])
            mu = (weights[:, None] * mus).sum(axis=0)
            second = (weights[:, None] * (sig + mus ** 2)).sum(axis=0)
            var = np.maximum(second - mu ** 2, 0.0)
            means.append(torch.from_numpy(mu.astype(np.float32)))
            variances.append(torch.from_numpy(var.astype(np.float32)))
        targets = BNStats(stored.layer_ids, means, variances)

    return CrossDomainTargets(teacher_a.domain_id,
                              dataset_b.provenance.source_domain,
                              targets, margins, gaps)


def _cross_domain_terms(teacher_a, teacher_b, images, labels, targets, config):
    logits_a, stats = forward_with_bn_stats(teacher_a, images)
    logits_b = teacher_b.net(images)  # frozen and eval; input grads still flow
    ce = F.cross_entropy(logits_a, labels) + F.cross_entropy(logits_b, labels)
    prior = image_prior_loss(images, config.tv_weight, config.l2_weight)
    moment = moment_matching_loss(stats, targets.targets, targets.margins)
    total = ce + config.alpha1 * prior + config.alpha2 * moment
    return {"ce": ce, "prior": prior, "moment": moment, "total": total}


def cross_domain_loss(teacher_a: TeacherModel, teacher_b: TeacherModel,
                      images: torch.Tensor, labels: torch.Tensor,
                      targets: CrossDomainTargets,
                      config: FusionConfig) -> torch.Tensor:
    """Both teachers' classification losses plus prior and the relaxed match
    of teacher a's batch moments against the cross-domain targets."""
    if teacher_a.domain_id != targets.source_model_domain:
        raise InputError("targets were computed for a different source model")
    if teacher_b.domain_id != targets.data_domain:
        raise InputError("teacher_b must own the data domain of the targets")
    _check_labels(labels, images.shape[0], teacher_a.spec.num_classes)
    return _cross_domain_terms(teacher_a, teacher_b, images, labels,
                               targets, config)["total"]


def synthesize_cross_domain_dataset(teacher_a: TeacherModel,
                                    teacher_b: TeacherModel,
                                    dataset_b: SyntheticDataset,
                                    config: FusionConfig) -> SyntheticDataset:
    """Generate the (a, b) pair dataset: images both teachers agree on,
    whose statistics under teacher a track those of teacher b's stage-1
    data (stage 2)."""
    if teacher_a.domain_id == teacher_b.domain_id:
        raise InputError("cross-domain synthesis needs two distinct teachers")
    if dataset_b.provenance != Provenance(teacher_b.domain_id):
        raise InputError(
            f"dataset provenance {dataset_b.provenance.label()} does not match "
            f"teacher_b domain {teacher_b.domain_id}")
    targets = compute_cross_domain_targets(
        teacher_a, dataset_b, config.batch_size, config.epsilon)

    def terms(xa, labels):
        return _cross_domain_terms(teacher_a, teacher_b, xa, labels, targets, config)

    images, labels, traces = _optimize_batches(
        teacher_a.spec, teacher_a.spec.num_classes, config, config.seed, terms,
        f"stage2 pair ({teacher_a.domain_id},{teacher_b.domain_id})")
    return SyntheticDataset(
        images, labels, teacher_a.spec.num_classes,
        Provenance(teacher_a.domain_id, teacher_b.domain_id),
        config_digest=tensorio.config_digest(config.describe()),
        teacher_hashes={"teacher_a": teacher_a.param_hash(),
                        "teacher_b": teacher_b.param_hash()},
        loss_traces=traces,
        targets_audit=targets,
    )
