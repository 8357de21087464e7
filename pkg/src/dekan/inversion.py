"""Synthesis of labeled images from a frozen teacher, no original data.

Pixels of a noise-initialized batch are optimized so the teacher assigns
them chosen labels while batch statistics stay inside a relaxed band around
the teacher's stored BN statistics. The relaxation margins come from the
percentile of stored-vs-random-noise statistic gaps, so a configurable
epsilon interpolates between strict moment matching and none at all.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, PersistenceError, SynthesisError
from .models import BNStats, TeacherModel, check_layer_alignment, forward_with_bn_stats
from .seeds import derive_seed
from . import tensorio

SYNTHETIC_FORMAT = "dekan-synthetic-v1"


@dataclass(frozen=True)
class Provenance:
    """Which teacher(s) a synthetic image was generated from.

    data_domain is None for plain per-teacher synthesis; for cross-domain
    synthesis it names the domain whose generated images supplied the
    moment targets.
    """

    source_domain: int
    data_domain: int | None = None

    @property
    def kind(self) -> str:
        return "domain_specific" if self.data_domain is None else "cross_domain"

    @property
    def teacher_ids(self) -> tuple[int, ...]:
        if self.data_domain is None:
            return (self.source_domain,)
        return (self.source_domain, self.data_domain)

    def label(self) -> str:
        if self.data_domain is None:
            return f"domain_specific({self.source_domain})"
        return f"cross_domain({self.source_domain},{self.data_domain})"

    @staticmethod
    def parse(label: str) -> "Provenance":
        m = re.fullmatch(r"domain_specific\((\d+)\)", label)
        if m:
            return Provenance(int(m.group(1)))
        m = re.fullmatch(r"cross_domain\((\d+),(\d+)\)", label)
        if m:
            return Provenance(int(m.group(1)), int(m.group(2)))
        raise InputError(f"unrecognized provenance label {label!r}")


@dataclass(frozen=True)
class AugmentPolicy:
    """Random flip/jitter/cutout applied to the batch at every synthesis step."""

    horizontal_flip: bool = False
    jitter_max_pixels: int = 2
    cutout: bool = True
    cutout_size: int = 8
    fill_value: float = 0.0

    def __post_init__(self):
        if self.jitter_max_pixels < 0:
            raise ConfigError("jitter_max_pixels must be non-negative")
        if self.cutout and self.cutout_size < 1:
            raise ConfigError("cutout_size must be positive when cutout is on")

    @property
    def is_identity(self) -> bool:
        return (not self.horizontal_flip and self.jitter_max_pixels == 0
                and not self.cutout)

    def describe(self) -> dict:
        return {
            "horizontal_flip": self.horizontal_flip,
            "jitter_max_pixels": self.jitter_max_pixels,
            "cutout": self.cutout,
            "cutout_size": self.cutout_size,
            "fill_value": self.fill_value,
        }

    @staticmethod
    def from_dict(d: dict) -> "AugmentPolicy":
        return AugmentPolicy(**d)


@dataclass(frozen=True)
class InversionConfig:
    """Per-teacher synthesis settings (stage 1)."""

    lambda1: float = 1.0          # weight of the image prior
    lambda2: float = 1.0          # weight of the relaxed moment match
    tv_weight: float = 1e-4
    l2_weight: float = 1e-5
    epsilon: float = 95.0         # percentile for relaxation margins
    steps_per_batch: int = 1000
    learning_rate: float = 0.1
    batch_size: int = 64
    num_images: int = 1024
    margin_batches: int = 32
    augment: AugmentPolicy = AugmentPolicy()
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 100.0:
            raise ConfigError("epsilon must be a percentile in [0, 100]")
        if min(self.steps_per_batch, self.batch_size, self.num_images,
               self.margin_batches) < 1:
            raise ConfigError("steps/batch_size/num_images/margin_batches must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def describe(self) -> dict:
        d = {
            "lambda1": self.lambda1, "lambda2": self.lambda2,
            "tv_weight": self.tv_weight, "l2_weight": self.l2_weight,
            "epsilon": self.epsilon, "steps_per_batch": self.steps_per_batch,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "num_images": self.num_images, "margin_batches": self.margin_batches,
            "augment": self.augment.describe(), "seed": self.seed,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "InversionConfig":
        d = dict(d)
        if "augment" in d:
            d["augment"] = AugmentPolicy.from_dict(d["augment"])
        return InversionConfig(**d)


def config_for_domain(cfg: InversionConfig, run_seed: int, domain_id: int) -> InversionConfig:
    """Give each (run seed, domain) its own synthesis RNG substream."""
    return replace(cfg, seed=derive_seed(run_seed, "invert", domain_id))


@dataclass
class GapSamples:
    """Observed stored-vs-batch statistic gaps, one row per BN layer."""

    layer_ids: tuple[int, ...]
    mean_gaps: np.ndarray   # (L, num_batches) float64
    var_gaps: np.ndarray

    def __post_init__(self):
        self.mean_gaps = np.asarray(self.mean_gaps, dtype=np.float64)
        self.var_gaps = np.asarray(self.var_gaps, dtype=np.float64)
        if self.mean_gaps.shape != self.var_gaps.shape or self.mean_gaps.ndim != 2:
            raise InputError("gap arrays must both be (layers, batches)")
        if self.mean_gaps.shape[0] != len(self.layer_ids):
            raise InputError("gap rows must align with layer_ids")
        if self.mean_gaps.shape[1] < 1:
            raise InputError("need at least one gap sample per layer")
        if (self.mean_gaps < 0).any() or (self.var_gaps < 0).any():
            raise InputError("gaps are norms and must be non-negative")


@dataclass
class RelaxationMargins:
    """Per-layer slack for the hinged moment-matching loss."""

    layer_ids: tuple[int, ...]
    deltas: np.ndarray    # (L,) slack on mean gaps
    gammas: np.ndarray    # (L,) slack on variance gaps

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        self.gammas = np.asarray(self.gammas, dtype=np.float64)
        if self.deltas.shape != (len(self.layer_ids),) or self.gammas.shape != self.deltas.shape:
            raise InputError("margins must hold one value per BN layer")
        if (self.deltas < 0).any() or (self.gammas < 0).any():
            raise InputError("margins must be non-negative")

    def to_manifest(self) -> dict:
        return {
            "layer_ids": list(self.layer_ids),
            "deltas": self.deltas.tolist(),
            "gammas": self.gammas.tolist(),
        }


def image_prior_loss(images: torch.Tensor, tv_weight: float = 1e-4,
                     l2_weight: float = 1e-5) -> torch.Tensor:
    """Squared-difference total variation plus squared L2 norm of the batch."""
    if not isinstance(images, torch.Tensor) or images.dim() != 4:
        raise InputError("images must be a (N,C,H,W) tensor")
    if not torch.isfinite(images).all():
        raise InputError("images must be finite")
    dh = images[:, :, :, 1:] - images[:, :, :, :-1]
    dv = images[:, :, 1:, :] - images[:, :, :-1, :]
    tv = dh.pow(2).sum() + dv.pow(2).sum()
    l2 = images.pow(2).sum()
    return tv_weight * tv + l2_weight * l2


def random_stat_gap_samples(teacher: TeacherModel, num_batches: int,
                            batch_size: int, seed: int) -> GapSamples:
    """Gaps between stored BN stats and stats of standard-normal noise batches.

    These calibrate how far a completely uninformative batch sits from the
    stored statistics, which anchors the relaxation percentile.
    """
    if num_batches < 1 or batch_size < 1:
        raise InputError("num_batches and batch_size must be positive")
    stored = teacher.stored_stats
    gen = torch.Generator().manual_seed(seed)
    n_layers = stored.num_layers
    mean_gaps = np.empty((n_layers, num_batches), dtype=np.float64)
    var_gaps = np.empty((n_layers, num_batches), dtype=np.float64)
    with torch.no_grad():
        for b in range(num_batches):
            noise = torch.randn(batch_size, *teacher.spec.input_shape, generator=gen)
            _, stats = forward_with_bn_stats(teacher, noise)
            check_layer_alignment(stats, stored, what="gap sampling stats")
            for l in range(n_layers):
                mean_gaps[l, b] = torch.linalg.vector_norm(
                    stats.means[l] - stored.means[l]).item()
                var_gaps[l, b] = torch.linalg.vector_norm(
                    stats.variances[l] - stored.variances[l]).item()
    return GapSamples(stored.layer_ids, mean_gaps, var_gaps)


def relaxation_margins(samples: GapSamples, epsilon: float) -> RelaxationMargins:
    """Per-layer epsilon-th percentile of the observed gaps.

    epsilon=0 reproduces the smallest observed gap, epsilon=100 the largest;
    values in between interpolate linearly between order statistics.
    """
    if not 0.0 <= epsilon <= 100.0:
        raise InputError("epsilon must be in [0, 100]")
    deltas = np.percentile(samples.mean_gaps, epsilon, axis=1)
    gammas = np.percentile(samples.var_gaps, epsilon, axis=1)
    return RelaxationMargins(samples.layer_ids, deltas, gammas)


def moment_matching_loss(batch_stats: BNStats, target_stats: BNStats,
                         margins: RelaxationMargins) -> torch.Tensor:
    """Hinged distance between batch and target BN statistics.

    Per layer: max(||mean gap|| - delta, 0) + max(||var gap|| - gamma, 0),
    summed over layers. Zero whenever every gap sits inside its margin.
    """
    check_layer_alignment(batch_stats, target_stats, margins,
                          what="moment matching inputs")
    total = None
    for l in range(batch_stats.num_layers):
        bm, tm = batch_stats.means[l], target_stats.means[l]
        bv, tv = batch_stats.variances[l], target_stats.variances[l]
        if bm.shape != tm.shape or bv.shape != tv.shape:
            raise InputError(f"layer {l}: stat vectors differ in width")
        gap_m = torch.linalg.vector_norm(bm - tm)
        gap_v = torch.linalg.vector_norm(bv - tv)
        term = (torch.clamp(gap_m - float(margins.deltas[l]), min=0.0)
                + torch.clamp(gap_v - float(margins.gammas[l]), min=0.0))
        total = term if total is None else total + term
    return total


def augment_batch(images: torch.Tensor, policy: AugmentPolicy, seed: int) -> torch.Tensor:
    """Differentiable per-image flip/jitter/cutout, deterministic in seed."""
    if not isinstance(images, torch.Tensor) or images.dim() != 4:
        raise InputError("images must be a (N,C,H,W) tensor")
    n, _, h, w = images.shape
    if policy.jitter_max_pixels >= min(h, w):
        raise InputError("jitter_max_pixels must be smaller than the image side")
    if policy.cutout and policy.cutout_size > min(h, w):
        raise InputError("cutout_size cannot exceed the image side")
    if policy.is_identity:
        return images
    gen = torch.Generator().manual_seed(seed)
    x = images
    if policy.horizontal_flip:
        flip = torch.rand(n, generator=gen) < 0.5
        x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    if policy.jitter_max_pixels > 0:
        j = policy.jitter_max_pixels
        padded = F.pad(x, (j, j, j, j), mode="reflect")
        offsets = torch.randint(0, 2 * j + 1, (n, 2), generator=gen)
        shifted = [padded[i, :, oy:oy + h, ox:ox + w]
                   for i, (oy, ox) in enumerate(offsets.tolist())]
        x = torch.stack(shifted)
    if policy.cutout:
        s = policy.cutout_size
        ys = torch.randint(0, h - s + 1, (n,), generator=gen)
        xs = torch.randint(0, w - s + 1, (n,), generator=gen)
        mask = torch.zeros(n, 1, h, w, dtype=x.dtype)
        for i in range(n):
            y0, x0 = int(ys[i]), int(xs[i])
            mask[i, :, y0:y0 + s, x0:x0 + s] = 1.0
        x = x * (1.0 - mask) + policy.fill_value * mask
    return x


def _check_labels(labels: torch.Tensor, n: int, num_classes: int) -> None:
    if not isinstance(labels, torch.Tensor) or labels.dim() != 1 or labels.shape[0] != n:
        raise InputError("labels must be a 1-D tensor matching the batch")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")


def _domain_inversion_terms(teacher, images, labels, margins, config):
    logits, stats = forward_with_bn_stats(teacher, images)
    ce = F.cross_entropy(logits, labels)
    prior = image_prior_loss(images, config.tv_weight, config.l2_weight)
    moment = moment_matching_loss(stats, teacher.stored_stats, margins)
    total = ce + config.lambda1 * prior + config.lambda2 * moment
    return {"ce": ce, "prior": prior, "moment": moment, "total": total}


def domain_inversion_loss(teacher: TeacherModel, images: torch.Tensor,
                          labels: torch.Tensor, margins: RelaxationMargins,
                          config: InversionConfig) -> torch.Tensor:
    """Classification loss on the teacher plus weighted prior and moment terms."""
    if not isinstance(teacher, TeacherModel):
        raise InputError("teacher must be a TeacherModel")
    _check_labels(labels, images.shape[0], teacher.spec.num_classes)
    return _domain_inversion_terms(teacher, images, labels, margins, config)["total"]


@dataclass
class SyntheticDataset:
    """Generated images plus the provenance needed for distillation and audit."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    provenance: Provenance
    config_digest: str = ""
    teacher_hashes: dict = field(default_factory=dict)
    loss_traces: list = field(default_factory=list)
    targets_audit: object = None

    def __post_init__(self):
        if not isinstance(self.images, torch.Tensor) or self.images.dim() != 4:
            raise InputError("images must be a (N,C,H,W) tensor")
        if self.images.shape[0] < 1:
            raise InputError("synthetic dataset cannot be empty")
        lo, hi = float(self.images.min()), float(self.images.max())
        if not (np.isfinite(lo) and np.isfinite(hi)) or lo < 0.0 or hi > 1.0:
            raise InputError("synthetic images must lie in [0,1]")
        _check_labels(self.labels, self.images.shape[0], self.num_classes)
        if not isinstance(self.provenance, Provenance):
            raise InputError("provenance must be a Provenance value")

    def __len__(self):
        return int(self.images.shape[0])


def _optimize_batches(spec, num_classes, loop_cfg, seed, terms_fn, stage: str):
    """Shared Adam-on-pixels loop for both synthesis stages.

    loop_cfg supplies num_images/batch_size/steps_per_batch/learning_rate/
    augment; terms_fn maps (augmented batch, labels) to a dict of loss terms
    with key "total".
    """
    images_out, labels_out, traces = [], [], []
    remaining = loop_cfg.num_images
    b = 0
    while remaining > 0:
        nb = min(loop_cfg.batch_size, remaining)
        remaining -= nb
        gen = torch.Generator().manual_seed(derive_seed(seed, "batch", b))
        labels = torch.randint(0, num_classes, (nb,), generator=gen)
        x = torch.randn(nb, *spec.input_shape, generator=gen)
        x.requires_grad_(True)
        opt = torch.optim.Adam([x], lr=loop_cfg.learning_rate)
        trace = []
        for step in range(loop_cfg.steps_per_batch):
            opt.zero_grad()
            xa = augment_batch(x, loop_cfg.augment, derive_seed(seed, "augment", b, step))
            terms = terms_fn(xa, labels)
            total = terms["total"]
            if not torch.isfinite(total):
                parts = ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
                raise SynthesisError(
                    f"{stage}: non-finite loss at batch {b} step {step} ({parts})")
            total.backward()
            opt.step()
            with torch.no_grad():
                x.clamp_(0.0, 1.0)
            trace.append(float(total.detach()))
        images_out.append(x.detach().clone())
        labels_out.append(labels)
        traces.append(trace)
        b += 1
    return torch.cat(images_out), torch.cat(labels_out), traces


def synthesize_domain_dataset(teacher: TeacherModel,
                              config: InversionConfig) -> SyntheticDataset:
    """Generate a labeled dataset from one frozen teacher (stage 1).

    Margins are calibrated from stored-vs-noise gaps at config.epsilon, then
    noise batches are optimized against the combined inversion loss. Labels
    are drawn uniformly; pixels are clamped to [0,1] after every step.
    """
    if not isinstance(teacher, TeacherModel):
        raise InputError("teacher must be a TeacherModel")
    gaps = random_stat_gap_samples(
        teacher, config.margin_batches, config.batch_size,
        derive_seed(config.seed, "margin-noise"))
    margins = relaxation_margins(gaps, config.epsilon)

    def terms(xa, labels):
        return _domain_inversion_terms(teacher, xa, labels, margins, config)

    images, labels, traces = _optimize_batches(
        teacher.spec, teacher.spec.num_classes, config, config.seed, terms,
        f"stage1 domain {teacher.domain_id}")
    return SyntheticDataset(
        images, labels, teacher.spec.num_classes,
        Provenance(teacher.domain_id),
        config_digest=tensorio.config_digest(config.describe()),
        teacher_hashes={"teacher": teacher.param_hash()},
        loss_traces=traces,
    )


def save_synthetic_dataset(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    img_entry = tensorio.save_array(out / "images.f32",
                                    ds.images.numpy().astype(np.float32))
    lab_entry = tensorio.save_array(out / "labels.i64",
                                    ds.labels.numpy().astype(np.int64))
    manifest = {
        "format": SYNTHETIC_FORMAT,
        "num_classes": ds.num_classes,
        "provenance": ds.provenance.label(),
        "config_digest": ds.config_digest,
        "teacher_hashes": ds.teacher_hashes,
        "images": img_entry,
        "labels": lab_entry,
        "loss_traces": [[float(f"{v:.6g}") for v in t] for t in ds.loss_traces],
    }
    audit = getattr(ds.targets_audit, "to_manifest", None)
    if audit is not None:
        manifest["cross_domain_targets"] = audit()
    elif isinstance(ds.targets_audit, dict):
        manifest["cross_domain_targets"] = ds.targets_audit
    tensorio.write_json(out / "manifest.json", manifest)


def load_synthetic_dataset(in_dir) -> SyntheticDataset:
    out = Path(in_dir)
    manifest = tensorio.read_json(out / "manifest.json")
    if manifest.get("format") != SYNTHETIC_FORMAT:
        raise PersistenceError(f"{out} is not a synthetic dataset directory")
    images = tensorio.load_array(out / manifest["images"]["file"], manifest["images"])
    labels = tensorio.load_array(out / manifest["labels"]["file"], manifest["labels"])
    return SyntheticDataset(
        torch.from_numpy(images),
        torch.from_numpy(labels),
        int(manifest["num_classes"]),
        Provenance.parse(manifest["provenance"]),
        config_digest=manifest.get("config_digest", ""),
        teacher_hashes=manifest.get("teacher_hashes", {}),
        loss_traces=manifest.get("loss_traces", []),
        targets_audit=manifest.get("cross_domain_targets"),
    )
