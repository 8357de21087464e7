"""Leave-one-domain-out evaluation protocol, result tables and embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import InputError, PersistenceError
from .bench import MultiDomainBenchmark, leave_one_out_splits
from . import tensorio


def accuracy(predictor, images: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy of a score function; argmax ties go to the lowest index."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise InputError("cannot score an empty evaluation set")
    if labels.shape != (images.shape[0],):
        raise InputError("labels must be one int per image")
    scores = predictor(images)
    if isinstance(scores, torch.Tensor):
        scores = scores.detach().cpu().numpy()
    scores = np.asarray(scores)
    if scores.shape[0] != images.shape[0] or scores.ndim != 2:
        raise InputError("predictor must return one score row per image")
    preds = np.argmax(scores, axis=1)
    return float((preds == labels).mean())


def model_predictor(model, batch_size: int = 256):
    """Wrap a model into a numpy score function with batched forwards."""
    from .models import forward_logits

    def predict(images: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
        outs = [forward_logits(model, x[s:s + batch_size]).numpy()
                for s in range(0, x.shape[0], batch_size)]
        return np.concatenate(outs)

    return predict


@dataclass
class ExperimentResult:
    """One method's leave-one-out accuracies, averaged over seeds."""

    method: str
    domain_names: list[str]
    per_target: list[float]        # mean accuracy per held-out domain
    average: float
    seeds: list[int]
    flags: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)  # one per (target, seed)

    def __post_init__(self):
        if len(self.per_target) != len(self.domain_names):
            raise InputError("per_target must align with domain_names")
        if not self.per_target:
            raise InputError("result needs at least one target domain")
        if abs(self.average - float(np.mean(self.per_target))) > 1e-9:
            raise InputError("average must equal the mean of per-target values")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "domain_names": list(self.domain_names),
            "per_target": [float(v) for v in self.per_target],
            "average": float(self.average),
            "seeds": list(self.seeds),
            "flags": dict(self.flags),
            "records": list(self.records),
        }


def run_protocol(bench: MultiDomainBenchmark, method: str, seeds,
                 runner) -> ExperimentResult:
    """Hold out each domain in turn; train on the rest via `runner`.

    runner(method, target_id, seed) must return (predictor, flags) where the
    predictor scores numpy image batches. Deterministic given the same seeds
    and runner.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise InputError("need at least one seed")
    per_target = []
    records = []
    flags: dict = {}
    for target_id in [d.domain_id for d in bench.domains]:
        _, target = leave_one_out_splits(bench, target_id)
        accs = []
        for seed in seeds:
            predictor, run_flags = runner(method, target_id, seed)
            flags = dict(run_flags) if run_flags else flags
            acc = accuracy(predictor, target.splits["test"].images,
                           target.splits["test"].labels)
            accs.append(acc)
            records.append({
                "method": method, "target": target.name,
                "target_id": target_id, "seed": seed, "accuracy": acc,
            })
        per_target.append(float(np.mean(accs)))
    return ExperimentResult(
        method=method,
        domain_names=bench.domain_names,
        per_target=per_target,
        average=float(np.mean(per_target)),
        seeds=seeds,
        flags=flags,
        records=records,
    )


@dataclass
class ResultsTable:
    domain_names: list[str]
    rows: list[dict]      # method, per_target, average, flags

    def render_text(self) -> str:
        """Fixed-width table; percentages with one decimal. The Avg column is
        rounded from the full-precision mean, not from rounded cells."""
        headers = ["Algorithm"] + list(self.domain_names) + ["Avg"]
        lines = []
        for row in self.rows:
            name = row["method"] + _flag_suffix(row["flags"])
            cells = [f"{100.0 * v:.1f}" for v in row["per_target"]]
            cells.append(f"{100.0 * row['average']:.1f}")
            lines.append([name] + cells)
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h)
                  for i, h in enumerate(headers)]
        def fmt(cells):
            return "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                             for i, (c, w) in enumerate(zip(cells, widths)))
        out = [fmt(headers), fmt(["-" * w for w in widths])]
        out += [fmt(l) for l in lines]
        return "\n".join(out) + "\n"

    def to_csv(self) -> str:
        headers = ["method"] + list(self.domain_names) + ["avg", "flags"]
        lines = [",".join(headers)]
        for row in self.rows:
            flags = ";".join(k for k, v in sorted(row["flags"].items()) if v)
            cells = [row["method"]]
            cells += [repr(float(v)) for v in row["per_target"]]
            cells += [repr(float(row["average"])), flags]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def _flag_suffix(flags: dict) -> str:
    tags = []
    if flags.get("oracle"):
        tags.append("oracle")
    if flags.get("not_data_free"):
        tags.append("not data-free")
    return f" ({', '.join(tags)})" if tags else ""


def aggregate_table(results: list[ExperimentResult]) -> ResultsTable:
    """Combine per-method results into one table; domains must agree."""
    if not results:
        raise InputError("no results to aggregate")
    names = results[0].domain_names
    for r in results[1:]:
        if r.domain_names != names:
            raise InputError(
                f"results cover different domains: {r.domain_names} vs {names}")
    rows = [{
        "method": r.method,
        "per_target": [float(v) for v in r.per_target],
        "average": float(r.average),
        "flags": dict(r.flags),
    } for r in results]
    return ResultsTable(list(names), rows)


def pca_2d(features: np.ndarray) -> np.ndarray:
    """Two principal components via SVD with a deterministic sign convention
    (each component's largest-magnitude coordinate is made positive)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InputError("PCA needs a (N,d) matrix with N >= 2")
    centered = feats - feats.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # d == 1; pad a zero direction
        comps = np.vstack([comps, np.zeros_like(comps)])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return (centered @ comps.T).astype(np.float32)


def export_embeddings(model, images: np.ndarray, labels: np.ndarray,
                      tags: list[str], out_dir) -> Path:
    """Write penultimate-layer features, a 2-D PCA projection and a manifest."""
    from .models import _resolve_net

    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.shape[0] != labels.shape[0] or images.shape[0] != len(tags):
        raise InputError("images, labels and tags must align")
    net = _resolve_net(model)
    net.eval()
    feats = []
    x = torch.as_tensor(images, dtype=torch.float32)
    with torch.no_grad():
        for s in range(0, x.shape[0], 256):
            feats.append(net.penultimate(x[s:s + 256]).numpy())
    feats = np.concatenate(feats).astype(np.float32)
    proj = pca_2d(feats)

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        f_entry = tensorio.save_array(out / "features.f32", feats)
        p_entry = tensorio.save_array(out / "projection.f32", proj)
        tensorio.write_json(out / "manifest.json", {
            "format": "dekan-embeddings-v1",
            "features": f_entry,
            "projection": p_entry,
            "labels": labels.tolist(),
            "tags": list(tags),
        })
    except OSError as e:
        raise PersistenceError(f"cannot write embeddings under {out}: {e}") from e
    return out
