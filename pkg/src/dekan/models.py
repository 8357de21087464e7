"""Classifier architecture, frozen teacher wrappers and BN statistic capture."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .errors import InputError, PersistenceError

CHECKPOINT_FORMAT = "dekan-checkpoint-v1"


@dataclass(frozen=True)
class ClassifierSpec:
    """Shape contract shared by teachers and the student."""

    input_shape: tuple[int, int, int] = (3, 32, 32)
    num_classes: int = 10
    channels: tuple[int, ...] = (32, 64, 128)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(shape) != 3 or min(shape) < 1:
            raise InputError(f"input_shape must be (C,H,W) positive, got {shape}")
        if self.num_classes < 2:
            raise InputError("num_classes must be at least 2")
        if len(self.channels) < 1 or min(self.channels) < 1:
            raise InputError("channels must name at least one positive block width")

    @property
    def num_bn_layers(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "channels": list(self.channels),
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierSpec":
        return ClassifierSpec(
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            channels=tuple(d["channels"]),
        )


class ConvNet(nn.Module):
    """Conv/BN/ReLU/pool blocks with global average pooling and a linear head.

    Every conv is bias-free 3x3 so the following BatchNorm owns the shift;
    pooling uses ceil_mode so inputs down to 1x1 stay legal.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        layers = []
        in_ch = spec.input_shape[0]
        for out_ch in spec.channels:
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2, ceil_mode=True),
            ]
            in_ch = out_ch
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, spec.num_classes)

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled feature vector right before the linear head."""
        return self.features(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.penultimate(x))


def build_classifier(spec: ClassifierSpec, init_seed: int | None = None) -> ConvNet:
    if init_seed is not None:
        torch.manual_seed(init_seed)
    return ConvNet(spec)


def bn_modules(net: nn.Module) -> list[nn.BatchNorm2d]:
    """BatchNorm2d layers in registration order (equals forward order here)."""
    return [m for m in net.modules() if isinstance(m, nn.BatchNorm2d)]


@dataclass
class BNStats:
    """Per-layer channel mean and variance vectors, ordered by BN layer."""

    layer_ids: tuple[int, ...]
    means: list[torch.Tensor]
    variances: list[torch.Tensor]

    def __post_init__(self):
        self.layer_ids = tuple(int(i) for i in self.layer_ids)
        if not (len(self.layer_ids) == len(self.means) == len(self.variances)):
            raise InputError("BNStats fields are misaligned")
        if len(self.layer_ids) == 0:
            raise InputError("BNStats needs at least one layer")
        if list(self.layer_ids) != sorted(set(self.layer_ids)):
            raise InputError("layer_ids must be strictly increasing")
        for m, v in zip(self.means, self.variances):
            if m.dim() != 1 or m.shape != v.shape:
                raise InputError("stats must be matching per-channel vectors")
            if not bool((v.detach() >= 0).all()):
                raise InputError("variances must be non-negative")

    @property
    def num_layers(self) -> int:
        return len(self.layer_ids)

    def detached(self) -> "BNStats":
        return BNStats(
            self.layer_ids,
            [m.detach().clone() for m in self.means],
            [v.detach().clone() for v in self.variances],
        )

    def to_manifest(self) -> dict:
        return {
            "layer_ids": list(self.layer_ids),
            "means": [m.detach().cpu().numpy().astype(float).tolist() for m in self.means],
            "variances": [v.detach().cpu().numpy().astype(float).tolist() for v in self.variances],
        }

    @staticmethod
    def from_manifest(d: dict) -> "BNStats":
        return BNStats(
            tuple(d["layer_ids"]),
            [torch.tensor(m, dtype=torch.float32) for m in d["means"]],
            [torch.tensor(v, dtype=torch.float32) for v in d["variances"]],
        )


def check_layer_alignment(*stats_like, what: str = "BN stats") -> None:
    ids = [tuple(s.layer_ids) for s in stats_like]
    if any(i != ids[0] for i in ids[1:]):
        raise InputError(f"{what} cover different BN layers: {ids}")


class _BNInputRecorder:
    """Collects per-channel mean/variance of every BN layer's input via
    forward pre-hooks. Variance is the population (biased) variance. Keeps
    autograd intact so the stats can sit inside a loss."""

    def __init__(self, net: nn.Module):
        self.net = net
        self.means: list[torch.Tensor] = []
        self.variances: list[torch.Tensor] = []
        self._handles = []

    def __enter__(self):
        for bn in bn_modules(self.net):
            self._handles.append(bn.register_forward_pre_hook(self._grab))
        if not self._handles:
            raise InputError("model has no BatchNorm2d layers to capture")
        return self

    def _grab(self, module, inputs):
        x = inputs[0]
        self.means.append(x.mean(dim=(0, 2, 3)))
        self.variances.append(x.var(dim=(0, 2, 3), unbiased=False))

    def __exit__(self, *exc):
        for h in self._handles:
            h.remove()
        self._handles.clear()
        return False


def _resolve_net(model) -> nn.Module:
    if isinstance(model, (TeacherModel, StudentModel)):
        return model.net
    if isinstance(model, nn.Module):
        return model
    raise InputError(f"expected a model, got {type(model).__name__}")


def _check_batch(net: nn.Module, batch: torch.Tensor) -> None:
    if not isinstance(batch, torch.Tensor) or batch.dim() != 4:
        raise InputError("batch must be a (N,C,H,W) tensor")
    if batch.shape[0] < 1:
        raise InputError("batch must hold at least one image")
    spec = getattr(net, "spec", None)
    if spec is not None and tuple(batch.shape[1:]) != tuple(spec.input_shape):
        raise InputError(
            f"batch shape {tuple(batch.shape[1:])} does not match model input {spec.input_shape}"
        )


def forward_with_bn_stats(model, batch: torch.Tensor) -> tuple[torch.Tensor, BNStats]:
    """One eval-mode forward returning logits plus captured BN-input stats.

    Gradients flow through both outputs; running statistics are untouched
    because the net stays in eval mode.
    """
    net = _resolve_net(model)
    _check_batch(net, batch)
    was_training = net.training
    net.eval()
    try:
        with _BNInputRecorder(net) as rec:
            logits = net(batch)
    finally:
        net.train(was_training)
    stats = BNStats(tuple(range(len(rec.means))), rec.means, rec.variances)
    return logits, stats


def capture_batch_bn_stats(model, batch: torch.Tensor) -> BNStats:
    """Per-channel mean and population variance of each BN layer's input."""
    _, stats = forward_with_bn_stats(model, batch)
    return stats


def forward_logits(model, batch: torch.Tensor) -> torch.Tensor:
    """Inference-only logits; never updates the model."""
    net = _resolve_net(model)
    _check_batch(net, batch)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            return net(batch)
    finally:
        net.train(was_training)


def stored_bn_stats(model) -> BNStats:
    """The running mean/variance each BN layer accumulated during training."""
    net = _resolve_net(model)
    bns = bn_modules(net)
    if not bns:
        raise InputError("model has no BatchNorm2d layers")
    return BNStats(
        tuple(range(len(bns))),
        [bn.running_mean.detach().clone() for bn in bns],
        [bn.running_var.detach().clone() for bn in bns],
    )


def state_dict_hash(model) -> str:
    """Content hash over parameters and buffers; detects any mutation."""
    net = _resolve_net(model)
    h = hashlib.sha256()
    sd = net.state_dict()
    for key in sorted(sd):
        t = sd[key]
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TeacherModel:
    """A frozen, inference-only classifier owned by one source domain."""

    def __init__(self, net: ConvNet, domain_id: int, training_seed: int | None = None,
                 val_accuracy: float | None = None):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.spec = net.spec
        self.domain_id = int(domain_id)
        self.training_seed = training_seed
        self.val_accuracy = val_accuracy
        self._stored = None

    @property
    def stored_stats(self) -> BNStats:
        if self._stored is None:
            self._stored = stored_bn_stats(self.net)
        return self._stored

    def param_hash(self) -> str:
        return state_dict_hash(self.net)

    def __repr__(self):
        return f"TeacherModel(domain_id={self.domain_id})"


class StudentModel:
    """The merged classifier produced by distillation (or a baseline)."""

    def __init__(self, net: ConvNet, training_seed: int | None = None):
        self.net = net.eval()
        self.spec = net.spec
        self.training_seed = training_seed

    def param_hash(self) -> str:
        return state_dict_hash(self.net)


def save_checkpoint(model, path) -> Path:
    """Serialize model weights plus a JSON sidecar manifest.

    The manifest repeats the spec, the stored BN statistics and a parameter
    hash so artifacts can be validated without loading the weights.
    """
    path = Path(path)
    net = _resolve_net(model)
    if isinstance(model, TeacherModel):
        kind, domain_id, seed = "teacher", model.domain_id, model.training_seed
        val_acc = model.val_accuracy
    elif isinstance(model, StudentModel):
        kind, domain_id, seed = "student", None, model.training_seed
        val_acc = None
    else:
        kind, domain_id, seed, val_acc = "classifier", None, None, None
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "spec": net.spec.to_dict(),
        "domain_id": domain_id,
        "training_seed": seed,
        "val_accuracy": val_acc,
        "state_dict": net.state_dict(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "spec": net.spec.to_dict(),
        "domain_id": domain_id,
        "training_seed": seed,
        "val_accuracy": val_acc,
        "param_hash": state_dict_hash(net),
        "bn_stats": stored_bn_stats(net).to_manifest(),
    }
    from .tensorio import write_json

    write_json(path.with_suffix(path.suffix + ".manifest.json"), manifest)
    return path


def load_checkpoint(path):
    """Load a checkpoint; returns TeacherModel, StudentModel or ConvNet.

    Raises PersistenceError on missing, truncated or foreign files; never
    returns a partially initialized model.
    """
    path = Path(path)
    if not path.is_file():
        raise PersistenceError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise PersistenceError(f"{path} is not a recognized checkpoint")
    try:
        spec = ClassifierSpec.from_dict(payload["spec"])
        net = ConvNet(spec)
        net.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError, TypeError) as e:
        raise PersistenceError(f"checkpoint {path} is inconsistent: {e}") from e
    net.eval()
    kind = payload.get("kind")
    if kind == "teacher":
        return TeacherModel(
            net,
            int(payload["domain_id"]),
            payload.get("training_seed"),
            payload.get("val_accuracy"),
        )
    if kind == "student":
        return StudentModel(net, payload.get("training_seed"))
    return net
