"""Procedurally generated multi-domain image benchmark.

A shared pool of rendered digit images is split into disjoint per-domain
subsamples, and each domain applies its own appearance transform. Domain
shift is therefore controlled, label semantics are preserved, and the whole
benchmark is a pure function of its config.

Base images are quantized to the 1/256 value grid. On that grid `1 - x` is
exact in float32, which makes the color_invert transform a bitwise
involution; this is a data contract, not a float accident.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.ndimage as ndi

from .errors import ConfigError, InputError, PersistenceError
from .seeds import derive_seed
from . import tensorio

BENCHMARK_FORMAT = "dekan-benchmark-v1"
TRANSFORM_KINDS = ("identity", "rotation", "color_invert", "background_tint", "noise")

# 5x7 digit glyphs, row strings top to bottom
_DIGIT_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00110", "01000", "10000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def digit_glyphs() -> np.ndarray:
    """(10, 7, 5) float32 bitmaps for digits 0..9."""
    out = np.zeros((10, 7, 5), dtype=np.float32)
    for d, rows in _DIGIT_ROWS.items():
        for r, row in enumerate(rows):
            for c, ch in enumerate(row):
                out[d, r, c] = float(ch == "1")
    return out


@dataclass(frozen=True)
class DomainTransform:
    """One domain's appearance shift. Pure: same input, same output."""

    kind: str
    angle: float = 0.0                   # rotation: degrees counter-clockwise
    rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)  # background_tint
    std: float = 0.0                     # noise standard deviation

    def __post_init__(self):
        object.__setattr__(self, "rgb", tuple(float(v) for v in self.rgb))
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if self.kind == "noise" and self.std < 0:
            raise ConfigError("noise std must be non-negative")
        if self.kind == "background_tint":
            if len(self.rgb) != 3 or any(not 0.0 <= v <= 1.0 for v in self.rgb):
                raise ConfigError("tint rgb must be three values in [0,1]")

    def describe(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "rotation":
            d["angle"] = float(self.angle)
        elif self.kind == "background_tint":
            d["rgb"] = list(self.rgb)
        elif self.kind == "noise":
            d["std"] = float(self.std)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DomainTransform":
        return DomainTransform(
            kind=d["kind"],
            angle=float(d.get("angle", 0.0)),
            rgb=tuple(d.get("rgb", (0.0, 0.0, 0.0))),
            std=float(d.get("std", 0.0)),
        )

    def short_name(self) -> str:
        if self.kind == "rotation":
            return f"rotation{int(self.angle)}"
        if self.kind == "noise":
            return f"noise{self.std:g}"
        if self.kind == "background_tint":
            return "tint"
        return self.kind


def _check_images(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4:
        raise InputError("images must be a (N,C,H,W) array")
    if images.dtype != np.float32:
        raise InputError(f"images must be float32, got {images.dtype}")
    if images.size and (not np.isfinite(images).all()
                        or images.min() < 0.0 or images.max() > 1.0):
        raise InputError("image values must be finite and inside [0,1]")
    return images


def _noise_seed(image: np.ndarray, std: float) -> int:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype="<f4").tobytes())
    h.update(np.float64(std).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def apply_transform(images: np.ndarray, transform: DomainTransform) -> np.ndarray:
    """Apply one domain transform to a (N,C,H,W) float32 batch in [0,1].

    Shape and labels-compatibility are preserved; output stays in [0,1].
    The noise transform derives its RNG seed from the image bytes, so the
    function stays pure.
    """
    images = _check_images(images)
    k = transform.kind
    if k == "identity":
        return images.copy()
    if k == "rotation":
        angle = transform.angle % 360.0
        if angle == 0.0:
            return images.copy()
        h, w = images.shape[2], images.shape[3]
        if angle % 90.0 == 0.0 and h == w:
            out = np.rot90(images, k=int(angle // 90), axes=(2, 3))
            return np.ascontiguousarray(out)
        out = ndi.rotate(images, angle, axes=(2, 3), reshape=False,
                         order=1, mode="constant", cval=0.0, prefilter=False)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if k == "color_invert":
        return (np.float32(1.0) - images).astype(np.float32)
    if k == "background_tint":
        if images.shape[1] != 3:
            raise InputError("background_tint needs 3-channel images")
        t = np.asarray(transform.rgb, dtype=np.float32).reshape(1, 3, 1, 1)
        # screen blend: dark background takes the tint, bright glyphs keep shape
        out = images + t * (np.float32(1.0) - images)
        return np.clip(out, 0.0, 1.0).astype(np.float32)
    if k == "noise":
        if transform.std == 0.0:
            return images.copy()
        out = np.empty_like(images)
        for i in range(images.shape[0]):
            rng = np.random.default_rng(_noise_seed(images[i], transform.std))
            noisy = images[i] + rng.normal(0.0, transform.std, images[i].shape)
            out[i] = np.clip(noisy, 0.0, 1.0)
        return out
    raise ConfigError(f"unknown transform kind {k!r}")


def _render_one(glyph: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    scale = rng.uniform(0.60, 0.80) * size / glyph.shape[0]
    g = ndi.zoom(glyph, scale, order=1)
    g = ndi.rotate(g, rng.uniform(-12.0, 12.0), reshape=True,
                   order=1, mode="constant", cval=0.0, prefilter=False)
    g = np.clip(g, 0.0, 1.0) * rng.uniform(0.75, 1.0)
    gh, gw = g.shape
    if gh > size or gw > size:  # rare overshoot from rotation growth
        y0, x0 = max(0, (gh - size) // 2), max(0, (gw - size) // 2)
        g = g[y0:y0 + size, x0:x0 + size]
        gh, gw = g.shape
    canvas = np.zeros((size, size), dtype=np.float64)
    y = rng.integers(0, size - gh + 1)
    x = rng.integers(0, size - gw + 1)
    canvas[y:y + gh, x:x + gw] = g
    canvas = ndi.gaussian_filter(canvas, rng.uniform(0.4, 0.8))
    canvas += rng.normal(0.0, 0.03, canvas.shape)
    return np.clip(canvas, 0.0, 1.0)


def render_digit_base(num_examples: int, *, image_size: int = 32, channels: int = 3,
                      num_classes: int = 10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Render a class-balanced pool of digit images.

    White glyph on black, randomized scale/rotation/position/brightness, light
    blur and sensor noise, then quantized to the 1/256 value grid.
    """
    if not 2 <= num_classes <= 10:
        raise InputError("num_classes must be in [2, 10] (ten glyphs available)")
    if num_examples < num_classes:
        raise InputError("need at least one example per class")
    if image_size < 8:
        raise InputError("image_size must be at least 8")
    glyphs = digit_glyphs()
    rng = np.random.default_rng(derive_seed(seed, "digit-base"))
    labels = (np.arange(num_examples) % num_classes).astype(np.int64)
    labels = labels[rng.permutation(num_examples)]
    images = np.empty((num_examples, channels, image_size, image_size), dtype=np.float32)
    for i, lab in enumerate(labels):
        plane = _render_one(glyphs[lab], image_size, rng)
        plane = np.round(plane * 256.0) / 256.0
        images[i] = np.repeat(plane[None, :, :].astype(np.float32), channels, axis=0)
    return images, labels


@dataclass
class LabeledImages:
    """Images with labels and an origin tag used by the data-freeness audit."""

    images: np.ndarray
    labels: np.ndarray
    origin: str = "original"

    def __post_init__(self):
        self.images = _check_images(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InputError("labels must be one int per image")

    def __len__(self):
        return self.images.shape[0]


SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Domain:
    domain_id: int
    name: str
    transform: DomainTransform
    splits: dict[str, LabeledImages]
    base_indices: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        missing = [s for s in SPLIT_NAMES if s not in self.splits]
        if missing:
            raise InputError(f"domain {self.name!r} lacks splits {missing}")


@dataclass
class MultiDomainBenchmark:
    domains: list[Domain]
    num_classes: int
    seed: int
    config_digest: str = ""

    def __post_init__(self):
        if len(self.domains) < 3:
            raise ConfigError("need at least 3 domains for leave-one-out")
        shapes = {d.splits["train"].images.shape[1:] for d in self.domains}
        if len(shapes) != 1:
            raise InputError(f"domains disagree on image shape: {shapes}")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate domain names: {names}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.domains[0].splits["train"].images.shape[1:])

    @property
    def domain_names(self) -> list[str]:
        return [d.name for d in self.domains]

    def __len__(self):
        return len(self.domains)


DEFAULT_TRANSFORMS = (
    DomainTransform("identity"),
    DomainTransform("rotation", angle=45.0),
    DomainTransform("color_invert"),
    DomainTransform("background_tint", rgb=(0.6, 0.2, 0.2)),
)


@dataclass(frozen=True)
class BenchmarkConfig:
    num_classes: int = 10
    image_size: int = 32
    channels: int = 3
    train_per_domain: int = 2000
    val_per_domain: int = 500
    test_per_domain: int = 1000
    transforms: tuple[DomainTransform, ...] = DEFAULT_TRANSFORMS
    names: tuple[str, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.names is not None:
            object.__setattr__(self, "names", tuple(self.names))
        if min(self.train_per_domain, self.val_per_domain, self.test_per_domain) < 1:
            raise ConfigError("all split sizes must be positive")
        if len(self.transforms) < 3:
            raise ConfigError("need at least 3 domain transforms for leave-one-out")
        if self.names is not None and len(self.names) != len(self.transforms):
            raise ConfigError("names and transforms must align")

    def describe(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "channels": self.channels,
            "train_per_domain": self.train_per_domain,
            "val_per_domain": self.val_per_domain,
            "test_per_domain": self.test_per_domain,
            "transforms": [t.describe() for t in self.transforms],
            "names": list(self.names) if self.names is not None else None,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "BenchmarkConfig":
        d = dict(d)
        if "transforms" in d:
            d["transforms"] = tuple(DomainTransform.from_dict(t) for t in d["transforms"])
        if d.get("names") is not None:
            d["names"] = tuple(d["names"])
        return BenchmarkConfig(**d)


def _split_class_counts(size: int, num_classes: int) -> np.ndarray:
    """Per-class counts for one split: size//K each, remainder to low classes."""
    counts = np.full(num_classes, size // num_classes, dtype=np.int64)
    counts[: size % num_classes] += 1
    return counts


def build_benchmark(config: BenchmarkConfig) -> MultiDomainBenchmark:
    """Render the base pool and assemble per-domain transformed splits.

    Every domain draws a disjoint subsample of the base pool (stratified per
    class to within one example), then applies its transform to all three
    splits. Deterministic in config.seed.
    """
    k = config.num_classes
    n_dom = len(config.transforms)
    split_sizes = {
        "train": config.train_per_domain,
        "val": config.val_per_domain,
        "test": config.test_per_domain,
    }
    per_class_needed = sum(
        _split_class_counts(s, k) for s in split_sizes.values()
    ) * n_dom
    base_per_class = int(per_class_needed.max())
    base_images, base_labels = render_digit_base(
        base_per_class * k,
        image_size=config.image_size,
        channels=config.channels,
        num_classes=k,
        seed=derive_seed(config.seed, "base"),
    )

    rng = np.random.default_rng(derive_seed(config.seed, "assign"))
    pools = []
    for c in range(k):
        idx = np.flatnonzero(base_labels == c)
        pools.append(idx[rng.permutation(idx.size)])
    cursors = np.zeros(k, dtype=np.int64)

    names = list(config.names) if config.names is not None else [
        t.short_name() for t in config.transforms
    ]
    for i, name in enumerate(names):  # disambiguate repeated kinds
        if names.count(name) > 1:
            names[i] = f"{name}_{i}"

    domains = []
    for d, transform in enumerate(config.transforms):
        splits: dict[str, LabeledImages] = {}
        base_indices: dict[str, np.ndarray] = {}
        for split, size in split_sizes.items():
            counts = _split_class_counts(size, k)
            sel = []
            for c in range(k):
                take = pools[c][cursors[c]:cursors[c] + counts[c]]
                if take.size < counts[c]:
                    raise ConfigError("base pool exhausted during stratification")
                cursors[c] += counts[c]
                sel.append(take)
            sel = np.concatenate(sel)
            sel = sel[rng.permutation(sel.size)]
            images = apply_transform(base_images[sel], transform)
            splits[split] = LabeledImages(
                images, base_labels[sel], origin=f"original:{names[d]}:{split}"
            )
            base_indices[split] = sel
        domains.append(Domain(d, names[d], transform, splits, base_indices))

    return MultiDomainBenchmark(
        domains, k, config.seed, tensorio.config_digest(config.describe())
    )


def leave_one_out_splits(bench: MultiDomainBenchmark, target_id: int):
    """(source domains, target domain) for one leave-one-out round."""
    ids = [d.domain_id for d in bench.domains]
    if target_id not in ids:
        raise InputError(f"target domain {target_id} not in {ids}")
    sources = [d for d in bench.domains if d.domain_id != target_id]
    target = next(d for d in bench.domains if d.domain_id == target_id)
    return sources, target


def save_benchmark(bench: MultiDomainBenchmark, out_dir) -> None:
    """Write raw float32 image files plus JSON manifests, one dir per domain."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = {
        "format": BENCHMARK_FORMAT,
        "num_classes": bench.num_classes,
        "seed": bench.seed,
        "config_digest": bench.config_digest,
        "domains": [],
    }
    for dom in bench.domains:
        ddir = out / f"domain_{dom.domain_id}"
        dman = {
            "domain_id": dom.domain_id,
            "name": dom.name,
            "transform": dom.transform.describe(),
            "splits": {},
        }
        for split, data in dom.splits.items():
            entry = tensorio.save_array(ddir / f"{split}.f32", data.images)
            dman["splits"][split] = {
                "images": entry,
                "labels": data.labels.tolist(),
                "origin": data.origin,
                "base_indices": dom.base_indices.get(split, np.array([], np.int64)).tolist(),
            }
        tensorio.write_json(ddir / "manifest.json", dman)
        root["domains"].append({"domain_id": dom.domain_id, "name": dom.name,
                                "dir": ddir.name})
    tensorio.write_json(out / "manifest.json", root)


def load_benchmark(in_dir) -> MultiDomainBenchmark:
    from pathlib import Path

    root_dir = Path(in_dir)
    root = tensorio.read_json(root_dir / "manifest.json")
    if root.get("format") != BENCHMARK_FORMAT:
        raise PersistenceError(f"{root_dir} is not a benchmark directory")
    domains = []
    for ref in root["domains"]:
        ddir = root_dir / ref["dir"]
        dman = tensorio.read_json(ddir / "manifest.json")
        splits = {}
        base_indices = {}
        for split, sman in dman["splits"].items():
            images = tensorio.load_array(ddir / sman["images"]["file"], sman["images"])
            labels = np.asarray(sman["labels"], dtype=np.int64)
            splits[split] = LabeledImages(images.astype(np.float32), labels,
                                          origin=sman["origin"])
            base_indices[split] = np.asarray(sman["base_indices"], dtype=np.int64)
        domains.append(Domain(int(dman["domain_id"]), dman["name"],
                              DomainTransform.from_dict(dman["transform"]),
                              splits, base_indices))
    return MultiDomainBenchmark(domains, int(root["num_classes"]),
                                int(root["seed"]), root.get("config_digest", ""))
