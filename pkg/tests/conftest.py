import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from dekan.bench import BenchmarkConfig, DomainTransform, build_benchmark
from dekan.config import TeacherConfig
from dekan.models import ClassifierSpec, ConvNet, TeacherModel
from dekan.orchestrator import train_teachers

MICRO_TRANSFORMS = (
    DomainTransform("identity"),
    DomainTransform("rotation", angle=45.0),
    DomainTransform("color_invert"),
)


@pytest.fixture(scope="session")
def micro_bench():
    """Tiny 3-domain benchmark shared by unit tests."""
    cfg = BenchmarkConfig(
        num_classes=10, image_size=16, channels=3,
        train_per_domain=150, val_per_domain=60, test_per_domain=60,
        transforms=MICRO_TRANSFORMS, seed=11,
    )
    return build_benchmark(cfg)


@pytest.fixture(scope="session")
def micro_teacher_cfg():
    return TeacherConfig(channels=(8, 16), epochs=25, learning_rate=2e-3,
                         batch_size=32, min_val_accuracy=0.0)


@pytest.fixture(scope="session")
def micro_teachers(micro_bench, micro_teacher_cfg):
    """Three trained frozen teachers on the micro benchmark."""
    return train_teachers(micro_bench, micro_teacher_cfg, run_seed=7)


@pytest.fixture
def tiny_spec():
    return ClassifierSpec(input_shape=(3, 16, 16), num_classes=4, channels=(4, 8))


def make_random_teacher(spec, domain_id=0, seed=0):
    """An untrained teacher with randomized BN running stats, for loss tests."""
    torch.manual_seed(seed)
    net = ConvNet(spec)
    gen = torch.Generator().manual_seed(seed + 1)
    for bn in [m for m in net.modules() if isinstance(m, torch.nn.BatchNorm2d)]:
        bn.running_mean.copy_(torch.randn(bn.num_features, generator=gen) * 0.5)
        bn.running_var.copy_(torch.rand(bn.num_features, generator=gen) + 0.5)
    return TeacherModel(net, domain_id)


class FixedOutputNet(torch.nn.Module):
    """Returns predetermined logits regardless of input; for ensemble oracles."""

    def __init__(self, logits_fn):
        super().__init__()
        self._fn = logits_fn

    def forward(self, x):
        return self._fn(x)
