import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sgrlab.data import data_dir
from sgrlab.models import MLP

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def mnist_dir() -> Path | None:
    d = data_dir()
    if (d / "mnist").is_dir():
        d = d / "mnist"
    return d if any(d.glob("train-images-idx3-ubyte*")) else None


requires_mnist = pytest.mark.skipif(mnist_dir() is None, reason="MNIST subset not prepared (scripts/prepare_mnist_subset.py)")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mlp_instance(seed: int, max_d: int = 12):
    """Small random MLP with a batch of inputs and labels."""
    r = np.random.default_rng(seed)
    d = int(r.integers(2, max_d + 1))
    k = int(r.integers(2, 6))
    depth = int(r.integers(0, 3))
    widths = [d] + [int(r.integers(2, 9)) for _ in range(depth)] + [k]
    model = MLP(widths, seed=int(r.integers(0, 2**31)))
    m = int(r.integers(1, 7))
    x = r.normal(size=(m, d))
    y = r.integers(0, k, size=m)
    A = r.normal(size=(d, d))
    S = A @ A.T / d
    return model, x, y, S


@pytest.fixture(scope="session")
def tiny_mnist_dir(tmp_path_factory):
    """A 300/100 stratified slice of the prepared subset, written as IDX files."""
    src = mnist_dir()
    if src is None:
        pytest.skip("MNIST subset not prepared")
    from sgrlab.data import load_mnist, stratified_head, write_idx
    out = tmp_path_factory.mktemp("mnist-tiny") / "mnist"
    out.mkdir()
    for split, n, prefix in (("train", 300, "train"), ("test", 100, "t10k")):
        ds = stratified_head(load_mnist(src, split), n)
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", np.rint(ds.images[..., 0] * 255).astype(np.uint8))
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", ds.labels.astype(np.uint8))
    return out.parent
