import time
from contextlib import contextmanager

import pytest
import torch
import torchvision

from fundusnet import weights
from fundusnet.weights import WeightSource, sha256_file


@pytest.fixture(scope="session")
def backbone_file(tmp_path_factory):
    """Randomly initialised EfficientNet-B0 weights with the 1000-way ImageNet head.

    Stands in for the published file, which this sandbox cannot download.
    """
    torch.manual_seed(1234)
    model = torchvision.models.efficientnet_b0(weights=None)
    # give BatchNorm non-trivial statistics so frozen-layer checks mean something
    model.train()
    with torch.no_grad():
        model(torch.rand(4, 3, 64, 64))
    path = tmp_path_factory.mktemp("published") / "efficientnet_b0.pth"
    torch.save(model.state_dict(), path)
    return path


@pytest.fixture
def local_registry(backbone_file, monkeypatch):
    """Point the efficientnet_b0 registry entry at the local file."""
    source = WeightSource(backbone_file.as_uri(), sha256_file(backbone_file), "efficientnet_b0")
    monkeypatch.setitem(weights.REGISTRY, "efficientnet_b0", source)
    return source


@pytest.fixture
def bundle(local_registry, tmp_path):
    return weights.fetch_pretrained("efficientnet_b0", tmp_path / "cache")


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    results = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextmanager
    def check(name):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            line = f"FAIL  {name}  ({reason})"
            results.append(line)
            print(line)
            raise
        line = f"PASS  {name}  [{time.perf_counter() - start:.1f}s]"
        results.append(line)
        print(line)

    return check


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
