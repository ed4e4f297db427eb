import numpy as np
import pytest

from multires_fer.synthetic import generate_synthetic


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """64 images per class per split, seed 0."""
    return generate_synthetic(tmp_path_factory.mktemp("synthetic64"), per_class=64, seed=0)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("synthetic6"), per_class=6, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_annotations(root, split, videos):
    """videos: {video_id: [labels]} -> annotation dir"""
    d = root / "annotations" / split
    d.mkdir(parents=True, exist_ok=True)
    for vid, labels in videos.items():
        (d / f"{vid}.txt").write_text("".join(f"{x}\n" for x in labels))
    return root / "annotations"


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
