import numpy as np
import pytest
import torch

from vidistill.video import MovingShapesConfig, VideoClip, VideoDataset, generate_moving_shapes


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg():
    return MovingShapesConfig(canvas=(16, 16), num_appearances=2, num_directions=2, shape_size=4,
                              speed=1, frames=8, noise_std=0.05)


@pytest.fixture(scope="session")
def tiny_train(tiny_cfg):
    return generate_moving_shapes(tiny_cfg, 4, seed=0)


@pytest.fixture(scope="session")
def tiny_test(tiny_cfg):
    return generate_moving_shapes(tiny_cfg, 3, seed=1, split="test")


def make_dataset(n_per_class=3, num_classes=2, frames=6, shape=(1, 8, 8), seed=0):
    rng = np.random.default_rng(seed)
    clips = [VideoClip(torch.as_tensor(rng.random((frames, *shape)), dtype=torch.float32), c)
             for c in range(num_classes) for _ in range(n_per_class)]
    return VideoDataset(tuple(clips), num_classes)


CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """``criterion(n, ok, detail)`` prints and records one acceptance line."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
