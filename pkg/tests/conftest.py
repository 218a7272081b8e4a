import numpy as np
import pytest

from traverse_da.core import Frame, LabeledBox, PointCloud, Pose6DoF, Provenance


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng) -> Pose6DoF:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose6DoF(r, rng.uniform(-50, 50, 3))


def box(center=(0, 0, 0), size=(1, 1, 1), yaw=0.0, cls=0, conf=1.0, prov=Provenance.GROUND_TRUTH):
    return LabeledBox(center, size, yaw, cls, conf, prov)


def det(center=(0, 0, 0), size=(1, 1, 1), yaw=0.0, cls=0, conf=0.5):
    return LabeledBox(center, size, yaw, cls, conf, Provenance.DETECTION)


def cloud(points, frame=Frame.SENSOR):
    return PointCloud(np.asarray(points, dtype=np.float64).reshape(-1, 3), frame)


@pytest.fixture(scope="session")
def source_setup():
    """A labelled source dataset, its trained detector and a held-out 20-scene split."""
    from traverse_da.detector import train_source
    from traverse_da.experiment import DeskExperimentConfig, source_eval_world, source_world
    from traverse_da.synthgen import generate

    cfg = DeskExperimentConfig()
    det_cfg = cfg.detector()
    train = generate(source_world(0, cfg))
    held_out = generate(source_eval_world(0, cfg)).scenes()
    model = train_source(train.scenes(), det_cfg)
    return model, det_cfg, held_out


# one line per acceptance criterion, filled by test_acceptance and printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {name}: {detail}")
