import numpy as np
import pytest

from quadpose import quat
from quadpose.gait import GaitStyle, gait_sequence
from quadpose.prior.tree import train_tree
from quadpose.skeleton import Pose, load_skeleton


@pytest.fixture(scope="session")
def skel():
    return load_skeleton()


def random_pose(skeleton, rng, angle=np.pi, trans=30.0):
    axes = rng.normal(size=(skeleton.n_joints, 3))
    rots = quat.from_axis_angle(axes, rng.uniform(-angle, angle, skeleton.n_joints))
    return Pose(quat.from_axis_angle(rng.normal(size=3), rng.uniform(-np.pi, np.pi)),
                rng.uniform(-1000, 1000, 3), rots,
                rng.uniform(-trans, trans, (len(skeleton.translating), 3)))


@pytest.fixture(scope="session")
def walk100(skel):
    """The 100-frame surrogate gait set: four walk cycles in place."""
    return gait_sequence(skel, 100, GaitStyle(), cycles=4.0, seed=0, jitter=0.01, locomote=False)


@pytest.fixture(scope="session")
def tree100(skel, walk100):
    return train_tree(walk100, skel)


def random_network_joints(skeleton, rng, min_sep=3):
    """Uniform network-space joints whose paired joints differ by >= ``min_sep`` cells per plane."""
    from quadpose.heatmap import PLANE_AXES, to_grid
    pairs = [(j, k) for j, k in enumerate(skeleton.pairs) if k > j]
    while True:
        j = np.minimum(rng.uniform(0, 256, size=(skeleton.n_joints, 3)), 255)
        g = to_grid(j)
        if all(np.abs(g[a][list(ax)] - g[b][list(ax)]).max() >= min_sep
               for a, b in pairs for ax in PLANE_AXES):
            return j


def pair_aware_error(decoded, truth, skeleton):
    """Per-joint errors with each pair's left/right identity resolved in its favour."""
    err = decoded - truth
    for a, b in ((j, k) for j, k in enumerate(skeleton.pairs) if k > j):
        swapped = decoded[[b, a]] - truth[[a, b]]
        if np.linalg.norm(swapped, axis=1).sum() < np.linalg.norm(err[[a, b]], axis=1).sum():
            err[[a, b]] = swapped
    return err


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
