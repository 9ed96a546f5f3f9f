import json
from pathlib import Path

import numpy as np
import pytest

from graspvoc import _kernels, cloud_io
from graspvoc.providers import ProviderConfig, Providers

DATA = Path(__file__).resolve().parents[1] / "src" / "graspvoc" / "data"
GOLDEN = Path(__file__).resolve().parent / "golden"

BACKENDS = [_kernels.numpy_impl] + ([_kernels.numba_impl] if _kernels.numba_impl else [])


@pytest.fixture(params=BACKENDS, ids=lambda b: b.name)
def backend(request, monkeypatch):
    """Run the test once per kernel backend."""
    monkeypatch.setattr(_kernels, "active", request.param)
    return request.param


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN


@pytest.fixture(scope="session")
def fixture_providers():
    return Providers.from_config(ProviderConfig.load(DATA / "providers.json"))


@pytest.fixture(scope="session")
def knife_cloud():
    return cloud_io.read_ply(DATA / "knife.ply")


@pytest.fixture(scope="session")
def mug_cloud():
    return cloud_io.read_ply(DATA / "mug.ply")


def load_parts(name):
    with open(DATA / f"{name}_parts.json") as fh:
        return json.load(fh)["parts"]


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_scoring_case(rng, max_grasps=200, max_parts=5, n_points=None):
    """Random cloud, vocabulary, condition and archive for scoring checks."""
    from graspvoc.geometry import PointCloud
    from graspvoc.object_model import ObjectModel, Vocabulary
    from graspvoc.scoring import GraspArchive, GraspRecord, TaskCondition

    n = n_points or int(rng.integers(20, 400))
    pts = np.round(rng.uniform(-0.1, 0.1, size=(n, 3)), 4)
    k = int(rng.integers(1, max_parts + 1))
    names = [f"part{j}" for j in range(k)]
    labels = [names[j] for j in rng.integers(0, k, n)]
    labels[:k] = names  # every part non-empty
    vocab = Vocabulary.from_labels(ObjectModel("obj", PointCloud(pts)), labels)
    cond = TaskCondition("task", str(rng.choice(vocab.labels)), str(rng.choice(vocab.labels)))
    m = int(rng.integers(1, max_grasps + 1))
    forces = np.round(rng.uniform(0, 5, size=m), 1)  # coarse, so ties happen
    grasps = []
    for i in range(m):
        c = int(rng.integers(1, 4))
        base = pts[rng.integers(0, n, c)]
        contacts = base + rng.normal(scale=0.01, size=(c, 3)) * rng.integers(0, 2)
        q = rng.normal(size=4)
        grasps.append(GraspRecord(f"g{i:04d}", contacts.mean(axis=0), q / np.linalg.norm(q), contacts, forces[i]))
    order = rng.permutation(m)
    return GraspArchive("obj", tuple(grasps[i] for i in order)), vocab, cond


def oracle_scores(archive, cond, vocab, k_force=10.0, k_dist=1.0):
    """Score every grasp by exhaustive search; independent of the library kernels."""
    pts = vocab.object.cloud.points
    owner = {}
    for s in vocab.subparts:
        for i in s.point_indices.tolist():
            owner[i] = s.label
    task_pts = pts[sorted(i for i, lab in owner.items() if lab == cond.task_label)]
    out = {}
    for g in archive.grasps:
        rep = g.contact_points.sum(axis=0) / g.contact_points.shape[0]
        diff = pts - rep
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        lab = owner[int(np.argmin(d2))]
        best = np.inf
        for c in g.contact_points:
            diff = task_pts - c
            d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
            best = min(best, float(d2.min()))
        d = float(np.sqrt(best))
        out[g.id] = (k_force * g.force + k_dist * d if lab == cond.grasp_label else 0.0, lab, d)
    return out


def oracle_winner(scores, archive):
    force = {g.id: g.force for g in archive.grasps}
    return min(scores, key=lambda gid: (-scores[gid][0], -force[gid], gid))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for status, name in results:
        terminalreporter.write_line(f"{status}  {name}")
