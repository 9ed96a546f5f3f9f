"""Task-compatibility scoring and selection over a precomputed grasp archive.

    C(g, T) = k_force * F + k_dist * d_task   if the grasped subpart is L_grasp
            = 0                               otherwise

The grasped subpart comes from the mean contact point; d_task is the smallest
distance from any contact point to the task subpart. With a single contact
both reduce to the one-point definitions.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import NoCompatibleGrasp, NoContacts, NoControls, UnknownLabel
from .geometry import PointCloud, as_point
from .object_model import subpart_cloud


@dataclass(frozen=True, eq=False)
class GraspRecord:
    id: str
    position: np.ndarray
    quaternion_wxyz: np.ndarray
    contact_points: np.ndarray
    force: float

    def __post_init__(self):
        pos = as_point(self.position)
        quat = np.asarray(self.quaternion_wxyz, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(quat) - 1.0) > 1e-6:
            raise ValueError(f"grasp {self.id}: quaternion is not unit length")
        contacts = np.asarray(self.contact_points, dtype=np.float64).reshape(-1, 3)
        if contacts.shape[0] == 0:
            raise NoContacts(f"grasp {self.id} has no contact points")
        if not np.all(np.isfinite(contacts)):
            raise ValueError(f"grasp {self.id}: non-finite contact point")
        force = float(self.force)
        if not (force >= 0.0 and np.isfinite(force)):
            raise ValueError(f"grasp {self.id}: force must be finite and >= 0")
        for arr in (pos, quat, contacts):
            arr.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "quaternion_wxyz", quat)
        object.__setattr__(self, "contact_points", contacts)
        object.__setattr__(self, "force", force)

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], d["position"], d["quaternion_wxyz"], d["contact_points"], d["force"])

    def to_dict(self):
        return {
            "id": self.id,
            "position": self.position.tolist(),
            "quaternion_wxyz": self.quaternion_wxyz.tolist(),
            "contact_points": self.contact_points.tolist(),
            "force": self.force,
        }


@dataclass(frozen=True, eq=False)
class GraspArchive:
    object_label: str
    grasps: tuple

    def __post_init__(self):
        grasps = tuple(self.grasps)
        if not grasps:
            raise ValueError("grasp archive is empty")
        ids = [g.id for g in grasps]
        if len(set(ids)) != len(ids):
            raise ValueError("grasp ids must be unique")
        object.__setattr__(self, "grasps", grasps)

    def __len__(self):
        return len(self.grasps)

    def to_dict(self):
        return {"object_label": self.object_label, "grasps": [g.to_dict() for g in self.grasps]}


def _load_canonical(data):
    return GraspArchive(data["object_label"], tuple(GraspRecord.from_dict(g) for g in data["grasps"]))


# Other archive layouts can register a converter from parsed JSON here.
ARCHIVE_IMPORTERS = {"canonical": _load_canonical}


def load_archive(path, fmt="canonical"):
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        importer = ARCHIVE_IMPORTERS[fmt]
    except KeyError:
        raise ValueError(f"no archive importer named {fmt!r}") from None
    return importer(data)


def write_archive(path, archive):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(archive.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class TaskCondition:
    task: str
    grasp_label: str
    task_label: str

    def __post_init__(self):
        if not self.grasp_label or not self.task_label:
            raise ValueError("condition labels must be non-empty")

    def to_dict(self):
        return {"task": self.task, "grasp_label": self.grasp_label, "task_label": self.task_label}

    @classmethod
    def from_dict(cls, d):
        return cls(d["task"], d["grasp_label"], d["task_label"])


@dataclass(frozen=True)
class ScoreParams:
    k_force: float = 10.0
    k_dist: float = 1.0

    def __post_init__(self):
        if self.k_force < 0 or self.k_dist < 0 or (self.k_force == 0 and self.k_dist == 0):
            raise ValueError("gains must be >= 0 and not both zero")

    def to_dict(self):
        return {"k_force": self.k_force, "k_dist": self.k_dist}


@dataclass(frozen=True, eq=False)
class ScoredGrasp:
    grasp: GraspRecord
    score: float
    grasped_label: str
    d_task: float
    fallback: bool = False

    def to_dict(self):
        return {
            "id": self.grasp.id,
            "score": self.score,
            "grasped_label": self.grasped_label,
            "d_task": self.d_task,
            "force": self.grasp.force,
            "position": self.grasp.position.tolist(),
            "quaternion_wxyz": self.grasp.quaternion_wxyz.tolist(),
        }


@dataclass(frozen=True, eq=False)
class ControlSample:
    grasps: list
    shortfall: bool = False
    requested: int = 0
    seed: int = 0
    ids: list = field(default_factory=list)


def representative_contact(g):
    if g.contact_points.shape[0] == 0:
        raise NoContacts(f"grasp {g.id} has no contact points")
    return g.contact_points.mean(axis=0)


def task_distance(g, task_cloud):
    pts = task_cloud.points if isinstance(task_cloud, PointCloud) else np.asarray(task_cloud)
    _, d2 = _kernels.nearest(g.contact_points, pts)
    return float(np.sqrt(d2.min()))


def grasped_label(g, vocab):
    idx, _ = _kernels.nearest(representative_contact(g).reshape(1, 3), vocab.object.cloud.points)
    return vocab.labels[vocab.point_labels()[idx[0]]]


def _check_condition(cond, vocab):
    for lab in (cond.grasp_label, cond.task_label):
        if lab not in vocab.labels:
            raise UnknownLabel(f"condition label {lab!r} is not in vocabulary {vocab.labels}")


def score_archive(archive, cond, vocab, params=None):
    """Score every grasp; results follow archive order."""
    params = params or ScoreParams()
    _check_condition(cond, vocab)
    grasps = archive.grasps if isinstance(archive, GraspArchive) else tuple(archive)
    reps = np.array([representative_contact(g) for g in grasps])
    nn, _ = _kernels.nearest(reps, vocab.object.cloud.points)
    point_labels = vocab.point_labels()
    labels = vocab.labels

    task_pts = subpart_cloud(vocab, cond.task_label).points
    counts = np.array([g.contact_points.shape[0] for g in grasps])
    contacts = np.concatenate([g.contact_points for g in grasps])
    _, d2 = _kernels.nearest(contacts, task_pts)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    d_task = np.sqrt(np.minimum.reduceat(d2, starts))

    out = []
    for g, j, d in zip(grasps, nn.tolist(), d_task.tolist()):
        lab = labels[point_labels[j]]
        s = params.k_force * g.force + params.k_dist * d if lab == cond.grasp_label else 0.0
        out.append(ScoredGrasp(g, s, lab, d))
    return out


def score(g, cond, vocab, params=None):
    return score_archive((g,), cond, vocab, params)[0]


def rank_key(sg):
    return (-sg.score, -sg.grasp.force, sg.grasp.id)


def rank(scored):
    return sorted(scored, key=rank_key)


def select_optimal(archive, cond, vocab, params=None, fallback_max_force=False):
    """argmax of the score; ties go to higher force, then smallest id.

    Raises NoCompatibleGrasp when every grasp scores 0, unless
    ``fallback_max_force`` is set, in which case the strongest grasp in the
    archive is returned with ``fallback=True``.
    """
    scored = score_archive(archive, cond, vocab, params)
    best = min(scored, key=rank_key)
    if best.score > 0.0:
        return best
    if not fallback_max_force:
        raise NoCompatibleGrasp(
            f"no grasp in the archive lies on {cond.grasp_label!r} for task {cond.task!r}"
        )
    strongest = min(scored, key=lambda sg: (-sg.grasp.force, sg.grasp.id))
    return ScoredGrasp(strongest.grasp, strongest.score, strongest.grasped_label, strongest.d_task, True)


def sample_controls(archive, cond, vocab, k=3, seed=0, params=None):
    """Seeded uniform sample of k distinct grasps whose score is exactly 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = score_archive(archive, cond, vocab, params)
    zero = sorted((sg.grasp for sg in scored if sg.score == 0.0), key=lambda g: g.id)
    if not zero:
        raise NoControls(f"every grasp is compatible with {cond.grasp_label!r}; no controls")
    if len(zero) <= k:
        picked = zero
    else:
        rng = np.random.default_rng(seed)
        picked = [zero[i] for i in rng.choice(len(zero), size=k, replace=False)]
    return ControlSample(picked, len(zero) < k, k, seed, [g.id for g in picked])


def ranked_payload(scored, cond, params, selected, controls=None):
    ordered = rank(scored)
    payload = {
        "condition": cond.to_dict(),
        "params": params.to_dict(),
        "optimal": selected.to_dict(),
        "fallback": selected.fallback,
        "ranked": [sg.to_dict() for sg in ordered],
    }
    if controls is not None:
        payload["controls"] = {
            "k": controls.requested,
            "seed": controls.seed,
            "ids": controls.ids,
            "shortfall": controls.shortfall,
        }
    return payload
