"""Objects, labelled subparts and the vocabulary partition."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptyAssignment, InvalidVocabulary, UnknownLabel
from .geometry import PointCloud

BACKGROUND = "background"


@dataclass(frozen=True, eq=False)
class ObjectModel:
    label: str
    cloud: PointCloud

    def __post_init__(self):
        if not self.label:
            raise ValueError("object label must be non-empty")


@dataclass(frozen=True, eq=False)
class Subpart:
    label: str
    point_indices: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.point_indices, dtype=np.int64))
        idx.setflags(write=False)
        object.__setattr__(self, "point_indices", idx)

    def __len__(self):
        return self.point_indices.size


@dataclass(frozen=True)
class PartitionReport:
    duplicates: tuple = ()
    uncovered: tuple = ()

    @property
    def ok(self):
        return not self.duplicates and not self.uncovered

    def __bool__(self):
        return self.ok


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Labelled subparts of one object.

    Construction drops empty subparts and rejects duplicate or reserved labels
    and out-of-range indices; overlap and coverage are left to
    :func:`validate_partition` so a broken vocabulary can still be inspected.
    """

    object: ObjectModel
    subparts: tuple = field(default_factory=tuple)
    cloud_file: str = ""

    def __post_init__(self):
        n = self.object.cloud.n_points
        parts = tuple(sorted((s for s in self.subparts if len(s)), key=lambda s: s.label))
        if not parts:
            raise InvalidVocabulary("vocabulary has no non-empty subparts")
        labels = [s.label for s in parts]
        if len(set(labels)) != len(labels):
            raise InvalidVocabulary(f"duplicate subpart labels in {labels}")
        if BACKGROUND in labels:
            raise InvalidVocabulary(f"'{BACKGROUND}' is reserved")
        for s in parts:
            if s.point_indices[0] < 0 or s.point_indices[-1] >= n:
                raise InvalidVocabulary(f"subpart {s.label!r} has indices outside [0, {n})")
        object.__setattr__(self, "subparts", parts)

    @property
    def labels(self):
        return [s.label for s in self.subparts]

    @property
    def n_points(self):
        return self.object.cloud.n_points

    def subpart(self, label):
        for s in self.subparts:
            if s.label == label:
                return s
        raise UnknownLabel(f"no subpart labelled {label!r}; have {self.labels}")

    def point_labels(self):
        """Per-point index into ``self.labels`` (-1 where uncovered)."""
        out = np.full(self.n_points, -1, dtype=np.int64)
        for k, s in enumerate(self.subparts):
            out[s.point_indices] = k
        return out

    @classmethod
    def from_labels(cls, obj, labels, cloud_file=""):
        """Build from a point-index -> label mapping (dict or per-point sequence)."""
        if isinstance(labels, dict):
            items = labels.items()
        else:
            items = enumerate(labels)
        groups = {}
        for i, lab in items:
            groups.setdefault(lab, []).append(int(i))
        parts = [Subpart(lab, idx) for lab, idx in groups.items()]
        return cls(obj, tuple(parts), cloud_file)

    def to_dict(self):
        return {
            "object_label": self.object.label,
            "cloud_file": self.cloud_file,
            "n_points": self.n_points,
            "subparts": [
                {"label": s.label, "point_indices": [int(i) for i in s.point_indices]}
                for s in self.subparts
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data, cloud):
        if data["n_points"] != cloud.n_points:
            raise InvalidVocabulary(
                f"vocabulary expects {data['n_points']} points, cloud has {cloud.n_points}"
            )
        obj = ObjectModel(data["object_label"], cloud)
        parts = tuple(Subpart(p["label"], p["point_indices"]) for p in data["subparts"])
        return cls(obj, parts, data.get("cloud_file", ""))


def validate_partition(vocab):
    n = vocab.n_points
    counts = np.zeros(n, dtype=np.int64)
    for s in vocab.subparts:
        np.add.at(counts, s.point_indices, 1)
    dup = tuple(int(i) for i in np.flatnonzero(counts > 1))
    unc = tuple(int(i) for i in np.flatnonzero(counts == 0))
    return PartitionReport(dup, unc)


def subpart_cloud(vocab, label):
    part = vocab.subpart(label)
    return vocab.object.cloud.subset(part.point_indices)


def propagate_labels(cloud, partial):
    """Give every unlabelled point the label of its nearest labelled point.

    Ties go to the lowest labelled index. Labelled points keep their label.
    """
    if not partial:
        raise EmptyAssignment("no labelled points to propagate from")
    n = cloud.n_points
    seeds = np.array(sorted(int(i) for i in partial), dtype=np.int64)
    if seeds[0] < 0 or seeds[-1] >= n:
        raise IndexError(f"labelled index outside [0, {n})")
    out = {int(i): partial[i] for i in partial}
    if seeds.size == n:
        return out
    mask = np.ones(n, dtype=bool)
    mask[seeds] = False
    todo = np.flatnonzero(mask)
    nn, _ = _kernels.nearest(cloud.points[todo], cloud.points[seeds])
    for i, k in zip(todo.tolist(), nn.tolist()):
        out[i] = out[int(seeds[k])]
    return dict(sorted(out.items()))
