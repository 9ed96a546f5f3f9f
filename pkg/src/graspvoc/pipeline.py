"""Point cloud -> labelled vocabulary: render, segment, label, back-project."""

from dataclasses import dataclass

import numpy as np

from .errors import SegmentationEmpty
from .object_model import BACKGROUND, Vocabulary, propagate_labels
from .viewrender import (
    DEFAULT_DEPTH_QUANTILE,
    DEFAULT_MARGIN,
    DEFAULT_RESOLUTION,
    DEFAULT_SPLAT_RADIUS,
    backproject,
    compute_view,
    render,
)


@dataclass(frozen=True)
class SegmentationParams:
    resolution: tuple = DEFAULT_RESOLUTION
    margin_fraction: float = DEFAULT_MARGIN
    splat_radius_px: int = DEFAULT_SPLAT_RADIUS
    depth_quantile: float = DEFAULT_DEPTH_QUANTILE
    overlap_policy: str = "smallest-mask-wins"
    min_subpart_points: int = 5

    def __post_init__(self):
        if self.min_subpart_points < 1:
            raise ValueError("min_subpart_points must be >= 1")
        if self.overlap_policy != "smallest-mask-wins":
            raise ValueError(f"unsupported overlap policy {self.overlap_policy!r}")
        object.__setattr__(self, "resolution", tuple(int(x) for x in self.resolution))

    def to_dict(self):
        return {
            "resolution": list(self.resolution),
            "margin_fraction": self.margin_fraction,
            "splat_radius_px": self.splat_radius_px,
            "depth_quantile": self.depth_quantile,
            "overlap_policy": self.overlap_policy,
            "min_subpart_points": self.min_subpart_points,
        }


@dataclass(frozen=True, eq=False)
class SegmentationRun:
    vocabulary: Vocabulary
    view: object
    render: object
    masks: list
    candidates: list
    assignment: dict


def merge_and_resolve(masks, assignment):
    """Per-label disjoint pixel regions from labelled, possibly overlapping masks.

    Masks sharing a label are unioned. Where masks with different labels
    overlap, the pixel goes to the smallest mask (lowest id on equal area).
    Background masks take no part.
    """
    by_id = {m.id: m for m in masks}
    unknown = set(assignment) - set(by_id)
    if unknown:
        raise KeyError(f"assignment references unknown masks {sorted(unknown)}")
    labelled = [m for m in masks if assignment.get(m.id, BACKGROUND) != BACKGROUND]
    if not labelled:
        return {}
    labels = sorted({assignment[m.id] for m in labelled})
    code = {lab: k for k, lab in enumerate(labels)}
    canvas = np.full(labelled[0].bitmap.shape, -1, dtype=np.int64)
    # paint largest first so the smallest (then lowest id) ends on top
    for m in sorted(labelled, key=lambda m: (-m.area, -m.id)):
        canvas[m.bitmap] = code[assignment[m.id]]
    return {lab: canvas == k for lab, k in code.items() if (canvas == k).any()}


def segment_object_run(obj, providers, params=None, cloud_file=""):
    params = params or SegmentationParams()
    cloud = obj.cloud
    view = compute_view(cloud, params.resolution, params.margin_fraction)
    rr = render(cloud, view, params.splat_radius_px, params.depth_quantile)
    masks = providers.segment(obj.label, rr.image)
    if not masks:
        raise SegmentationEmpty(f"segmenter returned no masks for {obj.label!r}")
    candidates = providers.candidate_labels(obj.label, rr.image)
    assignment = providers.assign_labels(obj.label, rr.image, masks, candidates)
    regions = merge_and_resolve(masks, assignment)
    if not regions:
        raise SegmentationEmpty(f"every mask of {obj.label!r} was labelled background")

    partial = {}
    for label, region in regions.items():
        idx = backproject(region, rr)
        if idx.size >= params.min_subpart_points:
            for i in idx.tolist():
                partial[i] = label
    if not partial:
        raise SegmentationEmpty(
            f"no labelled region of {obj.label!r} reached {params.min_subpart_points} points"
        )
    total = propagate_labels(cloud, partial)
    vocab = Vocabulary.from_labels(obj, total, cloud_file=cloud_file)
    return SegmentationRun(vocab, view, rr, masks, candidates, assignment)


def segment_object(obj, providers, params=None, cloud_file=""):
    return segment_object_run(obj, providers, params, cloud_file).vocabulary
