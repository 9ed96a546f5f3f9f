"""Regenerate the bundled knife/mug data set under src/graspvoc/data.

Builds synthetic surface clouds with known part labels, grasp archives,
six-annotator ground truth, and replayable provider transcripts. Masks are
what a class-agnostic segmenter would return for the default render
(part silhouettes, a split blade, a whole-object mask and a background
speck); the language-model answers are the scripted replies stored as raw
chat text, fences and prose included.

    python tools/make_fixtures.py
"""

import json
import shutil
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from graspvoc import cloud_io
from graspvoc.geometry import PointCloud
from graspvoc.object_model import ObjectModel
from graspvoc.pipeline import SegmentationParams, segment_object_run
from graspvoc.providers import SEGMENTER, VLM, FixtureTransport, Providers
from graspvoc.scoring import GraspArchive, GraspRecord, write_archive
from graspvoc.viewrender import Mask2D, compute_view, masks_to_dict, render

DATA = Path(__file__).resolve().parents[1] / "src" / "graspvoc" / "data"
SEED = 20240611


# ------------------------------------------------------------------ shapes


def _box_surface(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]])
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    side = rng.random(n) < 0.5
    for ax in range(3):
        sel = face_axis == ax
        pts[sel, ax] = np.where(side[sel], lo[ax], hi[ax])
    return pts


def knife(rng):
    handle = _box_surface(rng, 900, (-0.11, -0.011, -0.008), (0.0, 0.011, 0.008))
    # tapered blade: width shrinks linearly to the tip, 2 mm thick
    m = 1300
    x = rng.random(m) * 0.17
    top = 0.013 - 0.011 * (x / 0.17)
    y = -0.011 + rng.random(m) * (top + 0.011)
    z = np.where(rng.random(m) < 0.5, -0.001, 0.001)
    blade = np.column_stack([x + 0.002, y, z])
    pts = np.vstack([handle, blade])
    labels = ["handle"] * len(handle) + ["blade"] * len(blade)
    return pts, labels


def mug(rng):
    r, h = 0.04, 0.12
    n_side = 1700
    th = rng.random(n_side) * 2 * np.pi
    zs = rng.random(n_side) * h
    side = np.column_stack([r * np.cos(th), r * np.sin(th), zs])
    n_bot = 300
    rr = r * np.sqrt(rng.random(n_bot))
    tb = rng.random(n_bot) * 2 * np.pi
    bottom = np.column_stack([rr * np.cos(tb), rr * np.sin(tb), np.zeros(n_bot)])
    body = np.vstack([side, bottom])
    # handle: half torus in the x-z plane on the +x side
    n_h = 500
    big, tube = 0.032, 0.006
    u = (rng.random(n_h) - 0.5) * np.pi
    v = rng.random(n_h) * 2 * np.pi
    cx = r + (big + tube * np.cos(v)) * np.cos(u) - 0.012
    cz = h / 2 + (big + tube * np.cos(v)) * np.sin(u)
    cy = tube * np.sin(v)
    handle = np.column_stack([cx, cy, cz])
    keep = np.hypot(handle[:, 0], handle[:, 1]) > r + 0.002
    handle = handle[keep]
    pts = np.vstack([body, handle])
    labels = ["body"] * len(body) + ["handle"] * len(handle)
    return pts, labels


# ------------------------------------------------------------------ masks


def part_mask(view, rr, pts, labels, part, dilate=2):
    cols, rows, _ = view.pixels(pts[[i for i, lab in enumerate(labels) if lab == part]])
    bm = np.zeros((view.height, view.width), dtype=bool)
    bm[rows, cols] = True
    bm = ndimage.binary_closing(bm, iterations=3)
    return ndimage.binary_dilation(bm, iterations=dilate)


def scripted_masks(name, view, rr, pts, labels):
    whole = np.zeros((view.height, view.width), dtype=bool)
    cols, rows, _ = view.pixels(pts)
    whole[rows, cols] = True
    whole = ndimage.binary_dilation(ndimage.binary_closing(whole, iterations=3), iterations=3)
    speck = np.zeros_like(whole)
    speck[2:10, 2:10] = True
    masks = [Mask2D(0, whole)]
    if name == "knife":
        handle = part_mask(view, rr, pts, labels, "handle")
        blade = part_mask(view, rr, pts, labels, "blade")
        # the segmenter splits the blade into two pieces
        split = view.width // 2
        left = blade.copy()
        left[:, split:] = False
        right = blade & ~left
        masks += [Mask2D(1, handle), Mask2D(2, left), Mask2D(3, right)]
        assignment = {0: "background", 1: "handle", 2: "blade", 3: "blade", 4: "background"}
        candidates = '```json\n{"labels": ["Handle", "blade ", "bolster"]}\n```'
    else:
        body = part_mask(view, rr, pts, labels, "body")
        handle = part_mask(view, rr, pts, labels, "handle", dilate=3)
        masks += [Mask2D(1, body), Mask2D(2, handle)]
        assignment = {0: "background", 1: "body", 2: "handle", 4: "background"}
        candidates = 'Graspable or task-relevant parts:\n{"labels": ["handle", "body", "rim"]}'
    masks.append(Mask2D(4, speck))
    return masks, assignment, candidates


CONDITIONS = {
    ("knife", "cut"): ("handle", "blade"),
    ("knife", "hand over"): ("blade", "handle"),
    ("mug", "fill"): ("handle", "body"),
    ("mug", "hand over"): ("body", "handle"),
}


class ScriptedTransport:
    """Answers from a script and records every exchange as a fixture."""

    retries = 0
    backoff = 0.0
    reprompt = False

    def __init__(self, root, seg_raw, cand_raw, assignment, conditions):
        self.sink = FixtureTransport(root)
        self.seg_raw, self.cand_raw = seg_raw, cand_raw
        self.assignment, self.conditions = assignment, conditions

    def send(self, channel, request, image=None):
        if channel == SEGMENTER:
            raw = self.seg_raw
        elif channel == VLM and "candidates" not in request:
            raw = self.cand_raw
        elif channel == VLM:
            table = {str(m["id"]): self.assignment.get(m["id"], "background") for m in request["masks"]}
            raw = "Assignments below.\n" + json.dumps({"assignments": table})
        else:
            grasp, task = self.conditions[request["task"]]
            raw = json.dumps({"grasp_label": grasp, "task_label": task})
        self.sink.record(channel, request, raw)
        return raw


# ------------------------------------------------------------------ archives / gt


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def archive_for(name, pts, labels, rng, n=60):
    grasps = []
    idx_all = np.arange(len(pts))
    for k in range(n):
        i = int(rng.choice(idx_all))
        p = pts[i]
        if name == "knife":
            c1 = np.array([p[0], p[1], abs(p[2]) + 0.0005])
            c2 = np.array([p[0], p[1], -abs(p[2]) - 0.0005])
        else:
            normal = np.array([p[0], p[1], 0.0])
            normal = normal / (np.linalg.norm(normal) + 1e-12)
            c1 = p + 0.001 * normal
            c2 = p - 0.004 * normal
        contacts = np.vstack([c1, c2])
        pos = contacts.mean(axis=0) + np.array([0.0, 0.0, 0.06])
        force = float(np.round(rng.uniform(0.3, 6.0), 3))
        grasps.append(GraspRecord(f"g{k:03d}", np.round(pos, 6), random_quat(rng), np.round(contacts, 6), force))
    return GraspArchive(name, tuple(grasps))


def annotations(pts, labels, part, rng, n_participants=6, stray=None):
    """Six participants each mark a contiguous slab of ``part``; one strays."""
    idx = np.array([i for i, lab in enumerate(labels) if lab == part])
    ax = int(np.argmax(pts[idx].max(axis=0) - pts[idx].min(axis=0)))
    lo, hi = pts[idx, ax].min(), pts[idx, ax].max()
    span = hi - lo
    selections = []
    for j in range(n_participants):
        a = lo + rng.uniform(0.0, 0.35) * span
        b = hi - rng.uniform(0.0, 0.35) * span
        sel = idx[(pts[idx, ax] >= a) & (pts[idx, ax] <= b)]
        if stray is not None and j == 0:
            sel = np.concatenate([sel, stray])
        selections.append(sorted(int(i) for i in sel))
    return selections


def main():
    rng = np.random.default_rng(SEED)
    fixtures = DATA / "fixtures"
    if fixtures.exists():
        shutil.rmtree(fixtures)
    (DATA / "gt").mkdir(parents=True, exist_ok=True)
    params = SegmentationParams()
    manifest = {"seed": 7, "provider_config": "providers.json", "controls": 3, "score": {"k_force": 10.0, "k_dist": 1.0}, "entries": []}
    for name, build in (("knife", knife), ("mug", mug)):
        pts, labels = build(rng)
        pts = np.round(pts, 6)
        cloud = PointCloud(pts)
        cloud_io.write_ply(DATA / f"{name}.ply", cloud)
        cloud = cloud_io.read_ply(DATA / f"{name}.ply")
        parts = {}
        for i, lab in enumerate(labels):
            parts.setdefault(lab, []).append(i)
        with open(DATA / f"{name}_parts.json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"object_label": name, "n_points": len(labels), "parts": parts}) + "\n")

        view = compute_view(cloud, params.resolution, params.margin_fraction)
        rr = render(cloud, view, params.splat_radius_px, params.depth_quantile)
        masks, assignment, cand_raw = scripted_masks(name, view, rr, cloud.points, labels)
        conditions = {task: gl for (obj, task), gl in CONDITIONS.items() if obj == name}
        transport = ScriptedTransport(fixtures, json.dumps(masks_to_dict(masks)), cand_raw, assignment, conditions)
        providers = Providers(transport)
        run = segment_object_run(ObjectModel(name, cloud), providers, params, cloud_file=f"{name}.ply")
        agree = np.mean([labels[i] == lab for i, lab in enumerate(np.array(run.vocabulary.labels)[run.vocabulary.point_labels()])])
        print(f"{name}: {run.vocabulary.labels}, agreement with part truth {agree:.4f}", file=sys.stderr)
        for task in conditions:
            providers.condition(task, run.vocabulary.labels)

        write_archive(DATA / f"{name}_archive.json", archive_for(name, cloud.points, labels, rng))

        entry = {"object_label": name, "cloud_file": f"{name}.ply", "archive_file": f"{name}_archive.json", "tasks": list(conditions), "ground_truth": {}}
        for task, (grasp_part, _) in conditions.items():
            other = [i for i, lab in enumerate(labels) if lab != grasp_part]
            stray = np.array(sorted(rng.choice(other, size=15, replace=False)))
            sel = annotations(cloud.points, labels, grasp_part, rng, stray=stray)
            fname = f"gt/{name}_{task.replace(' ', '_')}.json"
            with open(DATA / fname, "w", encoding="utf-8") as fh:
                fh.write(json.dumps({"object_label": name, "task": task, "n_points": len(labels), "selections": sel}) + "\n")
            entry["ground_truth"][task] = fname
        manifest["entries"].append(entry)

    with open(DATA / "providers.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "fixture", "fixture_dir": "fixtures"}, indent=2) + "\n")
    with open(DATA / "manifest.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, indent=2) + "\n")


if __name__ == "__main__":
    main()
