"""Segmentation, vision-language and language-model providers.

Every model call goes through a transport: ``FixtureTransport`` replays
recorded responses keyed by a digest of the canonical request, and
``HttpTransport`` talks to a generic mask endpoint and a chat-completions
endpoint. Raw responses are parsed and validated here; callers only ever see
masks, label lists and label pairs.
"""

import base64
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, fields
from pathlib import Path

import httpx
import numpy as np

from .errors import MalformedResponse, ProviderUnavailable, UnknownLabel, ValidationFailed
from .object_model import BACKGROUND
from .viewrender import masks_from_dict, pgm_bytes

log = logging.getLogger(__name__)

DEFAULT_TOKEN_ENV = "GRASPVOC_API_KEY"
MAX_CANDIDATES = 16
SEGMENTER, VLM, LLM = "segmenter", "vlm", "llm"

CANDIDATE_SCHEMA = '{"labels": [str,...]}'
ASSIGNMENT_SCHEMA = '{"assignments": {"<mask id>": str}}'
CONDITIONING_SCHEMA = '{"grasp_label": str, "task_label": str}'


# ------------------------------------------------------------------ prompts


def build_candidate_prompt(object_label):
    if not object_label or not object_label.strip():
        raise ValueError("object label must be non-empty")
    return (
        f"The image is a depth rendering of a {object_label}, viewed along its thinnest axis.\n"
        f"List the subparts of the {object_label} that are graspable or task-relevant: "
        "parts a robot hand could hold, and parts that do the object's job.\n"
        f"Give between 1 and {MAX_CANDIDATES} short lowercase noun phrases without duplicates.\n"
        f"Answer only with JSON matching this schema: {CANDIDATE_SCHEMA}\n"
    )


def build_assignment_prompt(object_label, mask_boxes, candidates):
    lines = [
        f"The image is a depth rendering of a {object_label}. "
        "It was split into the following masks (pixel bounding boxes as col0,row0,col1,row1):",
    ]
    for mask_id, box in mask_boxes:
        lines.append(f"- mask {mask_id}: {box[0]},{box[1]},{box[2]},{box[3]}")
    lines.append("Assign every mask exactly one label from this list: " + ", ".join(candidates) + ".")
    lines.append(f'Use "{BACKGROUND}" for a mask that is not part of the {object_label}.')
    lines.append(f"Answer only with JSON matching this schema: {ASSIGNMENT_SCHEMA}")
    return "\n".join(lines) + "\n"


def _dedupe(labels):
    seen = []
    for lab in labels:
        if lab not in seen:
            seen.append(lab)
    return seen


def build_conditioning_prompt(task, labels):
    if not task or not task.strip():
        raise ValueError("task must be non-empty")
    labels = _dedupe(labels)
    if not labels:
        raise ValueError("need at least one subpart label")
    lines = [
        f"Task: {task}",
        "A robot will grasp an object and then perform the task above with it. "
        "The object consists of these subparts:",
    ]
    lines += [f"- {lab}" for lab in labels]
    lines += [
        "Return grasp_label, the subpart best suited for grasping, and task_label, "
        "the subpart responsible for performing the task.",
        "Copy both labels exactly from the list above. They may name the same subpart.",
        f"Answer only with JSON matching this schema: {CONDITIONING_SCHEMA}",
    ]
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ parsing


def normalize_label(label):
    return " ".join(str(label).strip().lower().split())


def extract_json_object(raw, required=()):
    """First JSON object in ``raw`` holding all ``required`` keys.

    Surrounding prose and code fences are skipped.
    """
    if not isinstance(raw, str):
        raise MalformedResponse(f"expected text, got {type(raw).__name__}")
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict) and all(k in obj for k in required):
            return obj
        pos = raw.find("{", pos + 1)
    raise MalformedResponse(f"no JSON object with keys {list(required)} in response: {raw[:200]!r}")


def parse_candidate_response(raw):
    obj = extract_json_object(raw, ("labels",))
    labels = obj["labels"]
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise MalformedResponse("'labels' must be a list of strings")
    out = [lab for lab in _dedupe(normalize_label(x) for x in labels) if lab and lab != BACKGROUND]
    if not 1 <= len(out) <= MAX_CANDIDATES:
        raise MalformedResponse(f"expected 1..{MAX_CANDIDATES} candidate labels, got {len(out)}")
    return out


def parse_assignment_response(raw, mask_ids, candidates):
    obj = extract_json_object(raw, ("assignments",))
    table = obj["assignments"]
    if not isinstance(table, dict):
        raise MalformedResponse("'assignments' must be an object")
    allowed = set(candidates)
    out = {}
    for mask_id in mask_ids:
        lab = table.get(str(mask_id))
        if lab is None:
            out[mask_id] = BACKGROUND
            continue
        lab = normalize_label(lab)
        if lab != BACKGROUND and lab not in allowed:
            raise UnknownLabel(f"mask {mask_id} assigned {lab!r}, not in {sorted(allowed)}")
        out[mask_id] = lab
    return out


def parse_conditioning_response(raw, labels):
    obj = extract_json_object(raw, ("grasp_label", "task_label"))
    by_norm = {normalize_label(lab): lab for lab in labels}
    picked = []
    for key in ("grasp_label", "task_label"):
        val = obj[key]
        if not isinstance(val, str):
            raise MalformedResponse(f"{key} must be a string")
        norm = normalize_label(val)
        if norm not in by_norm:
            raise UnknownLabel(f"{key} {val!r} is not one of {sorted(by_norm)}")
        picked.append(by_norm[norm])
    return picked[0], picked[1]


def parse_segmentation_response(raw, resolution):
    obj = extract_json_object(raw, ("masks",)) if isinstance(raw, str) else raw
    try:
        masks = masks_from_dict(obj, resolution)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedResponse(f"bad mask payload: {exc}") from exc
    ids = [m.id for m in masks]
    if len(set(ids)) != len(ids):
        raise MalformedResponse("duplicate mask ids")
    return masks


# ------------------------------------------------------------------ config


@dataclass
class ProviderConfig:
    kind: str = "fixture"
    fixture_dir: str = None
    endpoint: str = None
    segment_endpoint: str = None
    model: str = "gpt-4o"
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 60.0
    retries: int = 2
    backoff: float = 1.0
    max_inflight: int = 2

    def __post_init__(self):
        if self.kind not in ("fixture", "http"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.kind == "fixture" and not self.fixture_dir:
            raise ValueError("fixture providers need fixture_dir")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http providers need endpoint")
        if self.retries < 0 or self.max_inflight < 1:
            raise ValueError("retries must be >= 0 and max_inflight >= 1")

    @classmethod
    def from_dict(cls, data, base_dir=None):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown provider config keys: {sorted(unknown)}")
        cfg = dict(data)
        if base_dir is not None and cfg.get("fixture_dir"):
            cfg["fixture_dir"] = str(Path(base_dir) / cfg["fixture_dir"])
        return cls(**cfg)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------ transports


def _canonical(value):
    if isinstance(value, str):
        return " ".join(value.split())
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    return value


def canonical_request(request):
    return json.dumps(_canonical(request), sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def request_digest(request):
    return hashlib.sha256(canonical_request(request).encode("utf-8")).hexdigest()[:16]


class FixtureTransport:
    """Replays ``<root>/<channel>/<digest>.json``; never retries or re-prompts."""

    retries = 0
    backoff = 0.0
    reprompt = False

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, channel, request):
        return self.root / channel / f"{request_digest(request)}.json"

    def send(self, channel, request, image=None):
        path = self.path_for(channel, request)
        if not path.is_file():
            raise ProviderUnavailable(f"no {channel} fixture {path.name} under {self.root}")
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["response"]

    def record(self, channel, request, response):
        path = self.path_for(channel, request)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"channel": channel, "response": response}, indent=2) + "\n")
        sidecar = path.with_name(path.stem + ".request.json")
        with open(sidecar, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(_canonical(request), indent=2, sort_keys=True) + "\n")
        return path


class HttpTransport:
    """Generic mask endpoint plus chat-completions endpoint over HTTP."""

    reprompt = True

    def __init__(self, config, client=None):
        self.config = config
        self.retries = config.retries
        self.backoff = config.backoff
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_inflight)

    def _headers(self):
        token = os.environ.get(self.config.token_env)
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, url, payload):
        with self._slots:
            try:
                resp = self._client.post(url, json=payload, headers=self._headers())
            except httpx.HTTPError as exc:
                raise ProviderUnavailable(f"POST {url} failed: {exc}") from exc
        if resp.status_code >= 400:
            raise ProviderUnavailable(f"POST {url} returned HTTP {resp.status_code}")
        return resp

    def send(self, channel, request, image=None):
        image_b64 = base64.b64encode(pgm_bytes(image)).decode("ascii") if image is not None else None
        if channel == SEGMENTER:
            url = self.config.segment_endpoint
            if not url:
                raise ProviderUnavailable("no segment_endpoint configured")
            payload = dict(request)
            payload["image_pgm_base64"] = image_b64
            return self._post(url, payload).text
        content = [{"type": "text", "text": request["prompt"]}]
        if image_b64 is not None:
            content.append(
                {"type": "image_url", "image_url": {"url": f"data:image/x-portable-graymap;base64,{image_b64}"}}
            )
        payload = {
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }
        resp = self._post(self.config.endpoint, payload)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"unexpected chat-completions body: {resp.text[:200]!r}") from exc


def make_transport(config, client=None):
    if config.kind == "fixture":
        return FixtureTransport(config.fixture_dir)
    return HttpTransport(config, client=client)


def call_with_retry(transport, channel, request, parse, image=None, sleep=time.sleep):
    """Send ``request`` and validate with ``parse``, retrying on failure.

    At most ``transport.retries + 1`` attempts with a fixed backoff. Transport
    failures end in ProviderUnavailable; unparsable or invalid answers end in
    ValidationFailed carrying the last parse error.
    """
    attempts = transport.retries + 1
    last = None
    for attempt in range(attempts):
        if attempt:
            sleep(transport.backoff)
        try:
            raw = transport.send(channel, request, image)
        except ProviderUnavailable as exc:
            last = exc
            log.warning("%s attempt %d/%d: %s", channel, attempt + 1, attempts, exc)
            continue
        except MalformedResponse as exc:
            last = exc
            continue
        try:
            return parse(raw)
        except (MalformedResponse, UnknownLabel) as exc:
            last = exc
            log.warning("%s attempt %d/%d rejected: %s", channel, attempt + 1, attempts, exc)
    if isinstance(last, ProviderUnavailable):
        raise ProviderUnavailable(f"{channel}: gave up after {attempts} attempt(s): {last}") from last
    raise ValidationFailed(f"{channel}: no valid response after {attempts} attempt(s): {last}", last) from last


def _bbox(bitmap):
    rows = np.flatnonzero(bitmap.any(axis=1))
    cols = np.flatnonzero(bitmap.any(axis=0))
    return [int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])]


class Providers:
    """The three model roles of the segmentation and conditioning steps."""

    def __init__(self, transport, sleep=time.sleep):
        self.transport = transport
        self.sleep = sleep

    @classmethod
    def from_config(cls, config, client=None):
        return cls(make_transport(config, client=client))

    def _call(self, channel, request, parse, image=None):
        return call_with_retry(self.transport, channel, request, parse, image=image, sleep=self.sleep)

    def segment(self, object_label, image):
        h, w = np.asarray(image).shape
        request = {"object_label": object_label, "width": w, "height": h}
        return self._call(SEGMENTER, request, lambda raw: parse_segmentation_response(raw, (w, h)), image)

    def candidate_labels(self, object_label, image):
        request = {"object_label": object_label, "prompt": build_candidate_prompt(object_label)}
        return self._call(VLM, request, parse_candidate_response, image)

    def assign_labels(self, object_label, image, masks, candidates):
        boxes = [(m.id, _bbox(m.bitmap)) for m in masks]
        ids = [m.id for m in masks]
        request = {
            "object_label": object_label,
            "candidates": list(candidates),
            "masks": [{"id": i, "bbox": b} for i, b in boxes],
            "prompt": build_assignment_prompt(object_label, boxes, candidates),
        }
        return self._call(VLM, request, lambda raw: parse_assignment_response(raw, ids, candidates), image)

    def condition(self, task, labels):
        labels = _dedupe(labels)
        prompt = build_conditioning_prompt(task, labels)
        if len(labels) == 1:
            # forced choice; nothing to ask
            return labels[0], labels[0]
        request = {"task": task, "labels": labels, "prompt": prompt}

        def parse(raw):
            return parse_conditioning_response(raw, labels)

        try:
            return self._call(LLM, request, parse)
        except ValidationFailed as exc:
            if not (self.transport.reprompt and isinstance(exc.last_error, UnknownLabel)):
                raise
            retry_prompt = (
                prompt + f"Your previous answer was rejected: {exc.last_error}. "
                "Use only labels from the list.\n"
            )
            return self._call(LLM, dict(request, prompt=retry_prompt), parse)
