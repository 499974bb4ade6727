"""OCR and object input channels.

Recognition runs at four rotations; the rotation whose detections contain
the most lexicon words wins.  Its detections are then ranked by bounding
box area and confidence and clipped.  Object detections are thresholded
on confidence, sorted and clipped.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .embeddings import Lexicon, is_intelligible

ANGLES = (0, 90, 180, 270)


@dataclass(frozen=True)
class DetectedText:
    token: str
    bbox: tuple  # (x, y, width, height) in pixels
    confidence: float

    def __post_init__(self):
        if len(self.bbox) != 4 or any(v < 0 for v in self.bbox):
            raise ValueError(f"bbox must be four nonnegative numbers, got {self.bbox}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "bbox", tuple(self.bbox))

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]

    def to_json(self) -> dict:
        return {"token": self.token, "bbox": list(self.bbox), "conf": self.confidence}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectedText":
        return cls(obj["token"], tuple(obj["bbox"]), float(obj["conf"]))


@dataclass(frozen=True)
class RotationResult:
    angle: int
    detections: tuple = ()

    def __post_init__(self):
        if self.angle not in ANGLES:
            raise ValueError(f"angle must be one of {ANGLES}, got {self.angle}")
        object.__setattr__(self, "detections", tuple(self.detections))

    def to_json(self) -> dict:
        return {"angle": self.angle, "detections": [d.to_json() for d in self.detections]}

    @classmethod
    def from_json(cls, obj: dict) -> "RotationResult":
        return cls(int(obj["angle"]), tuple(DetectedText.from_json(d) for d in obj["detections"]))


@dataclass(frozen=True)
class DetectedObject:
    label: str
    confidence: float

    def __post_init__(self):
        if not self.label:
            raise ValueError("object label must be non-empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_json(self) -> dict:
        return {"label": self.label, "conf": self.confidence}

    @classmethod
    def from_json(cls, obj: dict) -> "DetectedObject":
        return cls(obj["label"], float(obj["conf"]))


@dataclass(frozen=True)
class ChannelLimits:
    max_ocr: int = 20
    max_obj: int = 10
    obj_threshold: float = 0.25
    # True keeps only confidence > threshold; False also keeps equality.
    strict_threshold: bool = True
    # True counts every intelligible token instance; False counts distinct types.
    count_instances: bool = True
    # OCR sort key order: "area" ranks by area then confidence.
    ocr_primary: str = "area"

    def __post_init__(self):
        if self.max_ocr <= 0 or self.max_obj <= 0:
            raise ValueError("channel limits must be positive")
        if not 0.0 <= self.obj_threshold < 1.0:
            raise ValueError("obj_threshold must lie in [0, 1)")
        if self.ocr_primary not in ("area", "confidence"):
            raise ValueError("ocr_primary must be 'area' or 'confidence'")


def intelligible_count(detections, lexicon: Lexicon, count_instances: bool = True) -> int:
    """Count lexicon words among the whitespace tokens of the detected strings."""
    words = [w for d in detections for w in d.token.split()]
    hits = [w.lower() for w in words if is_intelligible(w, lexicon)]
    return len(hits) if count_instances else len(set(hits))


def rank_ocr(detections, limits: ChannelLimits = ChannelLimits()) -> list[DetectedText]:
    """Sort by (area desc, confidence desc, input order) and clip to ``max_ocr``."""
    if limits.ocr_primary == "area":
        key = lambda item: (-item[1].area, -item[1].confidence, item[0])
    else:
        key = lambda item: (-item[1].confidence, -item[1].area, item[0])
    ranked = sorted(enumerate(detections), key=key)
    return [d for _, d in ranked[:limits.max_ocr]]


def select_orientation(candidates, lexicon: Lexicon,
                       limits: ChannelLimits = ChannelLimits()) -> tuple[int, list[DetectedText]]:
    """Pick the rotation with the most intelligible tokens.

    Ties prefer the smaller angle (0 before 90 before 180 before 270).
    Returns the winning angle and its detections ranked by :func:`rank_ocr`.
    """
    by_angle = {}
    for cand in candidates:
        if cand.angle in by_angle:
            raise ValueError(f"duplicate rotation {cand.angle}")
        by_angle[cand.angle] = cand
    if set(by_angle) != set(ANGLES):
        raise ValueError(f"need exactly one result per angle {ANGLES}, got {sorted(by_angle)}")
    best_angle, best_count = 0, -1
    for angle in ANGLES:
        count = intelligible_count(by_angle[angle].detections, lexicon, limits.count_instances)
        if count > best_count:
            best_angle, best_count = angle, count
    return best_angle, rank_ocr(by_angle[best_angle].detections, limits)


def filter_objects(detections, limits: ChannelLimits = ChannelLimits()) -> list[DetectedObject]:
    """Keep confident objects, sorted by confidence (stable), clipped to ``max_obj``."""
    if limits.strict_threshold:
        kept = [(i, d) for i, d in enumerate(detections) if d.confidence > limits.obj_threshold]
    else:
        kept = [(i, d) for i, d in enumerate(detections) if d.confidence >= limits.obj_threshold]
    kept.sort(key=lambda item: (-item[1].confidence, item[0]))
    return [d for _, d in kept[:limits.max_obj]]


# -- detection interchange (JSON lines) -----------------------------------


@dataclass
class ImageDetections:
    """Every rotation's OCR output plus object detections for one image."""
    image_id: str
    rotations: list = field(default_factory=list)
    objects: list = field(default_factory=list)


def write_detections(path, items) -> None:
    """One line per (image, angle) plus one ``objects`` line per image."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            for rot in item.rotations:
                fh.write(json.dumps({"image_id": item.image_id, **rot.to_json()}) + "\n")
            fh.write(json.dumps({"image_id": item.image_id,
                                 "objects": [o.to_json() for o in item.objects]}) + "\n")


def read_detections(path) -> list[ImageDetections]:
    items: dict[str, ImageDetections] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            image_id = str(obj.get("image_id", ""))
            item = items.setdefault(image_id, ImageDetections(image_id))
            if "angle" in obj:
                item.rotations.append(RotationResult.from_json(obj))
            elif "objects" in obj:
                item.objects.extend(DetectedObject.from_json(o) for o in obj["objects"])
            elif "label" in obj:
                item.objects.append(DetectedObject.from_json(obj))
            else:
                raise ValueError(f"{path}:{lineno}: neither a rotation nor an object record")
    return list(items.values())
