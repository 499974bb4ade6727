"""Dataset records, on-disk layout and the synthetic goal-oriented corpus.

The synthetic corpus mimics the structure of assistive captioning data:
a share of images carry text (brand words) and a share are rotated.  A
simulated recognizer returns the planted words only at the true rotation
and garbage elsewhere; a simulated detector returns the planted objects
plus low-confidence distractors.  Feature grids encode the planted objects
(and, weakly, the text) as token-keyed patterns so captions are learnable
from the image channel.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .embeddings import Embedder, Lexicon, fnv1a_64
from .model import DynamicVocabulary, ModalityBundle
from .perception import (ANGLES, ChannelLimits, DetectedObject, DetectedText, ImageDetections,
                         RotationResult, filter_objects, read_detections, select_orientation,
                         write_detections)
from .text import TokenizerVocab, build_vocab, normalize, wordpiece

OBJECT_LABELS = (
    "bottle", "cup", "bowl", "book", "remote", "keyboard", "laptop", "mouse",
    "scissors", "clock", "vase", "toothbrush", "banana", "apple", "sandwich", "phone",
)
BRAND_WORDS = (
    "heinz", "ketchup", "cognac", "marnier", "pepsi", "tide", "colgate", "kellogg",
    "nestle", "oreo", "folgers", "campbell", "doritos", "lipton", "nivea", "dove",
    "tylenol", "advil", "lysol", "ritz",
)
MINOR_WORDS = ("net", "wt", "oz", "new", "fl", "ml", "lb", "free")
FILLER_WORDS = (
    "the", "and", "label", "red", "blue", "green", "white", "black", "large", "small",
    "front", "back", "side", "top", "open", "food", "drink", "water", "sugar", "salt",
    "milk", "coffee", "tea", "juice", "soap", "paper", "light", "dark", "hand", "room",
)
NO_TEXT_TEMPLATES = (
    "a {o1} on a table",
    "a close up of a {o1}",
    "a photo of a {o1}",
    "a {o1} sitting on a counter",
    "a {o1} next to a {o2}",
)
TEXT_TEMPLATES = (
    "a {o1} of {b}",
    "a {b} {o1}",
    "a {o1} that says {b}",
    "a close up of a {b} {o1}",
    "a {o1} with the word {b} on it",
)
_SYLLABLES = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
_GARBAGE_CHARS = "xqzjkvw0123456789#@%&"


@dataclass
class SynthSpec:
    n_images: int = 600
    n_brands: int = len(BRAND_WORDS)
    text_fraction: float = 0.7
    rotation_fraction: float = 0.285
    oov_plant_fraction: float = 0.3
    val_fraction: float = 0.2
    n_refs: int = 5
    n_pixel: int = 16
    img_dim: int = 32
    noise: float = 0.3
    text_gain: float = 0.15
    confusion_rate: float = 0.0
    min_freq: int = 1
    seed: int = 0

    def validate(self) -> None:
        for name in ("text_fraction", "rotation_fraction", "oov_plant_fraction",
                     "val_fraction", "confusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.oov_plant_fraction > self.text_fraction:
            raise ValueError("oov_plant_fraction cannot exceed text_fraction")
        side = int(round(np.sqrt(self.n_pixel)))
        if side * side != self.n_pixel:
            raise ValueError("n_pixel must be a perfect square (rotatable grid)")
        if self.n_images < 1 or not 1 <= self.n_refs <= 5:
            raise ValueError("need n_images >= 1 and 1 <= n_refs <= 5")
        if not 1 <= self.n_brands <= len(BRAND_WORDS):
            raise ValueError(f"n_brands must lie in [1, {len(BRAND_WORDS)}]")


@dataclass
class DatasetRecord:
    image_id: str
    features: np.ndarray
    true_rotation: int
    planted_text: list = field(default_factory=list)     # DetectedText
    planted_objects: list = field(default_factory=list)  # DetectedObject
    references: list = field(default_factory=list)
    split: str = "train"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.image_id == other.image_id and self.true_rotation == other.true_rotation
                and self.planted_text == other.planted_text
                and self.planted_objects == other.planted_objects
                and self.references == other.references and self.split == other.split
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Dataset:
    records: list
    vocab: TokenizerVocab
    lexicon: Lexicon
    detections: dict  # image_id -> ImageDetections
    info: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.records == other.records
                and self.vocab == other.vocab and self.lexicon.words == other.lexicon.words
                and self.detections == other.detections and self.info == other.info)

    def oov_words(self) -> set:
        """Planted words that are not caption-vocabulary words."""
        return {d.token for r in self.records for d in r.planted_text
                if d.token not in self.vocab and d.token not in MINOR_WORDS}

    # -- persistence -------------------------------------------------------

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        manifest = {"info": self.info, "images": [], "annotations": []}
        ann_id = 0
        for r in self.records:
            manifest["images"].append({
                "id": r.image_id,
                "split": r.split,
                "true_rotation": r.true_rotation,
                "planted_text": [d.to_json() for d in r.planted_text],
                "planted_objects": [o.to_json() for o in r.planted_objects],
                "feature_shape": list(r.features.shape),
            })
            for caption in r.references:
                manifest["annotations"].append({"id": ann_id, "image_id": r.image_id, "caption": caption})
                ann_id += 1
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        container.save(os.path.join(directory, "features.bin"),
                       {r.image_id: r.features for r in self.records})
        write_detections(os.path.join(directory, "detections.jsonl"),
                         [self.detections[r.image_id] for r in self.records])
        self.lexicon.save(os.path.join(directory, "lexicon.txt"))
        self.vocab.save(os.path.join(directory, "vocab.txt"))

    @classmethod
    def load(cls, directory) -> "Dataset":
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        feats = container.load(os.path.join(directory, "features.bin"))
        refs: dict[str, list] = {}
        for ann in manifest["annotations"]:
            refs.setdefault(ann["image_id"], []).append(ann["caption"])
        records = []
        for img in manifest["images"]:
            records.append(DatasetRecord(
                image_id=img["id"],
                features=feats[img["id"]],
                true_rotation=int(img["true_rotation"]),
                planted_text=[DetectedText.from_json(d) for d in img["planted_text"]],
                planted_objects=[DetectedObject.from_json(o) for o in img["planted_objects"]],
                references=refs.get(img["id"], []),
                split=img["split"],
            ))
        dets = {d.image_id: d for d in read_detections(os.path.join(directory, "detections.jsonl"))}
        return cls(records, TokenizerVocab.load(os.path.join(directory, "vocab.txt")),
                   Lexicon.load(os.path.join(directory, "lexicon.txt")), dets, manifest["info"])


# -- simulated perception ----------------------------------------------------


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([k if isinstance(k, int) else fnv1a_64(str(k).encode()) % (1 << 63)
                                  for k in keys])


def _garbage(rng, lexicon: Lexicon) -> str:
    while True:
        n = int(rng.integers(3, 7))
        s = "".join(rng.choice(list(_GARBAGE_CHARS), n))
        if any(ch.isdigit() or not ch.isalnum() for ch in s) and s not in lexicon:
            return s


def simulated_recognizer(record: DatasetRecord, angle: int, lexicon: Lexicon,
                         confusion_rate: float = 0.0, seed: int = 0) -> RotationResult:
    """Planted text at the true rotation; unreadable strings at the others.

    With ``confusion_rate`` > 0 each garbage string is replaced by a random
    lexicon word with that probability.
    """
    if angle not in ANGLES:
        raise ValueError(f"angle must be one of {ANGLES}")
    if angle == record.true_rotation:
        return RotationResult(angle, tuple(record.planted_text))
    rng = _rng(seed, record.image_id, angle)
    n = len(record.planted_text) if record.planted_text else int(rng.integers(0, 2))
    words = sorted(lexicon.words)
    dets = []
    for _ in range(n):
        token = _garbage(rng, lexicon)
        if confusion_rate > 0 and rng.random() < confusion_rate and words:
            token = words[int(rng.integers(len(words)))]
        w, h = float(rng.uniform(10, 200)), float(rng.uniform(5, 80))
        dets.append(DetectedText(token, (float(rng.uniform(0, 300)), float(rng.uniform(0, 300)), w, h),
                                 float(rng.uniform(0.05, 0.6))))
    return RotationResult(angle, tuple(dets))


def simulated_detector(record: DatasetRecord, seed: int = 0) -> list[DetectedObject]:
    """Planted objects plus zero to two low-confidence distractors."""
    rng = _rng(seed, record.image_id, "objects")
    out = list(record.planted_objects)
    planted = {o.label for o in out}
    others = [lab for lab in OBJECT_LABELS if lab not in planted]
    for _ in range(int(rng.integers(0, 3))):
        out.append(DetectedObject(others[int(rng.integers(len(others)))],
                                  round(float(rng.uniform(0.05, 0.35)), 4)))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def detect_all(record: DatasetRecord, lexicon: Lexicon, confusion_rate: float = 0.0,
               seed: int = 0) -> ImageDetections:
    return ImageDetections(
        record.image_id,
        [simulated_recognizer(record, a, lexicon, confusion_rate, seed) for a in ANGLES],
        simulated_detector(record, seed),
    )


# -- synthetic generation ------------------------------------------------------


def _pattern(kind: str, token: str, dim: int) -> np.ndarray:
    v = _rng(kind, token).normal(0, 1, dim)
    return v / np.linalg.norm(v) * np.sqrt(dim) * 0.5


def _pseudo_word(rng, taken: set) -> str:
    while True:
        w = "".join(rng.choice(_SYLLABLES, int(rng.integers(2, 4)))) + str(rng.choice(list("ksnrlm")))
        if w not in taken:
            taken.add(w)
            return w


def _feature_grid(rng, spec: SynthSpec, objects, text_tokens, rotation: int) -> np.ndarray:
    side = int(round(np.sqrt(spec.n_pixel)))
    grid = rng.normal(0, spec.noise, (side, side, spec.img_dim))
    cells = rng.permutation(spec.n_pixel)
    k = 0
    for i, label in enumerate(objects):
        for _ in range(2 if i == 0 else 1):
            r, c = divmod(int(cells[k]), side)
            grid[r, c] += _pattern("obj", label, spec.img_dim)
            k += 1
    for token in text_tokens:
        r, c = divmod(int(cells[k % spec.n_pixel]), side)
        grid[r, c] += spec.text_gain * _pattern("txt", token, spec.img_dim)
        k += 1
    grid = np.rot90(grid, k=rotation // 90, axes=(0, 1))
    return np.ascontiguousarray(grid.reshape(spec.n_pixel, spec.img_dim), dtype=np.float32)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic corpus; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    brands = BRAND_WORDS[:spec.n_brands]
    reserved = set(OBJECT_LABELS) | set(BRAND_WORDS) | set(MINOR_WORDS) | set(FILLER_WORDS)
    for t in NO_TEXT_TEMPLATES + TEXT_TEMPLATES:
        reserved.update(w for w in t.split() if not w.startswith("{"))
    taken = set(reserved)
    n_oov = int(round(spec.oov_plant_fraction * spec.n_images))
    n_text = max(int(round(spec.text_fraction * spec.n_images)), n_oov)
    kinds = np.array(["oov"] * n_oov + ["text"] * (n_text - n_oov)
                     + ["none"] * (spec.n_images - n_text))
    kinds = kinds[rng.permutation(spec.n_images)]
    n_val = int(round(spec.val_fraction * spec.n_images))
    records, oov = [], set()
    for i in range(spec.n_images):
        kind = kinds[i]
        objs = [str(o) for o in rng.choice(OBJECT_LABELS, size=2, replace=False)]
        n_obj = 1 + int(rng.random() < 0.5)
        objs = objs[:n_obj]
        rotation = int(rng.choice([90, 180, 270])) if rng.random() < spec.rotation_fraction else 0
        planted_text = []
        brand = None
        if kind != "none":
            brand = _pseudo_word(rng, taken) if kind == "oov" else str(rng.choice(brands))
            if kind == "oov":
                oov.add(brand)
            planted_text.append(DetectedText(
                brand, (float(rng.uniform(0, 100)), float(rng.uniform(0, 100)),
                        float(rng.uniform(120, 300)), float(rng.uniform(40, 100))),
                round(float(rng.uniform(0.7, 0.99)), 4)))
            for _ in range(int(rng.integers(0, 3))):
                planted_text.append(DetectedText(
                    str(rng.choice(MINOR_WORDS)),
                    (float(rng.uniform(0, 300)), float(rng.uniform(0, 300)),
                     float(rng.uniform(10, 40)), float(rng.uniform(5, 15))),
                    round(float(rng.uniform(0.3, 0.9)), 4)))
        planted_objects = [DetectedObject(o, round(float(rng.uniform(0.5, 0.99)), 4)) for o in objs]
        templates = TEXT_TEMPLATES if brand else NO_TEXT_TEMPLATES
        chosen = rng.permutation(len(templates))[:spec.n_refs]
        o2 = objs[1] if len(objs) > 1 else str(rng.choice([o for o in OBJECT_LABELS if o != objs[0]]))
        refs = [templates[j].format(o1=objs[0], o2=o2, b=brand) for j in chosen]
        feats = _feature_grid(rng, spec, objs, [d.token for d in planted_text[:1]], rotation)
        records.append(DatasetRecord(f"synth_{i:05d}", feats, rotation, planted_text,
                                     planted_objects, refs, "val" if i >= spec.n_images - n_val else "train"))
    train_refs = [c for r in records if r.split == "train" for c in r.references]
    vocab = build_vocab(train_refs or [c for r in records for c in r.references],
                        spec.min_freq, exclude=oov)
    lexicon = Lexicon(sorted(reserved | oov))
    dets = {r.image_id: detect_all(r, lexicon, spec.confusion_rate, spec.seed) for r in records}
    return Dataset(records, vocab, lexicon, dets, {"synth_spec": asdict(spec)})


# -- model-facing examples -----------------------------------------------------


@dataclass
class Example:
    image_id: str
    bundle: ModalityBundle
    references: list      # normalized word lists
    ocr_angle: int = 0


def build_bundle(record: DatasetRecord, dets: ImageDetections, lexicon: Lexicon,
                 embedder: Embedder, limits: ChannelLimits) -> tuple[ModalityBundle, int]:
    angle, ranked = select_orientation(dets.rotations, lexicon, limits)
    objs = filter_objects(dets.objects, limits)
    ocr_tokens = [d.token.lower() for d in ranked]
    obj_tokens = [o.label.lower() for o in objs]
    bundle = ModalityBundle(record.features, ocr_tokens, embedder.many(ocr_tokens),
                            obj_tokens, embedder.many(obj_tokens))
    return bundle, angle


def prepare_examples(dataset: Dataset, split: str | None, embedder: Embedder,
                     limits: ChannelLimits) -> list[Example]:
    out = []
    for r in dataset.records:
        if split is not None and r.split != split:
            continue
        bundle, angle = build_bundle(r, dataset.detections[r.image_id], dataset.lexicon, embedder, limits)
        out.append(Example(r.image_id, bundle, [normalize(c) for c in r.references], angle))
    return out


def caption_targets(words, dyn: DynamicVocabulary, copy: bool, max_len: int) -> list[int]:
    """Extended ids for a reference caption, ending in EOS, at most ``max_len`` long.

    Whole caption words map to their vocabulary id; otherwise a word matching
    a detected token maps to that slot (copy models only); otherwise it is
    WordPiece-segmented, which yields ``<unk>`` when no segmentation exists.
    """
    vocab = dyn.base
    ids = []
    for w in words:
        wid = dyn.word_id(w, copy=copy)
        if wid is not None:
            ids.append(wid)
        else:
            ids.extend(vocab.id(p) for p in wordpiece(w, vocab))
    return ids[:max_len - 1] + [vocab.eos_id]
