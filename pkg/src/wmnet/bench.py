"""Synthetic misaligned RGB/IR pairs.

One scene is sampled per seed and rendered twice. The infrared render uses
the scene geometry as-is and defines the ground truth. The RGB render moves
every object by a fixed pixel offset, scales geometry about the canvas
centre by ``resolution_ratio`` and loses detail through a down/up resample,
then gets low-light gain and sensor noise. Modality deficiency drops an
object from exactly one of the two renders.

Images are float32 ``(H, W, C)`` arrays in [0, 1]: RGB has three channels,
infrared one.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from wmnet.validation import ValidationError

CLASS_NAMES = ("person", "car", "bicycle")
NUM_CLASSES = len(CLASS_NAMES)

# (width range, height range) in IR pixels
_SIZE_RANGES = {
    0: ((4.0, 6.0), (9.0, 13.0)),
    1: ((12.0, 18.0), (8.0, 12.0)),
    2: ((8.0, 11.0), (3.0, 5.0)),
}
_THERMAL_BASE = (0.95, 0.75, 0.6)
_COLOR_BASE = ((0.85, 0.35, 0.30), (0.25, 0.45, 0.90), (0.90, 0.85, 0.20))
_MARGIN = 2.0


@dataclass(frozen=True)
class SceneObject:
    cls: int
    cx: float
    cy: float
    w: float
    h: float
    thermal: float
    color: Tuple[float, float, float]
    texture_seed: int
    # 0 visible everywhere, 1 infrared only, 2 RGB only
    visibility: int = 0

    @property
    def box(self) -> Tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Scene:
    canvas: int
    objects: Tuple[SceneObject, ...]
    background_seed: int


@dataclass(frozen=True)
class MisalignmentSpec:
    offset_dx: float = 0.0
    offset_dy: float = 0.0
    resolution_ratio: float = 1.0
    deficiency_prob: float = 0.0
    noise_sigma: float = 0.0
    illumination_gain: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ValidationError(f"{f.name} must be finite")
        if self.resolution_ratio <= 0:
            raise ValidationError("resolution_ratio must be > 0")
        if not 0.0 <= self.deficiency_prob <= 1.0:
            raise ValidationError("deficiency_prob must lie in [0, 1]")
        if self.noise_sigma < 0 or self.illumination_gain < 0:
            raise ValidationError("noise_sigma and illumination_gain must be >= 0")

    @property
    def offset_px(self) -> Tuple[float, float]:
        return (self.offset_dx, self.offset_dy)


NEUTRAL = MisalignmentSpec()
HEAVY = MisalignmentSpec(
    offset_dx=5.0, resolution_ratio=0.75, deficiency_prob=0.2, noise_sigma=0.05, illumination_gain=0.6
)
PRESETS = {"neutral": NEUTRAL, "heavy": HEAVY}


@dataclass(frozen=True)
class DatasetSpec:
    misalignment: MisalignmentSpec = NEUTRAL
    canvas: int = 64
    n_train: int = 800
    n_val: int = 200
    seed: int = 0

    def to_text(self) -> str:
        items = dict(asdict(self.misalignment))
        items.update(canvas=self.canvas, n_train=self.n_train, n_val=self.n_val, seed=self.seed)
        return "".join(f"{k}={v}\n" for k, v in items.items())

    @classmethod
    def from_text(cls, text: str) -> "DatasetSpec":
        raw = parse_key_values(text)
        mis_keys = {f.name for f in fields(MisalignmentSpec)}
        base = PRESETS[raw.pop("preset")] if "preset" in raw else NEUTRAL
        mis = {k: float(raw.pop(k)) for k in list(raw) if k in mis_keys}
        out = {}
        for key in ("canvas", "n_train", "n_val", "seed"):
            if key in raw:
                out[key] = int(raw.pop(key))
        if raw:
            raise ValidationError(f"unknown spec keys: {sorted(raw)}")
        return cls(misalignment=MisalignmentSpec(**{**asdict(base), **mis}), **out)

    @classmethod
    def load(cls, source: str) -> "DatasetSpec":
        """``source`` is a preset name or a path to a key=value file."""
        if source in PRESETS:
            return cls(misalignment=PRESETS[source])
        return cls.from_text(Path(source).read_text())


def parse_key_values(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


@dataclass
class DetectionSet:
    """Boxes as (x1, y1, x2, y2) in infrared-frame pixels."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        n = len(self.boxes)
        if self.scores is None or (np.ndim(self.scores) == 1 and len(self.scores) == 0 and n):
            self.scores = np.ones(n)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.classes) != n or len(self.scores) != n:
            raise ValidationError("boxes, classes and scores must have equal length")
        if n and (np.any(self.boxes[:, 2] < self.boxes[:, 0]) or np.any(self.boxes[:, 3] < self.boxes[:, 1])):
            raise ValidationError("box min must not exceed max")
        if n and (np.any(self.scores < 0) or np.any(self.scores > 1)):
            raise ValidationError("confidences must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.boxes)


def sample_scene(rng: np.random.Generator, canvas: int, max_objects: int = 4) -> Scene:
    objects: List[SceneObject] = []
    # size ranges are defined for a 64 px canvas
    unit = canvas / 64.0
    target = int(rng.integers(1, max_objects + 1))
    for _ in range(target):
        for _attempt in range(50):
            cls = int(rng.integers(NUM_CLASSES))
            (w_lo, w_hi), (h_lo, h_hi) = _SIZE_RANGES[cls]
            w, h = unit * rng.uniform(w_lo, w_hi), unit * rng.uniform(h_lo, h_hi)
            if cls == 1 and rng.random() < 0.5:
                w, h = h, w
            cx = rng.uniform(_MARGIN + w / 2, canvas - _MARGIN - w / 2)
            cy = rng.uniform(_MARGIN + h / 2, canvas - _MARGIN - h / 2)
            if all(_separated((cx, cy, w, h), (o.cx, o.cy, o.w, o.h)) for o in objects):
                thermal = float(np.clip(_THERMAL_BASE[cls] + rng.uniform(-0.08, 0.08), 0, 1))
                color = tuple(float(np.clip(c + rng.uniform(-0.1, 0.1), 0, 1)) for c in _COLOR_BASE[cls])
                objects.append(
                    SceneObject(cls, float(cx), float(cy), float(w), float(h), thermal, color,
                                int(rng.integers(2**31)))
                )
                break
    return Scene(canvas, tuple(objects), int(rng.integers(2**31)))


def _separated(a, b, gap: float = 3.0) -> bool:
    return (abs(a[0] - b[0]) >= (a[2] + b[2]) / 2 + gap) or (abs(a[1] - b[1]) >= (a[3] + b[3]) / 2 + gap)


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Class silhouette on normalised coordinates; the box is |u|, |v| <= 1."""
    if cls == 0:
        return u**2 + v**2 <= 1.0
    if cls == 1:
        return (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    wheels = ((np.abs(u) - 0.55) ** 2 / 0.45**2 + v**2) <= 1.0
    frame = (np.abs(u) <= 0.6) & (np.abs(v) <= 0.35)
    return wheels | frame


def object_mask(obj: SceneObject, canvas: int, shift=(0.0, 0.0), ratio: float = 1.0) -> np.ndarray:
    """Boolean (H, W) silhouette sampled at pixel centres after the RGB geometry transform."""
    centre = canvas / 2
    cx = centre + ratio * (obj.cx - centre) + shift[0]
    cy = centre + ratio * (obj.cy - centre) + shift[1]
    half_w, half_h = ratio * obj.w / 2, ratio * obj.h / 2
    grid = np.arange(canvas) + 0.5
    u = (grid[None, :] - cx) / half_w
    v = (grid[:, None] - cy) / half_h
    return _shape_mask(obj.cls, u, v)


def _smooth_field(rng: np.random.Generator, canvas: int, cells: int, channels: int = 1) -> np.ndarray:
    coarse = torch.from_numpy(rng.random((1, channels, cells, cells)).astype(np.float32))
    fine = F.interpolate(coarse, size=(canvas, canvas), mode="bicubic", align_corners=False)
    return fine[0].permute(1, 2, 0).numpy()


def render_ir(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    n = scene.canvas
    img = 0.15 + 0.12 * _smooth_field(rng, n, 4)
    for obj in scene.objects:
        if obj.visibility == 2:
            continue
        mask = object_mask(obj, n)
        img[mask] = obj.thermal
    img = img + rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_rgb(scene: Scene, spec: MisalignmentSpec, rng: np.random.Generator) -> np.ndarray:
    n = scene.canvas
    img = 0.35 + 0.25 * _smooth_field(rng, n, 6, 3) + 0.08 * (rng.random((n, n, 3)) - 0.5)
    for obj in scene.objects:
        if obj.visibility == 1:
            continue
        mask = object_mask(obj, n, spec.offset_px, spec.resolution_ratio)
        tex = np.random.default_rng(obj.texture_seed).random((n, n, 1))
        img[mask] = (np.asarray(obj.color) * (0.75 + 0.25 * tex))[mask]
    if spec.resolution_ratio != 1.0:
        img = _resample(img, max(1, int(round(n * spec.resolution_ratio))))
    img = spec.illumination_gain * img
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _resample(img: np.ndarray, low: int) -> np.ndarray:
    n = img.shape[0]
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(low, low), mode="bilinear", align_corners=False, antialias=True)
    t = F.interpolate(t, size=(n, n), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def apply_deficiency(scene: Scene, prob: float, rng: np.random.Generator) -> Scene:
    """Each object independently, with ``prob``, survives in only one modality (50/50 which)."""
    draws = rng.random((len(scene.objects), 2))
    objects = tuple(
        replace(o, visibility=(1 if d[1] < 0.5 else 2) if d[0] < prob else 0)
        for o, d in zip(scene.objects, draws)
    )
    return Scene(scene.canvas, objects, scene.background_seed)


def ground_truth(scene: Scene) -> DetectionSet:
    n = scene.canvas
    boxes = np.array([o.box for o in scene.objects], dtype=np.float64).reshape(-1, 4)
    boxes = np.clip(boxes, 0, n)
    return DetectionSet(boxes, [o.cls for o in scene.objects], np.ones(len(boxes)))


def generate_scene(seed: int, spec: MisalignmentSpec, canvas: int = 64) -> Scene:
    if canvas < 8:
        raise ValidationError(f"canvas must be at least 8 px, got {canvas}")
    rng = np.random.default_rng(seed)
    scene = sample_scene(rng, canvas)
    return apply_deficiency(scene, spec.deficiency_prob, rng)


def generate_pair(seed: int, spec: MisalignmentSpec = NEUTRAL, canvas: int = 64):
    """Render one (rgb, ir, ground truth) triple; bit-deterministic per (seed, spec, canvas)."""
    scene = generate_scene(seed, spec, canvas)
    rng = np.random.default_rng([seed, scene.background_seed])
    ir = render_ir(scene, rng)
    rgb = render_rgb(scene, spec, rng)
    return rgb, ir, ground_truth(scene)


def pair_seed(base: int, split: str, index: int) -> int:
    split_id = {"train": 0, "val": 1}.get(split, 2)
    return int(np.random.SeedSequence(base, spawn_key=(split_id, index)).generate_state(1)[0])


@dataclass
class Sample:
    image_id: str
    rgb: np.ndarray
    ir: np.ndarray
    gt: DetectionSet


def generate_split(dspec: DatasetSpec, split: str) -> List[Sample]:
    count = {"train": dspec.n_train, "val": dspec.n_val}[split]
    out = []
    for i in range(count):
        rgb, ir, gt = generate_pair(pair_seed(dspec.seed, split, i), dspec.misalignment, dspec.canvas)
        out.append(Sample(f"{split}_{i:06d}", rgb, ir, gt))
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def write_split(samples: Iterable[Sample], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "annotations.jsonl", "w") as fh:
        for s in samples:
            Image.fromarray(to_uint8(s.rgb)).save(directory / f"{s.image_id}_rgb.png")
            Image.fromarray(to_uint8(s.ir[..., 0])).save(directory / f"{s.image_id}_ir.png")
            for box, cls in zip(s.gt.boxes, s.gt.classes):
                fh.write(json.dumps({"image_id": s.image_id, "class": int(cls),
                                     "x1": float(box[0]), "y1": float(box[1]),
                                     "x2": float(box[2]), "y2": float(box[3])}) + "\n")
            if len(s.gt) == 0:
                # keeps images without objects discoverable
                fh.write(json.dumps({"image_id": s.image_id, "class": None}) + "\n")


def write_dataset(dspec: DatasetSpec, out: Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.txt").write_text(dspec.to_text())
    for split in ("train", "val"):
        write_split(generate_split(dspec, split), out / split)


def read_split(directory: Path) -> List[Sample]:
    directory = Path(directory)
    ann = directory / "annotations.jsonl"
    if not ann.exists():
        raise ValidationError(f"no annotations.jsonl in {directory}")
    per_image: Dict[str, List[dict]] = {}
    for line in ann.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            per_image.setdefault(rec["image_id"], [])
            if rec.get("class") is not None:
                per_image[rec["image_id"]].append(rec)
    samples = []
    for image_id in sorted(per_image):
        recs = per_image[image_id]
        rgb = np.asarray(Image.open(directory / f"{image_id}_rgb.png"), dtype=np.float32) / 255.0
        ir = np.asarray(Image.open(directory / f"{image_id}_ir.png"), dtype=np.float32)[..., None] / 255.0
        gt = DetectionSet([[r["x1"], r["y1"], r["x2"], r["y2"]] for r in recs],
                          [r["class"] for r in recs], np.ones(len(recs)))
        samples.append(Sample(image_id, rgb, ir, gt))
    return samples
