"""
Synthetic Shape Scenes and Image Datasets

Scenes are stored in unit coordinates (x, y in [0, 1], y downwards) so one
spec renders at any resolution. Objects never overlap: their bounding circles
stay at least 2 base-resolution pixels apart, and generated scenes use a
3-pixel gap. Margins are measured at no less than GEOMETRY_RESOLUTION, so
very small bases keep the same layouts as a 32x32 corpus. The class label of a scene is its object count.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, PngImagePlugin

from src.utils.error_handler import DataError
from src.utils.run_logger import get_run_logger

Resolution = Union[int, Tuple[int, int], Sequence[int]]

PALETTE = (
    (1.0, -0.6, -0.6),
    (-0.6, 1.0, -0.6),
    (-0.5, -0.5, 1.0),
    (1.0, 1.0, -0.6),
    (1.0, -0.4, 1.0),
    (-0.5, 1.0, 1.0),
    (1.0, 1.0, 1.0),
)
MIN_SIZE, MAX_SIZE = 0.09, 0.15
SPEC_MARGIN_PX = 2
GENERATION_MARGIN_PX = 3
GEOMETRY_RESOLUTION = 32
MAX_RESTARTS = 1000
MANIFEST_FILE = "manifest.json"


class ShapeKind(Enum):
    DISK = "disk"
    SQUARE = "square"
    TRIANGLE = "triangle"


@dataclass(frozen=True)
class SceneObject:
    kind: ShapeKind
    cx: float
    cy: float
    size: float
    color: Tuple[float, float, float]

    @property
    def bounding_radius(self) -> float:
        if self.kind is ShapeKind.SQUARE:
            return self.size * float(np.sqrt(2.0))
        return self.size

    def to_dict(self) -> Dict:
        return {"kind": self.kind.value, "cx": self.cx, "cy": self.cy, "size": self.size,
                "color": list(self.color)}

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneObject":
        return cls(ShapeKind(data["kind"]), float(data["cx"]), float(data["cy"]), float(data["size"]),
                   tuple(float(v) for v in data["color"]))


@dataclass(frozen=True)
class SceneSpec:
    objects: Tuple[SceneObject, ...] = ()
    background: Tuple[float, float, float] = (-0.8, -0.8, -0.8)
    label: Optional[int] = None
    base_resolution: int = 32

    @property
    def count(self) -> int:
        return len(self.objects)

    @property
    def class_label(self) -> int:
        return self.count if self.label is None else self.label

    def validate(self) -> None:
        """
        Raises:
            DataError: When two objects are closer than the pixel margin
        """
        margin = SPEC_MARGIN_PX / self.base_resolution
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                distance = float(np.hypot(a.cx - b.cx, a.cy - b.cy))
                if distance < a.bounding_radius + b.bounding_radius + margin:
                    raise DataError(f"Objects at ({a.cx:.3f}, {a.cy:.3f}) and ({b.cx:.3f}, {b.cy:.3f}) "
                                    f"overlap or sit closer than {SPEC_MARGIN_PX} px at base resolution")

    def to_dict(self) -> Dict:
        return {"objects": [o.to_dict() for o in self.objects], "background": list(self.background),
                "label": self.class_label, "base_resolution": self.base_resolution}

    @classmethod
    def from_dict(cls, data: Dict) -> "SceneSpec":
        return cls(tuple(SceneObject.from_dict(o) for o in data["objects"]),
                   tuple(float(v) for v in data["background"]), data.get("label"),
                   int(data.get("base_resolution", 32)))

    def spec_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _pair(resolution: Resolution) -> Tuple[int, int]:
    if isinstance(resolution, (int, np.integer)):
        return int(resolution), int(resolution)
    height, width = resolution
    return int(height), int(width)


def _shape_mask(obj: SceneObject, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    dx, dy = xs - obj.cx, ys - obj.cy
    if obj.kind is ShapeKind.DISK:
        return dx * dx + dy * dy <= obj.size * obj.size
    if obj.kind is ShapeKind.SQUARE:
        return np.maximum(np.abs(dx), np.abs(dy)) <= obj.size
    # equilateral triangle pointing up with circumradius = size
    angles = np.deg2rad([-90.0, 30.0, 150.0])
    vx = obj.cx + obj.size * np.cos(angles)
    vy = obj.cy + obj.size * np.sin(angles)
    inside = np.ones(np.broadcast(xs, ys).shape, dtype=bool)
    for i in range(3):
        x0, y0, x1, y1 = vx[i], vy[i], vx[(i + 1) % 3], vy[(i + 1) % 3]
        inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
    return inside


def render(spec: SceneSpec, resolution: Resolution, supersample: int = 4) -> np.ndarray:
    """
    Anti-aliased rasterization of a scene

    Args:
        spec: Scene to draw
        resolution: Output size as int or (H, W), each >= 8
        supersample: Sub-samples per pixel along each axis

    Returns:
        float32 array of shape (3, H, W) in [-1, 1]
    """
    height, width = _pair(resolution)
    if height < 8 or width < 8:
        raise DataError(f"Render resolution must be at least 8, got {(height, width)}")
    spec.validate()

    fine_h, fine_w = height * supersample, width * supersample
    ys = ((np.arange(fine_h) + 0.5) / fine_h)[:, None]
    xs = ((np.arange(fine_w) + 0.5) / fine_w)[None, :]
    background = np.asarray(spec.background, dtype=np.float64)
    image = np.broadcast_to(background[:, None, None], (3, height, width)).copy()
    for obj in spec.objects:
        mask = _shape_mask(obj, xs, ys).astype(np.float64)
        coverage = mask.reshape(height, supersample, width, supersample).mean(axis=(1, 3))
        color = np.asarray(obj.color, dtype=np.float64)[:, None, None]
        image = image * (1.0 - coverage) + color * coverage
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def random_scene(rng: np.random.Generator, min_objects: int = 1, max_objects: int = 4,
                 base_resolution: int = 32, max_attempts: int = 200) -> SceneSpec:
    """Draw a non-overlapping scene with k ~ Uniform{min..max} objects"""
    count = int(rng.integers(min_objects, max_objects + 1))
    background = tuple(float(v) for v in rng.uniform(-0.95, -0.6, size=3))
    margin = GENERATION_MARGIN_PX / base_resolution
    kinds = list(ShapeKind)
    for _ in range(MAX_RESTARTS):
        objects: List[SceneObject] = []
        for _ in range(count):
            for _ in range(max_attempts):
                kind = kinds[int(rng.integers(len(kinds)))]
                size = float(rng.uniform(MIN_SIZE, MAX_SIZE))
                color = PALETTE[int(rng.integers(len(PALETTE)))]
                sizing = SceneObject(kind, 0.0, 0.0, size, color)
                reach = sizing.bounding_radius + margin
                cx, cy = (float(v) for v in rng.uniform(reach, 1.0 - reach, size=2))
                candidate = SceneObject(kind, cx, cy, size, color)
                if all(np.hypot(cx - o.cx, cy - o.cy) >= candidate.bounding_radius + o.bounding_radius + margin
                       for o in objects):
                    objects.append(candidate)
                    break
            else:
                break
        if len(objects) == count:
            return SceneSpec(tuple(objects), background, count, base_resolution)
    raise DataError(f"Could not place {count} objects without overlap at base resolution {base_resolution}")


class SceneDataset:
    """Read-only handle over scene specs, rendered on demand at any resolution"""

    def __init__(self, specs: Sequence[SceneSpec], name: str = "scenes"):
        self.specs = list(specs)
        self.name = name

    def __len__(self) -> int:
        return len(self.specs)

    def labels(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        indices = range(len(self.specs)) if indices is None else indices
        return np.asarray([self.specs[i].class_label for i in indices], dtype=np.int64)

    def images(self, indices: Sequence[int], resolution: Resolution) -> np.ndarray:
        return np.stack([render(self.specs[i], resolution) for i in indices])

    def batch(self, indices: Sequence[int], resolution: Resolution) -> Tuple[np.ndarray, np.ndarray]:
        return self.images(indices, resolution), self.labels(indices)

    def sample_batch(self, rng: np.random.Generator, batch_size: int,
                     resolution: Resolution) -> Tuple[np.ndarray, np.ndarray]:
        indices = rng.integers(0, len(self.specs), size=batch_size)
        return self.batch(indices, resolution)

    def spec_hashes(self) -> List[str]:
        return [spec.spec_hash() for spec in self.specs]


@dataclass
class Corpus:
    seed: int
    base_resolution: Tuple[int, int]
    target_resolution: Tuple[int, int]
    train: SceneDataset
    eval: SceneDataset
    cache_dir: Optional[str] = None
    cached_files: Dict[str, str] = field(default_factory=dict)

    def manifest(self) -> Dict:
        n_train = len(self.train)
        return {
            "seed": self.seed,
            "base_resolution": list(self.base_resolution),
            "target_resolution": list(self.target_resolution),
            "n_train": n_train,
            "n_eval": len(self.eval),
            "splits": {"train": [0, n_train], "eval": [n_train, n_train + len(self.eval)]},
            "specs": [s.to_dict() for s in self.train.specs + self.eval.specs],
            "cached_files": dict(sorted(self.cached_files.items())),
        }

    def manifest_hash(self) -> str:
        text = json.dumps(self.manifest()["specs"], sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def write_manifest(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        temp_file = path + ".tmp"
        with open(temp_file, "w", encoding="utf-8") as f:
            json.dump(self.manifest(), f, sort_keys=True)
        os.replace(temp_file, path)


def load_manifest_specs(path: str) -> List[SceneSpec]:
    """Scene specs listed in a corpus manifest, train split first"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read corpus manifest {path}: {e}") from None
    return [SceneSpec.from_dict(s) for s in manifest["specs"]]


def make_corpus(seed: int, n_train: int, n_eval: int, base_resolution: Resolution = 32,
                target_resolution: Resolution = 64, min_objects: int = 1, max_objects: int = 4,
                cache_dir: Optional[str] = None) -> Corpus:
    """
    Deterministic corpus with disjoint train/eval splits

    Args:
        seed: Corpus seed; the corpus is a pure function of it
        n_train: Training scenes
        n_eval: Evaluation scenes
        base_resolution: Base stage resolution
        target_resolution: Final stage resolution
        min_objects: Fewest objects per scene
        max_objects: Most objects per scene
        cache_dir: When set, every scene is written as PNG at both resolutions,
            with the corpus manifest beside the images

    Returns:
        Corpus with train and eval handles
    """
    if n_train < 1 or n_eval < 1:
        raise DataError(f"n_train and n_eval must be >= 1, got {n_train}, {n_eval}")
    base, target = _pair(base_resolution), _pair(target_resolution)
    rng = np.random.default_rng(seed)
    specs: List[SceneSpec] = []
    seen = set()
    while len(specs) < n_train + n_eval:
        spec = random_scene(rng, min_objects, max_objects, base_resolution=max(base[0], GEOMETRY_RESOLUTION))
        digest = spec.spec_hash()
        if digest in seen:
            continue
        seen.add(digest)
        specs.append(spec)

    corpus = Corpus(seed, base, target, SceneDataset(specs[:n_train], "train"),
                    SceneDataset(specs[n_train:], "eval"), cache_dir=cache_dir)
    if cache_dir:
        for spec in specs:
            for resolution in (base, target):
                corpus.cached_files.update(cache_png(spec, resolution, cache_dir))
        corpus.write_manifest(os.path.join(cache_dir, MANIFEST_FILE))
    return corpus


def cache_png(spec: SceneSpec, resolution: Tuple[int, int], cache_dir: str) -> Dict[str, str]:
    """Write a render into the content-addressed cache; returns {key: path}"""
    key = f"{spec.spec_hash()}_{resolution[0]}x{resolution[1]}"
    path = os.path.join(cache_dir, key[:2], f"{key}.png")
    if not os.path.exists(path):
        save_png(render(spec, resolution), path)
    return {key: path}


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] to (H, W, 3) uint8 with round-half-even"""
    scaled = np.rint((np.clip(image, -1.0, 1.0) + 1.0) / 2.0 * 255.0)
    return scaled.astype(np.uint8).transpose(1, 2, 0)


def save_png(image: np.ndarray, path: str, metadata: Optional[Dict[str, str]] = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    info = PngImagePlugin.PngInfo()
    for key, value in sorted((metadata or {}).items()):
        info.add_text(key, str(value))
    Image.fromarray(to_uint8(np.asarray(image))).save(path, format="PNG", pnginfo=info)


def load_png(path: str, resolution: Resolution) -> np.ndarray:
    """Centre-crop to square, area-resample and scale to [-1, 1]; returns (3, H, W) float32"""
    height, width = _pair(resolution)
    with Image.open(path) as img:
        img = img.convert("RGB")
        side = min(img.size)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side))
        if img.size != (width, height):
            img = img.resize((width, height), resample=Image.Resampling.BOX)
        array = np.asarray(img, dtype=np.float32)
    return (array / 255.0 * 2.0 - 1.0).transpose(2, 0, 1).copy()


class ImageDataset:
    """Unlabelled images held in memory at a fixed resolution"""

    def __init__(self, images: np.ndarray, paths: Sequence[str], name: str = "png"):
        self._images = images
        self.paths = list(paths)
        self.name = name

    @property
    def resolution(self) -> Tuple[int, int]:
        return self._images.shape[2], self._images.shape[3]

    def __len__(self) -> int:
        return len(self._images)

    def labels(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        count = len(self) if indices is None else len(indices)
        return np.zeros(count, dtype=np.int64)

    def images(self, indices: Sequence[int], resolution: Resolution) -> np.ndarray:
        height, width = _pair(resolution)
        stored_h, stored_w = self.resolution
        selected = self._images[np.asarray(indices)]
        if (height, width) == (stored_h, stored_w):
            return selected
        if stored_h % height or stored_w % width:
            raise DataError(f"Cannot area-downsample {(stored_h, stored_w)} images to {(height, width)}")
        fh, fw = stored_h // height, stored_w // width
        return selected.reshape(len(selected), 3, height, fh, width, fw).mean(axis=(3, 5))

    def batch(self, indices: Sequence[int], resolution: Resolution) -> Tuple[np.ndarray, np.ndarray]:
        return self.images(indices, resolution), self.labels(indices)

    def sample_batch(self, rng: np.random.Generator, batch_size: int,
                     resolution: Resolution) -> Tuple[np.ndarray, np.ndarray]:
        indices = rng.integers(0, len(self), size=batch_size)
        return self.batch(indices, resolution)

    def split(self, n_eval: int) -> Tuple["ImageDataset", "ImageDataset"]:
        """(train, eval) with the last n_eval files, in sorted order, held out"""
        if not 1 <= n_eval < len(self):
            raise DataError(f"Cannot hold out {n_eval} of {len(self)} images")
        cut = len(self) - n_eval
        return (ImageDataset(self._images[:cut], self.paths[:cut], f"{self.name}-train"),
                ImageDataset(self._images[cut:], self.paths[cut:], f"{self.name}-eval"))


def ingest_png(directory: str, resolution: Resolution) -> ImageDataset:
    """
    Load every PNG in a directory

    Unreadable files are skipped with a logged warning.

    Raises:
        DataError: When the directory holds no readable PNG
    """
    if not os.path.isdir(directory):
        raise DataError(f"PNG directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".png"))
    images, paths = [], []
    for name in names:
        path = os.path.join(directory, name)
        try:
            images.append(load_png(path, resolution))
            paths.append(path)
        except (OSError, ValueError) as e:
            get_run_logger().log_warning(f"Skipping unreadable PNG {path}", {"error": str(e)})
    if not images:
        raise DataError(f"No readable PNG files in {directory}")
    return ImageDataset(np.stack(images), paths)
