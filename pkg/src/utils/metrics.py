"""
Evaluation Metrics

Desk-scale image-set distances built on a fixed random convolutional feature
extractor, plus an object counter for auditing composition errors.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import linalg, ndimage

from src.core import functional as F
from src.core.tensor import Tensor
from src.utils.error_handler import ShapeError

DEFAULT_EXTRACTOR_SEED = 20240521
FEATURE_CHANNELS = (16, 32, 64)
TIMING_KEYS = ("seconds_per_image",)


class FeatureExtractor:
    """
    Three seeded, never-trained conv3x3/stride-2 layers with SiLU, then
    global average pooling to a 64-dim float64 feature
    """

    def __init__(self, seed: int = DEFAULT_EXTRACTOR_SEED, in_channels: int = 3,
                 channels: Tuple[int, ...] = FEATURE_CHANNELS):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.weights = []
        previous = in_channels
        for width in channels:
            fan_in = previous * 9
            weight = rng.standard_normal((width, previous, 3, 3)) / np.sqrt(fan_in)
            self.weights.append(Tensor(weight, dtype=np.float64))
            previous = width
        self.dim = previous

    def features(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """
        Args:
            images: (N, 3, H, W) array in [-1, 1]
            batch_size: Images per forward pass

        Returns:
            (N, dim) float64 features
        """
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4:
            raise ShapeError(f"Feature extraction expects (N, C, H, W), got {images.shape}")
        chunks = []
        for start in range(0, len(images), batch_size):
            h = Tensor(images[start:start + batch_size], dtype=np.float64)
            for weight in self.weights:
                h = F.silu(F.conv2d(h, weight, None, stride=2, padding=1))
            chunks.append(h.numpy().mean(axis=(2, 3)))
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.dim))


def _check_sets(feats_a: np.ndarray, feats_b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"Feature sets must be (N, d) with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ShapeError(f"Need at least 2 samples per set, got {len(a)} and {len(b)}")
    return a, b


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    values = np.clip(values, 0.0, None)
    return (vectors * np.sqrt(values)) @ vectors.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½) between Gaussian fits"""
    a, b = _check_sets(feats_a, feats_b)
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False))

    root_a = _psd_sqrt(sigma_a)
    middle = root_a @ sigma_b @ root_a
    eigenvalues = linalg.eigh((middle + middle.T) / 2.0, eigvals_only=True)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    trace_sqrt = float(np.sum(np.sqrt(eigenvalues)))

    diff = mu_a - mu_b
    distance = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_sqrt)
    return max(distance, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** 3


def kernel_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased MMD² with the cubic polynomial kernel"""
    a, b = _check_sets(feats_a, feats_b)
    m, n = len(a), len(b)
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    if m == n:
        h = k_aa + k_bb - k_ab - k_ab.T
        return float((h.sum() - np.trace(h)) / (m * (m - 1)))
    term_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_aa + term_bb - 2.0 * k_ab.mean())


def random_crops(images: np.ndarray, patch: int, n_patches: int, rng: np.random.Generator) -> np.ndarray:
    count, channels, height, width = images.shape
    if patch > min(height, width) or patch < 1:
        raise ShapeError(f"Patch size {patch} must lie in [1, {min(height, width)}]")
    if patch == height and patch == width:
        return images
    crops = []
    for image in images:
        ys = rng.integers(0, height - patch + 1, size=n_patches)
        xs = rng.integers(0, width - patch + 1, size=n_patches)
        for y, x in zip(ys, xs):
            crops.append(image[:, y:y + patch, x:x + patch])
    return np.stack(crops)


def patch_metrics(images_a: np.ndarray, images_b: np.ndarray, patch: int, n_patches: int, seed: int,
                  extractor: Optional[FeatureExtractor] = None) -> Tuple[float, float]:
    """
    Distances over seeded random crops instead of resized images

    Returns:
        (patch Fréchet distance, patch kernel distance)
    """
    extractor = extractor or FeatureExtractor()
    rng = np.random.default_rng(seed)
    crops_a = random_crops(np.asarray(images_a), patch, n_patches, rng)
    crops_b = random_crops(np.asarray(images_b), patch, n_patches, rng)
    feats_a = extractor.features(crops_a)
    feats_b = extractor.features(crops_b)
    return frechet_distance(feats_a, feats_b), kernel_distance(feats_a, feats_b)


def area_downsample(images: np.ndarray, height: int, width: int) -> np.ndarray:
    count, channels, src_h, src_w = images.shape
    if src_h % height or src_w % width:
        raise ShapeError(f"Cannot area-downsample {(src_h, src_w)} to {(height, width)}")
    fh, fw = src_h // height, src_w // width
    return images.reshape(count, channels, height, fh, width, fw).mean(axis=(3, 5))


def base_consistency(gen_base: np.ndarray, gen_high: np.ndarray,
                     extractor: Optional[FeatureExtractor] = None) -> float:
    """Fréchet distance between base generations and area-downsampled high-resolution generations"""
    gen_base, gen_high = np.asarray(gen_base), np.asarray(gen_high)
    if len(gen_base) == 0 or len(gen_high) == 0:
        raise ShapeError("base_consistency needs non-empty sets")
    extractor = extractor or FeatureExtractor()
    reduced = area_downsample(gen_high, gen_base.shape[2], gen_base.shape[3])
    if reduced.shape[1:] != gen_base.shape[1:]:
        raise ShapeError(f"Downsampled shape {reduced.shape[1:]} differs from base {gen_base.shape[1:]}")
    return frechet_distance(extractor.features(gen_base), extractor.features(reduced))


def count_objects(image: np.ndarray, base_resolution: int = 32, threshold: float = 0.4) -> int:
    """
    Count foreground blobs in a (3, H, W) image in [-1, 1]

    The background colour is the per-channel median of the border pixels;
    pixels differing from it by more than `threshold` in any channel are
    foreground. 8-connected components smaller than 4 px at base scale
    (scaled by the pixel ratio) are ignored.
    """
    image = np.asarray(image, dtype=np.float64)
    channels, height, width = image.shape
    border = np.concatenate([image[:, 0, :], image[:, -1, :], image[:, :, 0], image[:, :, -1]], axis=1)
    background = np.median(border, axis=1)
    mask = np.max(np.abs(image - background[:, None, None]), axis=0) > threshold
    labels, found = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if found == 0:
        return 0
    areas = np.bincount(labels.ravel())[1:]
    min_area = 4.0 * (height * width) / float(base_resolution * base_resolution)
    return int(np.sum(areas >= min_area))


def count_statistics(images: np.ndarray, labels: np.ndarray, base_resolution: int = 32) -> Tuple[float, float]:
    """(accuracy, mean absolute error) of object counts against labels"""
    counts = np.asarray([count_objects(image, base_resolution) for image in images])
    labels = np.asarray(labels)
    return float(np.mean(counts == labels)), float(np.mean(np.abs(counts - labels)))


@dataclass
class MetricReport:
    arm: str
    proxy_fid_r: float
    proxy_kid_r: float
    proxy_pfid_r: float
    proxy_pkid_r: float
    proxy_fid_b: float
    count_accuracy: float
    count_mae: float
    n_generated: int
    n_reference: int
    extractor_seed: int
    sample_seed: int
    patch_seed: int
    config_hash: str
    checkpoint_hash: str
    code_version: str
    runtime_seconds: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "MetricReport":
        return cls(**data)

    def report_hash(self) -> str:
        """Hash of everything except wall-clock timings"""
        payload = self.to_dict()
        payload.pop("runtime_seconds")
        payload["extra"] = {k: v for k, v in payload["extra"].items() if k not in TIMING_KEYS}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()
