"""
Synthetic banded-rod images, augmentation, dataset files and the
class-complete pairwise batch sampler.

Each class owns a band code: one intensity level per horizontal band. An image
is a vertical rod made of those bands, with random length, a sinusoidal
sideways bend, per-band intensity jitter and pixel noise. Confusable pairs
share all bands but one, and that one differs by a single level step.
"""

import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from modules.data_types import GeneratorSpec
from modules.errors import CapacityError, ContractError, FormatError
from modules.tensor_core import Tensor
from modules.utils import build_file_path, derive_seed, read_header, write_header

DATASET_MAGIC = b"SCLDATA1"
SPLIT_KEYS = {"train": 0, "val": 1, "test": 2}
CODE_STREAM_KEY = 7

ROD_WIDTH_FRACTION = 0.3
ROD_LENGTH_FRACTION = 0.8
BAND_JITTER = 0.05
MAX_CODE_ATTEMPTS = 20000
# clean-render distances below this count as ties
DISTANCE_TOLERANCE = 1e-9

ROTATION_RANGE_DEG = 30.0
CONTRAST_RANGE = (0.7, 1.3)


def class_names_for(n_classes: int) -> List[str]:
    """Karyotype-style names when there are 24 classes (1..22, X, Y), plain numbers otherwise."""
    if n_classes == 24:
        return [str(i) for i in range(1, 23)] + ["X", "Y"]
    return [str(i) for i in range(1, n_classes + 1)]


@dataclass(frozen=True)
class DatasetContainer:
    images: np.ndarray  # [n, 1, H, W] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    class_names: List[str]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ContractError(f"images must be [n, 1, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ContractError(
                f"{self.labels.shape[0]} labels for {self.images.shape[0]} images"
            )
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ContractError(f"labels must lie in [0, {k})")
        if not np.all(np.isfinite(self.images)):
            raise ContractError("pixel values must be finite")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ContractError("pixel values must lie within [0, 1]")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def height(self) -> int:
        return self.images.shape[2]

    @property
    def width(self) -> int:
        return self.images.shape[3]

    def __len__(self) -> int:
        return len(self.labels)

    def class_indices(self) -> List[np.ndarray]:
        return [np.flatnonzero(self.labels == k) for k in range(self.n_classes)]

    def bitwise_equal(self, other: "DatasetContainer") -> bool:
        return (
            self.images.dtype == other.images.dtype
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
            and np.array_equal(self.labels, other.labels)
            and self.class_names == other.class_names
            and self.metadata == other.metadata
        )


@dataclass
class BatchPair:
    b1: Tensor
    b2: Tensor
    y_gt: List[int]
    # source image index per class: column 0 feeds b1, column 1 feeds b2
    sources: np.ndarray
    # the augmentation shared by every row of b1 and of b2; None when unaugmented
    augmentations: Tuple[Optional["AugmentParams"], Optional["AugmentParams"]] = (None, None)


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    hflip: bool
    vflip: bool
    contrast: float


def _hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a != b))


def generate_class_codes(spec: GeneratorSpec) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """
    Level-index codes [K, n_bands] and the confusable class pairs.

    Pairs (0, 1), (2, 3), ... are confusable: they differ in exactly one visible band,
    by the smallest step between any two levels. Every other pair of codes differs in
    at least two bands and sits farther apart in the clean render than any confusable
    pair can.
    """
    n_levels = len(spec.band_levels)
    if n_levels ** spec.n_bands < spec.n_classes:
        raise CapacityError(
            f"{n_levels} levels over {spec.n_bands} bands give {n_levels ** spec.n_bands} "
            f"codes, fewer than {spec.n_classes} classes"
        )

    rng = np.random.default_rng(derive_seed(spec.seed, CODE_STREAM_KEY))
    levels = np.asarray(spec.band_levels, dtype=np.float64)
    order = np.argsort(levels)
    steps = np.diff(levels[order])
    closest = int(np.argmin(steps))
    closest_levels = (int(order[closest]), int(order[closest + 1]))

    weights = band_weights(spec)
    visible = np.flatnonzero(weights > 0)
    if spec.confusable_pairs and visible.size == 0:
        raise CapacityError(f"no band is visible in a {spec.height}x{spec.width} render")
    confusable_limit = float(weights.max() * steps[closest])

    def separated(code: np.ndarray, codes: List[np.ndarray]) -> bool:
        floor = confusable_limit + DISTANCE_TOLERANCE
        return all(
            _hamming(code, other) >= 2 and clean_distance(code, other, levels, weights) > floor
            for other in codes
        )

    def place(make, codes: List[np.ndarray]) -> List[np.ndarray]:
        for _ in range(MAX_CODE_ATTEMPTS):
            candidates = make()
            if all(separated(code, codes) for code in candidates):
                return candidates
        raise CapacityError(
            f"could not place class {len(codes)} with {spec.n_bands} bands and "
            f"{n_levels} levels; use more bands or fewer classes"
        )

    def confusable_pair() -> List[np.ndarray]:
        base = rng.integers(0, n_levels, size=spec.n_bands)
        band = int(rng.choice(visible))
        first, second = closest_levels if rng.random() < 0.5 else closest_levels[::-1]
        base[band] = first
        partner = base.copy()
        partner[band] = second
        return [base, partner]

    def single_code() -> List[np.ndarray]:
        return [rng.integers(0, n_levels, size=spec.n_bands)]

    codes: List[np.ndarray] = []
    pairs: List[Tuple[int, int]] = []
    for p in range(spec.confusable_pairs):
        codes.extend(place(confusable_pair, codes))
        pairs.append((2 * p, 2 * p + 1))

    while len(codes) < spec.n_classes:
        codes.extend(place(single_code, codes))

    return np.stack(codes).astype(np.int64), pairs


def band_weights(spec: GeneratorSpec) -> np.ndarray:
    """Fraction of the clean render's pixels that each band covers."""
    _, band_map = render_rod(np.zeros(spec.n_bands), spec.height, spec.width)
    counts = np.array([np.count_nonzero(band_map == band) for band in range(spec.n_bands)])
    return counts / band_map.size


def clean_distance(
    a: np.ndarray, b: np.ndarray, levels: np.ndarray, weights: np.ndarray
) -> float:
    """Mean absolute pixel difference between the clean renders of two codes."""
    return float(np.sum(weights * np.abs(levels[a] - levels[b])))


def render_rod(
    band_values: np.ndarray,
    height: int,
    width: int,
    length_scale: float = 1.0,
    bend_amplitude: float = 0.0,
    bend_phase: float = 0.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noise-free rod image [H, W] and its band map (-1 outside the rod, band index inside).

    `bend_amplitude` is in pixels; the rod centre follows a half sine wave along its length.
    """
    n_bands = len(band_values)
    length = ROD_LENGTH_FRACTION * height * length_scale
    top = (height - length) / 2.0
    half_width = ROD_WIDTH_FRACTION * width / 2.0

    yc = np.arange(height) + 0.5
    xc = np.arange(width) + 0.5
    along = (yc - top) / length
    inside = (along >= 0.0) & (along < 1.0)
    band_of_row = np.where(inside, np.minimum((along * n_bands).astype(np.int64), n_bands - 1), -1)
    centre = width / 2.0 + bend_amplitude * np.sin(np.pi * np.clip(along, 0.0, 1.0) + bend_phase)

    on_rod = (np.abs(xc[None, :] - centre[:, None]) <= half_width) & inside[:, None]
    band_map = np.where(on_rod, band_of_row[:, None], -1)
    image = np.where(on_rod, np.asarray(band_values)[np.maximum(band_map, 0)], 0.0)
    return image, band_map


def render_clean(code: np.ndarray, spec: GeneratorSpec) -> np.ndarray:
    """Nominal render of a class code: no jitter, bend, noise or domain shift."""
    levels = np.asarray(spec.band_levels)[code]
    image, _ = render_rod(levels, spec.height, spec.width)
    return image


def render_sample(
    code: np.ndarray, spec: GeneratorSpec, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """One randomized image [H, W] of a class code, with its band map."""
    levels = np.asarray(spec.band_levels)[code]
    jittered = levels + rng.uniform(-BAND_JITTER, BAND_JITTER, size=len(levels))
    length_scale = 1.0 + rng.uniform(-spec.length_jitter, spec.length_jitter)
    bend = rng.uniform(0.0, spec.bend_amplitude_max * spec.width)
    phase = rng.uniform(-0.5, 0.5)
    image, band_map = render_rod(
        jittered, spec.height, spec.width, length_scale, bend, phase
    )
    image = (image - 0.5) * spec.contrast_gain + 0.5 + spec.intensity_offset
    image = np.where(band_map >= 0, image, 0.0)
    image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), band_map


def generate_synthetic_dataset(spec: GeneratorSpec) -> DatasetContainer:
    """Deterministic in spec: every image draws from its own seed (seed, split, class, index)."""
    codes, pairs = generate_class_codes(spec)
    split_key = SPLIT_KEYS[spec.split]

    n = spec.n_classes * spec.images_per_class
    images = np.empty((n, 1, spec.height, spec.width), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for k in range(spec.n_classes):
        for i in range(spec.images_per_class):
            rng = np.random.default_rng(derive_seed(spec.seed, split_key, k, i))
            image, _ = render_sample(codes[k], spec, rng)
            images[row, 0] = image
            labels[row] = k
            row += 1

    metadata = {
        "spec": spec.model_dump(),
        "class_codes": codes.tolist(),
        "confusable_pairs": [list(p) for p in pairs],
    }
    return DatasetContainer(images, labels, class_names_for(spec.n_classes), metadata)


def generator_spec_of(ds: DatasetContainer) -> GeneratorSpec:
    try:
        return GeneratorSpec.model_validate(ds.metadata["spec"])
    except (KeyError, ValidationError) as e:
        raise ContractError(f"dataset carries no usable generator metadata: {e}")


def derive_split(
    ds: DatasetContainer, split: str, images_per_class: Optional[int] = None
) -> DatasetContainer:
    """Regenerate another split of the same classes from a dataset's generator metadata."""
    spec = generator_spec_of(ds)
    update: Dict[str, Any] = {"split": split}
    if images_per_class is not None:
        update["images_per_class"] = images_per_class
    return generate_synthetic_dataset(GeneratorSpec.model_validate({**spec.model_dump(), **update}))


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    angle = rng.uniform(-ROTATION_RANGE_DEG, ROTATION_RANGE_DEG)
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    contrast = rng.uniform(*CONTRAST_RANGE)
    return AugmentParams(float(angle), hflip, vflip, float(contrast))


def apply_augmentation(img: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Rotate (bilinear, zero fill), flip, then contrast around 0.5; output clipped to [0, 1]."""
    if img.ndim != 3 or img.shape[0] != 1:
        raise ContractError(f"augmentation expects a [1, H, W] image, got {img.shape}")
    plane = img[0].astype(np.float64)
    if params.angle != 0.0:
        plane = ndimage.rotate(
            plane, params.angle, reshape=False, order=1, mode="constant", cval=0.0
        )
    if params.hflip:
        plane = plane[:, ::-1]
    if params.vflip:
        plane = plane[::-1, :]
    plane = (plane - 0.5) * params.contrast + 0.5
    return np.clip(plane, 0.0, 1.0)[None].astype(img.dtype)


def augment_image(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augmentation(img, draw_augment_params(rng))


def sample_pairwise_batches(
    ds: DatasetContainer, rng: np.random.Generator, augment: bool = True
) -> BatchPair:
    """
    One image per class for each batch; the two sources differ whenever the class allows it.

    Each batch draws a single augmentation and applies it to all of its rows, so rows
    within a batch never differ by pose. b1 and b2 draw independently.
    """
    per_class = ds.class_indices()
    k = ds.n_classes
    sources = np.empty((k, 2), dtype=np.int64)
    for c, indices in enumerate(per_class):
        if len(indices) == 0:
            raise ContractError(f"class {ds.class_names[c]} has no images")
        if len(indices) >= 2:
            first, second = rng.choice(indices, size=2, replace=False)
        else:
            first = second = indices[0]
        sources[c] = (first, second)

    params1 = draw_augment_params(rng) if augment else None
    params2 = draw_augment_params(rng) if augment else None
    b1 = np.empty((k, 1, ds.height, ds.width), dtype=np.float32)
    b2 = np.empty_like(b1)
    for c in range(k):
        img1, img2 = ds.images[sources[c, 0]], ds.images[sources[c, 1]]
        b1[c] = img1 if params1 is None else apply_augmentation(img1, params1)
        b2[c] = img2 if params2 is None else apply_augmentation(img2, params2)
    return BatchPair(Tensor(b1), Tensor(b2), list(range(k)), sources, (params1, params2))


def write_dataset(ds: DatasetContainer, path: str):
    """
    Layout: magic "SCLDATA1", u32 LE header length, JSON header, labels as u32 LE,
    then images as float32 LE, image-major.
    """
    header = {
        "n": len(ds),
        "height": ds.height,
        "width": ds.width,
        "n_classes": ds.n_classes,
        "class_names": ds.class_names,
        "generator": ds.metadata,
    }
    with open(build_file_path(path), "wb") as f:
        write_header(f, DATASET_MAGIC, header)
        f.write(ds.labels.astype("<u4").tobytes())
        f.write(ds.images.astype("<f4").tobytes())


def read_dataset(path: str) -> DatasetContainer:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Dataset file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()

    header, offset = read_header(blob, DATASET_MAGIC, "dataset")
    header_start = len(DATASET_MAGIC) + 4
    try:
        n = int(header["n"])
        height = int(header["height"])
        width = int(header["width"])
        n_classes = int(header["n_classes"])
        class_names = [str(name) for name in header["class_names"]]
        metadata = dict(header.get("generator") or {})
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"dataset header is incomplete: {e}", header_start)
    if min(n, height, width) < 0 or len(class_names) != n_classes:
        raise FormatError("dataset header fields are inconsistent", header_start)

    expected = 4 * n + 4 * n * height * width
    actual = len(blob) - offset
    if actual != expected:
        raise FormatError(
            f"dataset payload should hold {expected} bytes, found {actual}", offset
        )

    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += 4 * n
    images = np.frombuffer(blob, dtype="<f4", count=n * height * width, offset=offset)
    images = images.reshape(n, 1, height, width).astype(np.float32)
    try:
        return DatasetContainer(images, labels, class_names, metadata)
    except ContractError as e:
        raise FormatError(f"dataset payload is invalid: {e}", offset)
