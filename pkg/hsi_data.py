"""
Hyperspectral cube and label-map handling.

Cubes are stored as a header/payload pair: a small text header
(``MLGSC-CUBE v1`` magic, ``key: value`` lines) next to a raw file of
little-endian float32 values in band-interleaved-by-pixel order. Label maps use
the same scheme with ``MLGSC-LABELS v1`` and little-endian uint16 payloads.
Values are widened to float64 on load.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from logging_config import get_logger
from numerics import MLGSCError, RngState, check_finite, require

logger = get_logger('hsi_data')

CUBE_MAGIC = 'MLGSC-CUBE v1'
LABELS_MAGIC = 'MLGSC-LABELS v1'
MAX_SCENE_RETRIES = 25
MIN_CLASS_FRACTION = 0.01


class CubeParseError(MLGSCError):
    """Header is missing, malformed or describes an empty cube."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CubeIntegrityError(MLGSCError):
    """Payload length disagrees with the header."""


class SceneGenerationError(MLGSCError):
    """Synthetic scene could not satisfy its class-size constraint."""


@dataclass
class HsiCube:
    """Reflectance cube of shape (height, width, bands)."""
    values: np.ndarray
    wavelength_nm: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        require(self.values.ndim == 3, f"cube values must be 3-D, got shape {self.values.shape}")
        check_finite('cube values', self.values)
        if self.wavelength_nm is not None:
            self.wavelength_nm = np.asarray(self.wavelength_nm, dtype=np.float64)
            require(self.wavelength_nm.shape == (self.bands,),
                    f"wavelength_nm needs {self.bands} entries, got {self.wavelength_nm.shape}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        """Row-major (height*width, bands) view."""
        return self.values.reshape(-1, self.bands)


@dataclass
class LabelMap:
    """Per-pixel class ids; 0 is unlabeled background, classes are 1..K."""
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        require(self.labels.ndim == 2, f"label map must be 2-D, got shape {self.labels.shape}")
        require(np.all(self.labels >= 0), "label ids must be nonnegative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def labeled_index(self) -> np.ndarray:
        """Row-major flat indices of labeled (nonzero) pixels."""
        return np.flatnonzero(self.labels.reshape(-1))

    def truth_vector(self) -> np.ndarray:
        """Class ids of the labeled pixels, in ``labeled_index`` order."""
        return self.labels.reshape(-1)[self.labeled_index()]

    def check_contiguous(self) -> None:
        present = np.unique(self.labels[self.labels > 0])
        require(np.array_equal(present, np.arange(1, present.size + 1)),
                f"class ids must be contiguous from 1, found {present.tolist()}")

    def matches(self, cube: HsiCube) -> bool:
        return (self.height, self.width) == (cube.height, cube.width)


@dataclass(frozen=True)
class SceneCrop:
    """Half-open row and column ranges."""
    row_range: Tuple[int, int]
    col_range: Tuple[int, int]

    def check_within(self, height: int, width: int) -> None:
        (r0, r1), (c0, c1) = self.row_range, self.col_range
        require(0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width,
                f"crop rows [{r0},{r1}) cols [{c0},{c1}) outside a {height}x{width} scene")

    def compose(self, inner: 'SceneCrop') -> 'SceneCrop':
        """Crop equivalent to applying ``self`` and then ``inner``."""
        r0, c0 = self.row_range[0], self.col_range[0]
        inner.check_within(self.row_range[1] - r0, self.col_range[1] - c0)
        return SceneCrop(row_range=(r0 + inner.row_range[0], r0 + inner.row_range[1]),
                         col_range=(c0 + inner.col_range[0], c0 + inner.col_range[1]))


# ============================================================================
# CONTAINER FORMAT
# ============================================================================

def _pair_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    stem = path.with_suffix('') if path.suffix in ('.hdr', '.raw') else path
    return stem.with_name(stem.name + '.hdr'), stem.with_name(stem.name + '.raw')


def _write_header(header: Path, magic: str, fields: Dict[str, str]) -> None:
    lines = [magic] + [f'{key}: {value}' for key, value in fields.items()]
    header.parent.mkdir(parents=True, exist_ok=True)
    header.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def _read_header(header: Path, magic: str, dtype: str) -> Dict[str, str]:
    try:
        raw = header.read_bytes()
    except FileNotFoundError as e:
        raise CubeParseError(f"header file not found: {header}", 0) from e

    try:
        text = raw.decode('utf-8')
    except UnicodeDecodeError as e:
        raise CubeParseError(f"header {header} is not UTF-8 text", e.start) from e

    offset = 0
    fields: Dict[str, str] = {}
    offsets: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(keepends=True)):
        content = line.strip()
        if number == 0:
            if content != magic:
                raise CubeParseError(f"expected magic line {magic!r}, found {content[:40]!r}", 0)
        elif content:
            key, sep, value = content.partition(':')
            if not sep:
                raise CubeParseError(f"malformed header line {content[:40]!r}", offset)
            fields[key.strip()] = value.strip()
            offsets[key.strip()] = offset
        offset += len(line.encode('utf-8'))

    if not text:
        raise CubeParseError(f"header {header} is empty", 0)
    if fields.get('dtype', dtype) != dtype:
        raise CubeParseError(f"unsupported dtype {fields['dtype']!r}, expected {dtype}", offsets['dtype'])
    if fields.get('byte_order', 'little') != 'little':
        raise CubeParseError(f"unsupported byte_order {fields['byte_order']!r}", offsets['byte_order'])
    fields['_end'] = str(offset)
    fields.update({f'_offset_{k}': str(v) for k, v in offsets.items()})
    return fields


def _dimension(fields: Dict[str, str], key: str) -> int:
    offset = int(fields.get(f'_offset_{key}', fields['_end']))
    if key not in fields:
        raise CubeParseError(f"header is missing key {key!r}", offset)
    try:
        value = int(fields[key])
    except ValueError as e:
        raise CubeParseError(f"header key {key!r} is not an integer: {fields[key]!r}", offset) from e
    if value <= 0:
        raise CubeParseError(f"header key {key!r} must be positive, got {value}", offset)
    return value


def _read_payload(payload: Path, dtype: str, count: int) -> np.ndarray:
    expected = count * np.dtype(dtype).itemsize
    actual = payload.stat().st_size if payload.is_file() else 0
    if actual != expected:
        raise CubeIntegrityError(
            f"payload {payload} holds {actual} bytes, header implies {expected} bytes")
    return np.fromfile(payload, dtype=dtype, count=count)


def save_cube(path, cube: HsiCube) -> Path:
    """Write a cube as ``<path>.hdr`` plus ``<path>.raw``; returns the header path."""
    header, payload = _pair_paths(path)
    fields = {
        'height': str(cube.height),
        'width': str(cube.width),
        'bands': str(cube.bands),
        'dtype': 'f32',
        'byte_order': 'little',
    }
    if cube.wavelength_nm is not None:
        fields['wavelength_nm'] = ','.join(repr(float(w)) for w in cube.wavelength_nm)
    _write_header(header, CUBE_MAGIC, fields)
    cube.values.astype('<f4').tofile(payload)
    logger.debug(f"Saved cube {cube.height}x{cube.width}x{cube.bands} to {header}")
    return header


def load_cube(path) -> HsiCube:
    """Read a cube written by ``save_cube``."""
    header, payload = _pair_paths(path)
    fields = _read_header(header, CUBE_MAGIC, 'f32')
    height, width, bands = (_dimension(fields, key) for key in ('height', 'width', 'bands'))

    data = _read_payload(payload, '<f4', height * width * bands)
    wavelengths = None
    if fields.get('wavelength_nm'):
        try:
            wavelengths = np.array([float(w) for w in fields['wavelength_nm'].split(',')])
        except ValueError as e:
            raise CubeParseError("wavelength_nm must be comma-separated numbers",
                                 int(fields['_offset_wavelength_nm'])) from e
        if wavelengths.size != bands:
            raise CubeParseError(f"wavelength_nm lists {wavelengths.size} values for {bands} bands",
                                 int(fields['_offset_wavelength_nm']))

    values = data.astype(np.float64).reshape(height, width, bands)
    if not np.all(np.isfinite(values)):
        raise CubeIntegrityError(f"payload {payload} contains non-finite values")
    return HsiCube(values=values, wavelength_nm=wavelengths)


def save_labels(path, labels: LabelMap) -> Path:
    """Write a label map as ``<path>.hdr`` plus ``<path>.raw``."""
    header, payload = _pair_paths(path)
    require(labels.labels.max(initial=0) <= np.iinfo(np.uint16).max, "label ids exceed the u16 range")
    _write_header(header, LABELS_MAGIC, {
        'height': str(labels.height),
        'width': str(labels.width),
        'dtype': 'u16',
        'byte_order': 'little',
    })
    labels.labels.astype('<u2').tofile(payload)
    return header


def load_labels(path) -> LabelMap:
    header, payload = _pair_paths(path)
    fields = _read_header(header, LABELS_MAGIC, 'u16')
    height, width = _dimension(fields, 'height'), _dimension(fields, 'width')
    data = _read_payload(payload, '<u2', height * width)
    return LabelMap(labels=data.astype(np.int64).reshape(height, width))


# ============================================================================
# PREPROCESSING
# ============================================================================

def normalize_bands(cube: HsiCube) -> HsiCube:
    """Min-max scale every band to [0, 1]; constant bands become 0."""
    values = cube.values
    lo = values.min(axis=(0, 1), keepdims=True)
    span = values.max(axis=(0, 1), keepdims=True) - lo
    safe_span = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (values - lo) / safe_span, 0.0)
    return HsiCube(values=scaled, wavelength_nm=cube.wavelength_nm)


def crop(cube: HsiCube, labels: LabelMap, c: SceneCrop) -> Tuple[HsiCube, LabelMap]:
    """Copy the sub-scene selected by ``c``."""
    c.check_within(cube.height, cube.width)
    require(labels.matches(cube), "label map and cube dimensions differ")
    rows, cols = slice(*c.row_range), slice(*c.col_range)
    return (HsiCube(values=cube.values[rows, cols].copy(), wavelength_nm=cube.wavelength_nm),
            LabelMap(labels=labels.labels[rows, cols].copy()))


# ============================================================================
# SYNTHETIC SCENES
# ============================================================================

def _smooth_signature(bands: int, rng: RngState) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, bands)
    signature = np.full(bands, rng.uniform(0.2, 0.4))
    for _ in range(3):
        center = rng.uniform(0.0, 1.0)
        width = rng.uniform(0.08, 0.3)
        amplitude = rng.uniform(-0.2, 0.4)
        signature += amplitude * np.exp(-0.5 * ((grid - center) / width) ** 2)
    return signature


def synth_scene(k_classes: int, height: int, width: int, bands: int,
                noise_sigma: float, rng: RngState) -> Tuple[HsiCube, LabelMap]:
    """
    Voronoi scene with one smooth spectral signature per class.

    Every class covers at least 1% of the pixels; seed layouts that miss this
    are redrawn up to MAX_SCENE_RETRIES times.
    """
    require(k_classes >= 2, f"k_classes must be >= 2, got {k_classes}")
    require(height >= 1 and width >= 1 and bands >= 1, "scene dimensions must be positive")
    require(noise_sigma >= 0, f"noise_sigma must be >= 0, got {noise_sigma}")

    n_pixels = height * width
    min_count = max(1, int(np.ceil(MIN_CLASS_FRACTION * n_pixels)))
    rows, cols = np.mgrid[0:height, 0:width]
    coords = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)

    for attempt in range(1, MAX_SCENE_RETRIES + 1):
        seeds = rng.uniform([0.0, 0.0], [height, width], size=(k_classes, 2))
        distances = ((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        assignment = np.argmin(distances, axis=1)
        counts = np.bincount(assignment, minlength=k_classes)
        if counts.min() >= min_count:
            break
        logger.debug(f"Synthetic layout attempt {attempt} left a class with {counts.min()} pixels")
    else:
        raise SceneGenerationError(
            f"no layout gave every one of {k_classes} classes >= {min_count} pixels "
            f"after {MAX_SCENE_RETRIES} attempts")

    signatures = np.stack([_smooth_signature(bands, rng) for _ in range(k_classes)])
    values = signatures[assignment].reshape(height, width, bands)
    if noise_sigma > 0:
        values = values + rng.normal(0.0, noise_sigma, size=values.shape)

    labels = LabelMap(labels=(assignment + 1).reshape(height, width))
    cube = HsiCube(values=values, wavelength_nm=np.linspace(400.0, 2500.0, bands))
    logger.info(f"Generated synthetic scene {height}x{width}x{bands} with {k_classes} classes",
                extra={'extra_fields': {'class_counts': counts.tolist(), 'noise_sigma': noise_sigma}})
    return cube, labels
