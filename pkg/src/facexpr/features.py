"""Patch feature extraction and post-processing.

Three feature families are supported:

* raw: a patch resized to a small grayscale grid, flattened to [0, 1];
* lbp: grid of 59-bin uniform local-binary-pattern histograms;
* deep: externally computed activation vectors, post-processed here by
  ten-crop averaging and L2 normalization (the network itself is out of
  scope; see the feature-record contract in data_io).

Everything here is stateless and embarrassingly parallel over samples.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .data_io import PATCH_IDS, SINGLE_CROP
from .geometry import crop_and_resize, full_image_box
from .util import rgb_to_gray

TEN_CROP_INPUT = 256
TEN_CROP_SIZE = 227


@dataclass
class FeatureVector:
    """A feature vector for one (sample, patch); patch_id None = combined."""

    values: np.ndarray
    feature_kind: str
    patch_id: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValidationError("feature values must be a 1D vector")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("non-finite feature values")


@dataclass
class CropSet:
    """Exactly ten crops: 4 corners + center, then the same five flipped."""

    crops: list

    def __post_init__(self):
        if len(self.crops) != 10:
            raise ValidationError(f"need exactly 10 crops, got {len(self.crops)}")
        shapes = {np.asarray(c).shape for c in self.crops}
        if len(shapes) != 1:
            raise ValidationError(f"crops have mixed shapes: {sorted(shapes)}")


@dataclass
class LbpConfig:
    """8-neighbor LBP with uniform-pattern histograms on a cell grid."""

    neighbors: int = 8
    radius: float = 2.0
    grid_rows: int = 7
    grid_cols: int = 6

    def __post_init__(self):
        if self.neighbors != 8:
            raise ValidationError("the 59-bin uniform mapping needs neighbors=8")
        if self.radius <= 0:
            raise ValidationError("radius must be > 0")
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ValidationError("grid must be at least 1x1")

    @property
    def bins(self):
        return 59


def ten_crop(image):
    """Ten 227x227 crops of a 256x256 image.

    Order: four corners then center, followed by the same five origins
    taken from the horizontally flipped image.
    """
    img = np.asarray(image)
    h, w = img.shape[:2]
    if (h, w) != (TEN_CROP_INPUT, TEN_CROP_INPUT):
        raise ValidationError(
            f"ten_crop needs a {TEN_CROP_INPUT}x{TEN_CROP_INPUT} image, "
            f"got {w}x{h}")
    m = TEN_CROP_INPUT - TEN_CROP_SIZE          # 29
    origins = [(0, 0), (m, 0), (0, m), (m, m), (m // 2, m // 2)]
    crops = []
    for source in (img, img[:, ::-1]):
        for ox, oy in origins:
            crops.append(source[oy:oy + TEN_CROP_SIZE,
                                ox:ox + TEN_CROP_SIZE].copy())
    return CropSet(crops=crops)


def average_crops(vectors):
    """Elementwise mean of the 10 per-crop vectors."""
    vecs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if len(vecs) != 10:
        raise ValidationError(f"need 10 crop vectors, got {len(vecs)}")
    lengths = {v.shape for v in vecs}
    if len(lengths) != 1:
        raise ValidationError(f"crop vectors have mixed lengths: {sorted(lengths)}")
    return np.mean(np.stack(vecs), axis=0)


def l2_normalize(v):
    """Scale a vector to unit Euclidean norm; a zero vector is an error."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise NumericalError("cannot L2-normalize a zero vector")
    return v / norm


def raw_pixel_features(image, out_size=(32, 32), patch_id=None):
    """Patch resized to out_size grayscale, flattened row-major into [0, 1]."""
    gray = rgb_to_gray(np.asarray(image))
    out_w, out_h = out_size
    resized = crop_and_resize(gray, full_image_box(gray), out_w, out_h)
    return FeatureVector(values=resized.astype(np.float64).ravel() / 255.0,
                         feature_kind="raw", patch_id=patch_id)


# ---------------------------------------------------------------------------
# local binary patterns
#
# The comparison neighbor-vs-center is evaluated on interpolated
# *differences* (neighbor pixel minus center), which makes the codes exactly
# invariant to global brightness shifts and keeps constant regions at an
# exact zero difference.


def _offsets(cfg):
    two_pi = 2.0 * math.pi
    return [(cfg.radius * math.cos(two_pi * p / cfg.neighbors),
             cfg.radius * math.sin(two_pi * p / cfg.neighbors))
            for p in range(cfg.neighbors)]


def _codes_at(gray, xs, ys, cfg):
    """LBP codes for pixel coordinate arrays whose sample circles fit."""
    img = gray.astype(np.float64)
    h, w = img.shape
    cx = xs.astype(np.float64)
    cy = ys.astype(np.float64)
    center = img[ys, xs]
    codes = np.zeros(xs.shape, dtype=np.int64)
    for p, (ox, oy) in enumerate(_offsets(cfg)):
        sx = cx + ox
        sy = cy + oy
        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        fx = sx - x0
        fy = sy - y0

        def diff(yy, xx):
            return img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)] - center

        top = diff(y0, x0) * (1.0 - fx) + diff(y0, x0 + 1) * fx
        bot = diff(y0 + 1, x0) * (1.0 - fx) + diff(y0 + 1, x0 + 1) * fx
        val = top * (1.0 - fy) + bot * fy
        codes |= (val >= 0.0).astype(np.int64) << p
    return codes


def lbp_code(image, x, y, cfg=None):
    """The 8-bit LBP code at one pixel.

    Bit p is set when the neighbor sampled at angle 2*pi*p/8 on the radius-R
    circle (starting at (x+R, y), bilinear interpolation off the integer
    grid) is >= the center pixel; ties set the bit.
    """
    cfg = cfg or LbpConfig()
    gray = rgb_to_gray(np.asarray(image))
    h, w = gray.shape
    r = cfg.radius
    if not (x - r >= 0 and x + r <= w - 1 and y - r >= 0 and y + r <= h - 1):
        raise ValidationError(
            f"sample circle of radius {r} around ({x}, {y}) leaves the image")
    return int(_codes_at(gray, np.array([x]), np.array([y]), cfg)[0])


def _uniform_bin_lut():
    """Map each 8-bit code to its histogram bin: 58 uniform codes in
    ascending order, bin 58 for everything else."""
    uniform = []
    for code in range(256):
        bits = [(code >> p) & 1 for p in range(8)]
        transitions = sum(bits[p] != bits[(p + 1) % 8] for p in range(8))
        if transitions <= 2:
            uniform.append(code)
    lut = np.full(256, len(uniform), dtype=np.int64)
    for i, code in enumerate(uniform):
        lut[code] = i
    return lut


_UNIFORM_LUT = _uniform_bin_lut()

UNIFORM_BIN_COUNT = 59  # 58 uniform patterns + 1 catch-all


def lbp_grid_counts(image, cfg=None):
    """Integer histogram counts per grid cell, shape (rows, cols, 59).

    Pixels are coded wherever the radius-R circle fits inside the image;
    a cell containing no coded pixel is an error.
    """
    cfg = cfg or LbpConfig()
    gray = rgb_to_gray(np.asarray(image))
    h, w = gray.shape
    margin = int(math.ceil(cfg.radius))
    if w - 2 * margin < 1 or h - 2 * margin < 1:
        raise ValidationError(
            f"image {w}x{h} too small for LBP radius {cfg.radius}")
    ys, xs = np.mgrid[margin:h - margin, margin:w - margin]
    ys, xs = ys.ravel(), xs.ravel()
    codes = _codes_at(gray, xs, ys, cfg)
    bins = _UNIFORM_LUT[codes]
    rows = (ys * cfg.grid_rows) // h
    cols = (xs * cfg.grid_cols) // w
    counts = np.zeros((cfg.grid_rows, cfg.grid_cols, UNIFORM_BIN_COUNT),
                      dtype=np.int64)
    np.add.at(counts, (rows, cols, bins), 1)
    empty = counts.sum(axis=2) == 0
    if empty.any():
        r, c = np.argwhere(empty)[0]
        raise ValidationError(f"grid cell ({r}, {c}) contains no coded pixel")
    return counts


def lbp_grid_histogram(image, cfg=None, patch_id=None):
    """Concatenated per-cell LBP histograms, each cell normalized to sum 1.

    Output dimension is rows * cols * 59, cells in row-major order.
    """
    cfg = cfg or LbpConfig()
    counts = lbp_grid_counts(image, cfg)
    totals = counts.sum(axis=2, keepdims=True).astype(np.float64)
    hist = counts.astype(np.float64) / totals
    return FeatureVector(values=hist.ravel(), feature_kind="lbp",
                         patch_id=patch_id)


# ---------------------------------------------------------------------------
# combination


def concat_parts(parts):
    """Concatenate per-patch vectors in the canonical patch order.

    The canonical order is (face, left_eye, right_eye, mouth); the input
    must already follow it (possibly a subsequence when a configuration
    uses fewer patches). Passing parts out of order is an error, not a
    silent reordering.
    """
    if not parts:
        raise ValidationError("no parts to concatenate")
    kinds = {p.feature_kind for p in parts}
    if len(kinds) != 1:
        raise ValidationError(f"mixed feature kinds: {sorted(kinds)}")
    positions = []
    for p in parts:
        if p.patch_id not in PATCH_IDS:
            raise ValidationError(f"part has unknown patch_id {p.patch_id!r}")
        positions.append(PATCH_IDS.index(p.patch_id))
    if positions != sorted(set(positions)) or len(set(positions)) != len(positions):
        given = [p.patch_id for p in parts]
        raise ValidationError(
            f"parts must follow canonical order {PATCH_IDS}, got {given}")
    values = np.concatenate([p.values for p in parts])
    return FeatureVector(values=values, feature_kind=kinds.pop(), patch_id=None)


# ---------------------------------------------------------------------------
# feature store


class FeatureStore:
    """Lookup of post-processed per-(sample, patch) vectors from records.

    Deep records are averaged over their ten crops (when stored per crop)
    and L2-normalized; raw and lbp records pass through unchanged.
    """

    def __init__(self, records):
        self._by_key = {}
        kinds = set()
        for rec in records:
            kinds.add(rec.feature_kind)
            self._by_key.setdefault(
                (rec.sample_id, rec.patch_id), {})[rec.crop_id] = rec
        if len(kinds) > 1:
            raise ValidationError(f"store holds mixed feature kinds: {sorted(kinds)}")
        self.feature_kind = kinds.pop() if kinds else None
        self._cache = {}

    @property
    def patch_ids(self):
        present = {patch for (_, patch) in self._by_key}
        return [p for p in PATCH_IDS if p in present]

    def sample_ids(self):
        return sorted({sid for (sid, _) in self._by_key})

    def vector(self, sample_id, patch_id):
        key = (sample_id, patch_id)
        if key in self._cache:
            return self._cache[key]
        crops = self._by_key.get(key)
        if not crops:
            raise ValidationError(
                f"no feature record for sample '{sample_id}' patch '{patch_id}'")
        if self.feature_kind == "deep":
            if SINGLE_CROP in crops:
                vec = l2_normalize(crops[SINGLE_CROP].values)
            else:
                missing = [c for c in range(10) if c not in crops]
                if missing:
                    raise ValidationError(
                        f"sample '{sample_id}' patch '{patch_id}': missing "
                        f"crops {missing}")
                vec = l2_normalize(average_crops(
                    [crops[c].values for c in range(10)]))
        else:
            if list(crops) != [SINGLE_CROP]:
                raise ValidationError(
                    f"sample '{sample_id}' patch '{patch_id}': "
                    f"{self.feature_kind} features must be single records")
            vec = crops[SINGLE_CROP].values
        self._cache[key] = vec
        return vec

    def matrix(self, sample_ids, patch_id):
        """Stack vectors for the given samples; rows follow sample_ids."""
        rows = [self.vector(sid, patch_id) for sid in sample_ids]
        dims = {len(r) for r in rows}
        if len(dims) > 1:
            raise ValidationError(
                f"patch '{patch_id}' has inconsistent dims: {sorted(dims)}")
        return np.stack(rows) if rows else np.zeros((0, 0))
