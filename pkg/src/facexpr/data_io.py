"""Dataset and model file I/O.

File formats owned by this module:

* Manifest CSV: a ``#labels:`` companion row declaring the label order,
  a fixed header ``sample_id,image_path,label,actor_id,landmarks_path``,
  then one row per sample. The label column holds label *names*.
* Landmark file: ``name,x,y`` per line, decimal pixel coordinates,
  optional ``#mirrored: true`` declaration.
* Images: binary PGM (P5) / PPM (P6), 8-bit, maxval 255.
* Feature-record file: one JSON header line followed by binary rows
  (length-prefixed sample id, patch byte, crop byte, float32 values).
* Model file: one JSON header line (version, kind, dims, seed, checksum)
  followed by a little-endian float64 payload.

All loaders are pure functions of file content and safe to call
concurrently; loaded values are treated as immutable.
"""

import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PATCH_IDS = ("face", "left_eye", "right_eye", "mouth")
FEATURE_KINDS = ("raw", "lbp", "deep")

# crop_id value meaning "one record per (sample, patch), no ten-crop layout"
SINGLE_CROP = 255

MANIFEST_HEADER = ["sample_id", "image_path", "label", "actor_id", "landmarks_path"]

REQUIRED_LANDMARKS = ("left_eye_center", "right_eye_center", "mouth_center")


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    sample_id: str
    image_path: str
    label: int
    actor_id: str | None = None
    landmarks_path: str | None = None


@dataclass
class DatasetManifest:
    entries: list
    label_names: list
    source_name: str = ""

    def labels(self):
        """Label indices in entry order, as an int array."""
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def actor_ids(self):
        return [e.actor_id for e in self.entries]


def load_manifest(path):
    """Parse a manifest CSV, validating labels and sample-id uniqueness."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("#labels:"):
        raise ValidationError(f"{path}: line 1: expected '#labels:' declaration")
    label_names = [s.strip() for s in lines[0][len("#labels:"):].split(",")]
    if not label_names or any(not name for name in label_names):
        raise ValidationError(f"{path}: line 1: empty label name")
    if len(set(label_names)) != len(label_names):
        raise ValidationError(f"{path}: line 1: duplicate label names")
    if len(lines) < 2 or [c.strip() for c in lines[1].split(",")] != MANIFEST_HEADER:
        raise ValidationError(
            f"{path}: line 2: header must be {','.join(MANIFEST_HEADER)}")

    entries = []
    seen = {}
    for lineno, row in zip(range(3, len(lines) + 1),
                           csv.reader(lines[2:])):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ValidationError(
                f"{path}: line {lineno}: expected {len(MANIFEST_HEADER)} "
                f"columns, got {len(row)}")
        sample_id, image_path, label_name, actor_id, landmarks_path = row
        if not sample_id:
            raise ValidationError(f"{path}: line {lineno}: empty sample_id")
        if sample_id in seen:
            raise ValidationError(
                f"{path}: line {lineno}: duplicate sample_id '{sample_id}' "
                f"(first seen on line {seen[sample_id]})")
        seen[sample_id] = lineno
        if label_name not in label_names:
            raise ValidationError(
                f"{path}: line {lineno}: label '{label_name}' not in "
                f"declared labels {label_names}")
        entries.append(ManifestEntry(
            sample_id=sample_id,
            image_path=image_path,
            label=label_names.index(label_name),
            actor_id=actor_id or None,
            landmarks_path=landmarks_path or None,
        ))
    source = str(path)
    stem = source.rsplit("/", 1)[-1]
    return DatasetManifest(entries=entries, label_names=label_names,
                           source_name=stem.rsplit(".", 1)[0])


def save_manifest(manifest, path):
    """Write the canonical CSV form (inverse of :func:`load_manifest`)."""
    out = io.StringIO()
    out.write("#labels: " + ",".join(manifest.label_names) + "\n")
    out.write(",".join(MANIFEST_HEADER) + "\n")
    for e in manifest.entries:
        out.write(",".join([
            e.sample_id, e.image_path, manifest.label_names[e.label],
            e.actor_id or "", e.landmarks_path or "",
        ]) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(out.getvalue())


def validate_single_peak(manifest):
    """Enforce the one-image-per-(actor, expression) convention.

    Entries without an actor_id are exempt. Raises on the first repeated
    (actor, label) pair.
    """
    seen = {}
    for e in manifest.entries:
        if e.actor_id is None:
            continue
        key = (e.actor_id, e.label)
        if key in seen:
            raise ValidationError(
                f"samples '{seen[key]}' and '{e.sample_id}' share actor "
                f"'{e.actor_id}' and label "
                f"'{manifest.label_names[e.label]}'")
        seen[key] = e.sample_id
    return manifest


# ---------------------------------------------------------------------------
# landmarks


@dataclass
class LandmarkSet:
    """Named 2D landmarks in pixel coordinates (x right, y down)."""

    points: dict
    mirrored: bool = False

    @property
    def left_eye(self):
        return self.points["left_eye_center"]

    @property
    def right_eye(self):
        return self.points["right_eye_center"]

    @property
    def mouth(self):
        return self.points["mouth_center"]


def _validate_landmarks(points, mirrored, where):
    for name in REQUIRED_LANDMARKS:
        if name not in points:
            raise ValidationError(f"{where}: missing landmark '{name}'")
    for name, (x, y) in points.items():
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValidationError(f"{where}: non-finite coordinates for '{name}'")
    if points["left_eye_center"][0] > points["right_eye_center"][0] and not mirrored:
        raise ValidationError(
            f"{where}: left_eye_center is right of right_eye_center but the "
            f"file does not declare mirrored=true")
    return LandmarkSet(points=points, mirrored=mirrored)


def load_landmarks(path):
    points = {}
    mirrored = False
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if body.lower().replace(" ", "") == "mirrored:true":
                    mirrored = True
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValidationError(
                    f"{path}: line {lineno}: expected 'name,x,y'")
            name = parts[0]
            if name in points:
                raise ValidationError(
                    f"{path}: line {lineno}: duplicate landmark '{name}'")
            try:
                points[name] = (float(parts[1]), float(parts[2]))
            except ValueError:
                raise ValidationError(
                    f"{path}: line {lineno}: non-numeric coordinate") from None
    return _validate_landmarks(points, mirrored, str(path))


def make_landmarks(points, mirrored=False):
    """Build a validated LandmarkSet from a name -> (x, y) mapping."""
    return _validate_landmarks(dict(points), mirrored, "landmarks")


def save_landmarks(landmarks, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if landmarks.mirrored:
            fh.write("#mirrored: true\n")
        for name, (x, y) in landmarks.points.items():
            fh.write(f"{name},{x!r},{y!r}\n")


# ---------------------------------------------------------------------------
# images (binary PGM / PPM)


def _read_pnm_tokens(data, count, path):
    """Read whitespace/comment-delimited header tokens starting at offset 2."""
    tokens = []
    i = 2  # past the magic
    while len(tokens) < count:
        if i >= len(data):
            raise ValidationError(f"{path}: truncated header")
        c = data[i:i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if i >= len(data) or not data[i:i + 1].isspace():
        raise ValidationError(f"{path}: malformed header")
    return tokens, i + 1  # payload starts after a single whitespace byte


def load_image(path):
    """Decode a binary PGM (P5) or PPM (P6) file to a uint8 array.

    Returns shape (h, w) for PGM and (h, w, 3) for PPM, row-major,
    bit-exact to the file payload.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: unsupported magic {magic!r} "
                              f"(need binary P5 or P6)")
    tokens, offset = _read_pnm_tokens(data, 3, path)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ValidationError(f"{path}: non-numeric header field") from None
    if width < 1 or height < 1:
        raise ValidationError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise ValidationError(f"{path}: maxval {maxval} unsupported (need 255)")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = data[offset:]
    if len(payload) < need:
        raise ValidationError(
            f"{path}: truncated payload ({len(payload)} bytes, need {need})")
    if len(payload) > need:
        raise ValidationError(
            f"{path}: {len(payload) - need} trailing bytes after payload")
    pixels = np.frombuffer(payload, dtype=np.uint8, count=need)
    if channels == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()


def save_image(image, path):
    """Write a uint8 array as binary PGM (2D) or PPM ((h, w, 3))."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValidationError(f"cannot encode image of shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n" + f"{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


# ---------------------------------------------------------------------------
# feature records


@dataclass
class FeatureRecord:
    """One stored feature vector for a (sample, patch, crop) triple."""

    sample_id: str
    patch_id: str
    crop_id: int  # 0..9, or SINGLE_CROP
    values: np.ndarray
    feature_kind: str

    def key(self):
        return (self.sample_id, self.patch_id, self.crop_id)


def load_feature_records(path):
    """Read a feature-record file; returns records in storage order."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
            kind = header["feature_kind"]
            dim = int(header["dim"])
            count = int(header["count"])
        except (ValueError, KeyError, UnicodeDecodeError):
            raise ValidationError(f"{path}: malformed header line") from None
        if kind not in FEATURE_KINDS:
            raise ValidationError(f"{path}: unknown feature_kind '{kind}'")
        if dim < 1 or count < 0:
            raise ValidationError(f"{path}: bad dim/count in header")
        data = fh.read()

    records = []
    seen = set()
    pos = 0
    for row in range(count):
        if pos + 2 > len(data):
            raise ValidationError(
                f"{path}: header/payload length mismatch at row {row}")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        fixed = id_len + 2 + 4 * dim
        if pos + fixed > len(data):
            raise ValidationError(
                f"{path}: header/payload length mismatch at row {row}")
        sample_id = data[pos:pos + id_len].decode("utf-8")
        pos += id_len
        patch_byte = data[pos]
        crop_id = data[pos + 1]
        pos += 2
        if patch_byte >= len(PATCH_IDS):
            raise ValidationError(f"{path}: row {row}: bad patch byte {patch_byte}")
        if crop_id != SINGLE_CROP and crop_id > 9:
            raise ValidationError(f"{path}: row {row}: bad crop id {crop_id}")
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
        pos += 4 * dim
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"{path}: row {row}: non-finite value")
        rec = FeatureRecord(
            sample_id=sample_id, patch_id=PATCH_IDS[patch_byte],
            crop_id=crop_id, values=values.astype(np.float64),
            feature_kind=kind)
        if rec.key() in seen:
            raise ValidationError(
                f"{path}: row {row}: duplicate record for {rec.key()}")
        seen.add(rec.key())
        records.append(rec)
    if pos != len(data):
        raise ValidationError(
            f"{path}: {len(data) - pos} trailing bytes after {count} rows")
    return records


def save_feature_records(records, path):
    records = list(records)
    if not records:
        raise ValidationError("refusing to write an empty feature-record file")
    kind = records[0].feature_kind
    dim = len(records[0].values)
    seen = set()
    for rec in records:
        if rec.feature_kind != kind:
            raise ValidationError("mixed feature kinds in one file")
        if len(rec.values) != dim:
            raise ValidationError(
                f"record {rec.key()} has dim {len(rec.values)}, expected {dim}")
        if rec.key() in seen:
            raise ValidationError(f"duplicate record for {rec.key()}")
        seen.add(rec.key())
    header = json.dumps({"count": len(records), "dim": dim,
                         "feature_kind": kind}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for rec in records:
            sid = rec.sample_id.encode("utf-8")
            fh.write(struct.pack("<H", len(sid)))
            fh.write(sid)
            fh.write(bytes([PATCH_IDS.index(rec.patch_id), rec.crop_id]))
            fh.write(np.asarray(rec.values, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# model persistence
#
# One JSON header line, then a raw little-endian float64 payload holding all
# numeric arrays back to back. Integer arrays are stored as exact float64.
# The header carries a sha256 of the payload so corruption is detected.

MODEL_FILE_VERSION = 1

_MODEL_REGISTRY = {}


def register_model(cls):
    """Class decorator: make a model kind known to save/load_model."""
    _MODEL_REGISTRY[cls.model_kind] = cls
    return cls


class ArrayStore:
    """Collects numpy arrays during to_state, handing out JSON refs."""

    def __init__(self):
        self.arrays = []

    def add(self, arr):
        arr = np.asarray(arr)
        tag = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        self.arrays.append((arr.astype(np.float64), tag, arr.shape))
        return {"__array__": len(self.arrays) - 1}


def _hydrate(meta, arrays):
    """Replace {"__array__": i} placeholders with the decoded arrays."""
    if isinstance(meta, dict):
        if set(meta.keys()) == {"__array__"}:
            return arrays[meta["__array__"]]
        return {k: _hydrate(v, arrays) for k, v in meta.items()}
    if isinstance(meta, list):
        return [_hydrate(v, arrays) for v in meta]
    return meta


def _ensure_registry():
    # model classes register on import; pull them in on demand
    from . import dimred, classify  # noqa: F401


def save_model(model, path):
    """Persist a fitted model; load_model(path) restores it bit-exactly."""
    _ensure_registry()
    kind = getattr(type(model), "model_kind", None)
    if kind not in _MODEL_REGISTRY:
        raise ValidationError(f"cannot persist object of type {type(model)!r}")
    store = ArrayStore()
    meta = model.to_state(store)
    payload = b"".join(a.tobytes() for a, _, _ in store.arrays)
    header = {
        "format": "facexpr-model",
        "version": MODEL_FILE_VERSION,
        "kind": kind,
        "seed": getattr(model, "seed", None),
        "dims": model.dims(),
        "meta": meta,
        "arrays": [{"dtype": tag, "shape": list(shape)}
                   for _, tag, shape in store.arrays],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_model(path):
    _ensure_registry()
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise ValidationError(f"{path}: malformed model header") from None
    if header.get("format") != "facexpr-model":
        raise ValidationError(f"{path}: not a facexpr model file")
    if header.get("version") != MODEL_FILE_VERSION:
        raise ValidationError(
            f"{path}: unsupported model file version {header.get('version')!r}")
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise ValidationError(f"{path}: payload checksum failure")
    kind = header.get("kind")
    if kind not in _MODEL_REGISTRY:
        raise ValidationError(f"{path}: unknown model kind '{kind}'")

    arrays = []
    offset = 0
    for spec in header["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        raw = np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        arr = raw.reshape(spec["shape"]).copy()
        if spec["dtype"] == "i8":
            arr = arr.astype(np.int64)
        arrays.append(arr)
    if offset != len(payload):
        raise ValidationError(f"{path}: payload length mismatch")
    meta = _hydrate(header["meta"], arrays)
    return _MODEL_REGISTRY[kind].from_state(meta)
