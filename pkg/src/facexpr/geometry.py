"""Face alignment and discriminative-patch geometry.

Works purely on landmark coordinates plus pixel arrays: rotates a face so
the eye centers share a y coordinate, then derives boxes for the whole
face, both eyes and the mouth. Landmark and face detection happen
upstream; this module never looks at pixel content to make decisions.

All functions are pure and safe for concurrent use.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .data_io import LandmarkSet, PATCH_IDS


@dataclass
class AlignmentTransform:
    """In-plane rotation (counter-clockwise `angle`, image coords) about `center`."""

    angle: float
    center: tuple

    def __post_init__(self):
        # keep angle in (-pi, pi]
        a = math.remainder(self.angle, 2.0 * math.pi)
        if a <= -math.pi:
            a = math.pi
        self.angle = a

    def apply(self, x, y):
        """Map an input-image point to aligned-image coordinates."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        # rotation by -angle straightens the face
        return (c * dx + s * dy + self.center[0],
                -s * dx + c * dy + self.center[1])

    def invert(self, x, y):
        """Map an aligned-image point back to input-image coordinates."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx, dy = x - self.center[0], y - self.center[1]
        return (c * dx - s * dy + self.center[0],
                s * dx + c * dy + self.center[1])


@dataclass
class PatchBox:
    """Axis-aligned box in aligned-image coordinates; origin is top-left."""

    patch_id: str
    x: float
    y: float
    width: float
    height: float


@dataclass
class PatchGeometryConfig:
    """Patch sizes as multiples of the inter-ocular distance D.

    The regions themselves (face, two eyes, mouth) are fixed; only their
    proportions are configurable. Defaults keep the four boxes
    non-overlapping for canonical frontal landmark layouts.
    """

    eye_box_scale: float = 0.45        # square eye box side
    mouth_width_scale: float = 0.9
    mouth_height_scale: float = 0.5
    face_box_scale: float = 2.2        # square face box side
    face_center_drop: float = 0.55     # face center = eye midpoint + drop*D down

    def __post_init__(self):
        for name in ("eye_box_scale", "mouth_width_scale", "mouth_height_scale",
                     "face_box_scale", "face_center_drop"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0")


def estimate_inplane_angle(landmarks):
    """Angle of the left-to-right eye vector, radians.

    Rotating the image by the negated angle about the eye midpoint makes
    both eye centers share a y coordinate.
    """
    lx, ly = landmarks.left_eye
    rx, ry = landmarks.right_eye
    if lx == rx and ly == ry:
        raise ValidationError("eye centers coincide; cannot estimate rotation")
    return math.atan2(ry - ly, rx - lx)


def _bilinear(image, xs, ys, fill_zero):
    """Sample a float64 single-channel image at float coordinates.

    fill_zero=True treats everything outside the image as 0; otherwise the
    border pixels are replicated (clamp), which keeps constants constant.
    """
    h, w = image.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    x1, y1 = x0 + 1, y0 + 1

    def fetch(yy, xx):
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        if fill_zero:
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.where(inside, vals, 0.0)
        return vals

    top = fetch(y0, x0) * (1.0 - fx) + fetch(y0, x1) * fx
    bot = fetch(y1, x0) * (1.0 - fx) + fetch(y1, x1) * fx
    return top * (1.0 - fy) + bot * fy


def _sample_image(image, xs, ys, fill_zero):
    """Bilinear sampling for gray or RGB uint8 images; returns uint8."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ValidationError(f"expected uint8 image, got dtype {img.dtype}")
    if img.ndim == 2:
        out = _bilinear(img.astype(np.float64), xs, ys, fill_zero)
        return np.rint(out).clip(0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        chans = [np.rint(_bilinear(img[:, :, c].astype(np.float64),
                                   xs, ys, fill_zero)).clip(0, 255)
                 for c in range(3)]
        return np.stack(chans, axis=-1).astype(np.uint8)
    raise ValidationError(f"expected (h, w) or (h, w, 3) image, got {img.shape}")


def align_face(image, landmarks):
    """Rotate image and landmarks so the eye centers become horizontal.

    Rotation is about the eye midpoint with bilinear resampling; samples
    falling outside the input are 0. Returns (aligned image, aligned
    LandmarkSet); the output image has the input's extent.
    """
    angle = estimate_inplane_angle(landmarks)
    lx, ly = landmarks.left_eye
    rx, ry = landmarks.right_eye
    transform = AlignmentTransform(angle=angle,
                                   center=((lx + rx) / 2.0, (ly + ry) / 2.0))

    mapped = {name: transform.apply(x, y)
              for name, (x, y) in landmarks.points.items()}
    out_lm = LandmarkSet(points=mapped, mirrored=landmarks.mirrored)
    if abs(out_lm.left_eye[1] - out_lm.right_eye[1]) >= 1e-6:
        raise NumericalError("alignment failed to level the eye centers")

    if angle == 0.0:
        return np.asarray(image).copy(), out_lm

    img = np.asarray(image)
    h, w = img.shape[:2]
    qx, qy = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    px, py = transform.invert(qx, qy)
    return _sample_image(img, px, py, fill_zero=True), out_lm


def extract_patch_boxes(landmarks, cfg=None, image_size=None):
    """Boxes for (face, left_eye, right_eye, mouth) from aligned landmarks.

    image_size is (width, height); boxes are clipped to it. Raises if any
    box degenerates (area reduced below one pixel) after clipping.
    """
    cfg = cfg or PatchGeometryConfig()
    lx, ly = landmarks.left_eye
    rx, ry = landmarks.right_eye
    mx, my = landmarks.mouth
    d = math.hypot(rx - lx, ry - ly)
    if d == 0.0:
        raise ValidationError("eye centers coincide; patch geometry undefined")

    eye_side = cfg.eye_box_scale * d
    face_side = cfg.face_box_scale * d
    centers = {
        "face": ((lx + rx) / 2.0, (ly + ry) / 2.0 + cfg.face_center_drop * d),
        "left_eye": (lx, ly),
        "right_eye": (rx, ry),
        "mouth": (mx, my),
    }
    sizes = {
        "face": (face_side, face_side),
        "left_eye": (eye_side, eye_side),
        "right_eye": (eye_side, eye_side),
        "mouth": (cfg.mouth_width_scale * d, cfg.mouth_height_scale * d),
    }

    boxes = []
    for patch_id in PATCH_IDS:
        (cx, cy), (bw, bh) = centers[patch_id], sizes[patch_id]
        x0, y0 = cx - bw / 2.0, cy - bh / 2.0
        x1, y1 = x0 + bw, y0 + bh
        if image_size is not None:
            iw, ih = image_size
            x0, x1 = max(x0, 0.0), min(x1, float(iw))
            y0, y1 = max(y0, 0.0), min(y1, float(ih))
        if x1 - x0 < 1.0 or y1 - y0 < 1.0:
            raise ValidationError(
                f"patch '{patch_id}' degenerates after clipping "
                f"(size {x1 - x0:.2f}x{y1 - y0:.2f})")
        boxes.append(PatchBox(patch_id=patch_id, x=x0, y=y0,
                              width=x1 - x0, height=y1 - y0))
    return boxes


def crop_and_resize(image, box, out_w, out_h):
    """Bilinear resample of a box region to out_w x out_h.

    Sample positions are pixel centers of the output grid mapped into the
    box; border samples replicate edge pixels so constant images stay
    constant. A box equal to the full image resized to the same size is
    the identity.
    """
    if out_w < 1 or out_h < 1:
        raise ValidationError(f"output size {out_w}x{out_h} invalid")
    if box.width <= 0 or box.height <= 0:
        raise ValidationError(f"zero-area box for patch '{box.patch_id}'")
    js = np.arange(out_w, dtype=np.float64)
    is_ = np.arange(out_h, dtype=np.float64)
    xs = box.x + (js + 0.5) * (box.width / out_w) - 0.5
    ys = box.y + (is_ + 0.5) * (box.height / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return _sample_image(image, gx, gy, fill_zero=False)


def full_image_box(image):
    """A PatchBox covering the whole image (patch_id 'face')."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    return PatchBox(patch_id="face", x=0.0, y=0.0,
                    width=float(w), height=float(h))
