"""Volumes, slice-group sampling, resampling, synthetic scans and the AFTV format.

Grid layout follows the group convention ``C x H x W x D``: intensity volumes
hold ``data[c, h, w, d]``, label volumes ``labels[h, w, d]``.  Spacing is
always ``(depth_mm, height_mm, width_mm)``.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"AFTV"
VERSION = 1
DTYPE_F32, DTYPE_U8 = 0, 1
_HEADER = struct.Struct("<4sIBIIII3f")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[3] < 1:
            raise ShapeError(f"Volume data must be C x H x W x D with D >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ShapeError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def depth(self):
        return self.data.shape[3]


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ShapeError(f"LabelVolume must be H x W x D, got {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def depth(self):
        return self.labels.shape[2]


@dataclass
class SliceGroup:
    """``N_A`` slices around centre ``d``; ``slices`` is C x H x W x N_A."""

    center: int
    n_a: int
    n_f: int
    indices: np.ndarray
    slices: np.ndarray
    labels: np.ndarray = field(default=None)


def group_indices(d, n_a, n_f, depth):
    """``a_n = clamp(d - n_f * (n_a/2 - n), 0, depth-1)`` for ``n = 0..n_a-1``."""
    if n_a != 1 and (n_a < 2 or n_a % 2):
        raise ConfigError(f"N_A must be even (or 1 for the single-slice ablation), got {n_a}")
    if n_f < 1:
        raise ConfigError(f"N_f must be >= 1, got {n_f}")
    if not 0 <= d < depth:
        raise ConfigError(f"centre slice {d} outside [0, {depth})")
    n = np.arange(n_a)
    raw = d - n_f * (n_a // 2 - n)
    return np.clip(raw, 0, depth - 1)


def sample_slice_group(vol, d, n_a, n_f, labels=None):
    idx = group_indices(d, n_a, n_f, vol.depth)
    lab = None if labels is None else labels.labels[:, :, idx]
    return SliceGroup(d, n_a, n_f, idx, vol.data[:, :, :, idx], lab)


def iter_groups(vol, n_a, n_f, labels=None):
    for d in range(vol.depth):
        yield sample_slice_group(vol, d, n_a, n_f, labels)


# -- intensity handling and resampling ----------------------------------------

def normalize_intensity(vol, window):
    """Clip to ``window = (lo, hi)`` then rescale to [0, 1]."""
    lo, hi = window
    if not hi > lo:
        raise ConfigError(f"intensity window must satisfy hi > lo, got {window}")
    data = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    return Volume(data, vol.spacing)


def _target_coords(n_old, old_sp, new_sp):
    n_new = int(round(n_old * old_sp / new_sp))
    if n_new < 1:
        raise ShapeError(f"resampling {n_old} voxels at {old_sp}mm to {new_sp}mm leaves no voxels")
    # voxel centres in old index units
    return (np.arange(n_new) + 0.5) * (new_sp / old_sp) - 0.5


def _grid(shape_hwd, spacing, target):
    sd, sh, sw = spacing
    td, th, tw = target
    h, w, d = shape_hwd
    return _target_coords(h, sh, th), _target_coords(w, sw, tw), _target_coords(d, sd, td)


def resample(vol, target_spacing, labels=None):
    """Trilinear resample of intensities (and nearest-neighbour labels, if given)."""
    target_spacing = tuple(float(s) for s in target_spacing)
    if min(target_spacing) <= 0:
        raise ConfigError(f"target spacing must be positive, got {target_spacing}")
    ch, cw, cd = _grid(vol.shape[1:], vol.spacing, target_spacing)
    out = np.empty((vol.shape[0], len(ch), len(cw), len(cd)), dtype=np.float32)
    for c in range(vol.shape[0]):
        chan = vol.data[c]
        sampled = kernels.trilinear_grid(chan, ch, cw, cd)
        out[c] = np.clip(sampled, chan.min(), chan.max())
    new_vol = Volume(out, target_spacing)
    if labels is None:
        return new_vol
    return new_vol, resample_labels(labels, target_spacing)


def resample_labels(lab, target_spacing):
    ch, cw, cd = _grid(lab.labels.shape, lab.spacing, target_spacing)
    idx = [np.clip(np.rint(c), 0, n - 1).astype(np.int64) for c, n in zip((ch, cw, cd), lab.labels.shape)]
    return LabelVolume(lab.labels[np.ix_(*idx)], tuple(target_spacing))


# -- augmentation -------------------------------------------------------------

def elastic_augment(vol, lab, amplitude, smoothness, seed):
    """Warp each axial slice by a smoothed random displacement field.

    ``amplitude`` is the largest displacement in pixels, ``smoothness`` the
    Gaussian sigma of the field.  Labels use nearest-neighbour lookup so no
    new class values appear.
    """
    if amplitude < 0:
        raise ConfigError(f"elastic amplitude must be >= 0, got {amplitude}")
    if amplitude == 0:
        return Volume(vol.data.copy(), vol.spacing), LabelVolume(lab.labels.copy(), lab.spacing)
    rng = np.random.default_rng(seed)
    c, h, w, depth = vol.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    data = np.empty_like(vol.data)
    labels = np.empty_like(lab.labels)
    for d in range(depth):
        disp = []
        for _ in range(2):
            f = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), smoothness)
            peak = np.abs(f).max()
            disp.append(f * (amplitude / peak) if peak > 0 else f)
        coords = np.stack([yy + disp[0], xx + disp[1]])
        for ci in range(c):
            data[ci, :, :, d] = ndimage.map_coordinates(vol.data[ci, :, :, d], coords, order=1, mode="nearest")
        labels[:, :, d] = ndimage.map_coordinates(lab.labels[:, :, d], coords, order=0, mode="nearest")
    return Volume(data, vol.spacing), LabelVolume(labels, lab.spacing)


# -- synthetic scans ----------------------------------------------------------

def _ellipsoid(shape, center, radii):
    h, w, d = shape
    gh, gw, gd = np.ogrid[:h, :w, :d]
    r = ((gh - center[0]) / radii[0]) ** 2 + ((gw - center[1]) / radii[1]) ** 2 + ((gd - center[2]) / radii[2]) ** 2
    return r <= 1.0


def synth_scan(dims, n_classes, rng, noise=0.04, max_tries=200):
    """One synthetic scan: a dim body with ``n_classes - 1`` bright ellipsoids.

    Class 1 is long along the axial axis and thin in-plane; the others are
    compact blobs.  Each class has its own intensity band.
    """
    h, w, d = dims
    body = _ellipsoid(dims, (h / 2 - 0.5, w / 2 - 0.5, d / 2 - 0.5), (0.46 * h, 0.46 * w, 10.0 * d))
    img = np.where(body, 0.25, 0.02) + 0.03 * rng.standard_normal((1, 1, d)) * body
    labels = np.zeros(dims, dtype=np.uint8)
    centers = np.linspace(0.55, 0.92, n_classes - 1) if n_classes > 2 else np.array([0.7])
    for cls in range(1, n_classes):
        for _ in range(max_tries):
            if cls == 1:
                radii = (rng.uniform(0.09, 0.13) * h, rng.uniform(0.09, 0.13) * w, rng.uniform(0.3, 0.42) * d)
            else:
                radii = (rng.uniform(0.14, 0.22) * h, rng.uniform(0.14, 0.22) * w, rng.uniform(0.15, 0.3) * d)
            # keep a small margin from the edges; thin volumes fall back to the middle
            mid = np.array(dims) / 2 - 0.5
            lo = np.minimum(np.array(radii) + 1, mid)
            hi = np.maximum(np.array(dims) - np.array(radii) - 2, mid)
            center = rng.uniform(lo, hi)
            mask = _ellipsoid(dims, center, radii) & body
            if mask.sum() >= 8 and not (labels[mask] != 0).any():
                break
        else:
            raise ConfigError(f"dims {dims}: could not place organ {cls} without overlap after {max_tries} tries")
        band = centers[cls - 1] + rng.uniform(-0.02, 0.02)
        img = np.where(mask, band, img)
        labels[mask] = cls
    img = img + noise * rng.standard_normal(dims)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], labels


def synth_dataset(n_scans, dims, n_classes, seed, spacing=(2.5, 1.0, 1.0), noise=0.04):
    """Deterministic list of ``(Volume, LabelVolume)`` pairs."""
    if n_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {n_classes}")
    out = []
    for i in range(n_scans):
        rng = np.random.default_rng([seed, i])
        img, lab = synth_scan(tuple(dims), n_classes, rng, noise)
        out.append((Volume(img, spacing), LabelVolume(lab, spacing)))
    return out


# -- AFTV file format ---------------------------------------------------------

def encode_volume(vol):
    if isinstance(vol, LabelVolume):
        dtype, payload = DTYPE_U8, vol.labels[None].astype("<u1")
    else:
        dtype, payload = DTYPE_F32, vol.data.astype("<f4")
    c, h, w, d = payload.shape
    header = _HEADER.pack(MAGIC, VERSION, dtype, c, h, w, d, *vol.spacing)
    return header + np.ascontiguousarray(payload).tobytes()


def decode_volume(buf):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated AFTV header")
    magic, version, dtype, c, h, w, d, *spacing = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported AFTV version {version}")
    if dtype not in (DTYPE_F32, DTYPE_U8):
        raise FormatError(f"unknown dtype code {dtype}")
    itemsize = 4 if dtype == DTYPE_F32 else 1
    n = c * h * w * d
    if len(buf) - _HEADER.size != n * itemsize:
        raise FormatError(f"payload is {len(buf) - _HEADER.size} bytes, header implies {n * itemsize}")
    np_dtype = "<f4" if dtype == DTYPE_F32 else "<u1"
    arr = np.frombuffer(buf, dtype=np_dtype, offset=_HEADER.size).reshape(c, h, w, d).copy()
    spacing = tuple(float(s) for s in spacing)
    try:
        if dtype == DTYPE_U8:
            if c != 1:
                raise FormatError(f"label volumes carry one channel, got {c}")
            return LabelVolume(arr[0], spacing)
        return Volume(arr, spacing)
    except ShapeError as exc:
        raise FormatError(str(exc)) from None


def write_volume(vol, path):
    with open(path, "wb") as fh:
        fh.write(encode_volume(vol))


def read_volume(path):
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


# -- dataset directories ------------------------------------------------------

MANIFEST = "manifest.txt"


def format_manifest(rows):
    """``rows`` of ``(image_name, label_name, (H, W, D))`` -> manifest text."""
    lines = ["# image label dims"]
    lines += [f"{img} {lab} {h}x{w}x{d}" for img, lab, (h, w, d) in rows]
    return "\n".join(lines) + "\n"


def read_manifest(directory):
    path = f"{directory}/{MANIFEST}"
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise FormatError(f"no {MANIFEST} in {directory}") from None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            img, lab, dims = parts
            dims = tuple(int(v) for v in dims.split("x"))
            if len(dims) != 3:
                raise ValueError
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected 'image label HxWxD', got {line!r}") from None
        rows.append((img, lab, dims))
    return rows


def load_dataset(directory):
    """Read every ``(Volume, LabelVolume)`` pair listed in a manifest."""
    out = []
    for img, lab, dims in read_manifest(directory):
        vol, labels = read_volume(f"{directory}/{img}"), read_volume(f"{directory}/{lab}")
        if not isinstance(vol, Volume) or not isinstance(labels, LabelVolume):
            raise FormatError(f"{img}/{lab}: expected an intensity volume and a label volume")
        if vol.shape[1:] != dims or labels.labels.shape != dims:
            raise FormatError(f"{img}: dims {vol.shape[1:]} disagree with manifest {dims}")
        out.append((vol, labels))
    return out
