"""CT volume ingestion, preprocessing, augmentation, phantom generation and the slice cache.

Volumes are held as (Z, Y, X) arrays; axial slices run along axis 0.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.transform import resize

from .backbones import atomic_write_bytes
from .errors import ValidationError

log = logging.getLogger(__name__)


@dataclass
class VolumeRecord:
    image: np.ndarray  # (Z, Y, X)
    mask: np.ndarray  # infection mask, binary
    cohort: str
    volume_id: str
    lung_mask: Optional[np.ndarray] = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bit_depth: int = 16

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {self.image.shape}")
        if self.image.shape != self.mask.shape:
            raise ValidationError(f"image shape {self.image.shape} != mask shape {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValidationError("infection mask must be binary")
        if self.lung_mask is not None:
            self.lung_mask = np.asarray(self.lung_mask)
            if self.lung_mask.shape != self.image.shape:
                raise ValidationError("lung mask shape differs from image shape")
        if not self.cohort:
            raise ValidationError("cohort must be nonempty")
        if self.bit_depth not in (8, 16):
            raise ValidationError(f"bit depth must be 8 or 16, got {self.bit_depth}")


@dataclass
class SegmentationSample:
    image: np.ndarray  # (S, S) float32
    mask: np.ndarray  # (S, S) uint8
    cohort: str
    volume_id: str
    slice_index: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.image.shape != self.mask.shape:
            raise ValidationError(f"image shape {self.image.shape} != mask shape {self.mask.shape}")
        if not np.isfinite(self.image).all():
            raise ValidationError("sample image has non-finite values")
        if self.mask.max(initial=0) > 1:
            raise ValidationError("sample mask must be binary")

    @property
    def infection_area(self) -> int:
        return int(self.mask.sum())

    @property
    def covid_present(self) -> bool:
        return self.infection_area > 0

    def with_arrays(self, image, mask) -> "SegmentationSample":
        return SegmentationSample(image, mask, self.cohort, self.volume_id, self.slice_index)


@dataclass(frozen=True)
class PreprocessParams:
    margin: int = 20
    size: int = 400

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# -- preprocessing ----------------------------------------------------------

def lung_bbox(lung: np.ndarray) -> Optional[tuple[int, int, int, int]]:
    """Inclusive (y0, y1, x0, x1) extent of a 2D or 3D lung mask projected onto the x-y plane."""
    proj = lung.any(axis=0) if lung.ndim == 3 else lung.astype(bool)
    ys, xs = np.nonzero(proj)
    if ys.size == 0:
        return None
    return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


def estimate_lung_mask(volume: np.ndarray) -> np.ndarray:
    """Otsu threshold, drop air connected to the border, keep the two largest components."""
    vol = volume.astype(np.float64)
    if np.ptp(vol) == 0:
        return np.zeros(vol.shape, dtype=bool)
    dark = vol <= threshold_otsu(vol)
    labels, n = ndimage.label(dark)
    if n == 0:
        return np.zeros(vol.shape, dtype=bool)
    border = np.unique(np.concatenate([
        labels[:, 0, :].ravel(), labels[:, -1, :].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel()]))
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=np.arange(1, n + 1))
    sizes[border[border > 0] - 1] = 0
    keep = [i + 1 for i in np.argsort(sizes)[::-1][:2] if sizes[i] > 0]
    return np.isin(labels, keep)


def crop_box(bbox, margin: int, shape: tuple[int, int]) -> tuple[int, int, int, int]:
    """Half-open (y0, y1, x0, x1) window: bbox grown by `margin`, clipped to the image."""
    y0, y1, x0, x1 = bbox
    h, w = shape
    return max(0, y0 - margin), min(h, y1 + margin + 1), max(0, x0 - margin), min(w, x1 + margin + 1)


def zscore(img: np.ndarray) -> np.ndarray:
    img = img.astype(np.float64)
    std = img.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(img)
    return (img - img.mean()) / std


def standardize_max(img: np.ndarray) -> np.ndarray:
    peak = np.abs(img).max(initial=0.0)
    return img / peak if peak > 0 else img


def pad_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    n = max(h, w)
    top, left = (n - h) // 2, (n - w) // 2
    return np.pad(img, ((top, n - h - top), (left, n - w - left)))


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape == (size, size):
        return img.astype(np.float32)
    return resize(img, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True).astype(np.float32)


def resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(np.uint8)
    out = resize(mask.astype(np.float64), (size, size), order=1, mode="edge", anti_aliasing=False)
    return (out >= 0.5).astype(np.uint8)


def normalize_slice(img: np.ndarray) -> np.ndarray:
    """Zero mean, unit std, then divided by the max absolute value."""
    return standardize_max(zscore(img))


def preprocess_volume(rec: VolumeRecord, params: PreprocessParams = PreprocessParams(),
                      trace: Optional[dict] = None) -> list[SegmentationSample]:
    """Crop to the lung extent plus margin, normalise, pad to square and resize every slice.

    Returns an empty list (with a logged diagnostic) when no lung extent can be
    found. If `trace` is a dict it receives the crop window and per-slice
    z-score statistics.
    """
    lung = rec.lung_mask
    if lung is None or not lung.any():
        lung = estimate_lung_mask(rec.image)
    bbox = lung_bbox(lung)
    if bbox is None:
        log.warning("volume %s: no lung extent found, skipping", rec.volume_id)
        return []
    y0, y1, x0, x1 = crop_box(bbox, params.margin, rec.image.shape[1:])
    image = rec.image[:, y0:y1, x0:x1].astype(np.float64)
    mask = rec.mask[:, y0:y1, x0:x1]
    if trace is not None:
        trace.update(bbox=bbox, crop=(y0, y1, x0, x1), zscore_mean=[], zscore_std=[])
    samples = []
    for z in range(image.shape[0]):
        zs = zscore(image[z])
        if trace is not None:
            trace["zscore_mean"].append(float(zs.mean()))
            trace["zscore_std"].append(float(zs.std()))
        img = resize_image(pad_square(standardize_max(zs)), params.size)
        m = resize_mask(pad_square(mask[z]), params.size)
        samples.append(SegmentationSample(img, m, rec.cohort, rec.volume_id, z))
    return samples


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float
    scale: float


def sample_augment_params(rng: np.random.Generator, max_rotation: float = 5.0,
                          scale_range: tuple[float, float] = (0.97, 1.03)) -> AugmentParams:
    return AugmentParams(float(rng.uniform(-max_rotation, max_rotation)), float(rng.uniform(*scale_range)))


def _affine(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    # output -> input coordinate map for scipy
    matrix = rot.T / scale
    center = (np.array(img.shape) - 1) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(img, matrix, offset=offset, order=1, mode="constant", cval=0.0)


def augment(sample: SegmentationSample, rng: Optional[np.random.Generator] = None,
            params: Optional[AugmentParams] = None, max_rotation: float = 5.0,
            scale_range: tuple[float, float] = (0.97, 1.03)) -> SegmentationSample:
    """Random rotation and isotropic scaling applied identically to image and mask."""
    if params is None:
        if rng is None:
            raise ValidationError("augment needs an rng or explicit params")
        params = sample_augment_params(rng, max_rotation, scale_range)
    image = _affine(sample.image.astype(np.float64), params.angle_deg, params.scale)
    mask = _affine(sample.mask.astype(np.float64), params.angle_deg, params.scale) >= 0.5
    return sample.with_arrays(image, mask)


# -- phantoms ---------------------------------------------------------------

@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float = 0.0

    def contains(self, y, x) -> np.ndarray:
        dy, dx = np.asarray(y) - self.cy, np.asarray(x) - self.cx
        c, s = np.cos(self.angle), np.sin(self.angle)
        u, v = c * dy + s * dx, -s * dy + c * dx
        return (u / self.ry) ** 2 + (v / self.rx) ** 2 <= 1.0


@dataclass
class Phantom:
    sample: SegmentationSample
    lungs: tuple[Ellipse, Ellipse]
    blobs: list[Ellipse] = field(default_factory=list)


def _phantom(size: int, rng: np.random.Generator, index: int, prefix: str) -> Phantom:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = float(size)
    ry, rx = rng.uniform(0.30, 0.36) * s, rng.uniform(0.14, 0.18) * s
    cy = s / 2 + rng.uniform(-0.03, 0.03) * s
    gap = rng.uniform(0.19, 0.22) * s
    lungs = (Ellipse(cy, s / 2 - gap, ry, rx, rng.uniform(-0.1, 0.1)),
             Ellipse(cy, s / 2 + gap, ry * rng.uniform(0.92, 1.0), rx, rng.uniform(-0.1, 0.1)))
    lung = lungs[0].contains(yy, xx) | lungs[1].contains(yy, xx)

    img = np.full((size, size), 0.08)
    img[lung] = 0.45
    img += 0.05 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.0)

    n_blobs = 0 if rng.random() < 0.3 else int(rng.integers(1, 5))
    blobs, mask = [], np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        host = lungs[int(rng.integers(2))]
        # blob centre inside the inner 70% of the host ellipse
        r, t = 0.7 * np.sqrt(rng.random()), rng.uniform(0, 2 * np.pi)
        c, sn = np.cos(host.angle), np.sin(host.angle)
        u, v = r * host.ry * np.cos(t), r * host.rx * np.sin(t)
        blob = Ellipse(host.cy + c * u - sn * v, host.cx + sn * u + c * v,
                       rng.uniform(0.04, 0.10) * s, rng.uniform(0.04, 0.10) * s, rng.uniform(0, np.pi))
        blobs.append(blob)
        mask |= blob.contains(yy, xx)
    mask &= lung
    if mask.any():
        texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)
        soft = ndimage.gaussian_filter(mask.astype(np.float64), 1.0)
        img += (0.30 + 0.10 * texture) * soft
    img += 0.02 * rng.standard_normal((size, size))
    sample = SegmentationSample(normalize_slice(img), mask, "phantom", f"{prefix}{index:05d}", 0)
    return Phantom(sample, lungs, blobs)


def generate_phantom_records(count: int, size: int = 128, rng=None, prefix: str = "phantom-") -> list[Phantom]:
    if count < 1:
        raise ValidationError(f"phantom count must be >= 1, got {count}")
    if size < 32:
        raise ValidationError(f"phantom size must be >= 32, got {size}")
    rng = np.random.default_rng(rng)
    return [_phantom(size, rng, i, prefix) for i in range(count)]


def generate_phantoms(count: int, size: int = 128, rng=None, prefix: str = "phantom-") -> list[SegmentationSample]:
    """Synthetic chest slices: two bright elliptical lungs with 0-4 textured infection blobs.

    About 30% of phantoms are infection-free. Each phantom is its own volume.
    """
    return [p.sample for p in generate_phantom_records(count, size, rng, prefix)]


def stack_samples(samples: Sequence[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.mask for s in samples]).astype(np.uint8))


# -- cache ------------------------------------------------------------------
#
# Tensor record, little-endian: uint8 dtype tag, uint8 ndim, uint32 dims[ndim], payload.

_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<f8"), 4: np.dtype("<i8")}
_TAGS = {(dt.kind, dt.itemsize): tag for tag, dt in _TAG_DTYPES.items()}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = _TAGS.get((arr.dtype.kind, arr.dtype.itemsize))
    if tag is None:
        raise ValidationError(f"unsupported cache dtype {arr.dtype}")
    head = struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_TAG_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    tag, ndim = struct.unpack_from("<BB", buf, offset)
    dims = struct.unpack_from(f"<{ndim}I", buf, offset + 2)
    start = offset + 2 + 4 * ndim
    dt = _TAG_DTYPES[tag]
    n = int(np.prod(dims, dtype=np.int64))
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=start).reshape(dims).copy()
    return arr, start + n * dt.itemsize


@dataclass
class SplitSpec:
    """Per-volume split. Values are fractions (floats summing to 1) or volume counts (ints).

    With counts, volumes not assigned to val/test go to train.
    """
    train: float | int = 0.8
    val: float | int = 0.1
    test: float | int = 0.1
    seed: int = 0

    def counts(self, n_volumes: int) -> tuple[int, int, int]:
        vals = (self.train, self.val, self.test)
        if all(isinstance(v, int) and not isinstance(v, bool) for v in (self.val, self.test)) and \
                not any(isinstance(v, float) for v in vals):
            n_val, n_test = self.val, self.test
            if n_val + n_test > n_volumes or min(vals) < 0:
                raise ValidationError(f"split counts {vals} exceed {n_volumes} volumes")
            return n_volumes - n_val - n_test, n_val, n_test
        fr = [float(v) for v in vals]
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions {vals} must be nonnegative and sum to 1")
        n_test = int(round(fr[2] * n_volumes))
        n_val = int(round(fr[1] * n_volumes))
        n_val = min(n_val, n_volumes - n_test)
        return n_volumes - n_val - n_test, n_val, n_test


def assign_splits(volume_ids: Sequence[str], spec: SplitSpec) -> dict[str, str]:
    vols = sorted(set(volume_ids))
    order = np.random.default_rng(spec.seed).permutation(len(vols))
    n_train, n_val, n_test = spec.counts(len(vols))
    out = {}
    for rank, i in enumerate(order):
        out[vols[i]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


@dataclass
class DatasetManifest:
    entries: list[dict]
    params_hash: str
    params: dict
    root: Optional[Path] = None

    def split(self, name: str) -> list[dict]:
        return [e for e in self.entries if e["split"] == name]

    def load_samples(self, split: Optional[str] = None) -> list[SegmentationSample]:
        if self.root is None:
            raise ValidationError("manifest has no cache root")
        out = []
        for e in self.entries:
            if split is not None and e["split"] != split:
                continue
            buf = (self.root / e["file"]).read_bytes()
            image, _ = decode_tensor(buf, e["image_offset"])
            mask, _ = decode_tensor(buf, e["mask_offset"])
            out.append(SegmentationSample(image, mask, e["cohort"], e["volume_id"], e["slice_index"]))
        return out

    def check_hygiene(self) -> None:
        owner: dict[str, str] = {}
        for e in self.entries:
            prev = owner.setdefault(e["volume_id"], e["split"])
            if prev != e["split"]:
                raise ValidationError(f"volume {e['volume_id']} appears in both {prev} and {e['split']}")

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "params_hash": self.params_hash, "params": self.params},
                          sort_keys=True, indent=1)


def build_manifest(samples: Sequence[SegmentationSample], split_spec: SplitSpec, cache_dir,
                   params: Optional[dict] = None, split_of: Optional[dict[str, str]] = None) -> DatasetManifest:
    """Serialise samples to per-sample files under `cache_dir` and write manifest.json.

    Splits are assigned per volume. `split_of` may pin volume ids to splits
    explicitly (used when train and test sets are generated separately).
    """
    cache = Path(cache_dir)
    params = dict(params or {})
    params.setdefault("normalization", ["per-slice z-score", "divide by max |value|"])
    params["split"] = asdict(split_spec)
    phash = hashlib.sha256(json.dumps(params, sort_keys=True).encode()).hexdigest()[:16]
    splits = split_of if split_of is not None else assign_splits([s.volume_id for s in samples], split_spec)
    entries = []
    for s in samples:
        if s.volume_id not in splits:
            raise ValidationError(f"volume {s.volume_id} has no split assignment")
        rel = f"samples/{s.volume_id}_{s.slice_index:04d}.bin"
        img = encode_tensor(s.image.astype("<f4"))
        msk = encode_tensor(s.mask.astype("u1"))
        atomic_write_bytes(cache / rel, [img, msk])
        entries.append({
            "file": rel, "image_offset": 0, "mask_offset": len(img), "split": splits[s.volume_id],
            "volume_id": s.volume_id, "slice_index": s.slice_index, "cohort": s.cohort,
            "covid_present": s.covid_present, "infection_area": s.infection_area,
        })
    manifest = DatasetManifest(entries, phash, params, cache)
    manifest.check_hygiene()
    atomic_write_bytes(cache / "manifest.json", [manifest.to_json().encode()])
    return manifest


def load_manifest(path, expected_hash: Optional[str] = None) -> DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise ValidationError(f"manifest not found: {p}")
    data = json.loads(p.read_text())
    m = DatasetManifest(data["entries"], data["params_hash"], data["params"], p.parent)
    if expected_hash is not None and m.params_hash != expected_hash:
        raise ValidationError(f"manifest hash {m.params_hash} does not match expected {expected_hash}")
    m.check_hygiene()
    return m


# -- ingestion --------------------------------------------------------------

def load_nifti_volume(image_path, mask_path, lung_path=None, cohort: str = "nifti",
                      volume_id: Optional[str] = None) -> VolumeRecord:
    import nibabel as nib

    def read(p):
        img = nib.load(str(p))
        # NIfTI stores (X, Y, Z); slices along Z
        return np.asarray(img.dataobj).transpose(2, 1, 0), img

    image, nii = read(image_path)
    mask, _ = read(mask_path)
    lung = read(lung_path)[0] > 0 if lung_path else None
    bit_depth = 8 if image.dtype.itemsize == 1 else 16
    zooms = tuple(float(z) for z in nii.header.get_zooms()[:3])[::-1]
    vid = volume_id or Path(image_path).name.split(".")[0]
    return VolumeRecord(image.astype(np.float64), (mask > 0).astype(np.uint8), cohort, vid, lung, zooms, bit_depth)


def load_png_volume(image_dir, mask_dir, lung_dir=None, cohort: str = "png",
                    volume_id: Optional[str] = None) -> VolumeRecord:
    """Directories of same-named grayscale PNG slices, sorted by filename."""
    from PIL import Image

    def read_dir(d):
        files = sorted(Path(d).glob("*.png"))
        if not files:
            raise ValidationError(f"no PNG slices in {d}")
        return [np.asarray(Image.open(f)) for f in files]

    imgs = read_dir(image_dir)
    bit_depth = 8 if imgs[0].dtype == np.uint8 else 16
    image = np.stack(imgs).astype(np.float64)
    mask = (np.stack(read_dir(mask_dir)) > 0).astype(np.uint8)
    lung = np.stack(read_dir(lung_dir)) > 0 if lung_dir else None
    return VolumeRecord(image, mask, cohort, volume_id or Path(image_dir).name, lung, bit_depth=bit_depth)
