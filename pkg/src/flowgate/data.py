"""Preprocessing, synthetic surrogate datasets and manifest loading."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.ndimage

from .errors import DataError
from .fileio import load_image, save_image

SPLITS = ("normal_train", "mixture_train", "test")
DATA_ROOT_ENV = "FLOWGATE_DATA_ROOT"


# preprocessing ---------------------------------------------------------------


def clip_window(src) -> np.ndarray:
    """Map signed CT numbers to 7-bit values: ``clip(src + 14, 0, 127)``."""
    return np.clip(np.asarray(src, dtype=np.int64) + 14, 0, 127)


def dequantize(img, n_bits: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``(img + u) / 2**n_bits - 0.5`` with ``u ~ U[0, 1)``, or ``u = 0.5`` if no rng."""
    a = np.asarray(img)
    levels = 2**n_bits
    if a.size:
        if np.issubdtype(a.dtype, np.floating) and not np.all(a == np.floor(a)):
            raise DataError("dequantize expects integer pixel values")
        lo, hi = a.min(), a.max()
        if lo < 0 or hi >= levels:
            raise DataError(f"pixel values [{lo}, {hi}] outside [0, {levels - 1}] for n_bits={n_bits}")
    u = 0.5 if rng is None else rng.random(a.shape)
    return (a.astype(np.float64) + u) / levels - 0.5


def quantize(x, n_bits: int) -> np.ndarray:
    """Inverse of deterministic :func:`dequantize`, rounding and clipping to valid levels."""
    levels = 2**n_bits
    return np.clip(np.floor((np.asarray(x) + 0.5) * levels), 0, levels - 1).astype(np.int64)


def zero_pixel_fraction(img) -> float:
    a = np.asarray(img)
    return float(np.count_nonzero(a == 0)) / a.size


def augment_rotations(volume, angle: float = 2.0) -> list[np.ndarray]:
    """The volume plus ``+/-angle`` degree rotations in each of the three planes.

    Bilinear (order-1) resampling about the volume centre with zero fill.
    Integer input gives rounded integer output of the same dtype.
    """
    vol = np.asarray(volume)
    squeeze_c = vol.ndim == 4
    if squeeze_c:
        if vol.shape[-1] != 1:
            raise DataError("augment_rotations expects a single-channel volume")
        vol = vol[..., 0]
    if vol.ndim != 3:
        raise DataError(f"augment_rotations expects a 3-D volume, got shape {vol.shape}")
    out = [np.array(vol, copy=True)]
    for axes in ((1, 2), (0, 2), (0, 1)):
        for sign in (1.0, -1.0):
            out.append(rotate(vol, sign * angle, axes))
    return [o[..., None] for o in out] if squeeze_c else out


def rotate(vol: np.ndarray, angle: float, axes: tuple[int, int]) -> np.ndarray:
    r = scipy.ndimage.rotate(
        vol.astype(np.float64), angle, axes=axes, reshape=False, order=1, mode="constant", cval=0.0
    )
    if np.issubdtype(vol.dtype, np.integer):
        info = np.iinfo(vol.dtype)
        return np.clip(np.rint(r), info.min, info.max).astype(vol.dtype)
    return r


# synthetic surrogate data ----------------------------------------------------


@dataclass
class SynthSpec:
    """Parameters of the synthetic normal/abnormal image generators.

    Images have a zero background margin around a smooth "anatomy" (a bright
    body with two darker lobes). Abnormal images add one bright or dark
    lesion patch inside the body. Body texture noise shrinks as the margins
    grow (from ``noise_levels`` at the narrowest to ``min_noise_levels`` at
    the widest), so images with more zero background are also simpler.

    ``confound=True`` biases the shared background process for abnormal
    images: their texture noise drops by ``confound_noise`` levels (they look
    like wide-margin images) and their margins are drawn from
    ``[lo + confound_shift, hi]``. Lesions are fainter in that variant
    (``lesion_contrast`` defaults to 0.1-0.2 rather than 0.25-0.45) so the
    background effect is not swamped by the lesion itself.
    """

    shape: tuple = (16, 16, 1)
    n_bits: int = 8
    margin: tuple = (0, 4)
    texture: float = 0.04
    noise_levels: int = 32
    min_noise_levels: int = 0
    lesion_size: tuple = (3, 5)
    lesion_contrast: tuple | None = None
    confound: bool = False
    confound_shift: int = 0
    confound_noise: int = 24
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.margin = tuple(int(m) for m in self.margin)
        self.lesion_size = tuple(int(s) for s in self.lesion_size)
        if self.lesion_contrast is None:
            self.lesion_contrast = (0.1, 0.2) if self.confound else (0.25, 0.45)
        self.lesion_contrast = tuple(float(c) for c in self.lesion_contrast)
        if self.shape[-1] != 1:
            raise DataError("synthetic images are single-channel")
        if len(self.shape) not in (3, 4):
            raise DataError("synthetic shape must be (H, W, 1) or (D, H, W, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _margins(spec: SynthSpec, rng: np.random.Generator, shift: int) -> list[tuple[int, int]]:
    """Per-axis (before, after) zero margins drawn from ``[lo + shift, hi]``."""
    spatial = spec.shape[:-1]
    lo, hi = spec.margin
    lo = min(lo + shift, hi)
    out = []
    for s in spatial:
        a, b = (int(m) for m in rng.integers(lo, hi + 1, size=2))
        # always leave at least half the extent for the body
        cap = max((s - s // 2) // 2, 0)
        out.append((min(a, cap), min(b, cap)))
    return out


def _noise_amplitude(spec: SynthSpec, margins: list) -> int:
    lo, hi = spec.margin
    span = 2 * len(margins) * (hi - lo)
    frac = (sum(a + b for a, b in margins) - 2 * len(margins) * lo) / span if span else 0.0
    frac = min(max(frac, 0.0), 1.0)
    return int(round(spec.noise_levels - (spec.noise_levels - spec.min_noise_levels) * frac))


def _anatomy(spec: SynthSpec, index: int, shift: int, noise_drop: int = 0) -> tuple[np.ndarray, list]:
    rng = _rng(spec.seed, index, 0)
    spatial = spec.shape[:-1]
    margins = _margins(spec, rng, shift)
    # integer-valued draws keep the pipeline reproducible; converted once here
    brightness = 0.62 + 0.01 * rng.integers(-5, 6)
    lobe_depth = 0.30 + 0.01 * rng.integers(-5, 6)
    lobe_offset = 0.45 + 0.01 * rng.integers(-5, 6)
    bumps = rng.integers(-100, 101, size=(3, len(spatial) + 1)) / 100.0

    # anatomy is drawn at a fixed scale; the margins mask it like a collimator
    box = tuple(slice(a, s - b) for (a, b), s in zip(margins, spatial))
    grids = np.meshgrid(*[np.linspace(-1.0, 1.0, n) for n in spatial], indexing="ij")
    r2 = sum(g**2 for g in grids)
    val = brightness - 0.15 * r2
    lateral = grids[-1]
    rest = sum(g**2 for g in grids[:-1]) / 0.55**2
    for side in (-1.0, 1.0):
        d2 = (lateral - side * lobe_offset) ** 2 / 0.3**2 + rest
        val = val - lobe_depth * np.exp(-d2)
    for b in bumps:
        centre, amp = b[:-1], b[-1]
        d2 = sum((g - c) ** 2 for g, c in zip(grids, centre)) / 0.5**2
        val = val + spec.texture * amp * np.exp(-d2)
    levels = 2**spec.n_bits
    body = np.rint(val * (levels - 1)).astype(np.int64)
    noise = max(_noise_amplitude(spec, margins) - noise_drop, 0)
    if noise:
        body = body + rng.integers(-noise, noise + 1, size=body.shape)
    img = np.zeros(spatial, dtype=np.int64)
    img[box] = np.clip(body[box], 1, levels - 1)
    return img, margins


def _add_lesion(spec: SynthSpec, img: np.ndarray, margins: list, index: int) -> tuple[np.ndarray, tuple, str]:
    rng = _rng(spec.seed, index, 1)
    spatial = img.shape
    levels = 2**spec.n_bits
    lo, hi = spec.lesion_size
    start, stop = [], []
    for (a, b), s in zip(margins, spatial):
        room = s - a - b
        size = int(min(rng.integers(lo, hi + 1), room))
        off = a + int(rng.integers(0, room - size + 1))
        start.append(off)
        stop.append(off + size)
    c_lo, c_hi = spec.lesion_contrast
    contrast = c_lo + (c_hi - c_lo) * rng.integers(0, 101) / 100.0
    sign = 1 if rng.integers(0, 2) else -1
    bbox = tuple(slice(a, b) for a, b in zip(start, stop))
    out = img.copy()
    delta = int(round(sign * contrast * (levels - 1)))
    out[bbox] = np.clip(out[bbox] + delta, 1, levels - 1)
    return out, bbox, "bright" if sign > 0 else "dark"


def synth_normal(spec: SynthSpec, n: int, start: int = 0) -> np.ndarray:
    """``n`` normal images ``[n, *spec.shape]`` (int64), sample ``i`` seeded by (seed, start+i)."""
    imgs = [_anatomy(spec, start + i, 0)[0] for i in range(n)]
    return np.stack(imgs)[..., None] if imgs else np.zeros((0,) + spec.shape, dtype=np.int64)


def synth_abnormal(
    spec: SynthSpec, n: int, start: int = 0, return_boxes: bool = False, return_kinds: bool = False
):
    """Abnormal images: the paired normal anatomy plus one lesion patch.

    Without ``confound`` the result differs from ``synth_normal`` at the same
    index only inside the lesion bounding box (returned when ``return_boxes``).
    ``return_kinds`` also returns each lesion's kind, ``"bright"`` or ``"dark"``.
    """
    shift = spec.confound_shift if spec.confound else 0
    drop = spec.confound_noise if spec.confound else 0
    imgs, boxes, kinds = [], [], []
    for i in range(n):
        base, margins = _anatomy(spec, start + i, shift, drop)
        img, bbox, kind = _add_lesion(spec, base, margins, start + i)
        imgs.append(img)
        boxes.append(bbox)
        kinds.append(kind)
    arr = np.stack(imgs)[..., None] if imgs else np.zeros((0,) + spec.shape, dtype=np.int64)
    out = (arr,)
    if return_boxes:
        out += (boxes,)
    if return_kinds:
        out += (kinds,)
    return out if len(out) > 1 else arr


@dataclass
class SynthCounts:
    normal_train: int = 250
    mixture_normal: int = 500
    mixture_abnormal: int = 500
    test_normal: int = 100
    test_abnormal: int = 100


def write_synth_dataset(out_dir: str | os.PathLike, spec: SynthSpec, counts: SynthCounts | None = None) -> str:
    """Generate every split into ``out_dir`` and write ``manifest.csv``; returns its path.

    Each group draws from its own disjoint range of sample indices, so no
    anatomy is shared between splits. 2-D images are written as PGM, 3-D
    volumes as FGT1. Test abnormal labels are ``abnormal:<kind>``; the
    mixture split is left unlabeled.
    """
    counts = counts or SynthCounts()
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    ext = ".pgm" if len(spec.shape) == 3 else ".fgt1"
    entries: list[ManifestEntry] = []
    start = 0

    def emit(images, split, prefix, labels):
        for i, (img, label) in enumerate(zip(images, labels)):
            name = f"images/{prefix}_{i:05d}{ext}"
            save_image(os.path.join(out_dir, name), img, spec.n_bits)
            entries.append(ManifestEntry(name, split, label))

    groups = (
        ("normal_train", "ntrain", counts.normal_train, False, False),
        ("mixture_train", "mix_n", counts.mixture_normal, False, True),
        ("mixture_train", "mix_a", counts.mixture_abnormal, True, True),
        ("test", "test_n", counts.test_normal, False, False),
        ("test", "test_a", counts.test_abnormal, True, False),
    )
    for split, prefix, n, abnormal, unlabeled in groups:
        if abnormal:
            imgs, kinds = synth_abnormal(spec, n, start, return_kinds=True)
            labels = [f"abnormal:{k}" for k in kinds]
        else:
            imgs = synth_normal(spec, n, start)
            labels = ["normal"] * n
        if unlabeled:
            labels = [None] * n
        emit(imgs, split, prefix, labels)
        start += n
    path = os.path.join(out_dir, "manifest.csv")
    write_manifest(path, entries, n_bits=spec.n_bits, shape=spec.shape)
    return path


# manifests ---------------------------------------------------------------------


@dataclass
class ManifestEntry:
    file: str
    split: str
    label: str | None = None


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    n_bits: int | None = None
    shape: tuple | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]


@dataclass
class SplitData:
    ids: list[str]
    images: np.ndarray
    labels: list[str | None]


@dataclass
class Dataset:
    splits: dict[str, SplitData]
    n_bits: int | None
    shape: tuple
    overlap: int = 0
    counts: dict = field(default_factory=dict)


def parse_shape(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.lower().split("x"))
    except ValueError as exc:
        raise DataError(f"bad shape {text!r}; expected e.g. 16x16x1") from exc


def format_shape(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def read_manifest(path: str | os.PathLike, root: str | None = None) -> DatasetManifest:
    """Parse a ``file,split,label`` CSV.

    Leading ``# key=value`` lines may declare ``n_bits`` and ``shape``. File
    paths resolve against ``root``, else ``$FLOWGATE_DATA_ROOT``, else the
    manifest's directory.
    """
    path = os.fspath(path)
    try:
        with open(path, newline="") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    meta = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(io.StringIO("\n".join(body)))
    if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != ["file", "split", "label"]:
        raise DataError(f"{path}: manifest header must be 'file,split,label'")
    entries = []
    for lineno, row in enumerate(reader, start=2):
        split = (row["split"] or "").strip()
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        label = (row["label"] or "").strip() or None
        entries.append(ManifestEntry(row["file"].strip(), split, label))
    root = root or os.environ.get(DATA_ROOT_ENV) or os.path.dirname(os.path.abspath(path))
    n_bits = int(meta["n_bits"]) if "n_bits" in meta else None
    shape = parse_shape(meta["shape"]) if "shape" in meta else None
    return DatasetManifest(root, entries, n_bits, shape)


def write_manifest(path: str | os.PathLike, entries, n_bits: int | None = None, shape=None) -> None:
    with open(path, "w", newline="") as f:
        if n_bits is not None:
            f.write(f"# n_bits={n_bits}\n")
        if shape is not None:
            f.write(f"# shape={format_shape(shape)}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["file", "split", "label"])
        for e in entries:
            w.writerow([e.file, e.split, e.label or ""])


def is_abnormal(label: str | None) -> bool:
    return label is not None and label != "normal"


def load_dataset(manifest: DatasetManifest | str | os.PathLike) -> Dataset:
    """Load every manifest entry into per-split arrays, validating as it goes."""
    if not isinstance(manifest, DatasetManifest):
        manifest = read_manifest(manifest)
    shape = manifest.shape
    cache: dict[str, np.ndarray] = {}
    splits = {}
    for name in SPLITS:
        ids, imgs, labels = [], [], []
        for e in manifest.split(name):
            if name == "normal_train" and is_abnormal(e.label):
                raise DataError(f"entry {e.file!r}: normal_train carries abnormal label {e.label!r}")
            full = os.path.join(manifest.root, e.file)
            if full not in cache:
                if not os.path.exists(full):
                    raise DataError(f"entry {e.file!r}: file not found at {full}")
                img = load_image(full)
                if img.ndim == 2:
                    img = img[..., None]
                cache[full] = img
            img = cache[full]
            if shape is None:
                shape = img.shape
            if img.shape != tuple(shape):
                raise DataError(f"entry {e.file!r}: shape {img.shape} != expected {tuple(shape)}")
            if manifest.n_bits is not None and (img.min() < 0 or img.max() >= 2**manifest.n_bits):
                raise DataError(f"entry {e.file!r}: values outside {manifest.n_bits}-bit range")
            ids.append(e.file)
            imgs.append(img)
            labels.append(e.label)
        arr = np.stack(imgs) if imgs else np.zeros((0,) + tuple(shape or ()), dtype=np.int64)
        splits[name] = SplitData(ids, arr, labels)
    overlap = len(
        {e.file for e in manifest.split("normal_train")} & {e.file for e in manifest.split("mixture_train")}
    )
    counts = {k: len(v.ids) for k, v in splits.items()}
    return Dataset(splits, manifest.n_bits, tuple(shape or ()), overlap, counts)
