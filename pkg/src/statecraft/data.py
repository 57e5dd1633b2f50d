"""Dataset ingestion, stratified splitting, preprocessing, ZCA and augmentation."""

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import _kernels
from .errors import ConfigError, DataError
from .weights import atomic_write_bytes

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SUBSETS = ("train", "val", "test")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Image paths with dense class ids; ``root`` makes manifest paths relative."""

    items: list
    class_names: list
    image_size: tuple = (299, 299)
    root: Path = None

    def __post_init__(self):
        k = len(self.class_names)
        for path, cid in self.items:
            if not 0 <= cid < k:
                raise DataError(f"class id {cid} for {path} outside [0, {k})")

    def __len__(self):
        return len(self.items)

    @property
    def labels(self):
        return np.array([c for _, c in self.items], dtype=np.int64)

    def subset(self, indices):
        return LabeledDataset([self.items[i] for i in indices], self.class_names, self.image_size, self.root)

    def relpath(self, path):
        return Path(path).relative_to(self.root).as_posix() if self.root else Path(path).as_posix()

    @classmethod
    def from_directory(cls, root, image_size=(299, 299)):
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"dataset directory {root} does not exist")
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not class_dirs:
            raise DataError(f"{root} has no class directories")
        items = []
        for cid, d in enumerate(class_dirs):
            for f in sorted(d.iterdir()):
                if f.suffix.lower() in IMAGE_EXTENSIONS:
                    items.append((f, cid))
        if not items:
            raise DataError(f"{root} contains no JPEG/PNG images")
        return cls(items, [d.name for d in class_dirs], tuple(image_size), root)


@dataclass
class ArrayDataset:
    """Preprocessed images held in memory, NHWC float32."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return ArrayDataset(self.images[idx], self.labels[idx], self.class_names)


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.68
    val_frac: float = 0.15
    test_frac: float = 0.17
    seed: int = 0

    def __post_init__(self):
        fracs = self.fractions
        if any(f < 0 for f in fracs):
            raise ConfigError(f"split fractions must be non-negative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs):.12g}")

    @property
    def fractions(self):
        return (self.train_frac, self.val_frac, self.test_frac)


def apportion(n, fractions):
    """Largest-remainder split of ``n`` into integer parts close to ``n * f``."""
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_indices(labels, spec):
    """Stratified split of ``labels`` into (train, val, test) index arrays.

    Every class is shuffled with its own seeded stream and cut by
    largest-remainder rounding, so each subset is within one item of its exact
    share per class. Classes with fewer than three items are pooled and split
    together.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("cannot split an empty dataset")
    parts = ([], [], [])
    pooled = []
    for cid in np.unique(labels):
        idx = np.flatnonzero(labels == cid)
        if len(idx) < 3:
            pooled.append(idx)
            continue
        rng = np.random.default_rng([spec.seed, int(cid)])
        idx = rng.permutation(idx)
        _cut(idx, apportion(len(idx), spec.fractions), parts)
    if pooled:
        warnings.warn(f"{len(pooled)} class(es) have fewer than 3 items; they are split globally, not stratified",
                      stacklevel=2)
        idx = np.random.default_rng([spec.seed, 0xFFFFFFFF]).permutation(np.concatenate(pooled))
        _cut(idx, apportion(len(idx), spec.fractions), parts)
    return tuple(np.sort(np.concatenate(p)).astype(np.int64) if p else np.zeros(0, np.int64) for p in parts)


def _cut(idx, counts, parts):
    start = 0
    for part, c in zip(parts, counts):
        part.append(idx[start : start + c])
        start += c


def split(dataset, spec):
    return tuple(dataset.subset(ix) for ix in split_indices(dataset.labels, spec))


def split_manifest(dataset, spec):
    assignment = {}
    for name, ix in zip(SUBSETS, split_indices(dataset.labels, spec)):
        for i in ix:
            assignment[dataset.relpath(dataset.items[i][0])] = name
    return {
        "version": 1,
        "seed": spec.seed,
        "fractions": dict(zip(SUBSETS, spec.fractions)),
        "class_names": list(dataset.class_names),
        "assignments": dict(sorted(assignment.items())),
    }


def write_manifest(manifest, path):
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def read_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read split manifest {path}: {exc}") from exc
    if "assignments" not in manifest:
        raise DataError(f"{path} is not a split manifest")
    return manifest


def apply_manifest(dataset, manifest, subset):
    if subset not in SUBSETS:
        raise ConfigError(f"unknown subset {subset!r}; choose from {SUBSETS}")
    assignments = manifest["assignments"]
    keep = [i for i, (p, _) in enumerate(dataset.items) if assignments.get(dataset.relpath(p)) == subset]
    return dataset.subset(keep)


# --------------------------------------------------------------------------
# loading and preprocessing
# --------------------------------------------------------------------------


def load_image(path, size):
    """Decode to uint8 RGB at ``size`` = (H, W) using bilinear resampling."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("L", "LA", "I", "I;16", "1"):
                warnings.warn(f"{path}: grayscale image replicated to 3 channels", stacklevel=2)
            img = img.convert("RGB")
            if img.size != (size[1], size[0]):
                img = img.resize((size[1], size[0]), Image.Resampling.BILINEAR)
            return np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def resize_array(image, size):
    """Bilinear resize of an (H, W, C) float array, channel by channel."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32), mode="F")
                        .resize((w, h), Image.Resampling.BILINEAR)) for c in range(image.shape[2])]
    return np.stack(chans, axis=-1).astype(image.dtype)


@dataclass
class ZcaModel:
    mean: np.ndarray
    whitening: np.ndarray
    epsilon: float
    fitted_on: str
    shape: tuple = None

    def transform(self, flat):
        return (flat - self.mean) @ self.whitening

    def apply(self, images):
        """Whiten (N, H, W, C) images; large images are whitened at ``shape`` and
        the correction is resized back to full resolution."""
        images = np.asarray(images)
        n = len(images)
        if self.shape is None or tuple(images.shape[1:]) == tuple(self.shape):
            out = self.transform(images.reshape(n, -1).astype(np.float64))
            return out.reshape(images.shape).astype(images.dtype)
        h, w = self.shape[:2]
        small = np.stack([resize_array(im, (h, w)) for im in images])
        delta = self.transform(small.reshape(n, -1).astype(np.float64)).reshape(small.shape) - small
        full = images.shape[1:3]
        return images + np.stack([resize_array(d.astype(np.float32), full) for d in delta]).astype(images.dtype)


def fingerprint(array):
    return hashlib.sha256(np.ascontiguousarray(array).tobytes()).hexdigest()[:16]


def fit_zca(train_images, epsilon=1e-6, shape=None):
    """Fit W = E diag((lambda + eps)^-1/2) E^T on the training images.

    ``train_images`` is (N, D) or (N, H, W, C). ``shape`` sets the resolution
    the model whitens at; images are resized to it before fitting.
    """
    x = np.asarray(train_images)
    if len(x) < 2:
        raise DataError("ZCA needs at least 2 training samples")
    if shape is not None and x.ndim == 4 and tuple(x.shape[1:]) != tuple(shape):
        x = np.stack([resize_array(im, shape[:2]) for im in x])
    stored_shape = tuple(x.shape[1:]) if x.ndim == 4 else None
    flat = x.reshape(len(x), -1).astype(np.float64)
    n, d = flat.shape
    if n < d:
        warnings.warn(f"ZCA fitted on {n} samples for {d} dimensions; covariance is rank deficient", stacklevel=2)
    mean = flat.mean(axis=0)
    centered = flat - mean
    cov = centered.T @ centered / n
    eigval, eigvec = np.linalg.eigh((cov + cov.T) / 2)
    eigval = np.clip(eigval, 0.0, None)
    w = (eigvec * (1.0 / np.sqrt(eigval + epsilon))) @ eigvec.T
    w = (w + w.T) / 2
    return ZcaModel(mean, w, epsilon, fingerprint(x), stored_shape)


@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 299
    rescale: bool = True
    samplewise_center: bool = True
    samplewise_std_normalization: bool = True
    zca: bool = False
    zca_epsilon: float = 1e-6
    zca_size: int = 32
    zca_fit: str = "post_normalization"

    def __post_init__(self):
        if self.zca_fit not in ("post_normalization", "pre_normalization"):
            raise ConfigError("zca_fit must be post_normalization or pre_normalization")
        if self.image_size < 1 or self.zca_size < 1:
            raise ConfigError("image sizes must be positive")


STD_FLOOR = 1e-6


def _rescale(x):
    return x.astype(np.float32) / np.float32(255.0)


def _samplewise(x, center, normalize):
    if center:
        x = x - x.mean(axis=(-3, -2, -1), keepdims=True)
    if normalize:
        x = x / np.maximum(x.std(axis=(-3, -2, -1), keepdims=True), STD_FLOOR)
    return x.astype(np.float32)


def preprocess(image, zca=None, cfg=PreprocessConfig()):
    """uint8 or [0, 255] image(s) -> float32, in the order rescale, center,
    normalise, ZCA (or rescale, ZCA, center, normalise for pre-normalisation fits)."""
    x = np.asarray(image)
    single = x.ndim == 3
    if single:
        x = x[None]
    size = (cfg.image_size, cfg.image_size)
    if x.shape[1:3] != size:
        x = np.stack([np.asarray(Image.fromarray(im.astype(np.uint8)).resize(size[::-1], Image.Resampling.BILINEAR))
                      for im in x])
    x = _rescale(x) if cfg.rescale else x.astype(np.float32)
    pre = cfg.zca_fit == "pre_normalization"
    if zca is not None and pre:
        x = zca.apply(x)
    x = _samplewise(x, cfg.samplewise_center, cfg.samplewise_std_normalization)
    if zca is not None and not pre:
        x = zca.apply(x)
    return x[0] if single else x


def fit_zca_for(raw_train, cfg):
    """Fit ZCA on the training split at the stage ``cfg.zca_fit`` names."""
    x = _rescale(np.asarray(raw_train)) if cfg.rescale else np.asarray(raw_train, dtype=np.float32)
    if cfg.zca_fit == "post_normalization":
        x = _samplewise(x, cfg.samplewise_center, cfg.samplewise_std_normalization)
    size = min(cfg.zca_size, cfg.image_size)
    return fit_zca(x, cfg.zca_epsilon, shape=(size, size, x.shape[-1]))


def load_arrays(dataset, size):
    """Decode every image of a LabeledDataset to uint8 (N, H, W, 3)."""
    if len(dataset) == 0:
        return np.zeros((0, size, size, 3), np.uint8)
    return np.stack([load_image(p, (size, size)) for p, _ in dataset.items])


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentSpec:
    hflip: bool = True
    vflip: bool = True
    shear: float = 0.2
    shift_frac: float = 0.2
    zoom_frac: float = 0.2
    rotation_deg: float = 30.0
    fill: str = "nearest"
    shear_mode: str = "factor"
    seed: int = 0

    def __post_init__(self):
        if min(self.shear, self.shift_frac, self.zoom_frac, self.rotation_deg) < 0:
            raise ConfigError("augmentation ranges must be non-negative")
        if self.zoom_frac >= 1:
            raise ConfigError("zoom_frac must be < 1")
        if self.fill not in ("nearest", "constant"):
            raise ConfigError("fill must be nearest or constant")
        if self.shear_mode not in ("factor", "degrees"):
            raise ConfigError("shear_mode must be factor or degrees")

    @classmethod
    def identity(cls, seed=0):
        return cls(False, False, 0.0, 0.0, 0.0, 0.0, seed=seed)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TransformParams:
    hflip: bool = False
    vflip: bool = False
    shear: float = 0.0
    shift_y: float = 0.0
    shift_x: float = 0.0
    zoom_y: float = 1.0
    zoom_x: float = 1.0
    rotation_deg: float = 0.0

    @property
    def is_affine_identity(self):
        return (self.shear == 0 and self.shift_x == 0 and self.shift_y == 0 and self.zoom_x == 1
                and self.zoom_y == 1 and self.rotation_deg == 0)


def sample_transform(spec, rng, shape):
    """Draw one transform; shifts are in pixels of ``shape`` = (H, W, ...)."""
    h, w = shape[:2]

    def draw(r):
        return float(rng.uniform(-r, r)) if r > 0 else 0.0

    hflip = spec.hflip and bool(rng.random() < 0.5)
    vflip = spec.vflip and bool(rng.random() < 0.5)
    z = spec.zoom_frac
    return TransformParams(
        hflip=hflip,
        vflip=vflip,
        shear=draw(spec.shear),
        shift_y=draw(spec.shift_frac) * h,
        shift_x=draw(spec.shift_frac) * w,
        zoom_y=float(rng.uniform(1 - z, 1 + z)) if z > 0 else 1.0,
        zoom_x=float(rng.uniform(1 - z, 1 + z)) if z > 0 else 1.0,
        rotation_deg=draw(spec.rotation_deg),
    )


def sampling_matrix(params, shape, shear_mode="factor"):
    """3x3 map from output (row, col, 1) to source coordinates, about the centre."""
    h, w = shape[:2]
    t = math.radians(params.rotation_deg)
    rot = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    shift = np.array([[1, 0, params.shift_y], [0, 1, params.shift_x], [0, 0, 1]])
    s = math.tan(math.radians(params.shear)) if shear_mode == "degrees" else params.shear
    shear = np.array([[1, 0, 0], [s, 1, 0], [0, 0, 1]])
    zoom = np.diag([params.zoom_y, params.zoom_x, 1.0])
    cy, cx = (h - 1) / 2, (w - 1) / 2
    to_center = np.array([[1, 0, -cy], [0, 1, -cx], [0, 0, 1]])
    back = np.array([[1, 0, cy], [0, 1, cx], [0, 0, 1]])
    return back @ rot @ shift @ shear @ zoom @ to_center


def apply_transform(image, params, spec):
    out = image
    if not params.is_affine_identity:
        m = sampling_matrix(params, image.shape, spec.shear_mode)
        out = _kernels.warp_affine(image, m[:2], fill=spec.fill, cval=0.0)
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    return np.ascontiguousarray(out, dtype=image.dtype)


def augment(image, spec, rng):
    return apply_transform(image, sample_transform(spec, rng, image.shape), spec)


def item_rng(seed, epoch, index):
    return np.random.default_rng([int(seed), int(epoch), int(index)])


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def epoch_order(n, seed, epoch, shuffle=True):
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batches(dataset, batch_size, seed=0, epoch=0, augment_spec=None, shuffle=True):
    """Yield (images, labels) covering every item once; the last batch may be short.

    Augmentation uses an RNG keyed on (augment seed, epoch, dataset index), so
    results do not depend on batch composition or worker count.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot batch an empty dataset")
    order = epoch_order(n, seed, epoch, shuffle)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.images[idx]
        if augment_spec is not None:
            x = np.stack([augment(dataset.images[i], augment_spec, item_rng(augment_spec.seed, epoch, i))
                          for i in idx])
        yield x, dataset.labels[idx]


@dataclass
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    split: SplitSpec = field(default_factory=SplitSpec)
    batch_size: int = 32
    augment_train: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(
            preprocess=PreprocessConfig(**d.pop("preprocess", {})),
            augment=AugmentSpec(**d.pop("augment", {})),
            split=SplitSpec(**d.pop("split", {})),
            **d,
        )


def prepare_splits(dataset, manifest, cfg):
    """Decode and preprocess the three manifest subsets; ZCA is fit on train only."""
    size = cfg.preprocess.image_size
    raw = {s: apply_manifest(dataset, manifest, s) for s in SUBSETS}
    arrays = {s: load_arrays(d, size) for s, d in raw.items()}
    zca = None
    if cfg.preprocess.zca:
        zca = fit_zca_for(arrays["train"], cfg.preprocess)
    out = {}
    for s in SUBSETS:
        x = preprocess(arrays[s], zca, cfg.preprocess) if len(arrays[s]) else arrays[s].astype(np.float32)
        out[s] = ArrayDataset(x, raw[s].labels, dataset.class_names)
    return out, zca

