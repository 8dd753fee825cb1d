"""Seeded synthetic image tasks and corruption transforms.

Every sample is a pure function of (spec, index): the generator seeds a
counter-based stream per index, so datasets are byte-reproducible and
order-independent. Labels are assigned round-robin, giving exactly
balanced classes. Train and test splits are disjoint index ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

FAMILIES = (
    "stripe-orientation",
    "blob-count",
    "checker-frequency",
    "glyph-template",
    "ring-radius",
    "corner-quadrant",
    "gradient-direction",
    "noise-texture",
)

# distinct distribution used only to pre-train the shared base encoder
PRETRAIN_FAMILY = "generic-shapes"

MAX_CLASSES = {
    "stripe-orientation": 8,
    "blob-count": 6,
    "checker-frequency": 4,
    "glyph-template": 8,
    "ring-radius": 6,
    "corner-quadrant": 4,
    "gradient-direction": 8,
    "noise-texture": 8,
    PRETRAIN_FAMILY: 6,
}

_FAMILY_CODE = {name: i for i, name in enumerate(FAMILIES + (PRETRAIN_FAMILY,))}

CORRUPTION_KINDS = ("gaussian-noise", "impulse-noise", "contrast", "pixelate")

# severity 1..5 parameter tables; chosen to span mild -> severe
GAUSSIAN_SIGMA = (0.04, 0.06, 0.08, 0.09, 0.10)
IMPULSE_P = (0.01, 0.02, 0.03, 0.05, 0.07)
CONTRAST_C = (0.75, 0.5, 0.4, 0.3, 0.15)
PIXELATE_K = (2, 3, 4, 5, 6)


@dataclass(frozen=True)
class SyntheticTaskSpec:
    family: str
    classes: int = 4
    train_size: int = 512
    test_size: int = 256
    noise: float = 0.08
    seed: int = 0
    image_size: int = 32

    def __post_init__(self):
        if self.family not in MAX_CLASSES:
            raise ContractError(f"unknown task family {self.family!r}")
        if self.classes > MAX_CLASSES[self.family]:
            raise ContractError(
                f"family {self.family!r} supports at most {MAX_CLASSES[self.family]} classes"
            )
        if self.classes < 2:
            raise ContractError("need at least 2 classes")


@dataclass
class TaskDataset:
    """Materialized splits with an access log used by protocol-isolation checks."""

    spec: SyntheticTaskSpec
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    access_log: list[str] = field(default_factory=list)

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append("train")
        return self.train_images, self.train_labels

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append("test")
        return self.test_images, self.test_labels

    def reset_access_log(self) -> None:
        self.access_log.clear()


def _rng_for(spec: SyntheticTaskSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(_FAMILY_CODE[spec.family], index))
    )


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (size - 1) / 2.0
    y, x = np.mgrid[0:size, 0:size]
    return (y - c).astype(np.float64), (x - c).astype(np.float64)


def _glyph_templates(spec: SyntheticTaskSpec) -> np.ndarray:
    # templates are a property of the spec, drawn from a reserved stream
    rng = np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(_FAMILY_CODE[spec.family], 2**31))
    )
    return (rng.random((spec.classes, 8, 8)) < 0.45).astype(np.float64)


def stripe_angle(spec: SyntheticTaskSpec, index: int) -> float:
    """Generating angle of a stripe sample; the label is its bucket."""
    label = index % spec.classes
    rng = _rng_for(spec, index)
    u = rng.uniform(0.1, 0.9)
    return (label + u) * np.pi / spec.classes


def stripe_label_from_angle(spec: SyntheticTaskSpec, angle: float) -> int:
    return int(angle / (np.pi / spec.classes)) % spec.classes


def _sample(spec: SyntheticTaskSpec, index: int) -> tuple[np.ndarray, int]:
    size = spec.image_size
    label = index % spec.classes
    rng = _rng_for(spec, index)
    yy, xx = _grid(size)
    fam = spec.family

    if fam == "stripe-orientation":
        u = rng.uniform(0.1, 0.9)
        theta = (label + u) * np.pi / spec.classes
        freq = rng.uniform(0.15, 0.25)
        phase = rng.uniform(0, 2 * np.pi)
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        img = 0.35 + 0.3 * np.sin(2 * np.pi * freq * proj + phase)
    elif fam == "blob-count":
        count = label + 1
        centers: list[tuple[float, float]] = []
        candidates = rng.uniform(5, size - 5, size=(40, 2))
        for cand in candidates:
            if len(centers) == count:
                break
            if all((cand[0] - c[0]) ** 2 + (cand[1] - c[1]) ** 2 >= 49 for c in centers):
                centers.append((cand[0], cand[1]))
        sigma = rng.uniform(1.6, 2.4)
        img = np.zeros((size, size))
        off = (size - 1) / 2.0
        for cy, cx in centers:
            img += np.exp(-(((yy + off) - cy) ** 2 + ((xx + off) - cx) ** 2) / (2 * sigma**2))
        img = np.clip(img, 0, 1) * 0.9
    elif fam == "checker-frequency":
        cell = (16, 8, 4, 2)[label]
        oy, ox = rng.integers(0, cell, size=2)
        img = ((((yy + 64 + oy) // cell) + ((xx + 64 + ox) // cell)) % 2) * 0.5 + 0.28
    elif fam == "glyph-template":
        tmpl = _glyph_templates(spec)[label]
        big = np.kron(tmpl, np.ones((3, 3)))
        img = np.full((size, size), 0.1)
        oy, ox = rng.integers(0, size - 24 + 1, size=2)
        img[oy:oy + 24, ox:ox + 24] = 0.1 + 0.8 * big
    elif fam == "ring-radius":
        u = rng.uniform(0.2, 0.8)
        radius = 3.0 + (label + u) * (11.0 / spec.classes)
        cy, cx = rng.uniform(-2, 2, size=2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img = 0.9 * np.exp(-((r - radius) ** 2) / (2 * 1.2**2))
    elif fam == "corner-quadrant":
        half = size // 2
        side = rng.integers(8, 13)
        qy, qx = divmod(label, 2)
        oy = qy * half + rng.integers(0, half - side + 1)
        ox = qx * half + rng.integers(0, half - side + 1)
        img = np.full((size, size), 0.1)
        img[oy:oy + side, ox:ox + side] = 0.85
    elif fam == "gradient-direction":
        u = rng.uniform(0.1, 0.9)
        theta = 2 * np.pi * (label + u) / spec.classes
        proj = xx * np.cos(theta) + yy * np.sin(theta)
        img = 0.72 + 0.28 * proj / ((size - 1) / 2.0)
    elif fam == "noise-texture":
        k = (1, 2, 3, 4, 6, 8, 11, 15)[label]
        raw = rng.standard_normal((size, size))
        sm = ndimage.uniform_filter(raw, size=k, mode="wrap")
        img = 0.5 + 0.18 * (sm - sm.mean()) / (sm.std() + 1e-9)
    elif fam == PRETRAIN_FAMILY:
        img = _generic_shape(label, rng, size, yy, xx)
    else:  # pragma: no cover - guarded by spec validation
        raise ContractError(f"unknown family {fam!r}")

    if spec.noise > 0:
        img = img + spec.noise * rng.standard_normal((size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


def _generic_shape(label: int, rng, size, yy, xx) -> np.ndarray:
    img = np.full((size, size), 0.15)
    if label == 0:  # filled rectangle
        h, w = rng.integers(8, 20, size=2)
        oy, ox = rng.integers(2, size - 2 - h), rng.integers(2, size - 2 - w)
        img[oy:oy + h, ox:ox + w] = 0.8
    elif label == 1:  # filled ellipse
        ry, rx = rng.uniform(5, 11, size=2)
        cy, cx = rng.uniform(-5, 5, size=2)
        img[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = 0.8
    elif label == 2:  # cross
        t = rng.integers(2, 5)
        c = size // 2 + rng.integers(-4, 5)
        img[c - t:c + t, :] = 0.8
        c = size // 2 + rng.integers(-4, 5)
        img[:, c - t:c + t] = 0.8
    elif label == 3:  # diagonal band
        off = rng.integers(-6, 7)
        width = rng.integers(2, 5)
        img[np.abs(xx - yy - off) < width] = 0.8
    elif label == 4:  # dot lattice
        step = rng.integers(5, 9)
        oy, ox = rng.integers(0, step, size=2)
        img[oy::step, ox::step] = 0.9
        img = ndimage.uniform_filter(img, size=2)
    else:  # frame
        t = rng.integers(2, 5)
        m = rng.integers(2, 7)
        img[m:size - m, m:size - m] = 0.8
        img[m + t:size - m - t, m + t:size - m - t] = 0.15
    return img


def generate_task_dataset(spec: SyntheticTaskSpec) -> TaskDataset:
    """Balanced labeled dataset; train/test are disjoint index ranges."""
    images = []
    labels = []
    for i in range(spec.train_size + spec.test_size):
        img, lab = _sample(spec, i)
        images.append(img)
        labels.append(lab)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    n = spec.train_size
    return TaskDataset(
        spec=spec,
        train_images=images[:n],
        train_labels=labels[:n],
        test_images=images[n:],
        test_labels=labels[n:],
    )


# ---------------------------------------------------------------------------
# corruptions


@dataclass(frozen=True)
class Corruption:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ContractError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ContractError("severity must be in 1..5")


def severity_params(kind: str, severity: int) -> float | int:
    table = {
        "gaussian-noise": GAUSSIAN_SIGMA,
        "impulse-noise": IMPULSE_P,
        "contrast": CONTRAST_C,
        "pixelate": PIXELATE_K,
    }[kind]
    return table[severity - 1]


def gaussian_noise_image(img: np.ndarray, sigma: float, rng) -> np.ndarray:
    if sigma == 0:
        return img.copy()
    return np.clip(img + sigma * rng.standard_normal(img.shape), 0.0, 1.0)


def impulse_noise_image(img: np.ndarray, p: float, rng) -> np.ndarray:
    out = img.copy()
    mask = rng.random(img.shape) < p
    out[mask] = rng.integers(0, 2, size=int(mask.sum())).astype(img.dtype)
    return out


def contrast_image(img: np.ndarray, c: float) -> np.ndarray:
    mu = img.mean()
    return np.clip((img - mu) * c + mu, 0.0, 1.0)


def pixelate_image(img: np.ndarray, k: int) -> np.ndarray:
    """Mean-pool k x k blocks then nearest-neighbour upsample."""
    if k == 1:
        return img.copy()
    size = img.shape[0]
    small_n = -(-size // k)  # ceil
    small = np.zeros((small_n, small_n), dtype=np.float64)
    for by in range(small_n):
        for bx in range(small_n):
            small[by, bx] = img[by * k:(by + 1) * k, bx * k:(bx + 1) * k].mean()
    up_idx = np.minimum(np.arange(size) // k, small_n - 1)
    return small[np.ix_(up_idx, up_idx)].astype(img.dtype)


def corrupt_images(images: np.ndarray, corruption: Corruption) -> np.ndarray:
    """Deterministic per-image corruption; a pure function of (corruption, index)."""
    out = np.empty_like(images)
    kind_code = CORRUPTION_KINDS.index(corruption.kind)
    for i, img in enumerate(images):
        rng = np.random.default_rng(
            np.random.SeedSequence(corruption.seed, spawn_key=(kind_code, corruption.severity, i))
        )
        if corruption.kind == "gaussian-noise":
            out[i] = gaussian_noise_image(img, severity_params(corruption.kind, corruption.severity), rng)
        elif corruption.kind == "impulse-noise":
            out[i] = impulse_noise_image(img, severity_params(corruption.kind, corruption.severity), rng)
        elif corruption.kind == "contrast":
            out[i] = contrast_image(img, severity_params(corruption.kind, corruption.severity))
        else:
            out[i] = pixelate_image(img, severity_params(corruption.kind, corruption.severity))
    return out


def apply_corruption(dataset: TaskDataset, corruption: Corruption) -> TaskDataset:
    """New dataset with a corrupted test split; train split copied clean."""
    return TaskDataset(
        spec=dataset.spec,
        train_images=dataset.train_images.copy(),
        train_labels=dataset.train_labels.copy(),
        test_images=corrupt_images(dataset.test_images, corruption),
        test_labels=dataset.test_labels.copy(),
    )
