"""Image loading, dataset assembly, splitting, partitioning, synthesis.

Ingests directories of binary PGM (P5) grayscale images laid out as

    root/healthy/*.pgm
    root/covid/*.pgm
    root/non_covid/*.pgm

and produces the two binary tasks of the experiment:

    stage one: Healthy (0) vs Pneumonia (1, covid plus non_covid)
    stage two: Non-Covid Pneumonia (0) vs Covid Pneumonia (1)

Files are sorted lexicographically by name before any seeded shuffle, so
the dataset order is fully deterministic.  A seeded synthetic generator
covers the same two task shapes for tests and self-contained runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lenet import INPUT_SHAPE

CATEGORY_DIRS = ("healthy", "covid", "non_covid")

STAGE_ONE = "stage_one"
STAGE_TWO = "stage_two"


class PgmError(Exception):
    """Base for PGM parsing failures."""


class PgmMagicError(PgmError):
    """File does not start with the P5 magic."""


class PgmMaxvalError(PgmError):
    """Maxval is not 255."""


class PgmTruncatedError(PgmError):
    """Pixel payload is shorter than width * height."""


@dataclass
class LabeledDataset:
    """Images [n,1,28,28] float32 in [0,1] with binary labels [n].

    category_names maps each label to a human-readable class name; stage
    records which task the labels encode.
    """

    images: np.ndarray
    labels: np.ndarray
    category_names: dict[int, str]
    stage: str

    def __post_init__(self) -> None:
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != INPUT_SHAPE:
            raise ValueError(f"dataset images must be [n,1,28,28], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"dataset has {self.images.shape[0]} images but {self.labels.shape} labels"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(
            self.images[indices], self.labels[indices], dict(self.category_names), self.stage
        )

    def class_counts(self) -> dict[int, int]:
        return {int(c): int((self.labels == c).sum()) for c in np.unique(self.labels)}


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-separated header token, skipping # comments."""
    n = len(data)
    while pos < n:
        byte = data[pos : pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmTruncatedError("header ended before all fields were read")
    return data[start:pos], pos


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5, maxval 255) into float32 [H,W] scaled to [0,1].

    Header comments (# to end of line) are allowed.  Raises distinct
    errors for a wrong magic, an unsupported maxval, and a payload shorter
    than width * height.
    """
    data = Path(path).read_bytes()
    magic, pos = _read_header_token(data, 0)
    if magic != b"P5":
        raise PgmMagicError(f"expected P5 magic, got {magic!r}")
    fields = []
    for _ in range(3):
        token, pos = _read_header_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError as exc:
            raise PgmError(f"non-numeric header field {token!r}") from exc
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise PgmError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PgmMaxvalError(f"maxval must be 255, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos : pos + width * height]
    if len(payload) < width * height:
        raise PgmTruncatedError(
            f"payload holds {len(payload)} bytes, needs {width * height}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float32) / np.float32(255)


def save_pgm(path, image: np.ndarray) -> None:
    """Write a [H,W] array with values in [0,1] as a binary PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"save_pgm expects [H,W], got shape {image.shape}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


# ---------------------------------------------------------------------------
# Resizing
# ---------------------------------------------------------------------------

def _axis_coords(src_len: int, dst_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel-center sample positions for one axis, edge-clamped."""
    coords = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    lo = np.floor(coords).astype(np.int64)
    frac = coords - lo
    lo_c = np.clip(lo, 0, src_len - 1)
    hi_c = np.clip(lo + 1, 0, src_len - 1)
    return lo_c, hi_c, frac


def resize_bilinear(image: np.ndarray, size: int = 28) -> np.ndarray:
    """Bilinear resample of [H,W] to [size,size] under pixel-center alignment.

    Source position for output index i is (i + 0.5) * H / size - 0.5 with
    edge-clamped sampling.  Interpolation runs in float64 and the result
    is returned as float32; a same-size resize is bit-identical to the
    input.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"resize_bilinear expects [H,W], got shape {image.shape}")
    h, w = image.shape
    if h < 1 or w < 1 or size < 1:
        raise ValueError(f"resize_bilinear: empty input or output ({h}x{w} -> {size})")
    src = image.astype(np.float64)
    ylo, yhi, fy = _axis_coords(h, size)
    xlo, xhi, fx = _axis_coords(w, size)
    rows = src[ylo] * (1.0 - fy)[:, None] + src[yhi] * fy[:, None]
    out = rows[:, xlo] * (1.0 - fx) + rows[:, xhi] * fx
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Stage dataset assembly
# ---------------------------------------------------------------------------

def _load_category(root: Path, category: str) -> list[np.ndarray]:
    cat_dir = root / category
    if not cat_dir.is_dir():
        raise FileNotFoundError(f"missing category directory: {cat_dir}")
    files = sorted(p for p in cat_dir.iterdir() if p.suffix == ".pgm")
    if not files:
        raise ValueError(f"category directory {cat_dir} holds no .pgm files")
    return [resize_bilinear(load_pgm(p), 28)[None, :, :] for p in files]


def build_stage_datasets(root) -> tuple[LabeledDataset, LabeledDataset]:
    """Load the category tree and assemble the two binary tasks.

    Stage one labels Healthy as 0 and everything with pneumonia (covid
    plus non_covid) as 1; stage two labels Non-Covid Pneumonia as 0 and
    Covid Pneumonia as 1.  Within each category, files contribute in
    lexicographic filename order.
    """
    root = Path(root)
    healthy = _load_category(root, "healthy")
    covid = _load_category(root, "covid")
    non_covid = _load_category(root, "non_covid")

    stage_one = LabeledDataset(
        images=np.stack(healthy + covid + non_covid),
        labels=np.array([0] * len(healthy) + [1] * (len(covid) + len(non_covid))),
        category_names={0: "Healthy", 1: "Pneumonia"},
        stage=STAGE_ONE,
    )
    stage_two = LabeledDataset(
        images=np.stack(non_covid + covid),
        labels=np.array([0] * len(non_covid) + [1] * len(covid)),
        category_names={0: "Non-Covid Pneumonia", 1: "Covid Pneumonia"},
        stage=STAGE_TWO,
    )
    return stage_one, stage_two


# ---------------------------------------------------------------------------
# Split and client partitioning
# ---------------------------------------------------------------------------

def split_train_test(
    dataset: LabeledDataset, ratio: float = 0.8, seed: int = 0
) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified split: per class, a seeded shuffle then floor(ratio * n)
    examples into train and the rest into test."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    rng = np.random.default_rng(seed)
    train_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for label in sorted(np.unique(dataset.labels)):
        members = np.flatnonzero(dataset.labels == label)
        if members.size < 2:
            raise ValueError(
                f"class {label} has {members.size} example(s); need at least 2 to split"
            )
        perm = rng.permutation(members)
        k = int(ratio * members.size)
        train_parts.append(perm[:k])
        test_parts.append(perm[k:])
    return (
        dataset.subset(np.concatenate(train_parts)),
        dataset.subset(np.concatenate(test_parts)),
    )


@dataclass(frozen=True)
class PartitionScheme:
    """How the training set is divided among simulated clients.

    fractions[i] is client i's share of the training examples; they must
    be positive and sum to 1 (within 1e-9).  client_count is kept
    explicit so a config naming N clients is validated against the
    fraction list.
    """

    kind: str
    fractions: tuple[float, ...]
    client_count: int

    UNBALANCED = (0.30, 0.25, 0.20, 0.15, 0.10)

    def __post_init__(self) -> None:
        if self.client_count != len(self.fractions):
            raise ValueError(
                f"client_count {self.client_count} does not match "
                f"{len(self.fractions)} fractions"
            )
        if self.client_count < 1:
            raise ValueError("need at least one client")
        if any(f <= 0 for f in self.fractions):
            raise ValueError(f"fractions must be positive, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got sum {sum(self.fractions)}")

    @classmethod
    def balanced(cls, n_clients: int) -> "PartitionScheme":
        if n_clients < 1:
            raise ValueError("need at least one client")
        return cls("balanced", (1.0 / n_clients,) * n_clients, n_clients)

    @classmethod
    def unbalanced(cls) -> "PartitionScheme":
        """The fixed five-client 30/25/20/15/10 split."""
        return cls("unbalanced", cls.UNBALANCED, 5)


def partition_clients(
    train: LabeledDataset, scheme: PartitionScheme, seed: int
) -> list[LabeledDataset]:
    """Cut a seeded shuffle of the training set into contiguous client shards.

    Client i receives floor(fractions[i] * n) examples; the remainder is
    handed out one per client starting from the first.  Shards are
    disjoint and jointly cover the training set.
    """
    n = len(train)
    if n < scheme.client_count:
        raise ValueError(f"cannot split {n} examples across {scheme.client_count} clients")
    perm = np.random.default_rng(seed).permutation(n)
    # tiny slack so fractions like 0.3 * 70 floor to the intended integer
    sizes = [int(np.floor(f * n + 1e-9)) for f in scheme.fractions]
    for i in range(n - sum(sizes)):
        sizes[i] += 1
    shards = []
    start = 0
    for size in sizes:
        shards.append(train.subset(perm[start : start + size]))
        start += size
    return shards


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_GRID_Y, _GRID_X = np.mgrid[0:28, 0:28]

# Shape kinds used to assemble the synthetic tasks.  The stage-two shapes
# are rings so that the edge/blob detectors a model picks up on stage one
# stay useful when it is fine-tuned on stage two.
_CORNER_CENTERS = ((6.5, 6.5), (6.5, 21.5), (21.5, 6.5), (21.5, 21.5))


def _disc_mask(cy: float, cx: float, radius: float) -> np.ndarray:
    d2 = (_GRID_Y - cy) ** 2 + (_GRID_X - cx) ** 2
    return (d2 <= radius * radius).astype(np.float32)


def _annulus_mask(cy: float, cx: float, r_in: float, r_out: float) -> np.ndarray:
    d2 = (_GRID_Y - cy) ** 2 + (_GRID_X - cx) ** 2
    return ((d2 <= r_out * r_out) & (d2 >= r_in * r_in)).astype(np.float32)


def _synth_image(kind: str, rng: np.random.Generator) -> np.ndarray:
    cy = 13.5 + rng.uniform(-1.5, 1.5)
    cx = 13.5 + rng.uniform(-1.5, 1.5)
    if kind == "disc":
        mask = _disc_mask(cy, cx, 6.0 + rng.uniform(-1.0, 1.0))
    elif kind == "corners":
        dy = rng.uniform(-1.5, 1.5)
        dx = rng.uniform(-1.5, 1.5)
        radius = 3.2 + rng.uniform(-0.5, 0.5)
        mask = np.zeros((28, 28), dtype=np.float32)
        for by, bx in _CORNER_CENTERS:
            mask = np.maximum(mask, _disc_mask(by + dy, bx + dx, radius))
    elif kind == "thick_ring":
        r_out = 9.0 + rng.uniform(-0.8, 0.8)
        mask = _annulus_mask(cy, cx, 1.5 + rng.uniform(-0.5, 0.5), r_out)
    elif kind == "thin_ring":
        r_out = 9.0 + rng.uniform(-0.8, 0.8)
        mask = _annulus_mask(cy, cx, r_out - 1.2, r_out)
    else:
        raise ValueError(f"unknown synthetic shape kind {kind!r}")
    noise = rng.uniform(0.0, 0.1, size=(28, 28)).astype(np.float32)
    return np.clip(0.8 * mask + noise, 0.0, 1.0)


def synth_images(kind: str, count: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of synthetic images [count,1,28,28] of one shape kind."""
    return np.stack([_synth_image(kind, rng)[None, :, :] for _ in range(count)])


_TASK_SHAPES = {
    STAGE_ONE: (("disc", "solid-disc"), ("corners", "corner-blobs")),
    STAGE_TWO: (("thick_ring", "thick-ring"), ("thin_ring", "thin-ring")),
}


def synth_dataset(n_per_class: int, seed: int, task: str = STAGE_ONE) -> LabeledDataset:
    """Seeded synthetic dataset for one of the two task shapes.

    stage_one: class 0 is a centered bright disc, class 1 is four bright
    corner blobs.  stage_two: class 0 is a thick ring, class 1 a thin
    ring.  All images get uniform noise of amplitude 0.1 and stay in
    [0,1].  The same (n_per_class, seed, task) always returns the same
    data.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if task not in _TASK_SHAPES:
        raise ValueError(f"task must be one of {sorted(_TASK_SHAPES)}, got {task!r}")
    rng = np.random.default_rng(seed)
    (kind0, name0), (kind1, name1) = _TASK_SHAPES[task]
    class0 = synth_images(kind0, n_per_class, rng)
    class1 = synth_images(kind1, n_per_class, rng)
    return LabeledDataset(
        images=np.concatenate([class0, class1]),
        labels=np.array([0] * n_per_class + [1] * n_per_class),
        category_names={0: name0, 1: name1},
        stage=task,
    )
