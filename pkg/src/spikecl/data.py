"""Dataset ingestion, task-stream construction, and spike encoding.

Two scenario families are built here:

* split digit classification -- ten classes partitioned into five two-class
  tasks (task-incremental). Sources: IDX files on disk (the published MNIST
  container format), or a procedurally rendered digit corpus for fully
  offline, deterministic runs.
* synthetic cross-day drift -- an eight-class stream whose feature
  distribution rotates a little every "day" (domain-incremental), standing
  in for long-term neural recordings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation, FormatError
from .rng import RngStream

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803

SCENARIOS = ("task-incremental", "domain-incremental")
ENCODER_KINDS = ("rate-poisson", "direct-repeat")

DEFAULT_SPLIT_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))


# ---------------------------------------------------------------------------
# IDX container


@dataclass
class IdxFile:
    """Decoded IDX payload: unsigned-byte tensor plus its dimension sizes."""

    magic: int
    dims: tuple[int, ...]
    data: np.ndarray  # uint8, flattened


def load_idx(path) -> IdxFile:
    """Parse a big-endian IDX file (unsigned-byte element type only)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_MAGIC_LABELS, IDX_MAGIC_IMAGES):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise FormatError(
            f"{path}: payload size {len(raw) - header} does not match dims {dims}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=header).copy()
    return IdxFile(magic, dims, data)


def serialize_idx(idx: IdxFile) -> bytes:
    """Inverse of load_idx; byte-exact for well-formed files."""
    out = struct.pack(">I", idx.magic)
    out += struct.pack(f">{len(idx.dims)}I", *idx.dims)
    return out + idx.data.astype(np.uint8).tobytes()


def write_idx(path, idx: IdxFile) -> None:
    with open(path, "wb") as f:
        f.write(serialize_idx(idx))


def load_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Load a paired image/label set; pixels scaled to [0, 1] by /255."""
    img = load_idx(images_path)
    lab = load_idx(labels_path)
    if img.magic != IDX_MAGIC_IMAGES:
        raise FormatError(f"{images_path}: not an IDX image file")
    if lab.magic != IDX_MAGIC_LABELS:
        raise FormatError(f"{labels_path}: not an IDX label file")
    if img.dims[0] != lab.dims[0]:
        raise FormatError(
            f"image count {img.dims[0]} != label count {lab.dims[0]}"
        )
    n = img.dims[0]
    features = img.data.reshape(n, -1).astype(np.float64) / 255.0
    return features, lab.data.astype(np.int64)


# ---------------------------------------------------------------------------
# Task streams


@dataclass
class Task:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    orig_classes: tuple[int, ...]
    n_classes: int


@dataclass
class TaskStream:
    scenario: str
    tasks: list[Task]
    feature_dim: int

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ContractViolation(f"scenario must be one of {SCENARIOS}")
        seen: set[int] = set()
        for task in self.tasks:
            classes = set(task.orig_classes)
            if self.scenario == "task-incremental":
                if classes & seen:
                    raise ContractViolation("task-incremental class sets must be disjoint")
                seen |= classes
            else:
                if task.orig_classes != self.tasks[0].orig_classes:
                    raise ContractViolation("domain-incremental tasks must share one class set")

    def __len__(self) -> int:
        return len(self.tasks)


def _balanced_subset(x: np.ndarray, y: np.ndarray, cap: int | None):
    """First-k-per-class deterministic subset (order preserved)."""
    if cap is None or len(y) <= cap:
        return x, y
    classes = np.unique(y)
    per = cap // len(classes)
    keep = np.zeros(len(y), dtype=bool)
    for c in classes:
        idx = np.flatnonzero(y == c)[:per]
        keep[idx] = True
    extra = cap - int(keep.sum())
    if extra > 0:
        for i in np.flatnonzero(~keep):
            keep[i] = True
            extra -= 1
            if extra == 0:
                break
    return x[keep], y[keep]


def build_split_stream(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    pairs=DEFAULT_SPLIT_PAIRS,
    train_cap: int | None = None,
    test_cap: int | None = None,
) -> TaskStream:
    """Partition a ten-class set into two-class tasks with local labels 0/1."""
    present = set(np.unique(train_y)) & set(np.unique(test_y))
    tasks = []
    for pair in pairs:
        missing = [c for c in pair if c not in present]
        if missing:
            raise ConfigurationError(f"classes {missing} missing from the dataset")
        tr = np.isin(train_y, pair)
        te = np.isin(test_y, pair)
        remap = {c: i for i, c in enumerate(pair)}
        tr_y = np.array([remap[c] for c in train_y[tr]], dtype=np.int64)
        te_y = np.array([remap[c] for c in test_y[te]], dtype=np.int64)
        tx, ty = _balanced_subset(train_x[tr], tr_y, train_cap)
        vx, vy = _balanced_subset(test_x[te], te_y, test_cap)
        tasks.append(
            Task(
                name="digits-" + "-".join(str(c) for c in pair),
                train_x=tx,
                train_y=ty,
                test_x=vx,
                test_y=vy,
                orig_classes=tuple(pair),
                n_classes=len(pair),
            )
        )
    return TaskStream("task-incremental", tasks, train_x.shape[1])


# ---------------------------------------------------------------------------
# Procedural digit corpus (offline stand-in routed through the same pipeline)

# stroke skeletons per digit on a unit canvas, x right / y down
def _ellipse(cx, cy, rx, ry, n=12, start=0.0, end=2 * np.pi):
    ang = np.linspace(start, end, n + 1)
    pts = np.stack([cx + rx * np.cos(ang), cy + ry * np.sin(ang)], axis=1)
    return [(pts[i], pts[i + 1]) for i in range(n)]


def _poly(*pts):
    pts = [np.asarray(p, dtype=np.float64) for p in pts]
    return [(pts[i], pts[i + 1]) for i in range(len(pts) - 1)]


_DIGIT_STROKES = {
    0: _ellipse(0.5, 0.5, 0.24, 0.34),
    1: _poly((0.36, 0.26), (0.52, 0.12), (0.52, 0.88)),
    2: _poly((0.3, 0.3), (0.36, 0.16), (0.62, 0.15), (0.7, 0.3), (0.3, 0.84), (0.72, 0.84)),
    3: _poly((0.3, 0.18), (0.6, 0.15), (0.7, 0.3), (0.52, 0.47), (0.7, 0.64), (0.6, 0.84), (0.3, 0.8)),
    4: _poly((0.6, 0.12), (0.27, 0.6), (0.76, 0.6)) + _poly((0.6, 0.12), (0.6, 0.88)),
    5: _poly((0.7, 0.14), (0.33, 0.14), (0.31, 0.45), (0.6, 0.42), (0.71, 0.6), (0.6, 0.84), (0.3, 0.8)),
    6: _poly((0.64, 0.13), (0.42, 0.36), (0.32, 0.6)) + _ellipse(0.5, 0.66, 0.19, 0.19),
    7: _poly((0.28, 0.16), (0.72, 0.15), (0.44, 0.86)),
    8: _ellipse(0.5, 0.31, 0.19, 0.17) + _ellipse(0.5, 0.67, 0.22, 0.2),
    9: _ellipse(0.52, 0.34, 0.19, 0.19) + _poly((0.7, 0.36), (0.62, 0.86)),
}

_CANVAS = 28
_PIX = None


def _pixel_grid():
    global _PIX
    if _PIX is None:
        ax = (np.arange(_CANVAS) + 0.5) / _CANVAS
        xx, yy = np.meshgrid(ax, ax)
        _PIX = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return _PIX


def _render_digits(digit: int, n: int, rng: RngStream) -> np.ndarray:
    """(n, 784) grayscale digits: jittered affine transforms of the stroke
    skeleton, rasterized as soft distance fields.

    Distortions (heavy affine jitter, occasional missing strokes, distractor
    marks, brightness spread, speckle) are deliberately strong enough that
    pair discrimination needs learned shape features rather than raw ink
    statistics -- sequential training then actually contests the trunk.
    """
    segs = _DIGIT_STROKES[digit]
    a0 = np.array([s[0] for s in segs])  # (S, 2)
    b0 = np.array([s[1] for s in segs])
    angle = (rng.uniform((n,)) - 0.5) * (np.pi / 4.5)
    scale = 0.75 + 0.45 * rng.uniform((n,))
    shear = (rng.uniform((n,)) - 0.5) * 0.4
    shift = (rng.uniform((n, 2)) - 0.5) * 0.18
    rot = np.empty((n, 2, 2))
    rot[:, 0, 0] = np.cos(angle)
    rot[:, 0, 1] = -np.sin(angle)
    rot[:, 1, 0] = np.sin(angle) + shear
    rot[:, 1, 1] = np.cos(angle)
    rot *= scale[:, None, None]
    center = np.array([0.5, 0.5])
    a = np.einsum("sj,nij->nsi", a0 - center, rot) + center + shift[:, None, :]
    b = np.einsum("sj,nij->nsi", b0 - center, rot) + center + shift[:, None, :]

    # drop a stroke now and then; add up to two distractor marks
    seg_keep = rng.uniform((n, a.shape[1])) >= 0.06
    n_distract = 2
    da = rng.uniform((n, n_distract, 2)) * 0.84 + 0.08
    db = da + (rng.uniform((n, n_distract, 2)) - 0.5) * 0.3
    d_on = rng.uniform((n, n_distract)) < 0.45
    a = np.concatenate([a, da], axis=1)
    b = np.concatenate([b, db], axis=1)
    keep = np.concatenate([seg_keep, d_on], axis=1)

    pix = _pixel_grid()  # (P, 2)
    d = b - a  # (n, S, 2)
    length2 = np.maximum((d * d).sum(axis=2), 1e-12)  # (n, S)
    min_d2 = np.full((n, pix.shape[0]), np.inf)
    for s in range(d.shape[1]):  # segment loop keeps temporaries at (n, P, 2)
        ap = pix[None, :, :] - a[:, None, s, :]
        ds = d[:, None, s, :]
        t = np.clip((ap * ds).sum(axis=2) / length2[:, None, s], 0.0, 1.0)
        diff = ap - t[:, :, None] * ds
        d2 = (diff * diff).sum(axis=2)
        d2[~keep[:, s], :] = np.inf
        np.minimum(min_d2, d2, out=min_d2)
    dist = np.sqrt(np.minimum(min_d2, 4.0))

    thickness = 0.025 + 0.028 * rng.uniform((n,))
    img = np.clip(1.2 - dist / thickness[:, None], 0.0, 1.0)
    img *= (0.6 + 0.4 * rng.uniform((n,)))[:, None]
    img += rng.normal(img.shape) * 0.04
    np.clip(img, 0.0, 1.0, out=img)
    # quantize like the 8-bit container so on-disk and in-memory paths agree
    return np.round(img * 255.0) / 255.0


_CORPUS_CACHE: dict[tuple, tuple] = {}


def generate_digit_corpus(
    train_per_class: int = 1500,
    test_per_class: int = 300,
    seed: int = 90210,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic rendered digit dataset (train_x, train_y, test_x, test_y)."""
    key = (train_per_class, test_per_class, seed)
    if key in _CORPUS_CACHE:
        return _CORPUS_CACHE[key]
    root = RngStream(seed)
    sets = []
    for split, per in (("train", train_per_class), ("test", test_per_class)):
        xs = np.empty((10 * per, _CANVAS * _CANVAS))
        ys = np.empty(10 * per, dtype=np.int64)
        for digit in range(10):
            stream = root.fork(f"{split}/digit{digit}")
            done = 0
            while done < per:  # chunked to bound the (n, P, S) temporaries
                n = min(256, per - done)
                lo = digit * per + done
                xs[lo : lo + n] = _render_digits(digit, n, stream)
                ys[lo : lo + n] = digit
                done += n
        order = root.fork(f"{split}/order").permutation(len(ys))
        sets.append((xs[order], ys[order]))
    result = (*sets[0], *sets[1])
    _CORPUS_CACHE[key] = result
    return result


def corpus_to_idx(xs: np.ndarray, ys: np.ndarray) -> tuple[IdxFile, IdxFile]:
    """Package a rendered corpus as IDX image/label files."""
    n = len(ys)
    img = IdxFile(
        IDX_MAGIC_IMAGES,
        (n, _CANVAS, _CANVAS),
        np.round(xs * 255.0).astype(np.uint8).ravel(),
    )
    lab = IdxFile(IDX_MAGIC_LABELS, (n,), ys.astype(np.uint8))
    return img, lab


# ---------------------------------------------------------------------------
# Synthetic cross-day drift stream


@dataclass
class DriftSpec:
    days: int = 7
    classes: int = 8
    features: int = 64
    train_per_day: int = 400
    test_per_day: int = 200
    theta_deg: float = 10.0
    p_drop: float = 0.05
    noise: float = 0.12
    proto_low: float = 0.35
    proto_spread: float = 0.3
    planes: int | None = None  # random 2-D subspaces under drift; default features // 2

    def __post_init__(self):
        if self.days < 1:
            raise ContractViolation("days must be >= 1")


def _day_rotation(features: int, planes: int, theta: float, rng: RngStream) -> np.ndarray:
    """Orthogonal matrix rotating `planes` random disjoint 2-D subspaces."""
    perm = rng.permutation(features)
    rot = np.eye(features)
    c, s = np.cos(theta), np.sin(theta)
    for k in range(planes):
        i, j = int(perm[2 * k]), int(perm[2 * k + 1])
        block = np.eye(features)
        block[i, i] = c
        block[i, j] = -s
        block[j, i] = s
        block[j, j] = c
        rot = block @ rot
    return rot


def build_synthetic_drift(spec: DriftSpec, seed: int) -> TaskStream:
    """Domain-incremental stream: day 1 draws class prototypes; each later
    day advances a coherent rotation of the feature space (fixed random 2-D
    subspaces, one more angle increment per day) and drops a few channels.

    Every day re-presents the same seeded base trials under that day's
    cumulative drift (like repeating one behavioral task across sessions),
    so zero drift makes all days bit-identical. Coherent accumulation,
    rather than freshly random directions per day, is what makes the drift
    unbounded: relative distribution shift grows with day distance.
    """
    rng = RngStream(seed).fork("drift")
    d = spec.features
    planes = spec.planes if spec.planes is not None else d // 2
    protos = spec.proto_low + spec.proto_spread * rng.fork("prototypes").uniform(
        (spec.classes, d)
    )
    theta = np.deg2rad(spec.theta_deg)
    day_rot = _day_rotation(d, planes, theta, rng.fork("planes")) if theta != 0.0 else np.eye(d)

    rotation = np.eye(d)
    tasks = []
    classes = tuple(range(spec.classes))
    for day in range(1, spec.days + 1):
        if day > 1 and theta != 0.0:
            rotation = day_rot @ rotation
        if spec.p_drop > 0:
            keep = 1.0 - rng.fork(f"drop/day{day}").bernoulli(spec.p_drop, (d,))
        else:
            keep = np.ones(d)

        def draw(n, tag):
            s = rng.fork(tag)
            labels = s.fork("labels").integers(n, spec.classes)
            x = protos[labels] + spec.noise * s.fork("noise").normal((n, d))
            x = (x - 0.5) @ rotation.T + 0.5
            x *= keep
            return np.clip(x, 0.0, 1.0), labels

        train_x, train_y = draw(spec.train_per_day, "train")
        test_x, test_y = draw(spec.test_per_day, "test")
        tasks.append(
            Task(
                name=f"day-{day}",
                train_x=train_x,
                train_y=train_y,
                test_x=test_x,
                test_y=test_y,
                orig_classes=classes,
                n_classes=spec.classes,
            )
        )
    return TaskStream("domain-incremental", tasks, d)


def export_drift_csv(stream: TaskStream, out_dir) -> list[str]:
    """Per-day CSV dump (feature columns + label) for cross-checking."""
    import os

    paths = []
    for i, task in enumerate(stream.tasks, start=1):
        path = os.path.join(out_dir, f"drift_day{i}.csv")
        with open(path, "w") as f:
            cols = [f"f{j}" for j in range(task.train_x.shape[1])] + ["label"]
            f.write(",".join(cols) + "\n")
            for x, y in zip(task.train_x, task.train_y):
                f.write(",".join(repr(v) for v in x) + f",{int(y)}\n")
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Spike encoding


@dataclass
class EncoderSpec:
    kind: str = "rate-poisson"
    timesteps: int = 10
    max_rate: float = 1.0

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ContractViolation(f"encoder kind must be one of {ENCODER_KINDS}")
        if self.timesteps < 1:
            raise ContractViolation("timesteps must be >= 1")
        if not (0.0 < self.max_rate <= 1.0):
            raise ContractViolation("max_rate must be in (0, 1]")


def encode(features: np.ndarray, spec: EncoderSpec, rng: RngStream | None = None) -> np.ndarray:
    """Spike train (T, n) for one sample. rate-poisson draws each step with
    probability feature * max_rate; direct-repeat thresholds at 0.5 and
    repeats (consuming no randomness)."""
    f = np.asarray(features, dtype=np.float64)
    if np.any(f < 0.0) or np.any(f > 1.0):
        raise ContractViolation("features must lie in [0, 1]")
    if spec.kind == "direct-repeat":
        row = (f >= 0.5).astype(np.float64)
        return np.tile(row, (spec.timesteps, 1))
    if rng is None:
        raise ContractViolation("rate-poisson encoding requires an rng stream")
    return rng.bernoulli(f * spec.max_rate, (spec.timesteps, f.size))


def encode_batch(features: np.ndarray, spec: EncoderSpec, rng: RngStream | None = None) -> np.ndarray:
    """Spike trains (B, T, n) for a batch, one contiguous draw block."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2:
        raise ContractViolation("batch features must be 2-D")
    if np.any(f < 0.0) or np.any(f > 1.0):
        raise ContractViolation("features must lie in [0, 1]")
    B, n = f.shape
    if spec.kind == "direct-repeat":
        rows = (f >= 0.5).astype(np.float64)
        return np.repeat(rows[:, None, :], spec.timesteps, axis=1)
    if rng is None:
        raise ContractViolation("rate-poisson encoding requires an rng stream")
    p = np.broadcast_to((f * spec.max_rate)[:, None, :], (B, spec.timesteps, n))
    return rng.bernoulli(p, (B, spec.timesteps, n))
