"""ToyShift: a synthetic two-domain segmentation benchmark, plus dataset I/O.

Images hold 1-3 non-overlapping shapes (circle, square, triangle, striped bar)
on a textured background. Geometry and appearance come from separate RNG
streams, so a source and a target spec rendered with the same seed share their
label maps exactly and differ only in pixel statistics.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IGNORE = 255
CLASS_NAMES = ("background", "circle", "square", "triangle", "stripe-bar")
NUM_CLASSES = len(CLASS_NAMES)
DEFAULT_SIZE = 48
TENSOR_MAGIC = b"MXTN"
TENSOR_VERSION = 1
TARGET_ID_OFFSET = 100_000


class DatasetError(ValueError):
    """A dataset file is missing, truncated or malformed."""


@dataclass(frozen=True)
class Shape:
    cls: int
    cx: float
    cy: float
    size: float
    angle: float
    aspect: float = 1.0


@dataclass(frozen=True)
class DomainSpec:
    name: str
    palette: tuple[tuple[float, float, float], ...]
    color_jitter: float
    noise_sigma: float
    texture_freq: float
    texture_amp: float
    brightness: float = 0.0
    gain_range: float = 0.0
    shift_range: float = 0.0
    stripe_contrast: float = 0.3
    salt: int = 0
    size: int = DEFAULT_SIZE


SOURCE = DomainSpec(
    name="source",
    palette=((0.50, 0.50, 0.50), (0.90, 0.20, 0.20), (0.20, 0.80, 0.25),
             (0.20, 0.30, 0.90), (0.90, 0.85, 0.20)),
    color_jitter=0.04, noise_sigma=0.02, texture_freq=0.12, texture_amp=0.05,
    brightness=0.05, salt=11,
)

TARGET = DomainSpec(
    name="target",
    palette=((0.35, 0.40, 0.45), (0.85, 0.45, 0.15), (0.15, 0.65, 0.55),
             (0.55, 0.25, 0.75), (0.75, 0.75, 0.45)),
    color_jitter=0.06, noise_sigma=0.06, texture_freq=0.35, texture_amp=0.12,
    brightness=-0.05, gain_range=0.35, shift_range=0.12, salt=23,
)


@dataclass
class Sample:
    image: np.ndarray            # [3,H,W] float32 in [0,1]
    label: np.ndarray | None     # [H,W] uint8, None when withheld
    domain: str
    id: int

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        same_lbl = (self.label is None and other.label is None) or (
            self.label is not None and other.label is not None
            and np.array_equal(self.label, other.label))
        return (self.domain == other.domain and self.id == other.id and same_lbl
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))


@dataclass
class DatasetSplit:
    source: list[Sample]
    labeled_target: list[Sample]
    unlabeled_target: list[Sample]
    eval_target: list[Sample]
    hidden_labels: dict[int, np.ndarray] = field(default_factory=dict)
    manifest: dict[str, str] = field(default_factory=dict)

    def target_pool(self) -> list[Sample]:
        """Labeled + unlabeled target training samples, labels restored where known."""
        pool = [replace(s) for s in self.labeled_target]
        for s in self.unlabeled_target:
            pool.append(replace(s, label=self.hidden_labels.get(s.id)))
        return sorted(pool, key=lambda s: s.id)


# --------------------------------------------------------------------------
# geometry

def _geometry_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id, 0])


def _appearance_rng(spec: DomainSpec, seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id, 1, spec.salt])


def _bound_radius(s: Shape) -> float:
    if s.cls == 4:
        return s.size
    if s.cls == 2:
        return s.size * np.sqrt(2)
    return s.size


def sample_geometry(seed: int, sample_id: int, size: int = DEFAULT_SIZE) -> list[Shape]:
    rng = _geometry_rng(seed, sample_id)
    n_shapes = int(rng.integers(1, 4))
    shapes: list[Shape] = []
    for _ in range(n_shapes):
        for _attempt in range(100):
            cls = int(rng.integers(1, NUM_CLASSES))
            angle = float(rng.uniform(0, np.pi))
            aspect = 1.0
            if cls == 1:
                sz = float(rng.uniform(5.0, 9.0))
            elif cls == 2:
                sz = float(rng.uniform(4.0, 7.5))
            elif cls == 3:
                sz = float(rng.uniform(6.0, 10.5))
            else:
                sz = float(rng.uniform(10.0, 17.0))      # half length
                aspect = float(rng.uniform(0.15, 0.25))  # thickness / length
            cand = Shape(cls, 0.0, 0.0, sz, angle, aspect)
            r = _bound_radius(cand)
            lo, hi = r + 1.0, size - r - 1.0
            if hi <= lo:
                continue
            cand = replace(cand, cx=float(rng.uniform(lo, hi)), cy=float(rng.uniform(lo, hi)))
            if all(np.hypot(cand.cx - o.cx, cand.cy - o.cy) > r + _bound_radius(o) + 2.0
                   for o in shapes):
                shapes.append(cand)
                break
    return shapes


def shape_mask(s: Shape, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - s.cx, yy - s.cy
    c, sn = np.cos(s.angle), np.sin(s.angle)
    u, v = c * dx + sn * dy, -sn * dx + c * dy
    if s.cls == 1:
        return dx * dx + dy * dy <= s.size * s.size
    if s.cls == 2:
        return (np.abs(u) <= s.size) & (np.abs(v) <= s.size)
    if s.cls == 3:
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = s.angle + k * 2 * np.pi / 3
            inside &= (np.cos(a) * dx + np.sin(a) * dy) <= s.size / 2
        return inside
    return (np.abs(u) <= s.size) & (np.abs(v) <= s.size * s.aspect)


def rasterize(shapes: list[Shape], size: int = DEFAULT_SIZE) -> np.ndarray:
    label = np.zeros((size, size), dtype=np.uint8)
    for s in shapes:
        label[shape_mask(s, size)] = s.cls
    return label


# --------------------------------------------------------------------------
# appearance

def render(spec: DomainSpec, shapes: list[Shape], rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * spec.texture_freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    bg = np.asarray(spec.palette[0])[:, None, None] + rng.normal(0, spec.color_jitter, 3)[:, None, None]
    img = bg + spec.texture_amp * wave[None]
    for s in shapes:
        m = shape_mask(s, n)
        color = np.asarray(spec.palette[s.cls]) + rng.normal(0, spec.color_jitter, 3)
        fill = np.broadcast_to(color[:, None, None], (3, n, n)).copy()
        if s.cls == 4:
            c, sn = np.cos(s.angle), np.sin(s.angle)
            along = c * (xx - s.cx) + sn * (yy - s.cy)
            fill += spec.stripe_contrast * (np.sign(np.sin(along * np.pi / 2.5)) * 0.5)[None]
        img = np.where(m[None], fill, img)
    gains = 1.0 + rng.uniform(-spec.gain_range, spec.gain_range, 3) if spec.gain_range else np.ones(3)
    shift = rng.uniform(-spec.shift_range, spec.shift_range) if spec.shift_range else 0.0
    img = img * gains[:, None, None] + spec.brightness + shift
    img = img + rng.normal(0, spec.noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_domain(spec: DomainSpec, count: int, seed: int, first_id: int = 0) -> list[Sample]:
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    out = []
    for sid in range(first_id, first_id + count):
        shapes = sample_geometry(seed, sid, spec.size)
        label = rasterize(shapes, spec.size)
        image = render(spec, shapes, _appearance_rng(spec, seed, sid))
        out.append(Sample(image=image, label=label, domain=spec.name, id=sid))
    return out


def split_target(samples: list[Sample], n_labeled: int, seed: int
                 ) -> tuple[list[Sample], list[Sample], dict[int, np.ndarray]]:
    """Uniformly pick ``n_labeled`` samples to keep labels; withhold the rest.

    Returns (labeled, unlabeled-with-label=None, hidden labels by id).
    """
    count = len(samples)
    if not 0 < n_labeled < count:
        raise ValueError(f"need 0 < n_labeled < {count}, got {n_labeled}")
    rng = np.random.default_rng([seed, 7])
    chosen = set(rng.choice(count, size=n_labeled, replace=False).tolist())
    labeled, unlabeled, hidden = [], [], {}
    for k, s in enumerate(samples):
        if k in chosen:
            labeled.append(s)
        else:
            unlabeled.append(replace(s, label=None))
            if s.label is not None:
                hidden[s.id] = s.label
    return labeled, unlabeled, hidden


def make_split(n_source: int = 500, n_target: int = 500, n_eval: int = 100,
               n_labeled: int = 8, seed: int = 0, split_seed: int | None = None,
               size: int = DEFAULT_SIZE, source_spec: DomainSpec = SOURCE,
               target_spec: DomainSpec = TARGET) -> DatasetSplit:
    """Generate paired ToyShift domains and partition the target pool."""
    src_spec = replace(source_spec, size=size)
    tgt_spec = replace(target_spec, size=size)
    source = generate_domain(src_spec, n_source, seed, first_id=0)
    target = generate_domain(tgt_spec, n_target + n_eval, seed, first_id=TARGET_ID_OFFSET)
    pool, eval_target = target[:n_target], target[n_target:]
    split_seed = seed if split_seed is None else split_seed
    labeled, unlabeled, hidden = partition_pool(pool, n_labeled, split_seed)
    manifest = {
        "format": "mixseg-dataset-1", "seed": str(seed), "split_seed": str(split_seed),
        "size": str(size), "n_source": str(n_source), "n_target": str(n_target),
        "n_eval": str(n_eval), "n_labeled": str(len(labeled)), "num_classes": str(NUM_CLASSES),
        "source_spec": repr(src_spec), "target_spec": repr(tgt_spec),
    }
    return DatasetSplit(source, labeled, unlabeled, eval_target, hidden, manifest)


def partition_pool(pool: list[Sample], n_labeled: int, seed: int):
    """Like :func:`split_target` but also allows labelling the whole pool."""
    if n_labeled == len(pool):
        return list(pool), [], {}
    return split_target(pool, n_labeled, seed)


def resplit(split: DatasetSplit, n_labeled: int, seed: int) -> DatasetSplit:
    """Re-partition the target pool; needs hidden labels for every unlabeled sample."""
    missing = [s.id for s in split.unlabeled_target if s.id not in split.hidden_labels]
    if missing:
        raise DatasetError(
            f"cannot re-split: {len(missing)} unlabeled samples have no hidden label "
            "(export the dataset with --with-hidden-labels)")
    labeled, unlabeled, hidden = partition_pool(split.target_pool(), n_labeled, seed)
    manifest = dict(split.manifest, n_labeled=str(n_labeled), split_seed=str(seed))
    return DatasetSplit(split.source, labeled, unlabeled, split.eval_target, hidden, manifest)


def label_histogram(samples: list[Sample]) -> np.ndarray:
    counts = np.zeros(NUM_CLASSES, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=NUM_CLASSES)[:NUM_CLASSES]
    return counts


# --------------------------------------------------------------------------
# file formats

def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = TENSOR_MAGIC + struct.pack(f"<II{arr.ndim}I", TENSOR_VERSION, arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise DatasetError(f"{path}: bad magic {buf[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(buf) < 12:
        raise DatasetError(f"{path}: truncated header")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != TENSOR_VERSION:
        raise DatasetError(f"{path}: unsupported tensor version {version}")
    if len(buf) < 12 + 4 * rank:
        raise DatasetError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    start = 12 + 4 * rank
    need = 4 * int(np.prod(dims))
    if len(buf) - start != need:
        raise DatasetError(f"{path}: expected {need} data bytes, found {len(buf) - start}")
    return np.frombuffer(buf, dtype="<f4", offset=start).astype(np.float32).reshape(dims)


def to_rgb8(image: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint8."""
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    h, w = gray.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(gray, np.uint8).tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated netpbm header")
        fields.append(buf[start:pos])
    pos += 1
    if fields[0] != magic:
        raise DatasetError(f"{path}: expected {magic.decode()} header, got {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed netpbm header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit netpbm supported (maxval {maxval})")
    need = w * h * channels
    if len(buf) - pos != need:
        raise DatasetError(f"{path}: expected {need} pixel bytes, found {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


SUBDIRS = {
    "source": "source",
    "labeled_target": "target_labeled",
    "unlabeled_target": "target_unlabeled",
    "eval_target": "target_eval",
}


def save_dataset(split: DatasetSplit, directory, with_hidden_labels: bool = False) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for attr, sub in SUBDIRS.items():
        d = root / sub
        d.mkdir(exist_ok=True)
        for s in getattr(split, attr):
            stem = f"{s.id:04d}"
            write_tensor(d / f"{stem}.img", s.image)
            write_ppm(d / f"{stem}.ppm", to_rgb8(s.image))
            label = s.label
            if attr == "unlabeled_target":
                label = split.hidden_labels.get(s.id) if with_hidden_labels else None
            if label is not None:
                write_pgm(d / f"{stem}.pgm", label)
    manifest = dict(split.manifest, with_hidden_labels=str(bool(with_hidden_labels)).lower())
    text = "".join(f"{k} = {v}\n" for k, v in sorted(manifest.items()))
    (root / "manifest.txt").write_text(text)


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(directory) -> DatasetSplit:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory does not exist")
    manifest_path = root / "manifest.txt"
    if not manifest_path.exists():
        raise DatasetError(f"{manifest_path}: missing manifest")
    manifest = read_manifest(manifest_path)
    domains = {"source": "source"}
    parts: dict[str, list[Sample]] = {}
    hidden: dict[int, np.ndarray] = {}
    for attr, sub in SUBDIRS.items():
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"{d}: missing split directory")
        samples = []
        for img_path in sorted(d.glob("*.img")):
            sid = int(img_path.stem)
            image = read_tensor(img_path)
            lbl_path = img_path.with_suffix(".pgm")
            label = read_pgm(lbl_path) if lbl_path.exists() else None
            if label is not None and label.shape != image.shape[1:]:
                raise DatasetError(f"{lbl_path}: label shape {label.shape} != image {image.shape[1:]}")
            if attr == "unlabeled_target":
                if label is not None:
                    hidden[sid] = label
                label = None
            elif label is None:
                raise DatasetError(f"{lbl_path}: missing label file")
            samples.append(Sample(image, label, domains.get(attr, "target"), sid))
        parts[attr] = samples
    manifest.pop("with_hidden_labels", None)
    return DatasetSplit(parts["source"], parts["labeled_target"], parts["unlabeled_target"],
                        parts["eval_target"], hidden, manifest)
