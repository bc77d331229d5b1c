"""Datasets, splits, augmentation, frame windows and synthetic video.

On-disk layout (one directory per sequence)::

    root/<sequence>/frames/000000.png
    root/<sequence>/annotations.jsonl   {"frame": "000000.png", "points": [[x, y], ...]}
    root/<sequence>/roi.png             optional, nonzero = inside
    root/<sequence>/meta.json           optional, {"fps": ...}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .density import HeadAnnotations

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(Exception):
    """Base class for dataset loading problems."""


class NoSequencesError(DatasetError):
    pass


class MissingFrameError(DatasetError):
    pass


class MalformedAnnotationError(DatasetError):
    pass


class OutOfBoundsError(DatasetError):
    pass


@dataclass
class Sequence:
    name: str
    annotations: list[HeadAnnotations]
    frame_names: list[str]
    width: int
    height: int
    images: np.ndarray | None = None  # (T, H, W, 3) uint8, when held in memory
    frame_dir: Path | None = None
    roi: np.ndarray | None = None
    fps: float | None = None

    def __len__(self) -> int:
        return len(self.annotations)

    def image(self, i: int) -> np.ndarray:
        """Frame ``i`` as float32 ``H x W x 3`` in ``[0, 1]``."""
        if self.images is not None:
            raw = self.images[i]
        else:
            raw = np.asarray(Image.open(self.frame_dir / self.frame_names[i]).convert("RGB"))
        return raw.astype(np.float32) / 255.0

    def counts(self) -> np.ndarray:
        return np.array([len(a) for a in self.annotations], dtype=np.float64)

    def subset(self, indices) -> "Sequence":
        idx = list(indices)
        return Sequence(
            name=self.name,
            annotations=[self.annotations[i] for i in idx],
            frame_names=[self.frame_names[i] for i in idx],
            width=self.width,
            height=self.height,
            images=None if self.images is None else self.images[idx],
            frame_dir=self.frame_dir,
            roi=self.roi,
            fps=self.fps,
        )


@dataclass
class Dataset:
    sequences: list[Sequence]
    name: str = "dataset"

    def __len__(self) -> int:
        return sum(len(s) for s in self.sequences)

    def frames(self):
        """Iterate ``(sequence, local_index)`` over every frame in order."""
        for seq in self.sequences:
            for i in range(len(seq)):
                yield seq, i


# ---------------------------------------------------------------------------
# loading and writing
# ---------------------------------------------------------------------------


def _frame_sort_key(name: str):
    stem = Path(name).stem
    return (0, int(stem), name) if stem.isdigit() else (1, 0, name)


def _load_sequence(d: Path) -> Sequence:
    ann_path = d / "annotations.jsonl"
    frame_dir = d / "frames"
    if not ann_path.is_file():
        raise MalformedAnnotationError(f"missing annotations file: {ann_path}")
    if not frame_dir.is_dir():
        raise MissingFrameError(f"missing frames directory: {frame_dir}")
    records = []
    for lineno, line in enumerate(ann_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name = str(rec["frame"])
            pts = np.asarray(rec["points"], dtype=np.float64)
            if pts.size and (pts.ndim != 2 or pts.shape[1] != 2):
                raise ValueError("points must be a list of [x, y] pairs")
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedAnnotationError(f"{ann_path}:{lineno}: {exc}") from exc
        records.append((name, pts.reshape(-1, 2)))
    if not records:
        raise MalformedAnnotationError(f"{ann_path} has no records")
    records.sort(key=lambda r: _frame_sort_key(r[0]))
    names = [r[0] for r in records]
    if len(set(names)) != len(names):
        raise MalformedAnnotationError(f"{ann_path}: duplicate frame names")
    for n in names:
        if not (frame_dir / n).is_file():
            raise MissingFrameError(f"frame {n} listed in {ann_path} not found in {frame_dir}")
    with Image.open(frame_dir / names[0]) as im:
        width, height = im.size
    anns = []
    for name, pts in records:
        try:
            anns.append(HeadAnnotations(pts, width, height))
        except ValueError as exc:
            raise OutOfBoundsError(f"{d.name}/{name}: {exc}") from exc
    roi = None
    if (d / "roi.png").is_file():
        roi = (np.asarray(Image.open(d / "roi.png").convert("L")) != 0).astype(np.uint8)
    fps = None
    if (d / "meta.json").is_file():
        fps = json.loads((d / "meta.json").read_text()).get("fps")
    return Sequence(d.name, anns, names, width, height, frame_dir=frame_dir, roi=roi, fps=fps)


def load_dataset(root, fmt: str = "canonical") -> Dataset:
    """Load every sequence directory under ``root``."""
    if fmt != "canonical":
        raise ValueError(f"unsupported dataset format {fmt!r}; only 'canonical' is built in")
    root = Path(root)
    if not root.is_dir():
        raise NoSequencesError(f"dataset root {root} does not exist")
    if (root / "annotations.jsonl").exists():
        dirs = [root]
    else:
        dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise NoSequencesError(f"no sequences under {root}")
    return Dataset([_load_sequence(d) for d in dirs], name=root.name)


def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    for seq in ds.sequences:
        d = root / seq.name
        (d / "frames").mkdir(parents=True, exist_ok=True)
        with open(d / "annotations.jsonl", "w") as fh:
            for i, (name, ann) in enumerate(zip(seq.frame_names, seq.annotations)):
                img = (np.clip(seq.image(i), 0, 1) * 255).round().astype(np.uint8)
                Image.fromarray(img).save(d / "frames" / name)
                fh.write(json.dumps({"frame": name, "points": ann.points.tolist()}) + "\n")
        if seq.roi is not None:
            Image.fromarray((seq.roi != 0).astype(np.uint8) * 255).save(d / "roi.png")
        if seq.fps is not None:
            (d / "meta.json").write_text(json.dumps({"fps": seq.fps}))
    return root


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class SplitSpec:
    """Half-open ``[start, stop)`` ranges over the dataset-wide frame index.

    Sequences are concatenated in order to form the global index.  ``test``
    of ``None`` means "every frame not in train".
    """

    train: list[tuple[int, int]]
    test: list[tuple[int, int]] | None = None
    name: str = "custom"

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        test = d.get("test")
        return cls(
            [tuple(r) for r in d["train"]],
            None if test is None else [tuple(r) for r in test],
            d.get("name", "custom"),
        )


# first 800 frames train, remaining 1,200 test
MALL_SPLIT = SplitSpec([(0, 800)], [(800, 2000)], "mall")
# frames 601-1400 (1-based) train, the rest test
UCSD_SPLIT = SplitSpec([(600, 1400)], None, "ucsd")
ALL_TRAIN = SplitSpec([(0, 1 << 62)], [], "all-train")


def _mask_from_ranges(ranges, n: int) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    for start, stop in ranges:
        if start < 0 or stop < start:
            raise ValueError(f"bad range {(start, stop)}")
        m[start:stop] = True
    return m


def _take(ds: Dataset, mask: np.ndarray, tag: str) -> Dataset:
    out = []
    offset = 0
    for seq in ds.sequences:
        local = np.flatnonzero(mask[offset : offset + len(seq)])
        offset += len(seq)
        if not len(local):
            continue
        # split into contiguous runs so temporal windows stay inside a run
        breaks = np.flatnonzero(np.diff(local) != 1) + 1
        for j, run in enumerate(np.split(local, breaks)):
            sub = seq.subset(run)
            if len(breaks):
                sub.name = f"{seq.name}#{j}"
            out.append(sub)
    return Dataset(out, name=f"{ds.name}:{tag}")


def apply_split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    n = len(ds)
    train = _mask_from_ranges(spec.train, n)
    if spec.test is None:
        test = ~train
    else:
        test = _mask_from_ranges(spec.test, n)
        if (train & test).any():
            raise ValueError(f"split {spec.name!r}: train and test ranges overlap")
    return _take(ds, train, "train"), _take(ds, test, "test")


# ---------------------------------------------------------------------------
# augmentation and windows
# ---------------------------------------------------------------------------


def _crop_points(ann: HeadAnnotations, x0: int, y0: int, pw: int, ph: int) -> HeadAnnotations:
    p = ann.points
    keep = (p[:, 0] >= x0) & (p[:, 0] < x0 + pw) & (p[:, 1] >= y0) & (p[:, 1] < y0 + ph)
    return HeadAnnotations(p[keep] - [x0, y0], pw, ph)


def mirror(image: np.ndarray, ann: HeadAnnotations):
    pts = ann.points.copy()
    pts[:, 0] = ann.image_w - 1 - pts[:, 0]
    return image[:, ::-1].copy(), HeadAnnotations(pts, ann.image_w, ann.image_h)


def augment_patches(image: np.ndarray, ann: HeadAnnotations, rng: np.random.Generator):
    """Four quadrants, five random crops (all half-size per axis), plus mirrors.

    Returns 18 ``(patch, annotations)`` pairs: the nine crops followed by
    their horizontal mirrors.
    """
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"image too small to augment: {image.shape}")
    ph, pw = h // 2, w // 2
    origins = [(0, 0), (pw, 0), (0, ph), (pw, ph)]
    origins += [
        (int(rng.integers(0, w - pw + 1)), int(rng.integers(0, h - ph + 1))) for _ in range(5)
    ]
    crops = [
        (image[y0 : y0 + ph, x0 : x0 + pw].copy(), _crop_points(ann, x0, y0, pw, ph))
        for x0, y0 in origins
    ]
    return crops + [mirror(img, a) for img, a in crops]


def window_indices(t: int, k: int, n: int) -> list[int]:
    """``2k+1`` frame indices centred on ``t``, edge frames replicated."""
    if not 0 <= t < n:
        raise IndexError(f"frame {t} outside sequence of length {n}")
    return [min(max(t + dt, 0), n - 1) for dt in range(-k, k + 1)]


def make_window(maps, t: int, k: int):
    """Stack the density maps of the window around ``t``: ``(2k+1, M, N)``."""
    idx = window_indices(t, k, len(maps))
    return np.stack([np.asarray(getattr(maps[i], "grid", maps[i])) for i in idx])


# ---------------------------------------------------------------------------
# synthetic video
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    walkers: int = 12
    speed: float = 1.0
    noise: float = 0.0
    noise_prob: float = 1.0
    frames: int = 60
    size: tuple[int, int] = (128, 128)  # (height, width)
    seed: int = 0
    blob_sigma: float = 2.5
    margin: float = 6.0
    name: str = "synth"
    fps: float = 25.0

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        d = json.loads(text)
        if "size" in d:
            d["size"] = tuple(d["size"])
        return cls(**d)


def _background(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    base = rng.uniform(0.45, 0.65, size=3).astype(np.float32)
    fx, fy = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi
    shade = 0.08 * np.sin(fx * xx / w + fy * yy / h).astype(np.float32)
    return base[None, None, :] + shade[..., None]


def synth_video(spec: SynthSpec | None = None, **kw) -> Dataset:
    """Dark Gaussian blobs walking on bouncing straight lines.

    Every walker stays at least ``margin`` pixels inside the frame, so each
    frame's annotation count equals ``walkers``.  With ``noise > 0`` each
    frame is, with probability ``noise_prob``, corrupted by zero-mean
    Gaussian pixel noise of that std.
    """
    spec = spec or SynthSpec(**kw)
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    lo = np.array([spec.margin, spec.margin])
    hi = np.array([w - 1 - spec.margin, h - 1 - spec.margin])
    pos = rng.uniform(lo, hi, size=(spec.walkers, 2))
    ang = rng.uniform(0, 2 * np.pi, size=spec.walkers)
    vel = spec.speed * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    tint = rng.uniform(0.05, 0.25, size=(spec.walkers, 3)).astype(np.float32)
    bg = _background(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    images = np.empty((spec.frames, h, w, 3), dtype=np.uint8)
    anns = []
    for t in range(spec.frames):
        img = bg.copy()
        for (x, y), c in zip(pos, tint):
            r = int(np.ceil(4 * spec.blob_sigma))
            x0, x1 = max(int(x) - r, 0), min(int(x) + r + 1, w)
            y0, y1 = max(int(y) - r, 0), min(int(y) + r + 1, h)
            g = np.exp(
                -((xx[y0:y1, x0:x1] - x) ** 2 + (yy[y0:y1, x0:x1] - y) ** 2)
                / (2 * spec.blob_sigma**2)
            )
            patch = img[y0:y1, x0:x1]
            img[y0:y1, x0:x1] = patch * (1 - g[..., None]) + c * g[..., None]
        if spec.noise > 0 and rng.random() < spec.noise_prob:
            img = img + rng.normal(0, spec.noise, size=img.shape).astype(np.float32)
        images[t] = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
        anns.append(HeadAnnotations(pos.copy(), w, h))
        pos = pos + vel
        for ax in range(2):
            low, high = pos[:, ax] < lo[ax], pos[:, ax] > hi[ax]
            pos[low, ax] = 2 * lo[ax] - pos[low, ax]
            pos[high, ax] = 2 * hi[ax] - pos[high, ax]
            vel[low | high, ax] *= -1
    names = [f"{t:06d}.png" for t in range(spec.frames)]
    seq = Sequence(spec.name, anns, names, w, h, images=images, fps=spec.fps)
    return Dataset([seq], name=spec.name)
