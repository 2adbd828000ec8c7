"""Re-ID image ingestion, the synthetic desk-scale dataset, and PK batch sampling.

Directory layout follows the Market-1501 convention::

    root/
      bounding_box_train/   0001_c1s1_000151_00.png ...
      query/
      bounding_box_test/

Filenames start with ``<pid>_c<camid>``. A negative pid (``-1_c3...``) marks a
distractor/junk image and is dropped at ingestion.
"""
from __future__ import annotations

import colorsys
import logging
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
SPLIT_DIRS = {
    "train": "bounding_box_train",
    "query": "query",
    "gallery": "bounding_box_test",
}
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
FILENAME_PATTERN = re.compile(r"^(-?\d+)_c(\d+)")


@dataclass
class ImageRecord:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    pid: int
    camid: int
    split: str
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got shape {self.image.shape}")
        if self.image.shape[0] <= 0 or self.image.shape[1] <= 0:
            raise ValueError("image must have positive height and width")
        if self.pid < 0:
            raise ValueError(f"pid must be non-negative, got {self.pid}")
        if self.camid < 0:
            raise ValueError(f"camid must be non-negative, got {self.camid}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class BatchPlan:
    indices: list[int]
    num_identities: int
    instances_per_identity: int
    pids: list[int] = field(default_factory=list)

    def __post_init__(self):
        expected = self.num_identities * self.instances_per_identity
        if len(self.indices) != expected:
            raise ValueError(f"batch plan has {len(self.indices)} indices, expected {expected}")
        if self.pids:
            counts = defaultdict(int)
            for pid in self.pids:
                counts[pid] += 1
            if len(counts) != self.num_identities or any(
                c != self.instances_per_identity for c in counts.values()
            ):
                raise ValueError("batch plan violates the P x K identity structure")


def parse_reid_filename(name: str) -> tuple[int, int] | None:
    """Return ``(pid, camid)`` for a ``<pid>_c<camid>...`` filename, else None."""
    match = FILENAME_PATTERN.match(name)
    if match is None:
        return None
    return int(match.group(1)), int(match.group(2))


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def scan_reid_directory(root: str | Path, split: str) -> list[ImageRecord]:
    """Load every parseable image of one split, sorted by filename.

    ``root`` is the dataset root holding the three split directories.
    """
    if split not in SPLIT_DIRS:
        raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
    directory = Path(root) / SPLIT_DIRS[split]
    if not directory.is_dir():
        raise FileNotFoundError(f"re-ID split directory not found: {directory}")

    records = []
    for path in sorted(directory.iterdir(), key=lambda p: p.name):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parsed = parse_reid_filename(path.name)
        if parsed is None:
            logger.warning("skipping %s: filename does not match <pid>_c<cam>", path)
            continue
        pid, camid = parsed
        if pid < 0:
            continue
        records.append(ImageRecord(load_image(path), pid, camid, split, path.name))

    if not records:
        raise ValueError(f"no parseable re-ID images in {directory}")
    return records


def write_reid_directory(root: str | Path, splits: dict[str, list[ImageRecord]]) -> Path:
    """Write records as lossless PNGs in the layout ``scan_reid_directory`` reads."""
    root = Path(root)
    for split, records in splits.items():
        directory = root / SPLIT_DIRS[split]
        directory.mkdir(parents=True, exist_ok=True)
        for rec in records:
            pixels = np.clip(np.rint(rec.image * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(directory / rec.name)
    return root


# --- synthetic desk-scale dataset -------------------------------------------


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _identity_signature(index: int, grid: int) -> dict:
    # Three body parts; any two of (a, b, (a + b) mod grid) recover the identity.
    a, b = divmod(index, grid)
    c = (a + b) % grid
    return {
        "torso": _hsv(a / grid, 0.85, 0.9),
        "legs": _hsv(b / grid + 0.5 / grid, 0.8, 0.6),
        "hair": _hsv(c / grid + 0.25 / grid, 0.65, 0.75),
        "pattern": (a + 2 * b) % 3,
        "build": 0.5 + 0.12 * ((a + b) % 2),
    }


def _background(rng: np.random.Generator, H: int, W: int) -> np.ndarray:
    base = rng.uniform(0.25, 0.65, size=3).astype(np.float32)
    base = base * 0.6 + base.mean() * 0.4  # desaturate
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)
    kind = rng.integers(3)
    if kind == 0:
        direction = rng.uniform(-1, 1, size=2)
        ramp = (yy / H * direction[0] + xx / W * direction[1])[..., None]
        img = base + 0.15 * ramp * rng.uniform(-1, 1, size=3).astype(np.float32)
    elif kind == 1:
        period = rng.uniform(4, 12)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (yy if rng.integers(2) else xx) / period + phase)[..., None]
        img = base + 0.06 * wave
    else:
        coarse = rng.uniform(-0.1, 0.1, size=(max(H // 8, 1), max(W // 8, 1), 3))
        img = base + np.kron(coarse, np.ones((8, 8, 1)))[:H, :W].astype(np.float32)
        img = np.pad(img, ((0, H - img.shape[0]), (0, W - img.shape[1]), (0, 0)), mode="edge")
    return img.astype(np.float32)


def _draw_person(img: np.ndarray, sig: dict, rng: np.random.Generator) -> None:
    H, W = img.shape[:2]
    dy = rng.integers(-max(H // 32, 1), max(H // 32, 1) + 1)
    dx = rng.integers(-max(W // 16, 1), max(W // 16, 1) + 1)
    scale = rng.uniform(0.92, 1.05)
    cx = W / 2 + dx
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float32)

    def rows(frac):
        return H * (0.5 + (frac - 0.5) * scale) + dy

    half_w = W * sig["build"] / 2 * scale
    # head: hair on top, face below
    hy, hr_y, hr_x = rows(0.13), H * 0.09 * scale, W * 0.17 * scale
    head = ((yy - hy) / hr_y) ** 2 + ((xx - cx) / hr_x) ** 2 <= 1.0
    img[head & (yy < hy)] = sig["hair"]
    img[head & (yy >= hy)] = np.array([0.92, 0.76, 0.62], dtype=np.float32)

    top, mid, bottom = rows(0.24), rows(0.56), rows(0.95)
    torso = (yy >= top) & (yy < mid) & (np.abs(xx - cx) <= half_w)
    img[torso] = sig["torso"]
    if sig["pattern"] == 1:
        stripes = torso & ((yy - top).astype(int) // max(H // 32, 1) % 2 == 0)
        img[stripes] = sig["torso"] * 0.45
    elif sig["pattern"] == 2:
        band = torso & (np.abs(xx - cx) <= half_w * 0.3)
        img[band] = sig["torso"] * 0.45

    gap = max(W * 0.05, 1.0) * (1.0 + rng.uniform(0, 1.5))
    leg_w = half_w * 0.8
    legs = (yy >= mid) & (yy < bottom) & (np.abs(xx - cx) >= gap / 2) & (np.abs(xx - cx) <= gap / 2 + leg_w)
    img[legs] = sig["legs"]


def _camera_tint(camid: int) -> np.ndarray:
    tints = {
        1: (1.0, 1.0, 1.0),
        2: (1.06, 1.0, 0.92),
        3: (0.92, 0.97, 1.06),
        4: (0.95, 0.95, 0.95),
    }
    return np.array(tints[(camid - 1) % 4 + 1], dtype=np.float32)


def _query_occluder(img: np.ndarray, rng: np.random.Generator) -> None:
    """Object-like occluders: near-achromatic textured blocks and bars.

    No figure wears these colours or textures and training backgrounds are
    smooth, so the family never appears before test time.
    """
    H, W = img.shape[:2]
    kind = rng.integers(3)
    if kind == 0:  # horizontal band spanning the width (car, railing)
        h = int(round(H * rng.uniform(0.15, 0.3)))
        top = rng.integers(int(H * 0.2), H - h + 1)
        region = (slice(top, top + h), slice(0, W))
    elif kind == 1:  # vertical block from one side (pole, signboard)
        w = int(round(W * rng.uniform(0.3, 0.5)))
        h = int(round(H * rng.uniform(0.4, 0.7)))
        top = rng.integers(0, H - h + 1)
        left = 0 if rng.integers(2) else W - w
        region = (slice(top, top + h), slice(left, left + w))
    else:  # lower-body block (bag, bench)
        h = int(round(H * rng.uniform(0.2, 0.35)))
        w = int(round(W * rng.uniform(0.5, 0.9)))
        left = rng.integers(0, W - w + 1)
        region = (slice(H - h, H), slice(left, left + w))
    block = img[region]
    bh, bw = block.shape[:2]
    light, dark = rng.uniform(0.75, 0.95), rng.uniform(0.1, 0.3)
    tint = 1.0 + rng.uniform(-0.08, 0.08, size=3).astype(np.float32)
    yy, xx = np.mgrid[0:bh, 0:bw]
    cell = max(H // 16, 2)
    if rng.integers(2):
        on = ((yy + xx) // cell) % 2 == 0  # diagonal hatch
    else:
        on = ((yy // cell) + (xx // cell)) % 2 == 0  # checker
    block[...] = np.where(on[..., None], light, dark) * tint


# the 16-identity desk dataset used by the acceptance experiment and the CLI default
DESK_DATASET = dict(num_ids=16, per_id=40, image_size=(64, 32), seed=7)


def make_synthetic_dataset(
    num_ids: int,
    per_id: int,
    image_size: tuple[int, int] = (64, 32),
    seed: int = 0,
) -> tuple[list[ImageRecord], list[ImageRecord], list[ImageRecord]]:
    """Procedurally drawn pedestrians for desk-scale experiments.

    Each identity has a unique (hair, torso, legs) colour signature; any two
    visible parts determine the identity. Query images carry object-like
    occluders that never appear in training. Query images come from camera 1,
    gallery images from cameras 2-4, so every query has valid matches.
    """
    if num_ids < 2:
        raise ValueError(f"num_ids must be >= 2, got {num_ids}")
    if per_id < 4:
        raise ValueError(f"per_id must be >= 4, got {per_id}")
    H, W = image_size
    if H < 16 or W < 8:
        raise ValueError(f"image_size must be at least 16x8, got {image_size}")

    rng = np.random.default_rng(seed)
    grid = math.ceil(math.sqrt(num_ids))
    signatures = [_identity_signature(i, grid) for i in range(num_ids)]

    n_query = max(1, per_id // 10)
    n_gallery = max(1, (per_id * 3) // 10)
    n_train = per_id - n_query - n_gallery

    splits = {s: [] for s in SPLITS}
    counters = {s: 0 for s in SPLITS}
    for pid in range(1, num_ids + 1):
        sig = signatures[pid - 1]
        plan = ["train"] * n_train + ["query"] * n_query + ["gallery"] * n_gallery
        for split in plan:
            if split == "query":
                camid = 1
            elif split == "gallery":
                camid = int(rng.integers(2, 5))
            else:
                camid = int(rng.integers(1, 5))
            img = _background(rng, H, W)
            _draw_person(img, sig, rng)
            img *= _camera_tint(camid)
            if split == "query":
                _query_occluder(img, rng)
            img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
            img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0
            counters[split] += 1
            name = f"{pid:04d}_c{camid}s1_{counters[split]:06d}_00.png"
            splits[split].append(ImageRecord(img, pid, camid, split, name))

    for records in splits.values():
        records.sort(key=lambda r: r.name)
    return splits["train"], splits["query"], splits["gallery"]


# --- PK sampling --------------------------------------------------------------


def _group_by_pid(pids) -> dict[int, list[int]]:
    groups = defaultdict(list)
    for idx, pid in enumerate(pids):
        groups[int(pid)].append(idx)
    return dict(groups)


def _draw_instances(indices: list[int], K: int, rng: np.random.Generator) -> list[int]:
    if len(indices) >= K:
        chosen = rng.choice(len(indices), size=K, replace=False)
    else:
        chosen = rng.choice(len(indices), size=K, replace=True)
    return [indices[i] for i in chosen]


def pk_sample(records, P: int, K: int, rng: np.random.Generator) -> BatchPlan:
    """Draw one batch of ``P`` distinct identities with ``K`` instances each.

    ``records`` may be ImageRecords or bare pids. Identities with fewer than
    ``K`` images are sampled with replacement.
    """
    pids = [r.pid if isinstance(r, ImageRecord) else int(r) for r in records]
    groups = _group_by_pid(pids)
    if len(groups) < P:
        raise ValueError(f"need at least {P} identities, found {len(groups)}")
    keys = sorted(groups)
    chosen = rng.choice(len(keys), size=P, replace=False)
    indices = []
    for c in chosen:
        indices.extend(_draw_instances(groups[keys[c]], K, rng))
    return BatchPlan(indices, P, K, [pids[i] for i in indices])


class PKSampler:
    """Stateful PK sampler that visits every identity before repeating one."""

    def __init__(self, pids, P: int, K: int, seed: int = 0):
        self.pids = [int(p) for p in pids]
        self.groups = _group_by_pid(self.pids)
        if len(self.groups) < P:
            raise ValueError(f"need at least {P} identities, found {len(self.groups)}")
        self.P = P
        self.K = K
        self.rng = np.random.default_rng(seed)
        self._queue: list[int] = []

    def _permutation(self) -> list[int]:
        keys = sorted(self.groups)
        return [keys[i] for i in self.rng.permutation(len(keys))]

    def next_batch(self) -> BatchPlan:
        if len(self._queue) < self.P:
            head = list(self._queue)
            fresh = self._permutation()
            fill = [p for p in fresh if p not in head][: self.P - len(head)]
            rest = [p for p in fresh if p not in fill]
            self._queue = head + fill + rest
        selected, self._queue = self._queue[: self.P], self._queue[self.P:]
        indices = []
        for pid in selected:
            indices.extend(_draw_instances(self.groups[pid], self.K, self.rng))
        return BatchPlan(indices, self.P, self.K, [self.pids[i] for i in indices])

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "queue": list(self._queue)}

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._queue = [int(p) for p in state["queue"]]


def records_to_array(records: list[ImageRecord]) -> np.ndarray:
    """Stack record images into an ``N x 3 x H x W`` float32 array."""
    return np.stack([r.image.transpose(2, 0, 1) for r in records]).astype(np.float32)
