"""Synthetic fine-grained dataset, split protocol and folder ingestion.

Each class is a petal-shaped family (``r(phi) = 1 + amp * cos(n * phi)``)
filled with a striped texture. Classes that share a family differ only in
stripe orientation, stripe frequency and hue, all scaled by the subtlety
``delta``. The object sits on a noisy background cluttered with smaller
decoys that copy the shape and texture of random classes, so without
knowing where the object is the image is ambiguous.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import NetpbmError, read_pnm, to_bytes, write_pnm
from .saliency import load_map, resize_bilinear

log = logging.getLogger(__name__)

N_TEST = 5
N_VAL = 5
MIN_IMAGE_SIZE = 16
INDEX_HEADER = ["image", "label", "mask", "bbox", "saliency"]


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 20
    samples_per_class: int = 40
    height: int = 64
    width: int = 64
    subtlety: float = 0.35
    clutter: float = 0.3
    seed: int = 0
    families: int = 4
    family_offset: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DataError("num_classes must be >= 1")
        if self.samples_per_class < N_TEST + N_VAL + 1:
            raise DataError(
                f"samples_per_class must be >= {N_TEST + N_VAL + 1} "
                f"({N_TEST} test + {N_VAL} val + 1 train), got {self.samples_per_class}"
            )
        if not 0.0 < self.subtlety <= 1.0:
            raise DataError(f"subtlety must lie in (0,1], got {self.subtlety}")
        if not 0.0 <= self.clutter < 1.0:
            raise DataError(f"clutter must lie in [0,1), got {self.clutter}")
        if self.families < 1:
            raise DataError("families must be >= 1")
        if min(self.height, self.width) < MIN_IMAGE_SIZE:
            raise DataError(
                f"image {self.height}x{self.width} too small for the minimum foreground "
                f"(need >= {MIN_IMAGE_SIZE})"
            )


def base_task_spec(target: DatasetSpec, num_classes: int = 50, samples_per_class: int = 100,
                   families: int = 10) -> DatasetSpec:
    """Abundant pretraining task: same image size, disjoint shape families."""
    return DatasetSpec(
        num_classes=num_classes,
        samples_per_class=samples_per_class,
        height=target.height,
        width=target.width,
        subtlety=1.0,
        clutter=target.clutter,
        seed=target.seed + 7919,
        families=families,
        family_offset=target.family_offset + target.families,
    )


@dataclass
class Sample:
    image: np.ndarray           # [3, H, W] in [0, 1]
    label: int
    mask: np.ndarray            # [H, W] bool
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    saliency: np.ndarray | None = None
    name: str = ""


@dataclass
class SplitPlan:
    test: dict[int, list[int]]
    val: dict[int, list[int]]
    pool: dict[int, list[int]]

    @property
    def classes(self) -> list[int]:
        return sorted(self.pool)

    def test_ids(self) -> list[int]:
        return [i for c in self.classes for i in self.test[c]]

    def val_ids(self) -> list[int]:
        return [i for c in self.classes for i in self.val[c]]

    def max_k(self) -> int:
        return min(len(p) for p in self.pool.values())


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise DataError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


# -- rendering -------------------------------------------------------------

def _family_shape(family: int) -> tuple[int, float, float]:
    petals = 3 + family % 6
    amp = 0.12 + 0.12 * ((family // 6) % 3)
    aspect = 1.0 - 0.15 * ((family // 18) % 3)
    return petals, amp, aspect


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


@dataclass(frozen=True)
class _Look:
    petals: int
    amp: float
    aspect: float
    angle: float       # stripe orientation, radians
    freq: float        # stripe cycles per object diameter
    color_a: np.ndarray = field(compare=False)
    color_b: np.ndarray = field(compare=False)


def class_look(spec: DatasetSpec, label: int) -> _Look:
    family = spec.family_offset + label % spec.families
    variant = label // spec.families
    variants = -(-spec.num_classes // spec.families)
    petals, amp, aspect = _family_shape(family)
    frac = variant / max(variants, 1)
    d = spec.subtlety
    angle = (0.37 * family) % np.pi + d * np.pi * frac
    freq = 3.0 + d * 2.5 * frac
    hue = (0.13 * family + 0.25 * d * frac) % 1.0
    return _Look(
        petals, amp, aspect, angle, freq,
        _hsv_to_rgb(hue, 0.75, 0.95),
        _hsv_to_rgb((hue + 0.5) % 1.0, 0.6, 0.35),
    )


def _shape_mask(xx, yy, cx, cy, radius, rot, petals, amp, aspect):
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(rot) + dy * np.sin(rot)) / radius
    v = (-dx * np.sin(rot) + dy * np.cos(rot)) / (radius * aspect)
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    return rho <= (1.0 + amp * np.cos(petals * phi)) / (1.0 + amp)


def _stripes(xx, yy, angle, cycles, diameter, phase, color_a, color_b):
    t = (xx * np.cos(angle) + yy * np.sin(angle)) * (2 * np.pi * cycles / diameter) + phase
    s = 0.5 + 0.5 * np.sin(t)
    return color_a[:, None, None] * s + color_b[:, None, None] * (1.0 - s)


def render_sample(spec: DatasetSpec, label: int, index: int) -> Sample:
    """Render one sample; its randomness depends only on (seed, label, index)."""
    rng = np.random.default_rng([spec.seed, label, index])
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = min(h, w)

    base = rng.uniform(0.25, 0.6, size=3)
    img = base[:, None, None] + 0.06 * rng.standard_normal((3, h, w))

    # object footprint first so clutter can be measured on the background
    look = class_look(spec, label)
    radius = size * rng.uniform(0.2, 0.3)
    reach = radius * 1.0
    cx = rng.uniform(reach, w - 1 - reach)
    cy = rng.uniform(reach, h - 1 - reach)
    rot = rng.uniform(0, 2 * np.pi)
    fg = _shape_mask(xx, yy, cx, cy, radius, rot, look.petals, look.amp, look.aspect)
    if fg.sum() < 4:
        raise DataError("foreground too small")

    covered = np.zeros((h, w), dtype=bool)
    background = ~fg
    target = spec.clutter * background.sum()
    attempts = 0
    n_covered = 0
    while n_covered < target and attempts < 200:
        attempts += 1
        dr = size * rng.uniform(0.08, 0.16)
        dcx, dcy = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        # decoys borrow the look of a random class, so only location tells them apart
        decoy = class_look(spec, int(rng.integers(spec.num_classes)))
        ys = slice(max(0, int(dcy - dr)), min(h, int(dcy + dr) + 2))
        xs = slice(max(0, int(dcx - dr)), min(w, int(dcx + dr) + 2))
        wx, wy = xx[ys, xs], yy[ys, xs]
        dmask = _shape_mask(wx, wy, dcx, dcy, dr, rng.uniform(0, 2 * np.pi),
                            decoy.petals, decoy.amp, decoy.aspect)
        tex = _stripes(wx, wy, decoy.angle + rng.normal(0, 0.03), decoy.freq, 2 * dr,
                       rng.uniform(0, 2 * np.pi), decoy.color_a, decoy.color_b)
        img[:, ys, xs] = np.where(dmask[None], tex, img[:, ys, xs])
        fresh = dmask & ~covered[ys, xs]
        n_covered += int((fresh & background[ys, xs]).sum())
        covered[ys, xs] |= dmask

    jitter = rng.uniform(0.9, 1.1)
    tex = _stripes(xx, yy, look.angle + rng.normal(0, 0.03), look.freq, 2 * radius,
                   rng.uniform(0, 2 * np.pi), look.color_a * jitter, look.color_b * jitter)
    img = np.where(fg[None], tex, img)
    img = to_bytes(img).astype(np.float64) / 255.0
    return Sample(img, label, fg, tight_bbox(fg), name=f"c{label:03d}_{index:04d}")


def make_split(labels, seed: int) -> SplitPlan:
    """Fix 5 test and 5 validation ids per class; the rest form the pool."""
    labels = np.asarray(labels)
    test, val, pool = {}, {}, {}
    for c in np.unique(labels):
        ids = np.flatnonzero(labels == c)
        if len(ids) < N_TEST + N_VAL + 1:
            raise DataError(f"class {c} has {len(ids)} samples, need >= {N_TEST + N_VAL + 1}")
        order = ids[np.random.default_rng([seed, int(c), 1]).permutation(len(ids))]
        c = int(c)
        test[c] = sorted(int(i) for i in order[:N_TEST])
        val[c] = sorted(int(i) for i in order[N_TEST:N_TEST + N_VAL])
        pool[c] = [int(i) for i in order[N_TEST + N_VAL:]]
    return SplitPlan(test, val, pool)


def generate(spec: DatasetSpec) -> tuple[list[Sample], SplitPlan]:
    spec.validate()
    samples = [
        render_sample(spec, c, i)
        for c in range(spec.num_classes)
        for i in range(spec.samples_per_class)
    ]
    return samples, make_split([s.label for s in samples], spec.seed)


def subset(plan: SplitPlan, k, seed: int) -> list[int]:
    """First ``k`` ids of a seeded shuffle of every class pool.

    ``k`` may be ``"K"`` for the whole pool. Subsets are nested in ``k``.
    """
    out: list[int] = []
    for c in plan.classes:
        pool = plan.pool[c]
        if k == "K":
            take = len(pool)
        else:
            take = int(k)
            if take < 1 or take > len(pool):
                raise DataError(f"k={take} exceeds the pool of class {c} ({len(pool)} samples)")
        order = np.random.default_rng([seed, c, 2]).permutation(len(pool))
        out.extend(pool[i] for i in order[:take])
    return out


# -- disk format -----------------------------------------------------------

def format_bbox(bbox) -> str:
    return ":".join(str(int(v)) for v in bbox)


def parse_bbox(text: str) -> tuple[int, int, int, int]:
    parts = text.split(":")
    if len(parts) != 4:
        raise DataError(f"bbox {text!r} is not x0:y0:x1:y1")
    return tuple(int(p) for p in parts)


def write_dataset(samples: list[Sample], root) -> Path:
    """Write P6 images, P5 masks and ``index.csv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    rows = []
    for s in samples:
        img_rel = f"images/{s.name}.ppm"
        mask_rel = f"masks/{s.name}.pgm"
        write_pnm(root / img_rel, to_bytes(s.image.transpose(1, 2, 0)))
        write_pnm(root / mask_rel, np.where(s.mask, 255, 0).astype(np.uint8))
        rows.append([img_rel, str(s.label), mask_rel, format_bbox(s.bbox), ""])
    write_index(root / "index.csv", rows)
    return root / "index.csv"


def write_index(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        writer.writerows(rows)


def read_index(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"index file missing: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != INDEX_HEADER:
            raise DataError(f"{path}: header must be {','.join(INDEX_HEADER)}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            row = [c.strip() for c in row] + [""] * (len(INDEX_HEADER) - len(row))
            if len(row) > len(INDEX_HEADER) or not row[0] or not row[1]:
                raise DataError(f"{path}:{line_no}: malformed row")
            rows.append(row)
    return rows


def _resize_image(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.stack([np.clip(resize_bilinear(ch, h, w), 0.0, 1.0) for ch in img])


def ingest_folder(root, size: tuple[int, int] | None = None) -> list[Sample]:
    """Load samples listed in ``root/index.csv``.

    Missing masks fall back to the bbox rectangle, or the whole image.
    """
    root = Path(root)
    rows = read_index(root / "index.csv")
    samples = []
    for image_rel, label_text, mask_rel, bbox_text, sal_rel in rows:
        path = root / image_rel
        if not path.exists():
            raise DataError(f"missing image file: {path}")
        try:
            pixels = read_pnm(path)
        except NetpbmError as exc:
            raise DataError(f"corrupt image file {path}: {exc}") from exc
        if pixels.ndim != 3:
            raise DataError(f"{path}: expected a P6 colour image")
        img = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
        h0, w0 = img.shape[1:]
        h, w = size if size is not None else (h0, w0)
        if (h, w) != (h0, w0):
            img = _resize_image(img, h, w)
        try:
            label = int(label_text)
        except ValueError:
            raise DataError(f"{path}: bad label {label_text!r}") from None

        if mask_rel:
            mpath = root / mask_rel
            if not mpath.exists():
                raise DataError(f"missing mask file: {mpath}")
            try:
                m = read_pnm(mpath)
            except NetpbmError as exc:
                raise DataError(f"corrupt mask file {mpath}: {exc}") from exc
            mask = m > 127
            if mask.shape != (h, w):
                mask = resize_bilinear(mask.astype(np.float64), h, w) >= 0.5
        elif bbox_text:
            x0, y0, x1, y1 = parse_bbox(bbox_text)
            sx, sy = w / w0, h / h0
            mask = np.zeros((h, w), dtype=bool)
            mask[int(y0 * sy):int(np.ceil((y1 + 1) * sy)), int(x0 * sx):int(np.ceil((x1 + 1) * sx))] = True
        else:
            mask = np.ones((h, w), dtype=bool)
        if not mask.any():
            raise DataError(f"{path}: empty foreground mask")

        saliency = None
        if sal_rel:
            spath = root / sal_rel
            if not spath.exists():
                raise DataError(f"missing saliency file: {spath}")
            saliency = load_map(spath, (h, w))
        samples.append(Sample(img, label, mask, tight_bbox(mask), saliency, Path(image_rel).stem))

    labels = sorted({s.label for s in samples})
    if labels != list(range(len(labels))):
        raise DataError(f"{root / 'index.csv'}: labels must be 0..{len(labels) - 1} without gaps, got {labels}")
    return samples
