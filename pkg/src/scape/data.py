"""Procedural keypoint categories, renders, and episodic sampling.

A category is a canonical keypoint layout (optionally with left/right mirrored
pairs about x = 0.5), a skeleton, and a marker style per keypoint. Mirrored
pairs share their marker style, so telling them apart needs the rest of the
object. Instances are similarity-transformed renders with optional occluders.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

IMAGE_SIZE = 64
MARKER_SHAPES = ("disk", "ring", "square", "plus", "cross", "diamond", "frame")
MARKER_LEVELS = (0.55, 0.7, 0.85, 1.0)
LIMB_LEVEL = 0.3
SYMMETRY_P = 0.7
MIN_K, MAX_K = 4, 10
MIN_SEPARATION = 0.1


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarkerStyle:
    shape: str
    level: float
    radius: float  # pixels at scale 1


@dataclass
class CategoryTemplate:
    category_id: int
    k: int
    canonical: np.ndarray  # [k, 2] (x, y) in [0, 1]
    edges: list[tuple[int, int]]
    symmetric_pairs: list[tuple[int, int]]
    styles: list[MarkerStyle]
    limb_width: float
    seed: int = 0

    @property
    def symmetric_mask(self) -> np.ndarray:
        m = np.zeros(self.k, dtype=bool)
        for a, b in self.symmetric_pairs:
            m[a] = m[b] = True
        return m


@dataclass
class Similarity:
    angle: float  # radians
    scale: float
    shift: np.ndarray  # [2]

    def apply(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        R = np.array([[c, -s], [s, c]])
        return (pts - 0.5) @ R.T * self.scale + 0.5 + self.shift

    def invert(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.angle), math.sin(self.angle)
        R = np.array([[c, -s], [s, c]])
        return (pts - 0.5 - self.shift) / self.scale @ R + 0.5


@dataclass
class Instance:
    image: np.ndarray  # [H, W] float in [0, 1]
    keypoints: np.ndarray  # [k, 2]
    visibility: np.ndarray  # [k] bool
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1 normalized
    category_id: int
    transform: Similarity | None = None

    @property
    def longest_side(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return max(x1 - x0, y1 - y0)


@dataclass
class Episode:
    supports: list[Instance]
    query: Instance
    normalizer: float
    symmetric: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def k(self) -> int:
        return len(self.query.keypoints)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        for inst in self.supports + [self.query]:
            for arr in (inst.image, inst.keypoints, inst.visibility.astype(np.uint8),
                        np.asarray(inst.bbox)):
                buf.write(np.ascontiguousarray(arr).tobytes())
        buf.write(np.float64(self.normalizer).tobytes())
        return buf.getvalue()


# ------------------------------------------------------------------ categories

def _distinct_points(rng, n, existing, lo=0.2, hi=0.8, tries=500):
    pts = list(existing)
    out = []
    for _ in range(n):
        for _ in range(tries):
            p = rng.uniform(lo, hi, 2)
            if all(np.hypot(*(p - q)) >= MIN_SEPARATION for q in pts):
                break
        else:
            raise DataError("could not place keypoints with the required separation")
        pts.append(p)
        out.append(p)
    return out


def generate_category(seed: int, category_id: int = 0, max_k: int = MAX_K) -> CategoryTemplate:
    """Deterministic category template for ``seed``."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(MIN_K, max(MIN_K, max_k) + 1))
    symmetric = rng.random() < SYMMETRY_P
    n_pairs = int(rng.integers(1, k // 2 + 1)) if symmetric else 0

    placed: list[np.ndarray] = []
    pairs_xy = []
    for _ in range(n_pairs):
        for _ in range(500):
            dx = rng.uniform(0.06, 0.3)
            y = rng.uniform(0.2, 0.8)
            left, right = np.array([0.5 - dx, y]), np.array([0.5 + dx, y])
            if all(min(np.hypot(*(left - q)), np.hypot(*(right - q))) >= MIN_SEPARATION
                   for q in placed):
                break
        else:
            raise DataError("could not place a mirrored pair")
        placed += [left, right]
        pairs_xy.append((left, right))
    # Unpaired keypoints keep off the mirror axis neighbourhood of existing
    # points; exact mirror coincidences have probability zero.
    singles = _distinct_points(rng, k - 2 * n_pairs, placed)

    order = rng.permutation(k)
    coords = np.zeros((k, 2))
    raw = [p for pair in pairs_xy for p in pair] + singles
    for slot, p in zip(order, raw):
        coords[slot] = p
    symmetric_pairs = [(int(order[2 * i]), int(order[2 * i + 1])) for i in range(n_pairs)]

    # Distinct styles per keypoint; mirrored pairs share one.
    n_styles = k - n_pairs
    combos = [(s, l) for s in MARKER_SHAPES for l in MARKER_LEVELS]
    pick = rng.choice(len(combos), size=n_styles, replace=False)
    radii = rng.uniform(2.5, 3.5, n_styles)
    style_list = [MarkerStyle(combos[i][0], combos[i][1], float(r)) for i, r in zip(pick, radii)]
    styles: list[MarkerStyle | None] = [None] * k
    for i, (a, b) in enumerate(symmetric_pairs):
        styles[a] = styles[b] = style_list[i]
    rest = iter(style_list[n_pairs:])
    for j in range(k):
        if styles[j] is None:
            styles[j] = next(rest)

    edges = _spanning_tree(rng, coords)
    if k > 3 and rng.random() < 0.5:
        a, b = rng.choice(k, 2, replace=False)
        if (a, b) not in edges and (b, a) not in edges:
            edges.append((int(a), int(b)))
    return CategoryTemplate(category_id, k, coords, edges, symmetric_pairs, styles,
                            limb_width=float(rng.uniform(0.8, 1.6)), seed=int(seed))


def _spanning_tree(rng, coords) -> list[tuple[int, int]]:
    k = len(coords)
    order = rng.permutation(k)
    edges = []
    for i in range(1, k):
        node = order[i]
        prev = order[:i]
        d = np.hypot(*(coords[prev] - coords[node]).T)
        # nearest of a random subset keeps skeletons varied but local
        cand = prev[np.argsort(d)[: max(1, min(2, i))]]
        edges.append((int(rng.choice(cand)), int(node)))
    return edges


# ------------------------------------------------------------------ rendering

def _marker_mask(shape: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    rr = np.hypot(dx, dy)
    if shape == "disk":
        return rr <= r
    if shape == "ring":
        return (rr <= r) & (rr >= r - 1.2)
    if shape == "square":
        return (ax <= r * 0.85) & (ay <= r * 0.85)
    if shape == "frame":
        m = max(r * 0.85, 1.5)
        return (ax <= m) & (ay <= m) & ((ax >= m - 1.1) | (ay >= m - 1.1))
    if shape == "plus":
        return ((ax <= 0.7) & (ay <= r)) | ((ay <= 0.7) & (ax <= r))
    if shape == "cross":
        return (np.abs(dx - dy) <= 1.0) & (np.abs(dx + dy) <= 2 * r) | \
               (np.abs(dx + dy) <= 1.0) & (np.abs(dx - dy) <= 2 * r)
    if shape == "diamond":
        return ax + ay <= r * 1.2
    raise ValueError(f"unknown marker shape {shape!r}")


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def _sample_transform(rng, canonical, margin_px, size, identity=False) -> Similarity:
    if identity:
        return Similarity(0.0, 1.0, np.zeros(2))
    margin = margin_px / size
    for _ in range(50):
        angle = math.radians(rng.uniform(-30.0, 30.0))
        scale = rng.uniform(0.7, 1.3)
        base = Similarity(angle, scale, np.zeros(2)).apply(canonical)
        lo = margin - base.min(axis=0)
        hi = 1.0 - margin - base.max(axis=0)
        if np.all(lo <= hi):
            return Similarity(angle, scale, rng.uniform(lo, hi))
    raise DataError("no similarity transform keeps the object in frame")


def render_instance(template: CategoryTemplate, seed: int, occlusion_p: float = 0.0,
                    size: int = IMAGE_SIZE, identity: bool = False, noise: float = 0.03,
                    limbs: bool = True) -> Instance:
    """Render one instance of ``template``; a pure function of its arguments."""
    if not 0.0 <= occlusion_p <= 0.5:
        raise ValueError(f"occlusion_p={occlusion_p} outside [0, 0.5]")
    rng = np.random.default_rng([template.seed, seed])
    max_r = max(s.radius for s in template.styles) * 1.3
    tf = _sample_transform(rng, template.canonical, max_r + 1.0, size, identity)
    kps = tf.apply(template.canonical)
    scale = tf.scale

    py, px = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.zeros((size, size))
    obj = np.zeros((size, size), dtype=bool)
    pix = kps * size
    if limbs:
        for a, b in template.edges:
            m = _segment_distance(px, py, pix[a], pix[b]) <= template.limb_width * 0.5 * scale + 0.25
            img[m] = LIMB_LEVEL
            obj |= m
    c, s = math.cos(-tf.angle), math.sin(-tf.angle)
    for j, style in enumerate(template.styles):
        dx, dy = px - pix[j, 0], py - pix[j, 1]
        # evaluate the marker in its own (unrotated) frame
        lx, ly = c * dx - s * dy, s * dx + c * dy
        m = _marker_mask(style.shape, lx, ly, style.radius * scale)
        img[m] = style.level
        obj |= m

    ys, xs = np.nonzero(obj)
    bbox = (xs.min() / size, ys.min() / size, (xs.max() + 1) / size, (ys.max() + 1) / size)

    vis = rng.random(template.k) >= occlusion_p
    occ_rng = np.random.default_rng([template.seed, seed, 1])
    for j in np.flatnonzero(~vis):
        half = template.styles[j].radius * scale + 2.0
        cx, cy = pix[j] + occ_rng.uniform(-2.0, 2.0, 2)
        m = (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)
        img[m] = 0.12 + 0.05 * occ_rng.random(int(m.sum()))
    if noise > 0:
        img = img + rng.normal(0.0, noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return Instance(img, kps, vis, bbox, template.category_id, tf)


# ------------------------------------------------------------------ dataset

SPLITS = ("train", "val", "test")


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.7 * n))
    n_val = int(round(0.1 * n))
    return n_train, n_val, n - n_train - n_val


def category_seed(root_seed: int, category_id: int) -> int:
    return int(np.random.SeedSequence([root_seed, category_id]).generate_state(1)[0])


@dataclass
class Dataset:
    """Categories with disjoint train/val/test splits, reproducible from
    ``(category_id, k, split, seed)`` records."""

    templates: dict[int, CategoryTemplate]
    splits: dict[str, list[int]]
    occlusion_p: float = 0.15
    image_size: int = IMAGE_SIZE

    @classmethod
    def generate(cls, n_categories: int, seed: int, occlusion_p: float = 0.15,
                 image_size: int = IMAGE_SIZE, max_k: int = MAX_K) -> "Dataset":
        if n_categories < 3:
            raise DataError("need at least 3 categories for three splits")
        order = np.random.default_rng(seed).permutation(n_categories)
        n_train, n_val, _ = split_sizes(n_categories)
        splits = {
            "train": sorted(int(c) for c in order[:n_train]),
            "val": sorted(int(c) for c in order[n_train:n_train + n_val]),
            "test": sorted(int(c) for c in order[n_train + n_val:]),
        }
        templates = {c: generate_category(category_seed(seed, c), c, max_k)
                     for c in range(n_categories)}
        return cls(templates, splits, occlusion_p, image_size)

    def manifest(self) -> str:
        split_of = {c: s for s, ids in self.splits.items() for c in ids}
        lines = ["category_id,k,split,seed"]
        for c in sorted(self.templates):
            t = self.templates[c]
            lines.append(f"{c},{t.k},{split_of[c]},{t.seed}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str, occlusion_p: float = 0.15,
                      image_size: int = IMAGE_SIZE, max_k: int = MAX_K) -> "Dataset":
        rows = [ln.split(",") for ln in text.strip().splitlines()[1:]]
        templates, splits = {}, {s: [] for s in SPLITS}
        for cid, k, split, seed in rows:
            t = generate_category(int(seed), int(cid), max_k)
            if t.k != int(k):
                raise DataError(f"manifest k={k} disagrees with regenerated category {cid}")
            templates[int(cid)] = t
            splits[split].append(int(cid))
        return cls(templates, {s: sorted(v) for s, v in splits.items()}, occlusion_p, image_size)

    def sample_episode(self, split: str, n_shot: int, rng: np.random.Generator) -> Episode:
        ids = self.splits.get(split)
        if not ids:
            raise DataError(f"split {split!r} is empty")
        t = self.templates[ids[int(rng.integers(len(ids)))]]
        return make_episode(t, rng, n_shot, self.occlusion_p, self.image_size)


def make_episode(template: CategoryTemplate, rng: np.random.Generator, n_shot: int = 1,
                 occlusion_p: float = 0.15, size: int = IMAGE_SIZE,
                 max_resample: int = 20) -> Episode:
    """Independent support and query renders of one category.

    Supports are re-rendered until every keypoint is visible in at least one
    of them; the last resort is an unoccluded render.
    """
    def draw(p=occlusion_p):
        return render_instance(template, int(rng.integers(2**31)), p, size)

    return assemble_episode(template, draw, n_shot, max_resample)


def assemble_episode(template: CategoryTemplate, draw, n_shot: int,
                     max_resample: int = 20) -> Episode:
    """Build an episode from ``draw(occlusion_p=None)`` instance draws."""
    if n_shot < 1:
        raise ValueError("n_shot must be >= 1")
    supports = [draw() for _ in range(n_shot)]
    for _ in range(max_resample):
        if np.any([s.visibility for s in supports], axis=0).all():
            break
        worst = int(np.argmin([s.visibility.sum() for s in supports]))
        supports[worst] = draw()
    else:
        supports[0] = draw(0.0)
    query = draw()
    return Episode(supports, query, query.longest_side, template.symmetric_mask)


class InstancePool:
    """Fixed per-category sets of pre-rendered instances.

    Rendering dominates episode cost, so training draws supports and queries
    from ``size`` cached renders per category (seeds ``0..size-1``) plus one
    unoccluded fallback.
    """

    def __init__(self, dataset: "Dataset", split: str, size: int = 64):
        self.dataset = dataset
        self.ids = dataset.splits[split]
        if not self.ids:
            raise DataError(f"split {split!r} is empty")
        self.size = size
        self._cache: dict[int, list[Instance]] = {}
        self._clean: dict[int, Instance] = {}

    def instances(self, cid: int) -> list[Instance]:
        if cid not in self._cache:
            t = self.dataset.templates[cid]
            self._cache[cid] = [render_instance(t, s, self.dataset.occlusion_p, self.dataset.image_size)
                                for s in range(self.size)]
            self._clean[cid] = render_instance(t, self.size, 0.0, self.dataset.image_size)
        return self._cache[cid]

    def sample(self, rng: np.random.Generator, n_shot: int = 1) -> Episode:
        cid = self.ids[int(rng.integers(len(self.ids)))]
        pool = self.instances(cid)

        def draw(p=None):
            return self._clean[cid] if p == 0.0 else pool[int(rng.integers(len(pool)))]

        return assemble_episode(self.dataset.templates[cid], draw, n_shot)


# ------------------------------------------------------------------ export

def write_pgm(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def export_instance(inst: Instance, stem) -> None:
    """Write ``<stem>.pgm`` and ``<stem>.csv`` (x, y, visible per keypoint)."""
    write_pgm(f"{stem}.pgm", inst.image)
    with open(f"{stem}.csv", "w") as f:
        f.write("x,y,visible\n")
        for (x, y), v in zip(inst.keypoints, inst.visibility):
            f.write(f"{x:.9f},{y:.9f},{int(v)}\n")
