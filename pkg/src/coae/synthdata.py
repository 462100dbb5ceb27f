"""Procedural one-shot detection benchmark.

Classes are (shape, color, texture) triples rendered as small anti-aliased
glyphs onto noisy backgrounds. Everything is a pure function of (seed,
image id), backed by the pinned xorshift64* generator below so shuffles and
scenes are reproducible across platforms.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "bar")
TEXTURES = ("solid", "stripes", "dots")
PALETTE = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.90),
    "yellow": (0.90, 0.85, 0.15),
    "magenta": (0.85, 0.20, 0.80),
    "cyan": (0.15, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
    "lime": (0.60, 0.95, 0.15),
    "teal": (0.10, 0.55, 0.50),
    "violet": (0.55, 0.25, 0.90),
    "pink": (0.95, 0.60, 0.70),
    "olive": (0.55, 0.55, 0.15),
    "sky": (0.45, 0.70, 0.95),
    "crimson": (0.70, 0.10, 0.30),
    "gold": (0.80, 0.65, 0.20),
    "navy": (0.10, 0.10, 0.55),
    "brown": (0.55, 0.33, 0.12),
    "mint": (0.60, 0.95, 0.75),
    "salmon": (0.98, 0.45, 0.40),
    "purple": (0.45, 0.10, 0.55),
    "steel": (0.45, 0.55, 0.65),
}


class DataConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pinned PRNG: xorshift64* seeded through splitmix64


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def mix_seed(*parts: int) -> int:
    acc = 0x243F6A8885A308D3
    for p in parts:
        acc = _splitmix64(acc ^ (int(p) & 0xFFFFFFFFFFFFFFFF))
    return acc


class XorShift:
    """xorshift64* with a splitmix64-derived nonzero state."""

    def __init__(self, seed: int):
        self.state = _splitmix64(int(seed) & 0xFFFFFFFFFFFFFFFF) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= (x >> 12)
        x ^= (x << 25) & 0xFFFFFFFFFFFFFFFF
        x ^= (x >> 27)
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & 0xFFFFFFFFFFFFFFFF

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * (self.next_u64() >> 11) / float(1 << 53)

    def randint(self, n: int) -> int:
        # modulo bias is irrelevant at these ranges
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


# ---------------------------------------------------------------------------
# registry and splits


@dataclass(frozen=True)
class SynthClass:
    class_id: int
    shape: str
    color: str
    texture: str

    def attributes(self) -> tuple[str, str, str]:
        return (self.shape, self.color, self.texture)

    def shared_attributes(self, other: "SynthClass") -> int:
        return sum(a == b for a, b in zip(self.attributes(), other.attributes()))


@dataclass
class SplitSpec:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise DataConfigError("seen and unseen class sets overlap")


def make_registry(num_classes: int = 20, seed: int = 0,
                  num_unseen: int = 4) -> tuple[list[SynthClass], SplitSpec]:
    """Deterministic class registry plus a 16-seen / 4-unseen style split.

    Retries derived seeds until every unseen class shares at least one
    attribute value with some seen class, and the registry contains class
    pairs sharing >= 2 attributes, pairs sharing none, and at least one
    pair differing only in texture (all needed for the co-excitation
    distance analyses to be meaningful). Every class gets its own fill
    color except the texture-only pair, which must share one; shapes and
    textures repeat freely and carry the shared-attribute structure.
    """
    max_classes = len(PALETTE) + 1  # one color is reused by the texture pair
    if num_classes > max_classes:
        raise DataConfigError(f"at most {max_classes} distinct classes, requested {num_classes}")
    if not 0 < num_unseen < num_classes:
        raise DataConfigError("num_unseen must be in (0, num_classes)")
    n_seen = num_classes - num_unseen
    if n_seen < num_unseen or n_seen - 1 > len(PALETTE):
        raise DataConfigError("split needs n_seen >= n_unseen and enough palette colors")
    colors = sorted(PALETTE)
    for attempt in range(1000):
        rng = XorShift(mix_seed(seed, attempt))
        cs = list(colors)
        rng.shuffle(cs)
        # seen classes: one unique fill color each, except the texture-only
        # sibling pair which shares shape and color and differs in texture
        s0 = SHAPES[rng.randint(len(SHAPES))]
        t0 = TEXTURES[rng.randint(len(TEXTURES))]
        alts = [t for t in TEXTURES if t != t0]
        picked = [(s0, cs[0], t0), (s0, cs[0], alts[rng.randint(len(alts))])]
        picked += [(SHAPES[rng.randint(len(SHAPES))], cs[i - 1],
                    TEXTURES[rng.randint(len(TEXTURES))])
                   for i in range(2, n_seen)]
        rng.shuffle(picked)
        # unseen classes: reuse a distinct seen class's color (features for
        # that color exist after training on C0) with a different shape
        donors = list(range(n_seen))
        rng.shuffle(donors)
        for d in donors[:num_unseen]:
            ds_, dc, dt = picked[d]
            others = [s for s in SHAPES if s != ds_]
            picked.append((others[rng.randint(len(others))], dc,
                           TEXTURES[rng.randint(len(TEXTURES))]))
        classes = [SynthClass(i, *attrs) for i, attrs in enumerate(picked)]
        seen = classes[:n_seen]
        unseen = classes[n_seen:]
        transferable = all(
            any(u.shared_attributes(s) >= 1 for s in seen) for u in unseen
        )
        pairs = [(a, b) for i, a in enumerate(classes) for b in classes[i + 1 :]]
        has_close = sum(a.shared_attributes(b) >= 2 for a, b in pairs) >= 3
        has_far = sum(a.shared_attributes(b) == 0 for a, b in pairs) >= 3
        # unseen classes must not collide with each other or a seen class
        # on (color, texture): pooled appearance is what identifies a class
        combos = [(c.color, c.texture) for c in classes]
        distinct = len(set(combos)) == len(combos)
        if transferable and has_close and has_far and distinct:
            split = SplitSpec(tuple(c.class_id for c in seen), tuple(c.class_id for c in unseen))
            return classes, split
    raise DataConfigError("could not build a registry satisfying the split constraints")


# ---------------------------------------------------------------------------
# rendering


@dataclass
class SceneConfig:
    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 5
    min_size: float = 16.0
    max_size: float = 30.0
    noise: float = 0.06
    max_overlap_iou: float = 0.3
    class_pool: tuple[int, ...] | None = None  # None = all registry classes


@dataclass
class Scene:
    image_id: int
    image: np.ndarray                      # (3, S, S) float64 in [0, 1]
    boxes: np.ndarray                      # (M, 4)
    class_ids: np.ndarray                  # (M,)

    def boxes_of(self, class_id: int) -> np.ndarray:
        return self.boxes[self.class_ids == class_id]


def _shape_mask(shape: str, size: float, angle: float, grid_r: np.ndarray,
                grid_c: np.ndarray, cy: float, cx: float) -> np.ndarray:
    r = size / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    u = (grid_c - cx) * ca + (grid_r - cy) * sa
    v = -(grid_c - cx) * sa + (grid_r - cy) * ca
    if shape == "circle":
        return u * u + v * v <= r * r
    if shape == "square":
        s = 0.82 * r
        return (np.abs(u) <= s) & (np.abs(v) <= s)
    if shape == "triangle":
        # upward equilateral triangle inscribed in radius r
        return (v <= 0.5 * r) & (v >= -r + np.sqrt(3.0) * np.abs(u))
    if shape == "cross":
        return ((np.abs(u) <= 0.32 * r) & (np.abs(v) <= r)) | \
               ((np.abs(v) <= 0.32 * r) & (np.abs(u) <= r))
    if shape == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "star":
        theta = np.arctan2(v, u)
        radius = np.sqrt(u * u + v * v)
        spike = 0.45 + 0.55 * np.abs(np.cos(2.5 * theta))
        return radius <= r * spike
    if shape == "bar":
        return (np.abs(u) <= r) & (np.abs(v) <= 0.32 * r)
    raise DataConfigError(f"unknown shape {shape!r}")


def _texture_colors(texture: str, color: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-pixel RGB for the masked region; (3, n_pixels)."""
    if texture == "solid":
        return np.repeat(color[:, None], u.size, axis=1)
    if texture == "stripes":
        stripe = (np.floor(u / 3.0) % 2) == 0
        dark = 0.35 * color
        return np.where(stripe[None, :], color[:, None], dark[:, None])
    if texture == "dots":
        du = u - 4.0 * np.round(u / 4.0)
        dv = v - 4.0 * np.round(v / 4.0)
        dot = du * du + dv * dv <= 1.7 ** 2
        dark = 0.35 * color
        return np.where(dot[None, :], color[:, None], dark[:, None])
    raise DataConfigError(f"unknown texture {texture!r}")


def render_scene(registry: list[SynthClass], image_id: int, cfg: SceneConfig,
                 seed: int = 0) -> Scene:
    """Deterministic scene for (registry seed, image id)."""
    rng = XorShift(mix_seed(seed, 0x5CE7E, image_id))
    s = cfg.image_size
    rows, cols = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    base = 0.45 + 0.10 * rng.uniform()
    image = np.full((3, s, s), base)
    image += (np.array([[rng.uniform(-1, 1) for _ in range(s)] for _ in range(s)])
              * cfg.noise)[None, :, :]
    image = np.clip(image, 0.0, 1.0)

    pool = list(cfg.class_pool) if cfg.class_pool is not None else [c.class_id for c in registry]
    by_id = {c.class_id: c for c in registry}
    n_obj = cfg.min_objects + rng.randint(cfg.max_objects - cfg.min_objects + 1)
    boxes: list[tuple[float, float, float, float]] = []
    class_ids: list[int] = []
    from .detector import iou
    for _ in range(n_obj):
        placed = False
        for _attempt in range(25):
            cls = by_id[pool[rng.randint(len(pool))]]
            size = rng.uniform(cfg.min_size, cfg.max_size)
            margin = size / 2.0 + 1.0
            cx = rng.uniform(margin, s - margin)
            cy = rng.uniform(margin, s - margin)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            mask = _shape_mask(cls.shape, size, angle, rows, cols, cy, cx)
            if not mask.any():
                continue
            rr, cc = np.nonzero(mask)
            box = (float(cc.min()), float(rr.min()), float(cc.max() + 1), float(rr.max() + 1))
            if min(box[2] - box[0], box[3] - box[1]) < 0.45 * cfg.min_size:
                continue
            if any(iou(box, b) >= cfg.max_overlap_iou for b in boxes):
                continue
            color = np.asarray(PALETTE[cls.color])
            ca, sa = np.cos(angle), np.sin(angle)
            u = (cc + 0.5 - cx) * ca + (rr + 0.5 - cy) * sa
            v = -(cc + 0.5 - cx) * sa + (rr + 0.5 - cy) * ca
            image[:, rr, cc] = _texture_colors(cls.texture, color, u, v)
            boxes.append(box)
            class_ids.append(cls.class_id)
            placed = True
            break
        if not placed:
            log.debug("scene %d: placement failed, rendering fewer objects", image_id)
    if not boxes:
        # bounded retries exhausted on every object: fall back to one centered object
        cls = by_id[pool[0]]
        mask = _shape_mask(cls.shape, cfg.min_size, 0.0, rows, cols, s / 2, s / 2)
        rr, cc = np.nonzero(mask)
        image[:, rr, cc] = np.asarray(PALETTE[cls.color])[:, None]
        boxes.append((float(cc.min()), float(rr.min()), float(cc.max() + 1), float(rr.max() + 1)))
        class_ids.append(cls.class_id)
    return Scene(image_id=image_id, image=image,
                 boxes=np.asarray(boxes, dtype=np.float64),
                 class_ids=np.asarray(class_ids, dtype=np.int64))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a (3, h, w) image with bilinear sampling."""
    _, h, w = img.shape
    ry = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    rx = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ry).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(rx).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ry - y0, 0.0, 1.0)[:, None]
    wx = np.clip(rx - x0, 0.0, 1.0)[None, :]
    tl = img[:, y0[:, None], x0[None, :]]
    tr = img[:, y0[:, None], x1[None, :]]
    bl = img[:, y1[:, None], x0[None, :]]
    br = img[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return top * (1 - wy) + bot * wy


# ---------------------------------------------------------------------------
# query pools and pair sampling


@dataclass
class QueryPatch:
    class_id: int
    source_image_id: int
    patch: np.ndarray  # (3, P, P)


@dataclass
class QueryTargetPair:
    scene: Scene
    query: np.ndarray
    query_class: int
    gt_boxes: np.ndarray


def build_query_pools(scenes: list[Scene], patch_size: int,
                      min_side: float = 12.0) -> dict[int, list[QueryPatch]]:
    """Crop every large-enough ground-truth box and resize to the patch size."""
    pools: dict[int, list[QueryPatch]] = {}
    for scene in scenes:
        for box, cid in zip(scene.boxes, scene.class_ids):
            x1, y1, x2, y2 = box
            if min(x2 - x1, y2 - y1) < min_side:
                continue
            crop = scene.image[:, int(y1) : int(np.ceil(y2)), int(x1) : int(np.ceil(x2))]
            patch = bilinear_resize(crop, patch_size, patch_size)
            pools.setdefault(int(cid), []).append(
                QueryPatch(int(cid), scene.image_id, patch))
    return pools


def sample_training_pair(scene: Scene, pools: dict[int, list[QueryPatch]],
                         split: SplitSpec, rng: XorShift) -> QueryTargetPair | None:
    """Pick a seen class present in the scene and a cross-image query patch of it.

    Returns None when the scene holds no usable seen-class instance (caller
    skips the scene).
    """
    seen = set(split.seen)
    candidates = sorted({int(c) for c in scene.class_ids
                         if int(c) in seen and _has_other_source(pools, int(c), scene.image_id)})
    if not candidates:
        return None
    cls = candidates[rng.randint(len(candidates))]
    options = [p for p in pools[cls] if p.source_image_id != scene.image_id]
    patch = options[rng.randint(len(options))]
    return QueryTargetPair(scene=scene, query=patch.patch, query_class=cls,
                           gt_boxes=scene.boxes_of(cls))


def _has_other_source(pools, cid: int, image_id: int) -> bool:
    return any(p.source_image_id != image_id for p in pools.get(cid, ()))


def test_query_sampler(pool: list[QueryPatch], image_id: int, n: int = 5) -> list[QueryPatch]:
    """The paper-style evaluation protocol: shuffle the class's query pool
    with an RNG seeded by the target image id, take the first n."""
    if len(pool) < n:
        log.warning("query pool has %d < %d patches; using all", len(pool), n)
        n = len(pool)
    idx = list(range(len(pool)))
    XorShift(mix_seed(0x0E5A, image_id)).shuffle(idx)
    return [pool[i] for i in idx[:n]]


# ---------------------------------------------------------------------------
# export


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Binary P6 PPM from a (3, H, W) float image in [0, 1]."""
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def write_pgm(gray: np.ndarray, path: str | Path) -> None:
    """Binary P5 PGM from a (H, W) float map, max-normalized."""
    peak = float(gray.max()) or 1.0
    arr = np.clip(np.round(gray / peak * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(arr.tobytes())


def export_scenes(scenes: list[Scene], out_dir: str | Path) -> None:
    """PPM images plus one sidecar annotation line per box:
    image_id class_id x1 y1 x2 y2."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "annotations.txt", "w") as f:
        for scene in scenes:
            write_ppm(scene.image, out / f"scene_{scene.image_id:06d}.ppm")
            for box, cid in zip(scene.boxes, scene.class_ids):
                f.write(f"{scene.image_id} {cid} "
                        f"{box[0]:.2f} {box[1]:.2f} {box[2]:.2f} {box[3]:.2f}\n")
