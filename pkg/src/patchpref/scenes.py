"""Synthetic scene pairs with ground-truth corruption masks.

Scenes are 32x32 RGB images in [0,1]: a textured procedural object on a
uniform background, tiled by an 8x8 grid of 4x4 patches. A "generated"
counterpart is produced by corrupting a known subset of object patches, so
every pair carries exact labels for which patches are bad. A correspondence
corpus of rotated/flipped views with analytic patch maps stands in for a
homography-annotated matching benchmark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DescriptorError
from .tensor import Tensor

IMAGE_SIZE = 32
CHANNELS = 3
PATCH_SIZE = 4
GRID_SIZE = IMAGE_SIZE // PATCH_SIZE

OBJECT_KINDS = ("box", "disk", "triangle", "ring")

# Object/background contrast: dominant channel stays at least this far from
# the background for every object pixel, texture included.
MIN_CONTRAST = 0.2
_TEXTURE_AMP = 0.18


@dataclass(frozen=True)
class SceneDescriptor:
    kind: str
    object_color: tuple
    background_color: tuple
    rect: tuple  # (top, left, height, width)
    seed: int

    def validate(self):
        if self.kind not in OBJECT_KINDS:
            raise DescriptorError(f"unknown object kind {self.kind!r}")
        top, left, height, width = self.rect
        if height <= 0 or width <= 0:
            raise DescriptorError(f"degenerate placement rectangle {self.rect}")
        if top < 0 or left < 0 or top + height > IMAGE_SIZE or left + width > IMAGE_SIZE:
            raise DescriptorError(f"placement {self.rect} outside image bounds")
        sep = max(abs(o - b) for o, b in zip(self.object_color, self.background_color))
        if sep < MIN_CONTRAST + _TEXTURE_AMP:
            raise DescriptorError(
                f"object/background contrast {sep:.3f} too low to texture")


@dataclass
class ScenePair:
    reference: Tensor
    generated: Tensor
    object_mask: Tensor
    corruption_mask: Tensor
    descriptor: SceneDescriptor

    def validate(self):
        ref, gen = self.reference.data, self.generated.data
        obj = self.object_mask.data
        cor = self.corruption_mask.data
        if np.any(cor * (1.0 - obj) != 0.0):
            raise ContractError("corruption mask leaks outside object mask")
        untouched = cor == 0.0
        if not np.array_equal(ref[:, untouched], gen[:, untouched]):
            raise ContractError("generated differs from reference off-mask")


def _shape_mask(kind: str, rect, size: int) -> np.ndarray:
    top, left, height, width = rect
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = top + (height - 1) / 2.0, left + (width - 1) / 2.0
    ry, rx = height / 2.0, width / 2.0
    in_rect = (yy >= top) & (yy < top + height) & (xx >= left) & (xx < left + width)
    if kind == "box":
        return in_rect
    if kind == "disk":
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "ring":
        r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        return (r2 <= 1.0) & (r2 >= 0.30)
    if kind == "triangle":
        # Apex at top edge center, base along the bottom edge of the rect.
        fy = np.clip((yy - top) / max(height - 1, 1), 0.0, None)
        half = np.abs(xx - cx) / max(rx, 1e-9)
        return in_rect & (half <= fy)
    raise DescriptorError(f"unknown object kind {kind!r}")


def _texture_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Oriented ramp + stripes + per-patch blocks + pixel noise, in [-1, 1].

    The block component is constant on patch cells so it survives the
    encoder's pooling front-end; it is what makes individual patches
    distinguishable entities.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0.0, math.pi)
    proj = math.cos(theta) * xx + math.sin(theta) * yy
    ramp = 2.0 * (proj - proj.min()) / max(proj.max() - proj.min(), 1e-9) - 1.0
    wavelength = rng.uniform(3.0, 6.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    theta2 = rng.uniform(0.0, math.pi)
    stripes = np.sin(2.0 * math.pi * (math.cos(theta2) * xx + math.sin(theta2) * yy)
                     / wavelength + phase)
    cells = rng.uniform(-1.0, 1.0, size=(size // PATCH_SIZE, size // PATCH_SIZE))
    blocks = np.repeat(np.repeat(cells, PATCH_SIZE, axis=0), PATCH_SIZE, axis=1)
    noise = rng.uniform(-1.0, 1.0, size=(size, size))
    field = 0.35 * ramp + 0.2 * stripes + 0.55 * blocks + 0.1 * noise
    return np.clip(field, -1.0, 1.0)


def generate_scene(descriptor: SceneDescriptor):
    """Render a descriptor deterministically; returns (image, object_mask)."""
    descriptor.validate()
    rng = np.random.default_rng(np.random.SeedSequence(descriptor.seed))
    mask = _shape_mask(descriptor.kind, descriptor.rect, IMAGE_SIZE)
    if not mask.any():
        raise DescriptorError(f"descriptor renders an empty object: {descriptor}")

    obj = np.asarray(descriptor.object_color, dtype=np.float64)
    bg = np.asarray(descriptor.background_color, dtype=np.float64)
    image = np.empty((CHANNELS, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    image[:] = bg[:, None, None]

    field = _texture_field(rng, IMAGE_SIZE)
    dominant = int(np.argmax(np.abs(obj - bg)))
    for c in range(CHANNELS):
        vals = obj[c] + _TEXTURE_AMP * field
        if c == dominant:
            # Clip to the safe band so the contrast floor holds pixelwise.
            if obj[c] >= bg[c]:
                vals = np.clip(vals, bg[c] + MIN_CONTRAST, 1.0)
            else:
                vals = np.clip(vals, 0.0, bg[c] - MIN_CONTRAST)
        else:
            vals = np.clip(vals, 0.0, 1.0)
        image[c][mask] = vals[mask]
    return Tensor(image), Tensor(mask.astype(np.float64))


def random_scene_descriptor(seed: int, min_area: float = 0.25,
                            max_area: float = 0.60) -> SceneDescriptor:
    """Sample a descriptor whose object covers min_area..max_area of the image."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for _ in range(200):
        kind = OBJECT_KINDS[int(rng.integers(len(OBJECT_KINDS)))]
        bg = rng.uniform(0.05, 0.95, size=3)
        obj = rng.uniform(0.05, 0.95, size=3)
        if max(abs(o - b) for o, b in zip(obj, bg)) < 0.5:
            continue
        height = int(rng.integers(16, IMAGE_SIZE + 1))
        width = int(rng.integers(16, IMAGE_SIZE + 1))
        top = int(rng.integers(0, IMAGE_SIZE - height + 1))
        left = int(rng.integers(0, IMAGE_SIZE - width + 1))
        rect = (top, left, height, width)
        frac = _shape_mask(kind, rect, IMAGE_SIZE).mean()
        if min_area <= frac <= max_area:
            return SceneDescriptor(kind, tuple(obj), tuple(bg), rect,
                                   int(rng.integers(2 ** 62)))
    raise DescriptorError("could not sample a descriptor in the area band")


# A grid cell counts as an object patch when at least this many of its
# pixels belong to the object; slivers below it are background for both
# corruption and quality statistics.
MIN_OBJECT_PIXELS = 4


def object_patch_grid(object_mask: Tensor) -> np.ndarray:
    """Boolean [GRID,GRID] marking cells with enough object pixels."""
    m = object_mask.data.reshape(GRID_SIZE, PATCH_SIZE, GRID_SIZE, PATCH_SIZE)
    return m.sum(axis=(1, 3)) >= MIN_OBJECT_PIXELS


def _patch_slices(r: int, c: int):
    return (slice(r * PATCH_SIZE, (r + 1) * PATCH_SIZE),
            slice(c * PATCH_SIZE, (c + 1) * PATCH_SIZE))


def _color_shift(img: np.ndarray, sel: np.ndarray, rng) -> np.ndarray:
    out = img.copy()
    for c in range(CHANNELS):
        mag = rng.uniform(0.15, 0.30)
        direction = 1.0 if img[c][sel].mean() < 0.5 else -1.0
        out[c][sel] = np.clip(img[c][sel] + direction * mag, 0.0, 1.0)
    return out


def corrupt_scene(reference: Tensor, object_mask: Tensor, corruption_rate: float,
                  seed: int, descriptor: SceneDescriptor | None = None) -> ScenePair:
    """Corrupt a seeded fraction of object patches; ground truth is recorded.

    Perturbers: channel-wise color shift, texture swap from an off-grid object
    region, and a one-pixel local warp. Swap and warp fall back to the color
    shift when they land under the detectability margin (0.05 max abs diff).
    """
    if not 0.0 <= corruption_rate <= 1.0:
        raise ConfigError(f"corruption rate {corruption_rate} outside [0,1]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ref = reference.data
    obj = object_mask.data > 0.0

    eligible = object_patch_grid(object_mask)
    patches = [(r, c) for r in range(GRID_SIZE) for c in range(GRID_SIZE)
               if eligible[r, c]]
    n_sel = math.ceil(corruption_rate * len(patches))
    order = rng.permutation(len(patches))[:n_sel]

    gen = ref.copy()
    corruption = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    for idx in order:
        r, c = patches[idx]
        ys, xs = _patch_slices(r, c)
        sel = obj[ys, xs]
        patch = ref[:, ys, xs]
        perturber = int(rng.integers(3))

        if perturber == 1:
            cand = _swap_source(rng, obj, r, c)
            new = patch.copy()
            if cand is not None:
                sy, sx = cand
                src = ref[:, sy:sy + PATCH_SIZE, sx:sx + PATCH_SIZE]
                new[:, sel] = src[:, sel]
        elif perturber == 2:
            dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][int(rng.integers(4))]
            yy = np.clip(np.arange(ys.start, ys.stop) + dy, 0, IMAGE_SIZE - 1)
            xx = np.clip(np.arange(xs.start, xs.stop) + dx, 0, IMAGE_SIZE - 1)
            shifted = ref[:, yy[:, None], xx[None, :]]
            new = patch.copy()
            new[:, sel] = shifted[:, sel]
        else:
            new = None

        if new is None or np.abs(new - patch)[:, sel].max() <= 0.05:
            new = _color_shift(patch, sel, rng)

        gen[:, ys, xs][:, sel] = new[:, sel]
        corruption[ys, xs][sel] = 1.0

    return ScenePair(reference=reference, generated=Tensor(gen),
                     object_mask=object_mask, corruption_mask=Tensor(corruption),
                     descriptor=descriptor)


def _swap_source(rng, obj: np.ndarray, r: int, c: int):
    """Pick an object-dominated source window offset off the patch grid."""
    for _ in range(40):
        sy = int(rng.integers(0, IMAGE_SIZE - PATCH_SIZE + 1))
        sx = int(rng.integers(0, IMAGE_SIZE - PATCH_SIZE + 1))
        if sy % PATCH_SIZE == 0 and sx % PATCH_SIZE == 0:
            continue
        if abs(sy - r * PATCH_SIZE) < PATCH_SIZE and abs(sx - c * PATCH_SIZE) < PATCH_SIZE:
            continue
        if obj[sy:sy + PATCH_SIZE, sx:sx + PATCH_SIZE].mean() >= 0.5:
            return sy, sx
    return None


@dataclass(frozen=True)
class CorpusConfig:
    master_seed: int = 1234
    corruption_rate: float = 0.3


def build_pair_corpus(n: int, config: CorpusConfig) -> list:
    """n reproducible scene pairs; pair i depends only on (master_seed, i)."""
    if n < 1:
        raise ContractError(f"corpus size {n} must be >= 1")
    pairs = []
    for index in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([config.master_seed, index]))
        descriptor_seed = int(rng.integers(2 ** 62))
        corrupt_seed = int(rng.integers(2 ** 62))
        descriptor = random_scene_descriptor(descriptor_seed)
        image, mask = generate_scene(descriptor)
        pairs.append(corrupt_scene(image, mask, config.corruption_rate,
                                   corrupt_seed, descriptor))
    return pairs


# --- correspondence corpus ------------------------------------------------

ROTATIONS = (0, 90, 180, 270)


@dataclass(frozen=True)
class GridTransform:
    """Clockwise rotation, then horizontal flip, then vertical flip."""
    rot: int = 0
    flip_h: bool = False
    flip_v: bool = False

    def apply(self, arr: np.ndarray) -> np.ndarray:
        out = np.rot90(arr, k=-(self.rot // 90), axes=(-2, -1))
        if self.flip_h:
            out = np.flip(out, axis=-1)
        if self.flip_v:
            out = np.flip(out, axis=-2)
        return np.ascontiguousarray(out)

    def index_map(self, n: int) -> np.ndarray:
        """Permutation: base linear patch index -> transformed linear index."""
        rows, cols = np.divmod(np.arange(n * n), n)
        for _ in range(self.rot // 90):
            rows, cols = cols, n - 1 - rows
        if self.flip_h:
            cols = n - 1 - cols
        if self.flip_v:
            rows = n - 1 - rows
        return rows * n + cols


_ALL_TRANSFORMS = [GridTransform(rot, bool(fh), bool(fv))
                   for rot in ROTATIONS for fh in (0, 1) for fv in (0, 1)]


@dataclass
class CorrGroup:
    images: list
    transforms: list
    descriptor: SceneDescriptor


@dataclass
class CorrespondenceCorpus:
    groups: list
    grid: int = GRID_SIZE

    def gt_map(self, g: int, a: int, b: int) -> np.ndarray:
        """Ground-truth patch map from image a to image b of group g."""
        ta = self.groups[g].transforms[a].index_map(self.grid)
        tb = self.groups[g].transforms[b].index_map(self.grid)
        out = np.empty_like(ta)
        out[ta] = tb
        return out


def build_correspondence_corpus(groups: int, images_per_group: int,
                                seed: int) -> CorrespondenceCorpus:
    """Groups of transformed views of one base scene with analytic patch maps."""
    if images_per_group < 2:
        raise ContractError(f"images per group {images_per_group} must be >= 2")
    if images_per_group > len(_ALL_TRANSFORMS):
        raise ConfigError(f"at most {len(_ALL_TRANSFORMS)} images per group")
    out = []
    for g in range(groups):
        rng = np.random.default_rng(np.random.SeedSequence([seed, g]))
        descriptor = random_scene_descriptor(int(rng.integers(2 ** 62)))
        base, _ = generate_scene(descriptor)
        transforms = [GridTransform()]
        others = rng.permutation(len(_ALL_TRANSFORMS) - 1)[:images_per_group - 1]
        transforms += [_ALL_TRANSFORMS[1 + int(i)] for i in others]
        images = [Tensor(t.apply(base.data)) for t in transforms]
        out.append(CorrGroup(images=images, transforms=transforms,
                             descriptor=descriptor))
    return CorrespondenceCorpus(groups=out)


# --- on-disk layouts --------------------------------------------------------

def save_descriptor(descriptor: SceneDescriptor, path) -> None:
    lines = [
        f"kind = {descriptor.kind}",
        "object_color = " + ",".join(repr(v) for v in descriptor.object_color),
        "background_color = " + ",".join(repr(v) for v in descriptor.background_color),
        "rect = " + ",".join(str(v) for v in descriptor.rect),
        f"seed = {descriptor.seed}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_descriptor(path) -> SceneDescriptor:
    fields = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" = ")
        fields[key] = value
    return SceneDescriptor(
        kind=fields["kind"],
        object_color=tuple(float(v) for v in fields["object_color"].split(",")),
        background_color=tuple(float(v) for v in fields["background_color"].split(",")),
        rect=tuple(int(v) for v in fields["rect"].split(",")),
        seed=int(fields["seed"]),
    )


def save_pair_corpus(pairs, root) -> None:
    from .tensorio import write_tensor
    root = Path(root)
    for i, pair in enumerate(pairs):
        d = root / "pairs" / str(i)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(pair.reference, d / "reference.tnsr")
        write_tensor(pair.generated, d / "generated.tnsr")
        write_tensor(pair.object_mask, d / "object_mask.tnsr")
        write_tensor(pair.corruption_mask, d / "corruption_mask.tnsr")
        save_descriptor(pair.descriptor, d / "descriptor.txt")


def load_pair_corpus(root) -> list:
    from .tensorio import read_tensor
    root = Path(root) / "pairs"
    pairs = []
    for d in sorted(root.iterdir(), key=lambda p: int(p.name)):
        pairs.append(ScenePair(
            reference=read_tensor(d / "reference.tnsr"),
            generated=read_tensor(d / "generated.tnsr"),
            object_mask=read_tensor(d / "object_mask.tnsr"),
            corruption_mask=read_tensor(d / "corruption_mask.tnsr"),
            descriptor=load_descriptor(d / "descriptor.txt"),
        ))
    return pairs


def save_correspondence_corpus(corpus: CorrespondenceCorpus, root) -> None:
    from .tensorio import write_tensor
    root = Path(root)
    for g, group in enumerate(corpus.groups):
        d = root / "groups" / str(g)
        d.mkdir(parents=True, exist_ok=True)
        lines = []
        for i, (img, t) in enumerate(zip(group.images, group.transforms)):
            write_tensor(img, d / f"{i}.tnsr")
            lines.append(f"rot={t.rot} flipH={int(t.flip_h)} flipV={int(t.flip_v)}")
        (d / "transforms.txt").write_text("\n".join(lines) + "\n")


def load_correspondence_corpus(root) -> CorrespondenceCorpus:
    from .tensorio import read_tensor
    root = Path(root) / "groups"
    groups = []
    for d in sorted(root.iterdir(), key=lambda p: int(p.name)):
        transforms = []
        for line in (d / "transforms.txt").read_text().splitlines():
            fields = dict(part.split("=", 1) for part in line.split())
            transforms.append(GridTransform(rot=int(fields["rot"]),
                                            flip_h=fields["flipH"] == "1",
                                            flip_v=fields["flipV"] == "1"))
        images = [read_tensor(d / f"{i}.tnsr") for i in range(len(transforms))]
        groups.append(CorrGroup(images=images, transforms=transforms,
                                descriptor=None))
    return CorrespondenceCorpus(groups=groups)
