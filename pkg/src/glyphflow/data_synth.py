"""Procedural glyph-figure dataset: renders, pose maps, captions, probes.

An identity is a discrete attribute tuple (torso shape, two palette colors,
accessory, texture motif) drawn without replacement from the full combination
space, so any two identities differ in at least one attribute. Scenes vary
articulation, background, and camera offset. Rendering is pure numpy with no
anti-aliasing and every attribute gets its own exact color band, so a
rule-based probe recovers the full tuple from pixels and regeneration with
the same seed is byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from PIL import Image as PILImage

from .vocab import UNK, Vocabulary

SHAPES = ["circle", "square", "triangle", "flipped", "diamond", "ring", "tall", "wide"]
FIGURE_COLORS = [
    ("red", (220, 50, 50)),
    ("orange", (235, 140, 40)),
    ("yellow", (235, 215, 50)),
    ("green", (60, 175, 60)),
    ("teal", (45, 195, 185)),
    ("blue", (55, 95, 215)),
    ("purple", (140, 65, 200)),
    ("pink", (235, 120, 180)),
    ("brown", (150, 100, 50)),
    ("gray", (128, 128, 128)),
]
BACKGROUNDS = [
    ("paper", (246, 246, 246)),
    ("night", (24, 24, 36)),
    ("sky", (198, 222, 242)),
    ("cream", (242, 232, 202)),
    ("mint", (208, 240, 208)),
    ("blush", (242, 210, 210)),
    ("lilac", (226, 210, 242)),
    ("sand", (232, 224, 176)),
    ("fog", (212, 216, 222)),
    ("moss", (196, 210, 170)),
]
ACCESSORIES = ["none", "hat", "antenna", "halo", "flag", "shoes"]
ACCESSORY_COLORS = {
    "hat": (100, 20, 20),
    "antenna": (20, 90, 90),
    "halo": (120, 100, 10),
    "flag": (10, 80, 10),
    "shoes": (70, 10, 100),
}
MOTIFS = ["none", "stripes", "dots", "border"]
MOTIF_COLORS = {
    "stripes": (255, 255, 255),
    "dots": (10, 10, 10),
    "border": (170, 170, 235),
}
LIMB_COLOR = (60, 60, 60)
SKELETON_COLOR = (255, 255, 255)

# (class name, rgb); order fixed, colors pairwise distinct
PALETTE = (
    [(f"fig:{n}", c) for n, c in FIGURE_COLORS]
    + [(f"bg:{n}", c) for n, c in BACKGROUNDS]
    + [(f"acc:{n}", ACCESSORY_COLORS[n]) for n in ACCESSORIES[1:]]
    + [(f"motif:{n}", MOTIF_COLORS[n]) for n in MOTIFS[1:]]
    + [("limb", LIMB_COLOR)]
)

HEAD_LIMIT = 0.5
ARM_LIMIT = (0.0, 2.3)
LEG_LIMIT = (0.0, 0.65)

POSE_PRESETS = [
    (0.0, 0.35, 0.35, 0.2, 0.2),
    (0.0, 2.1, 0.35, 0.2, 0.2),
    (0.0, 0.35, 2.1, 0.2, 0.2),
    (0.0, 2.1, 2.1, 0.35, 0.35),
    (0.3, 1.4, 1.4, 0.5, 0.1),
    (-0.3, 1.0, 0.5, 0.1, 0.5),
    (0.0, 0.7, 1.7, 0.55, 0.55),
    (0.2, 1.7, 0.7, 0.0, 0.0),
]

N_COMBOS = len(SHAPES) * 10 * 9 * len(ACCESSORIES) * len(MOTIFS)

MANIFEST_VERSION = "v1"
MANIFEST_FIELDS = ("identity_id", "image_path", "pose_path", "caption", "group", "split")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class IdentitySpec:
    id: int
    body_shape: int
    primary_color: int
    secondary_color: int
    accessory: int
    texture_motif: int

    def __post_init__(self):
        if not 0 <= self.body_shape < len(SHAPES):
            raise DataError(f"body_shape out of range: {self.body_shape}")
        for name in ("primary_color", "secondary_color"):
            if not 0 <= getattr(self, name) < len(FIGURE_COLORS):
                raise DataError(f"{name} out of range")
        if self.primary_color == self.secondary_color:
            raise DataError("primary_color must differ from secondary_color")
        if not 0 <= self.accessory < len(ACCESSORIES):
            raise DataError(f"accessory out of range: {self.accessory}")
        if not 0 <= self.texture_motif < len(MOTIFS):
            raise DataError(f"texture_motif out of range: {self.texture_motif}")

    def tokens(self) -> list:
        return [
            f"shape:{SHAPES[self.body_shape]}",
            f"primary:{FIGURE_COLORS[self.primary_color][0]}",
            f"secondary:{FIGURE_COLORS[self.secondary_color][0]}",
            f"acc:{ACCESSORIES[self.accessory]}",
            f"motif:{MOTIFS[self.texture_motif]}",
        ]


@dataclass(frozen=True)
class SceneSpec:
    pose: tuple  # (head, l_arm, r_arm, l_leg, r_leg) radians
    background: int
    camera_offset: tuple  # (dx, dy) as fractions of image size

    def __post_init__(self):
        if len(self.pose) != 5:
            raise DataError("pose needs 5 joint angles")
        head, la, ra, ll, rl = self.pose
        if abs(head) > HEAD_LIMIT + 1e-9:
            raise DataError(f"head angle {head} outside ±{HEAD_LIMIT}")
        for a in (la, ra):
            if not ARM_LIMIT[0] - 1e-9 <= a <= ARM_LIMIT[1] + 1e-9:
                raise DataError(f"arm angle {a} outside {ARM_LIMIT}")
        for a in (ll, rl):
            if not LEG_LIMIT[0] - 1e-9 <= a <= LEG_LIMIT[1] + 1e-9:
                raise DataError(f"leg angle {a} outside {LEG_LIMIT}")
        if not 0 <= self.background < len(BACKGROUNDS):
            raise DataError(f"background out of range: {self.background}")

    def tokens(self) -> list:
        return [f"bg:{BACKGROUNDS[self.background][0]}"]


@dataclass(frozen=True)
class Record:
    identity_id: int
    image_path: str
    pose_path: str
    caption: tuple
    group: str
    split: str


@lru_cache(maxsize=8)
def _combo_permutation(seed: int):
    return np.random.default_rng([int(seed), 911]).permutation(N_COMBOS)


def identity_spec(seed: int, idx: int) -> IdentitySpec:
    """Deterministic identity for (dataset seed, index); all indices distinct."""
    if not 0 <= idx < N_COMBOS:
        raise DataError(f"identity index {idx} outside [0, {N_COMBOS})")
    combo = int(_combo_permutation(seed)[idx])
    combo, motif = divmod(combo, len(MOTIFS))
    combo, acc = divmod(combo, len(ACCESSORIES))
    combo, sec_idx = divmod(combo, 9)
    shape, primary = divmod(combo, 10)
    secondary = sec_idx + (1 if sec_idx >= primary else 0)
    return IdentitySpec(idx, shape, primary, secondary, acc, motif)


def scene_spec(seed: int, identity_id: int, k: int) -> SceneSpec:
    """Deterministic scene k for an identity."""
    rng = np.random.default_rng([int(seed), int(identity_id), int(k), 271])
    background = int(rng.integers(len(BACKGROUNDS)))
    preset = POSE_PRESETS[int(rng.integers(len(POSE_PRESETS)))]
    jit = rng.uniform(-0.1, 0.1, size=5)
    head = float(np.clip(preset[0] + jit[0], -HEAD_LIMIT, HEAD_LIMIT))
    la = float(np.clip(preset[1] + jit[1], *ARM_LIMIT))
    ra = float(np.clip(preset[2] + jit[2], *ARM_LIMIT))
    ll = float(np.clip(preset[3] + jit[3], *LEG_LIMIT))
    rl = float(np.clip(preset[4] + jit[4], *LEG_LIMIT))
    dx = float(rng.uniform(-0.06, 0.06))
    dy = float(rng.uniform(-0.045, 0.045))
    return SceneSpec((head, la, ra, ll, rl), background, (dx, dy))


def caption_tokens(identity: IdentitySpec, scene: SceneSpec) -> list:
    return identity.tokens() + scene.tokens()


def build_vocabulary() -> Vocabulary:
    symbols = ["edit"]
    symbols += [f"shape:{s}" for s in SHAPES]
    symbols += [f"primary:{n}" for n, _ in FIGURE_COLORS]
    symbols += [f"secondary:{n}" for n, _ in FIGURE_COLORS]
    symbols += [f"acc:{a}" for a in ACCESSORIES]
    symbols += [f"motif:{m}" for m in MOTIFS]
    symbols += [f"bg:{n}" for n, _ in BACKGROUNDS]
    return Vocabulary(symbols)


# ---------------------------------------------------------------------------
# rasterization


def _grids(size):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy.astype(np.float64), xx.astype(np.float64)


def _reach_from_border(bg: np.ndarray) -> np.ndarray:
    """Background pixels 4-connected to the array border."""
    reach = np.zeros_like(bg)
    reach[0, :] = bg[0, :]
    reach[-1, :] = bg[-1, :]
    reach[:, 0] = bg[:, 0]
    reach[:, -1] = bg[:, -1]
    for _ in range(bg.shape[0] + bg.shape[1]):
        grow = reach.copy()
        grow[1:, :] |= reach[:-1, :]
        grow[:-1, :] |= reach[1:, :]
        grow[:, 1:] |= reach[:, :-1]
        grow[:, :-1] |= reach[:, 1:]
        grow &= bg
        if (grow == reach).all():
            break
        reach = grow
    return reach


def _fill_holes(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return mask.copy()
    r0, r1 = ys.min(), ys.max()
    c0, c1 = xs.min(), xs.max()
    sub = mask[r0 : r1 + 1, c0 : c1 + 1]
    filled = mask.copy()
    filled[r0 : r1 + 1, c0 : c1 + 1] = sub | ~_reach_from_border(~sub)
    return filled


def _torso_mask(shape: int, size: int, cx: float, cy: float):
    yy, xx = _grids(size)
    dx, dy = xx - cx, yy - cy
    r = 0.15 * size
    name = SHAPES[shape]
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "square":
        return (np.abs(dx) <= 0.92 * r) & (np.abs(dy) <= 0.92 * r)
    if name == "triangle":
        # apex up: width grows toward the base
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) / (2 * r) * 1.1 * r)
    if name == "flipped":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (r - dy) / (2 * r) * 1.1 * r)
    if name == "diamond":
        return np.abs(dx) / (1.15 * r) + np.abs(dy) / (1.15 * r) <= 1.0
    if name == "ring":
        rr = dx * dx + dy * dy
        return (rr <= r * r) & (rr > (0.52 * r) ** 2)
    if name == "tall":
        return (np.abs(dx) <= 0.62 * r) & (np.abs(dy) <= 1.3 * r)
    if name == "wide":
        return (np.abs(dx) <= 1.3 * r) & (np.abs(dy) <= 0.62 * r)
    raise DataError(f"unknown shape {shape}")


def _torso_half_extents(shape: int, size: int):
    r = 0.15 * size
    name = SHAPES[shape]
    hw = {"circle": r, "square": 0.92 * r, "triangle": 1.1 * r, "flipped": 1.1 * r,
          "diamond": 1.15 * r, "ring": r, "tall": 0.62 * r, "wide": 1.3 * r}[name]
    hh = {"circle": r, "square": 0.92 * r, "triangle": r, "flipped": r,
          "diamond": 1.15 * r, "ring": r, "tall": 1.3 * r, "wide": 0.62 * r}[name]
    return hw, hh


def _disk(size, cx, cy, r):
    yy, xx = _grids(size)
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _rect(size, cx, cy, hw, hh):
    yy, xx = _grids(size)
    return (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)


def _segment(size, x0, y0, x1, y1, halfwidth):
    yy, xx = _grids(size)
    vx, vy = x1 - x0, y1 - y0
    norm2 = vx * vx + vy * vy
    if norm2 < 1e-12:
        return _disk(size, x0, y0, halfwidth)
    t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / norm2, 0.0, 1.0)
    dist2 = (xx - (x0 + t * vx)) ** 2 + (yy - (y0 + t * vy)) ** 2
    return dist2 <= halfwidth * halfwidth


def _motif_mask(motif: int, torso, size, cx, cy):
    name = MOTIFS[motif]
    if name == "none":
        return np.zeros_like(torso)
    yy, xx = _grids(size)
    if name == "stripes":
        k = max(2, size // 16)
        return torso & ((yy.astype(np.int64) // k) % 2 == 0)
    if name == "dots":
        k = max(3, round(size / 10))
        c = max(1, k // 2 - 1)
        on = ((xx - cx) % k < c) & ((yy - cy) % k < c)
        return torso & on
    if name == "border":
        # rim of the hole-filled silhouette, so ring keeps its inner annulus
        t = max(1, size // 32)
        interior = _fill_holes(torso)
        for _ in range(t):
            shr = interior.copy()
            shr[1:, :] &= interior[:-1, :]
            shr[:-1, :] &= interior[1:, :]
            shr[:, 1:] &= interior[:, :-1]
            shr[:, :-1] &= interior[:, 1:]
            interior = shr
        return torso & ~interior
    raise DataError(f"unknown motif {motif}")


def _figure_geometry(identity: IdentitySpec, scene: SceneSpec, size: int):
    """Joint and anchor coordinates shared by the render and the pose map."""
    s = float(size)
    hw, hh = _torso_half_extents(identity.body_shape, size)
    r_head = 0.06 * s
    gap = max(1.0, 0.03 * s)
    dy_max = 0.045 * s
    head, la, ra, ll, rl = scene.pose
    dx = scene.camera_offset[0] * s
    dy = scene.camera_offset[1] * s

    cx = s / 2 + dx
    cy = (dy_max + 1) + 0.1 * s + 2 * r_head + gap + hh + dy
    head_cx = cx + math.sin(head) * 0.08 * s
    head_cy = cy - hh - gap - r_head

    arm_len, leg_len = 0.12 * s, 0.11 * s
    arms = []
    for sign, ang in ((-1.0, la), (1.0, ra)):
        ax, ay = cx + sign * 0.8 * hw, cy - 0.45 * hh
        tx = ax + sign * math.sin(ang) * arm_len
        ty = ay + math.cos(ang) * arm_len
        arms.append((ax, ay, tx, ty))
    legs = []
    for sign, ang in ((-1.0, ll), (1.0, rl)):
        ax, ay = cx + sign * 0.45 * hw, cy + 0.95 * hh
        tx = ax + sign * math.sin(ang) * leg_len
        ty = ay + math.cos(ang) * leg_len
        legs.append((ax, ay, tx, ty))
    return {
        "cx": cx, "cy": cy, "hw": hw, "hh": hh,
        "head_cx": head_cx, "head_cy": head_cy, "r_head": r_head,
        "arms": arms, "legs": legs,
    }


def _accessory_masks(identity: IdentitySpec, geo: dict, size: int):
    """List of boolean masks for the accessory; never overlaps the torso."""
    s = float(size)
    name = ACCESSORIES[identity.accessory]
    hx, hy, rh = geo["head_cx"], geo["head_cy"], geo["r_head"]
    if name == "none":
        return []
    if name == "hat":
        yy, xx = _grids(size)
        top = hy - rh - 1.2 * rh
        base = hy - rh + 1.0
        h = base - top
        w = (yy - top) / h * 1.4 * rh
        return [(yy >= top) & (yy <= base) & (np.abs(xx - hx) <= w)]
    if name == "antenna":
        y1 = hy - rh - 0.1 * s
        return [
            _segment(size, hx, hy - rh, hx, y1, max(0.7, 0.012 * s)),
            _disk(size, hx, y1, max(1.0, 0.02 * s)),
        ]
    if name == "halo":
        cy = hy - rh - 0.045 * s
        outer, inner = 0.07 * s, 0.045 * s
        return [_disk(size, hx, cy, outer) & ~_disk(size, hx, cy, inner)]
    if name == "flag":
        ax, ay, tx, ty = geo["arms"][1]
        fw, fh = 0.045 * s, 0.03 * s
        fx = max(tx + 0.02 * s, geo["cx"] + geo["hw"] + fw + 0.02 * s)
        return [_rect(size, fx, ty, fw, fh)]
    if name == "shoes":
        fw, fh = 0.045 * s, 0.022 * s
        return [_rect(size, tx, ty, fw, fh) for _, _, tx, ty in geo["legs"]]
    raise DataError(f"unknown accessory {name}")


def _render_u8(identity: IdentitySpec, scene: SceneSpec, size: int):
    geo = _figure_geometry(identity, scene, size)
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = BACKGROUNDS[scene.background][1]

    limb_hw = max(0.8, 0.022 * size)
    for ax, ay, tx, ty in geo["arms"] + geo["legs"]:
        img[_segment(size, ax, ay, tx, ty, limb_hw)] = LIMB_COLOR

    torso = _torso_mask(identity.body_shape, size, geo["cx"], geo["cy"])
    img[torso] = FIGURE_COLORS[identity.primary_color][1]
    motif = _motif_mask(identity.texture_motif, torso, size, geo["cx"], geo["cy"])
    if motif.any():
        img[motif] = MOTIF_COLORS[MOTIFS[identity.texture_motif]]

    img[_disk(size, geo["head_cx"], geo["head_cy"], geo["r_head"])] = (
        FIGURE_COLORS[identity.secondary_color][1]
    )
    acc_name = ACCESSORIES[identity.accessory]
    for mask in _accessory_masks(identity, geo, size):
        img[mask] = ACCESSORY_COLORS[acc_name]

    pose = np.zeros((size, size, 3), dtype=np.uint8)
    skel_hw = max(0.6, 0.01 * size)
    segs = [(geo["cx"], geo["cy"], geo["head_cx"], geo["head_cy"])]
    segs += geo["arms"] + geo["legs"]
    for x0, y0, x1, y1 in segs:
        pose[_segment(size, x0, y0, x1, y1, skel_hw)] = SKELETON_COLOR
    pose[_disk(size, geo["head_cx"], geo["head_cy"], 0.4 * geo["r_head"])] = SKELETON_COLOR
    return img, pose


def render(identity: IdentitySpec, scene: SceneSpec, size: int = 64):
    """Rasterize one (identity, scene); returns (image, pose map, caption).

    Images are float32 in [0,1] on the exact 1/256 grid used by the codec.
    """
    img, pose = _render_u8(identity, scene, size)
    return (
        img.astype(np.float32) / 256.0,
        pose.astype(np.float32) / 256.0,
        caption_tokens(identity, scene),
    )


# ---------------------------------------------------------------------------
# probes

_PALETTE_F = np.array([c for _, c in PALETTE], dtype=np.float32) / 256.0
_CLASS_NAMES = [n for n, _ in PALETTE]


def quantize(img: np.ndarray) -> np.ndarray:
    """Nearest-palette class index per pixel (exact on clean renders)."""
    d = img[..., None, :] - _PALETTE_F
    return np.argmin((d * d).sum(-1), axis=-1)


def _class_counts(q: np.ndarray) -> np.ndarray:
    return np.bincount(q.ravel(), minlength=len(PALETTE))


def _has_hole(sub: np.ndarray) -> bool:
    bg = ~sub
    trapped = int((bg & ~_reach_from_border(bg)).sum())
    return trapped >= max(2, int(0.02 * sub.sum()))


def _silhouette_stats(mask: np.ndarray):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    r0, r1 = ys.min(), ys.max()
    c0, c1 = xs.min(), xs.max()
    h, w = r1 - r0 + 1, c1 - c0 + 1
    fill = len(ys) / (h * w)
    asym = (ys.mean() - (r0 + r1) / 2.0) / h
    hole = 1.0 if _has_hole(mask[r0 : r1 + 1, c0 : c1 + 1]) else 0.0
    return np.array([fill, 3.0 * asym, 0.8 * math.log(h / w), 0.6 * hole])


@lru_cache(maxsize=8)
def _shape_signatures(size: int):
    sigs = []
    for shape in range(len(SHAPES)):
        mask = _torso_mask(shape, size, size / 2.0, size / 2.0)
        sigs.append(_silhouette_stats(mask))
    return np.stack(sigs)


def probe_attributes(img: np.ndarray) -> dict:
    """Recover the full attribute tuple from an image by palette rules.

    Exact on clean renders; nearest-match behavior on generated images.
    """
    size = img.shape[0]
    q = quantize(img)
    counts = _class_counts(q)
    nfig, nbg = len(FIGURE_COLORS), len(BACKGROUNDS)
    min_px = max(3, round(8 * (size / 64.0) ** 2))

    bg_counts = counts[nfig : nfig + nbg]
    background = BACKGROUNDS[int(np.argmax(bg_counts))][0]

    fig_counts = counts[:nfig]
    order = np.argsort(fig_counts)[::-1]
    primary = FIGURE_COLORS[int(order[0])][0] if fig_counts[order[0]] > 0 else None
    secondary = FIGURE_COLORS[int(order[1])][0] if fig_counts[order[1]] > 0 else None

    acc_base = nfig + nbg
    acc_counts = counts[acc_base : acc_base + len(ACCESSORIES) - 1]
    if acc_counts.max() >= min_px:
        accessory = ACCESSORIES[1:][int(np.argmax(acc_counts))]
    else:
        accessory = "none"

    motif_base = acc_base + len(ACCESSORIES) - 1
    motif_counts = counts[motif_base : motif_base + len(MOTIFS) - 1]
    if motif_counts.max() >= min_px:
        motif = MOTIFS[1:][int(np.argmax(motif_counts))]
    else:
        motif = "none"

    sil = np.zeros(q.shape, dtype=bool)
    if primary is not None:
        sil |= q == int(order[0])
    for j in range(len(MOTIFS) - 1):
        if motif_counts[j] >= min_px:
            sil |= q == motif_base + j
    stats = _silhouette_stats(sil)
    if stats is None:
        shape = None
    else:
        dist = ((stats - _shape_signatures(size)) ** 2).sum(axis=1)
        shape = SHAPES[int(np.argmin(dist))]

    return {
        "shape": shape,
        "primary": primary,
        "secondary": secondary,
        "acc": accessory,
        "motif": motif,
        "bg": background,
    }


def match_caption(img: np.ndarray, tokens) -> list:
    """Per-token satisfaction flags; unparseable tokens are unsatisfied."""
    probed = probe_attributes(img)
    flags = []
    for tok in tokens:
        attr, _, value = tok.partition(":")
        flags.append(bool(value) and probed.get(attr) == value)
    return flags


# ---------------------------------------------------------------------------
# dataset builds

EDIT_ATTRS = ["shape", "primary", "secondary", "acc", "motif", "bg"]


def _apply_edit(identity: IdentitySpec, scene: SceneSpec, attr: str, rng):
    """Single-attribute delta; returns (identity', scene', instruction tokens)."""
    def pick(n, avoid):
        v = int(rng.integers(n - 1))
        return v + (1 if v >= avoid else 0)

    ident, sc = identity, scene
    if attr == "shape":
        v = pick(len(SHAPES), identity.body_shape)
        ident = IdentitySpec(identity.id, v, identity.primary_color,
                             identity.secondary_color, identity.accessory,
                             identity.texture_motif)
        tok = f"shape:{SHAPES[v]}"
    elif attr == "primary":
        choices = [c for c in range(len(FIGURE_COLORS))
                   if c not in (identity.primary_color, identity.secondary_color)]
        v = int(rng.choice(choices))
        ident = IdentitySpec(identity.id, identity.body_shape, v,
                             identity.secondary_color, identity.accessory,
                             identity.texture_motif)
        tok = f"primary:{FIGURE_COLORS[v][0]}"
    elif attr == "secondary":
        choices = [c for c in range(len(FIGURE_COLORS))
                   if c not in (identity.primary_color, identity.secondary_color)]
        v = int(rng.choice(choices))
        ident = IdentitySpec(identity.id, identity.body_shape,
                             identity.primary_color, v, identity.accessory,
                             identity.texture_motif)
        tok = f"secondary:{FIGURE_COLORS[v][0]}"
    elif attr == "acc":
        v = pick(len(ACCESSORIES), identity.accessory)
        ident = IdentitySpec(identity.id, identity.body_shape,
                             identity.primary_color, identity.secondary_color,
                             v, identity.texture_motif)
        tok = f"acc:{ACCESSORIES[v]}"
    elif attr == "motif":
        v = pick(len(MOTIFS), identity.texture_motif)
        ident = IdentitySpec(identity.id, identity.body_shape,
                             identity.primary_color, identity.secondary_color,
                             identity.accessory, v)
        tok = f"motif:{MOTIFS[v]}"
    elif attr == "bg":
        v = pick(len(BACKGROUNDS), scene.background)
        sc = SceneSpec(scene.pose, v, scene.camera_offset)
        tok = f"bg:{BACKGROUNDS[v][0]}"
    else:
        raise DataError(f"unknown edit attribute {attr!r}")
    return ident, sc, ["edit", tok]


def _save_png(path, arr_u8):
    PILImage.fromarray(arr_u8, "RGB").save(path)


def build_dataset(out_dir, seed=0, n_train=512, n_test=64, scenes=6,
                  mode="one_to_many", size=64, n_triples=2000,
                  overwrite=False) -> str:
    """Render a dataset and write its tab-separated manifest; returns the path.

    one_to_one groups each record with itself, one_to_many groups all scenes
    of an identity, editing_triples writes (source row, edited row) pairs
    where the edited row's caption is the edit instruction.
    """
    if mode not in ("one_to_one", "one_to_many", "editing_triples"):
        raise DataError(f"unknown mode {mode!r}")
    if min(n_train, n_test, scenes) <= 0 or (mode == "editing_triples" and n_triples <= 0):
        raise DataError("counts must be positive")
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    if os.path.exists(manifest_path) and not overwrite:
        raise DataError(f"{manifest_path} exists; pass overwrite to replace")
    img_dir = os.path.join(out_dir, "images")
    pose_dir = os.path.join(out_dir, "poses")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(pose_dir, exist_ok=True)

    rows = []

    def emit(identity_id, stem, img, pose, caption, group, split):
        _save_png(os.path.join(img_dir, stem + ".png"), img)
        _save_png(os.path.join(pose_dir, stem + ".png"), pose)
        rows.append((str(identity_id), f"images/{stem}.png", f"poses/{stem}.png",
                     " ".join(caption), group, split))

    if mode in ("one_to_one", "one_to_many"):
        for idx in range(n_train + n_test):
            split = "train" if idx < n_train else "test"
            ident = identity_spec(seed, idx)
            for k in range(scenes):
                scene = scene_spec(seed, idx, k)
                img, pose = _render_u8(ident, scene, size)
                group = f"g{idx}" if mode == "one_to_many" else f"g{idx}_{k}"
                emit(idx, f"id{idx:05d}_s{k:02d}", img, pose,
                     caption_tokens(ident, scene), group, split)
    else:
        for t in range(n_triples):
            rng = np.random.default_rng([int(seed), int(t), 577])
            idx = int(rng.integers(n_train))
            ident = identity_spec(seed, idx)
            scene = scene_spec(seed, idx, 1000 + t)
            attr = EDIT_ATTRS[int(rng.integers(len(EDIT_ATTRS)))]
            ident2, scene2, instruction = _apply_edit(ident, scene, attr, rng)
            img, pose = _render_u8(ident, scene, size)
            img2, pose2 = _render_u8(ident2, scene2, size)
            emit(idx, f"t{t:05d}_src", img, pose,
                 caption_tokens(ident, scene), f"t{t}", "train")
            emit(idx, f"t{t:05d}_dst", img2, pose2, instruction, f"t{t}", "train")

    header = "#glyphflow-manifest\t" + MANIFEST_VERSION + "\t" + "\t".join(MANIFEST_FIELDS)
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for row in rows:
            f.write("\t".join(row) + "\n")
    build_vocabulary().save(os.path.join(out_dir, "vocab.txt"))
    return manifest_path


def read_manifest(path) -> list:
    """Parse a manifest; paths come back resolved against the manifest dir."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if len(header) < 2 or header[0] != "#glyphflow-manifest":
            raise DataError(f"{path}: missing manifest header")
        if header[1] != MANIFEST_VERSION:
            raise DataError(f"{path}: manifest version {header[1]}, "
                            f"this build reads {MANIFEST_VERSION}")
        for lineno, line in enumerate(f, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_FIELDS):
                raise DataError(f"{path}:{lineno}: expected "
                                f"{len(MANIFEST_FIELDS)} fields, got {len(parts)}")
            ident, img, pose, caption, group, split = parts
            records.append(Record(int(ident), os.path.join(base, img),
                                  os.path.join(base, pose),
                                  tuple(caption.split()), group, split))
    return records


def group_records(records) -> dict:
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec.group, []).append(rec)
    return groups
