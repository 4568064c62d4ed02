"""Procedural clean clips and the 15 hybrid haze/rain/snow/night degradations."""

import json
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError

FLAGS = ("haze", "rain", "snow", "night")
CONDITIONS = tuple(range(1, 16))
# night -> haze -> snow -> rain: scene-level effects before airborne occluders
ORDER = ("night", "haze", "snow", "rain")


def condition_flags(cond_id):
    """Condition ids 1..15 are bitmasks over (haze, rain, snow, night)."""
    if cond_id not in CONDITIONS:
        raise ConfigError(f"condition id must be in 1..15, got {cond_id}")
    return {name: bool(cond_id >> i & 1) for i, name in enumerate(FLAGS)}


def condition_id(**flags):
    cid = sum(1 << i for i, name in enumerate(FLAGS) if flags.get(name))
    if cid == 0:
        raise ConfigError("at least one weather flag must be set")
    return cid


def condition_name(cond_id):
    return "+".join(n for n, on in condition_flags(cond_id).items() if on)


@dataclass
class HazeParams:
    beta: float = 0.7  # scattering per unit depth
    airlight: tuple = (0.85, 0.85, 0.85)


@dataclass
class RainParams:
    density: float = 8.0  # streaks per 1000 px
    angle: float = 10.0  # degrees from vertical
    length: float = 8.0
    velocity: float = 9.0  # px per frame along the streak
    intensity: float = 0.5


@dataclass
class SnowParams:
    density: float = 5.0  # flakes per 1000 px
    radius: tuple = (0.8, 2.0)
    drift: tuple = (2.0, 0.5)  # (row, col) px per frame
    flutter: float = 1.2


@dataclass
class NightParams:
    gamma: float = 2.0
    scale: float = 0.45
    noise: float = 0.02


@dataclass
class DegradationRecipe:
    condition: int
    haze: HazeParams = field(default_factory=HazeParams)
    rain: RainParams = field(default_factory=RainParams)
    snow: SnowParams = field(default_factory=SnowParams)
    night: NightParams = field(default_factory=NightParams)
    seed: int = 0

    @property
    def flags(self):
        return condition_flags(self.condition)

    def to_dict(self):
        d = asdict(self)
        d["flags"] = self.flags
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            condition=int(d["condition"]),
            haze=HazeParams(d["haze"]["beta"], tuple(d["haze"]["airlight"])),
            rain=RainParams(**d["rain"]),
            snow=SnowParams(d["snow"]["density"], tuple(d["snow"]["radius"]), tuple(d["snow"]["drift"]), d["snow"]["flutter"]),
            night=NightParams(**d["night"]),
            seed=int(d.get("seed", 0)),
        )


def sample_recipe(cond_id, rng, seed=0):
    """Draw parameters for every effect (whether active or not) so toggling a flag never shifts the others."""
    condition_flags(cond_id)
    a = rng.uniform(0.75, 0.95)
    haze = HazeParams(float(rng.uniform(0.5, 1.2)), tuple(float(a + rng.uniform(-0.04, 0.04)) for _ in range(3)))
    rain = RainParams(
        density=float(rng.uniform(6.0, 12.0)),
        angle=float(rng.uniform(-20, 20)),
        length=float(rng.uniform(5.0, 10.0)),
        velocity=float(rng.uniform(6.0, 12.0)),
        intensity=float(rng.uniform(0.35, 0.6)),
    )
    lo = float(rng.uniform(0.6, 1.0))
    snow = SnowParams(
        density=float(rng.uniform(4.0, 8.0)),
        radius=(lo, lo + float(rng.uniform(0.6, 1.4))),
        drift=(float(rng.uniform(1.0, 3.0)), float(rng.uniform(-1.0, 1.0))),
        flutter=float(rng.uniform(0.5, 2.0)),
    )
    night = NightParams(float(rng.uniform(1.6, 2.4)), float(rng.uniform(0.3, 0.55)), float(rng.uniform(0.01, 0.03)))
    return DegradationRecipe(cond_id, haze, rain, snow, night, seed)


# ---------------------------------------------------------------- clean scenes


@dataclass
class Clip:
    clean: np.ndarray  # (T, H, W, 3) in [0, 1]
    depth: np.ndarray  # (T, H, W) in (0, 1]
    seed: int
    degraded: np.ndarray = None
    recipe: DegradationRecipe = None

    def __post_init__(self):
        if self.degraded is not None and self.degraded.shape != self.clean.shape:
            raise ValueError("clean and degraded frames must match")


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def render_clean_clip(seed, T, H, W):
    """Smooth-noise background plus textured shapes at pseudo-depths, under a moving camera."""
    if T < 3:
        raise ConfigError("clips need at least 3 frames")
    rng = np.random.default_rng(seed)
    speed = rng.uniform(0.5, 2.0)
    heading = rng.uniform(0, 2 * math.pi)
    vel = np.array([math.sin(heading), math.cos(heading)]) * speed

    n_waves = 6
    freqs = rng.uniform(-0.12, 0.12, (n_waves, 2))
    phases = rng.uniform(0, 2 * math.pi, (n_waves, 3))
    amps = rng.uniform(0.04, 0.12, (n_waves, 3))
    base = rng.uniform(0.3, 0.7, 3)

    n_obj = int(rng.integers(3, 9))
    objs = []
    for _ in range(n_obj):
        objs.append(dict(
            kind=int(rng.integers(0, 2)),  # 0 rectangle, 1 disc
            center=rng.uniform([0, 0], [H, W]),
            half=rng.uniform(3, max(4.0, min(H, W) / 4), 2),
            color=rng.uniform(0.05, 0.95, 3),
            stripe=rng.uniform(0.2, 1.2),
            stripe_dir=rng.uniform(0, math.pi),
            stripe_phase=rng.uniform(0, 2 * math.pi),
            depth=float(rng.uniform(0.25, 0.85)),
            own=rng.uniform(-0.5, 0.5, 2),
        ))
    objs.sort(key=lambda o: -o["depth"])  # far to near

    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    bg_depth = 1.0 - 0.45 * rows / max(H - 1, 1)

    clean = np.empty((T, H, W, 3))
    depth = np.empty((T, H, W))
    for t in range(T):
        y = rows + vel[0] * t
        x = cols + vel[1] * t
        img = np.broadcast_to(base, (H, W, 3)).copy()
        for f, p, a in zip(freqs, phases, amps):
            img += a * np.sin(2 * math.pi * (f[0] * y + f[1] * x)[..., None] + p)
        dmap = bg_depth.copy()
        for o in objs:
            shift = vel * t * (1.0 + 0.5 * (1.0 - o["depth"])) + o["own"] * t
            cy, cx = o["center"] - shift
            dy, dx = rows - cy, cols - cx
            hy, hx = o["half"]
            if o["kind"] == 0:
                inside = np.minimum(hy - np.abs(dy), hx - np.abs(dx))
            else:
                inside = hy - np.sqrt(dy * dy + dx * dx)
            alpha = _smoothstep(inside + 0.5)
            proj = dy * math.sin(o["stripe_dir"]) + dx * math.cos(o["stripe_dir"])
            tex = o["color"] * (0.75 + 0.25 * np.sin(o["stripe"] * proj + o["stripe_phase"]))[..., None]
            img = img * (1 - alpha[..., None]) + tex * alpha[..., None]
            dmap = np.where(alpha > 0.5, o["depth"], dmap)
        clean[t] = np.clip(img, 0.0, 1.0)
        depth[t] = dmap
    return Clip(clean, depth, seed)


# ---------------------------------------------------------------- effects


def apply_haze(frame, depth, beta, airlight):
    """Atmospheric scattering: I = J t + A (1 - t), t = exp(-beta * depth)."""
    t = np.exp(-beta * depth)[..., None]
    return frame * t + np.asarray(airlight, dtype=np.float64) * (1 - t)


def _segment_distance(rows, cols, p0, p1):
    d = p1 - p0
    L2 = float(d @ d) or 1e-12
    t = np.clip(((rows - p0[0]) * d[0] + (cols - p0[1]) * d[1]) / L2, 0, 1)
    return np.hypot(rows - (p0[0] + t * d[0]), cols - (p0[1] + t * d[1]))


def rain_mask(shape, t_index, params, seed):
    """Streak intensity field for frame ``t_index``; streaks fall coherently across frames."""
    H, W = shape
    rng = np.random.default_rng([seed, 101])
    n = int(round(params.density * H * W / 1000.0))
    if n == 0 or params.intensity == 0:
        return np.zeros(shape)
    theta = math.radians(params.angle)
    direction = np.array([math.cos(theta), math.sin(theta)])
    span = np.array([H + 2 * params.length, W + 2 * params.length])
    start = rng.uniform(0, 1, (n, 2)) * span
    bright = rng.uniform(0.6, 1.0, n)
    vel = rng.uniform(0.8, 1.2, n) * params.velocity
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    mask = np.zeros(shape)
    for s, b, v in zip(start, bright, vel):
        head = np.mod(s + direction * v * t_index, span) - params.length
        tail = head - direction * params.length
        dist = _segment_distance(rows, cols, tail, head)
        mask = np.maximum(mask, b * np.clip(1.0 - dist / 0.8, 0.0, 1.0))
    return mask * params.intensity


def apply_rain(frame, t_index, params, seed):
    mask = rain_mask(frame.shape[:2], t_index, params, seed)
    return np.clip(frame + mask[..., None], 0.0, 1.0)


def snow_alpha(shape, t_index, params, seed):
    H, W = shape
    rng = np.random.default_rng([seed, 202])
    n = int(round(params.density * H * W / 1000.0))
    if n == 0:
        return np.zeros(shape)
    pad = 4.0
    span = np.array([H + 2 * pad, W + 2 * pad])
    start = rng.uniform(0, 1, (n, 2)) * span
    radius = rng.uniform(params.radius[0], params.radius[1], n)
    phase = rng.uniform(0, 2 * math.pi, n)
    freq = rng.uniform(0.3, 0.9, n)
    opacity = rng.uniform(0.6, 0.95, n)
    drift = np.asarray(params.drift) * (0.5 + radius[:, None] / params.radius[1])
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    alpha = np.zeros(shape)
    for i in range(n):
        pos = start[i] + drift[i] * t_index
        pos[1] += params.flutter * math.sin(freq[i] * t_index + phase[i])
        pos = np.mod(pos, span) - pad
        dist = np.hypot(rows - pos[0], cols - pos[1])
        disc = opacity[i] * _smoothstep((radius[i] + 0.5 - dist) / 1.0)
        alpha = 1 - (1 - alpha) * (1 - disc)
    return alpha


def apply_snow(frame, t_index, params, seed):
    a = snow_alpha(frame.shape[:2], t_index, params, seed)[..., None]
    return np.clip(frame * (1 - a) + 0.95 * a, 0.0, 1.0)


def apply_night(frame, gamma, scale, sigma, seed):
    out = scale * np.power(frame, gamma)
    if sigma > 0:
        out = out + np.random.default_rng([*np.atleast_1d(seed).tolist(), 303]).normal(0.0, sigma, frame.shape)
    return np.clip(out, 0.0, 1.0)


def degrade(clip, recipe, seed=None):
    """Degrade every frame with the recipe's active effects in fixed order."""
    seed = recipe.seed if seed is None else seed
    flags = recipe.flags
    out = np.empty_like(clip.clean)
    for t in range(clip.clean.shape[0]):
        f = clip.clean[t]
        if flags["night"]:
            n = recipe.night
            f = apply_night(f, n.gamma, n.scale, n.noise, [seed, t])
        if flags["haze"]:
            airlight = np.asarray(recipe.haze.airlight)
            if flags["night"]:
                # scattered ambient light is dim at night
                airlight = airlight * recipe.night.scale
            f = apply_haze(f, clip.depth[t], recipe.haze.beta, airlight)
        if flags["snow"]:
            f = apply_snow(f, t, recipe.snow, seed)
        if flags["rain"]:
            f = apply_rain(f, t, recipe.rain, seed)
        out[t] = f
    return Clip(clip.clean, clip.depth, clip.seed, out, recipe)


# ---------------------------------------------------------------- dataset


@dataclass
class DatasetConfig:
    conditions: list = field(default_factory=lambda: list(CONDITIONS))
    clips_per_condition: int = 4
    frames: int = 8
    height: int = 48
    width: int = 48
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.conditions == "all":
            self.conditions = list(CONDITIONS)
        self.conditions = [int(c) for c in self.conditions]
        for c in self.conditions:
            condition_flags(c)
        if self.frames < 3:
            raise ConfigError("clips need at least 3 frames")
        if self.height % 4 or self.width % 4:
            raise ConfigError("frame size must be divisible by 4")

    @classmethod
    def from_dict(cls, d):
        known = {"conditions", "clips_per_condition", "frames", "height", "width", "seed", "workers"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


def clip_seed(master, cond_id, index):
    return int(np.random.SeedSequence([master, cond_id, index]).generate_state(1)[0])


def split_of(cond_index, clip_index):
    """Every fifth clip of each condition goes to test (80/20); the offset staggers across conditions."""
    return "test" if (clip_index + cond_index) % 5 == 4 else "train"


def plan(cfg):
    return [
        (split_of(i, n), c, n, clip_seed(cfg.seed, c, n))
        for n in range(cfg.clips_per_condition)
        for i, c in enumerate(cfg.conditions)
    ]


def _to_u8(a):
    return np.round(np.clip(a, 0, 1) * 255.0).astype(np.uint8)


def _write_clip(args):
    out_dir, split, cond, n, seed, cfg = args
    rng = np.random.default_rng(seed)
    scene_seed, deg_seed = (int(s) for s in rng.integers(0, 2**31 - 1, 2))
    clean = render_clean_clip(scene_seed, cfg.frames, cfg.height, cfg.width)
    recipe = sample_recipe(cond, rng, deg_seed)
    clip = degrade(clean, recipe)
    d = Path(out_dir) / split / f"cond_{cond:02d}" / f"clip_{n:03d}"
    (d / "gt").mkdir(parents=True, exist_ok=True)
    (d / "in").mkdir(parents=True, exist_ok=True)
    for t in range(cfg.frames):
        Image.fromarray(_to_u8(clip.clean[t])).save(d / "gt" / f"frame_{t:04d}.png")
        Image.fromarray(_to_u8(clip.degraded[t])).save(d / "in" / f"frame_{t:04d}.png")
    meta = {"condition": cond, "name": condition_name(cond), "clip": n, "seed": seed, "recipe": recipe.to_dict()}
    (d / "recipe.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return str(d)


def make_dataset(cfg, out_dir, force=False):
    """Write ``train/`` and ``test/`` trees of 8-bit PNG clip pairs under ``out_dir``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise DatasetError(f"{out} exists and is not empty (use force to overwrite)")
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"{out} is not writable")
    jobs = [(str(out), split, c, n, s, cfg) for split, c, n, s in plan(cfg)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            paths = list(pool.map(_write_clip, jobs))
    else:
        paths = [_write_clip(j) for j in jobs]
    manifest = {k: v for k, v in asdict(cfg).items() if k != "workers"}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------- loading


@dataclass
class ClipData:
    path: Path
    condition: int
    clean: np.ndarray  # (T, H, W, 3) float32
    degraded: np.ndarray


def _read_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise DatasetError(f"cannot read {path}: {e}") from e
    return arr


def load_split(root, split, conditions=None):
    base = Path(root) / split
    if not base.is_dir():
        raise DatasetError(f"missing split directory {base}")
    clips = []
    for cond_dir in sorted(base.glob("cond_*")):
        cond = int(cond_dir.name.split("_")[1])
        if conditions is not None and cond not in conditions:
            continue
        for clip_dir in sorted(cond_dir.glob("clip_*")):
            gts = sorted((clip_dir / "gt").glob("frame_*.png"))
            ins = sorted((clip_dir / "in").glob("frame_*.png"))
            if not gts or [p.name for p in gts] != [p.name for p in ins]:
                raise DatasetError(f"gt/in frames do not pair up in {clip_dir}")
            clean = np.stack([_read_png(p) for p in gts])
            deg = np.stack([_read_png(p) for p in ins])
            if clean.shape != deg.shape:
                raise DatasetError(f"gt/in shapes differ in {clip_dir}")
            clips.append(ClipData(clip_dir, cond, clean, deg))
    if not clips:
        raise DatasetError(f"no clips found under {base}")
    return clips


def triplets(clips):
    """All (clip_index, center_frame) pairs with both neighbours present."""
    return [(i, t) for i, c in enumerate(clips) for t in range(1, c.clean.shape[0] - 1)]
