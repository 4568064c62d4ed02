"""Training loop, triplet sampling and held-out evaluation."""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .analysis import psnr, ssim
from .checkpoint import save_checkpoint
from .errors import DatasetError
from .model import UniWRV
from .tensorkit.nn import Adam, cosine_lr
from .tensorkit.tensor import Tape
from .weathergen import load_split, triplets

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("total", "l1", "prior_v", "prior_c", "flow")


class TripletSampler:
    """Random cropped (degraded, clean) triplet batches with flip / rotate augmentation."""

    def __init__(self, clips, crop, batch_size, seed=0, augment=True):
        self.clips = clips
        self.index = triplets(clips)
        if not self.index:
            raise DatasetError("no triplets available for training")
        h, w = clips[0].clean.shape[1:3]
        if crop > min(h, w):
            raise DatasetError(f"crop {crop} larger than frames {h}x{w}")
        self.crop = crop
        self.batch_size = batch_size
        self.augment = augment
        self.rng = np.random.default_rng([seed, 11])

    def _one(self):
        ci, t = self.index[self.rng.integers(len(self.index))]
        clip = self.clips[ci]
        h, w = clip.clean.shape[1:3]
        r = self.rng.integers(h - self.crop + 1)
        c = self.rng.integers(w - self.crop + 1)
        win = (slice(t - 1, t + 2), slice(r, r + self.crop), slice(c, c + self.crop))
        d, g = clip.degraded[win], clip.clean[win]
        if self.augment:
            flip, k = self.rng.integers(2), self.rng.integers(4)
            if flip:
                d, g = d[:, :, ::-1], g[:, :, ::-1]
            d, g = np.rot90(d, k, axes=(1, 2)), np.rot90(g, k, axes=(1, 2))
        return d, g

    def batch(self):
        pairs = [self._one() for _ in range(self.batch_size)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def train_step(model, opt, d, g, lr):
    """One optimizer step; returns the float loss terms."""
    opt.lr = lr
    with Tape() as tape:
        _, aux = model.forward(d, g)
        losses = aux["losses"]
    tape.backward(losses["total"])
    opt.step()
    opt.zero_grad()
    return {k: float(v.item()) for k, v in losses.items()}


@dataclass
class TrainResult:
    model: UniWRV
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    seconds: float = 0.0


def train(run_cfg, data_dir, out_dir, callback=None):
    """Train from scratch; writes config.yaml, metrics.csv and checkpoints into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_cfg.dump(out / "config.yaml")
    tc = run_cfg.train
    model = UniWRV(run_cfg.resolved_model())
    clips = load_split(data_dir, "train", run_cfg.data.conditions)
    sampler = TripletSampler(clips, tc.crop, tc.batch_size, tc.seed, tc.augment)
    opt = Adam(model.parameters(), tc.lr)
    result = TrainResult(model)
    start = time.perf_counter()

    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration",) + LOSS_COLUMNS + ("lr",))
        for it in range(tc.iterations):
            lr = cosine_lr(it, tc.iterations, tc.lr, tc.lr_min)
            d, g = sampler.batch()
            losses = train_step(model, opt, d.astype(model.dtype), g.astype(model.dtype), lr)
            row = [it + 1] + [losses.get(k, 0.0) for k in LOSS_COLUMNS] + [lr]
            result.history.append(row)
            if (it + 1) % tc.log_every == 0 or it + 1 == tc.iterations:
                writer.writerow([row[0]] + [f"{x:.8g}" for x in row[1:]])
                fh.flush()
            if (it + 1) % tc.checkpoint_every == 0 or it + 1 == tc.iterations:
                path = save_checkpoint(model, out / f"ckpt_{it + 1:06d}.uwrv", iteration=it + 1)
                result.checkpoints.append(path)
            if callback is not None:
                callback(it + 1, losses)
    save_checkpoint(model, out / "final.uwrv", iteration=tc.iterations)
    result.seconds = time.perf_counter() - start
    log.info("trained %d iterations in %.1fs", tc.iterations, result.seconds)
    return result


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalRow:
    condition: int
    clip: str
    frame: int
    psnr: float
    ssim: float
    input_psnr: float
    input_ssim: float


def restore_triplets(model, clips, items, batch_size=8):
    """Restored center frames for (clip_index, t) pairs, clamped to [0, 1]."""
    outs = []
    for s in range(0, len(items), batch_size):
        chunk = items[s:s + batch_size]
        d = np.stack([clips[ci].degraded[t - 1:t + 2] for ci, t in chunk]).astype(model.dtype)
        r, _ = model.forward(d)
        outs.append(np.clip(r.data, 0.0, 1.0))
    return np.concatenate(outs) if outs else np.zeros((0,))


def evaluate(model, clips, max_triplets=None, batch_size=8, image_dir=None):
    items = triplets(clips)
    if max_triplets is not None:
        items = items[:max_triplets]
    restored = restore_triplets(model, clips, items, batch_size)
    rows = []
    for (ci, t), r in zip(items, restored):
        clip = clips[ci]
        gt, deg = clip.clean[t], clip.degraded[t]
        rows.append(EvalRow(clip.condition, clip.path.name, t, psnr(r, gt), ssim(r, gt), psnr(deg, gt), ssim(deg, gt)))
        if image_dir is not None:
            dst = Path(image_dir) / f"cond_{clip.condition:02d}" / clip.path.name
            dst.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.round(r * 255).astype(np.uint8)).save(dst / f"frame_{t:04d}.png")
    return rows


def summarize(rows):
    """Per-condition means plus an ``all`` entry: {key: (psnr, ssim, input_psnr, input_ssim, n)}."""
    groups = {}
    for r in rows:
        groups.setdefault(r.condition, []).append(r)
    groups["all"] = list(rows)
    out = {}
    for key, rs in groups.items():
        a = np.array([(r.psnr, r.ssim, r.input_psnr, r.input_ssim) for r in rs])
        out[key] = tuple(a.mean(axis=0).tolist()) + (len(rs),)
    return out


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "clip", "frame", "psnr", "ssim", "input_psnr", "input_ssim"])
        for r in rows:
            w.writerow([r.condition, r.clip, r.frame, f"{r.psnr:.6f}", f"{r.ssim:.6f}",
                        f"{r.input_psnr:.6f}", f"{r.input_ssim:.6f}"])
        for key, (p, s, ip, iss, _) in sorted(summarize(rows).items(), key=lambda kv: str(kv[0])):
            w.writerow([key, "mean", "", f"{p:.6f}", f"{s:.6f}", f"{ip:.6f}", f"{iss:.6f}"])


def load_test_clips(data_dir, conditions=None):
    return load_split(data_dir, "test", conditions)
