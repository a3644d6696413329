"""Synthetic HDR scenes, exposure corruption, reference LDR targets, and triplet datasets."""

from dataclasses import dataclass, field
import json
import math
import os

import numpy as np

from .imageio import read_pfm, read_ppm, write_pfm, write_ppm
from .model import DomainTransferParams

EV_LIMITS = (-6.0, 3.0)


@dataclass(frozen=True)
class ExposureSimulator:
    """Camera model: exposure time 2**ev followed by a power-law response."""

    crf_gamma: float = 1 / 2.2
    ev_range: tuple = EV_LIMITS
    contrast_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.ev_range
        if not EV_LIMITS[0] <= lo <= hi <= EV_LIMITS[1]:
            raise ValueError(f"ev_range {self.ev_range} must lie within {list(EV_LIMITS)}")
        if not self.crf_gamma > 0:
            raise ValueError("crf_gamma must be positive")
        clo, chi = self.contrast_range
        if not 0 < clo <= chi:
            raise ValueError("contrast_range must be positive and ordered")


@dataclass
class TrainingTriplet:
    input: np.ndarray
    hdr_gt: np.ndarray
    ldr_gt: np.ndarray
    ev: float
    contrast: float = 1.0

    def __post_init__(self):
        if not (self.input.shape == self.hdr_gt.shape == self.ldr_gt.shape):
            raise ValueError("triplet images must share dimensions")
        if not EV_LIMITS[0] <= self.ev <= EV_LIMITS[1]:
            raise ValueError(f"ev {self.ev} outside {list(EV_LIMITS)}")


def _blob(yy, xx, cy, cx, sy, sx):
    return np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))


def generate_scene(seed, width, height, s_max=64.0):
    """Procedural radiance map, (height, width, 3) float32 in [0, s_max].

    Bright sky gradient above a textured ground plane, dark building
    silhouettes, and one to three near-saturating light sources.
    """
    if width < 16 or height < 16:
        raise ValueError("scene dimensions must be at least 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")

    horizon = rng.uniform(0.4, 0.6)
    top, low = rng.uniform(1.5, 4.0), rng.uniform(0.5, 1.2)
    t = np.clip(yy / horizon, 0, 1)
    sky = top * (1 - t) + low * t
    sky_tint = np.array([rng.uniform(0.75, 0.9), rng.uniform(0.9, 1.0), rng.uniform(1.1, 1.3)])

    texture = np.ones_like(xx)
    for _ in range(4):
        fy, fx = rng.uniform(4, 12, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        texture += 0.12 * np.sin(2 * math.pi * (fy * yy + fx * xx) + phase)
    texture = np.clip(texture, 0.3, 1.6)
    ground_level = rng.uniform(0.05, 0.4)
    ground = ground_level * texture * (0.6 + 0.8 * (yy - horizon).clip(0))
    ground_tint = np.array([rng.uniform(0.9, 1.1), rng.uniform(0.85, 1.0), rng.uniform(0.7, 0.9)])

    below = (yy >= horizon)[..., None]
    rad = np.where(below, ground[..., None] * ground_tint, sky[..., None] * sky_tint)

    # building silhouettes rising above the horizon; always deep in shadow
    for _ in range(rng.integers(2, 5)):
        x0 = rng.uniform(0, 0.85)
        bw = rng.uniform(0.08, 0.2)
        roof = horizon - rng.uniform(0.05, 0.3)
        mask = (xx >= x0) & (xx < x0 + bw) & (yy >= roof)
        level = rng.uniform(0.001, 0.007)
        rad = np.where(mask[..., None], (level * texture)[..., None] * np.ones(3), rad)

    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.05, horizon), rng.uniform(0.05, 0.95)
        sy, sx = rng.uniform(0.02, 0.06, size=2)
        peak = rng.uniform(0.3, 1.0) * s_max
        warm = np.array([1.0, rng.uniform(0.8, 0.95), rng.uniform(0.55, 0.8)])
        rad = rad + peak * _blob(yy, xx, cy, cx, sy, sx)[..., None] * warm

    return np.clip(rad, 0, s_max).astype(np.float32)


def simulate_exposure(scene, ev, sim=None, contrast=1.0):
    """LDR capture: clip01((S * 2**ev) ** crf_gamma * contrast)."""
    sim = ExposureSimulator() if sim is None else sim
    lo, hi = sim.ev_range
    if not lo <= ev <= hi:
        raise ValueError(f"ev {ev} outside {list(sim.ev_range)}")
    exposed = np.asarray(scene, dtype=np.float64) * 2.0 ** ev
    return np.clip(np.power(exposed, sim.crf_gamma) * contrast, 0, 1).astype(np.float32)


def reference_ldr(scene, p=None):
    """Global log tone curve sharing the domain-transfer normalization bounds."""
    p = DomainTransferParams() if p is None else p
    lo, hi = p.log_bounds
    x = (np.log(np.asarray(scene, dtype=np.float64) + p.delta) - lo) / (hi - lo)
    return np.clip(x, 0, 1).astype(np.float32)


def tile_windows(height, width, patch):
    ph, pw = patch
    if ph > height or pw > width:
        raise ValueError(f"patch {ph}x{pw} larger than scene {height}x{width}")
    return [
        (r, c)
        for r in range(0, height - ph + 1, ph)
        for c in range(0, width - pw + 1, pw)
    ]


def make_dataset(n_scenes, patch=(64, 64), seed=0, sim=None, scene_size=(64, 128),
                 p=None, scene_fn=generate_scene):
    """Triplets cut from ``n_scenes`` generated scenes with non-overlapping patches."""
    sim = ExposureSimulator() if sim is None else sim
    p = DomainTransferParams() if p is None else p
    h, w = scene_size
    windows = tile_windows(h, w, patch)
    ph, pw = patch
    root = np.random.SeedSequence(seed)
    out = []
    for child in root.spawn(n_scenes):
        scene_seed, corrupt_seed = child.generate_state(2)
        rng = np.random.default_rng(int(corrupt_seed))
        ev = float(rng.uniform(*sim.ev_range))
        contrast = float(rng.uniform(*sim.contrast_range))
        scene = scene_fn(int(scene_seed), w, h, p.s_max)
        ldr_in = simulate_exposure(scene, ev, sim, contrast)
        ldr_gt = reference_ldr(scene, p)
        for r, c in windows:
            sl = (slice(r, r + ph), slice(c, c + pw))
            out.append(TrainingTriplet(ldr_in[sl].copy(), scene[sl].copy(), ldr_gt[sl].copy(),
                                       ev, contrast))
    return out


def stack(triplets):
    """(inputs, hdr, ldr) as NCHW float arrays."""
    def nchw(key):
        return np.stack([getattr(t, key) for t in triplets]).transpose(0, 3, 1, 2)

    return nchw("input"), nchw("hdr_gt"), nchw("ldr_gt")


MANIFEST = "dataset.json"


def write_dataset(out_dir, triplets, meta=None):
    if not triplets:
        raise ValueError("empty dataset requested")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, t in enumerate(triplets):
        names = {k: f"{i:05d}_{k}.{ext}" for k, ext in
                 (("input", "ppm"), ("hdr", "pfm"), ("ldr", "ppm"))}
        write_ppm(os.path.join(out_dir, names["input"]), t.input)
        write_pfm(os.path.join(out_dir, names["hdr"]), t.hdr_gt)
        write_ppm(os.path.join(out_dir, names["ldr"]), t.ldr_gt)
        entries.append({**names, "ev": t.ev, "contrast": t.contrast})
    manifest = {"version": 1, "meta": meta or {}, "triplets": entries}
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    with open(path) as f:
        manifest = json.load(f)
    entries = manifest.get("triplets")
    if not isinstance(entries, list) or not entries:
        raise ValueError(f"{path}: manifest lists no triplets")
    out = []
    for e in entries:
        out.append(TrainingTriplet(
            read_ppm(os.path.join(data_dir, e["input"])),
            read_pfm(os.path.join(data_dir, e["hdr"])),
            read_ppm(os.path.join(data_dir, e["ldr"])),
            float(e["ev"]),
            float(e.get("contrast", 1.0)),
        ))
    return out
