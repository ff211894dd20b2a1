"""Synthetic moving-shape clips and controlled temporal perturbations.

Clips are [F, 1, H, W] in [-1, 1]: a flat background with one square or disc
moving linearly, bouncing off the borders. Fractional positions are rendered
by bilinear splatting of an integer stencil, which conserves total intensity.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import tdt
from .errors import TDTIOError, UsageError
from .tensor import default_dtype

KINDS = ("square", "disc")
JITTER_MODES = ("position_noise", "frame_shuffle", "teleport")
N_DIRECTIONS = 4


@dataclass
class SceneSpec:
    kind: str = "square"
    size: int = 2
    start: tuple = (0.0, 0.0)  # (y, x) of the stencil's top-left corner
    velocity: tuple = (0.0, 1.0)  # cells per frame
    intensity: float = 2.0
    background: float = -1.0

    def __post_init__(self):
        self.start = tuple(float(v) for v in self.start)
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.kind not in KINDS:
            raise UsageError(f"unknown shape kind {self.kind!r}")

    @property
    def class_id(self) -> int:
        vy, vx = self.velocity
        if vy == 0 and vx == 0:
            bucket = 0
        else:
            # 0: +x, 1: -y (up), 2: -x, 3: +y
            angle = math.atan2(-vy, vx) % (2 * math.pi)
            bucket = int(((angle + math.pi / 4) // (math.pi / 2)) % N_DIRECTIONS)
        return KINDS.index(self.kind) * N_DIRECTIONS + bucket


@dataclass
class JitterSpec:
    mode: str = "position_noise"
    amplitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in JITTER_MODES:
            raise UsageError(f"unknown jitter mode {self.mode!r}")


def stencil(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size))
    c = (size - 1) / 2
    r = size / 2 - 0.25
    yy, xx = np.mgrid[:size, :size]
    return (((yy - c) ** 2 + (xx - c) ** 2) <= r * r).astype(np.float64)


def reflect(x: float, limit: float) -> float:
    """Fold ``x`` into [0, limit] by reflection at both ends."""
    if limit <= 0:
        return 0.0
    period = 2 * limit
    x = math.fmod(x, period)
    if x < 0:
        x += period
    return period - x if x > limit else x


def splat(mask: np.ndarray, y: float, x: float, H: int, W: int) -> np.ndarray:
    """Bilinear placement of ``mask`` with its top-left corner at (y, x)."""
    s_h, s_w = mask.shape
    canvas = np.zeros((H + 1, W + 1))
    iy, ix = int(math.floor(y)), int(math.floor(x))
    fy, fx = y - iy, x - ix
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            w = wy * wx
            if w > 0:
                canvas[iy + dy : iy + dy + s_h, ix + dx : ix + dx + s_w] += w * mask
    return canvas[:H, :W]


def trajectory(spec: SceneSpec, F: int, H: int, W: int) -> np.ndarray:
    lim_y, lim_x = H - spec.size, W - spec.size
    out = np.empty((F, 2))
    for f in range(F):
        out[f, 0] = reflect(spec.start[0] + f * spec.velocity[0], lim_y)
        out[f, 1] = reflect(spec.start[1] + f * spec.velocity[1], lim_x)
    return out


def render(spec: SceneSpec, positions: np.ndarray, H: int, W: int) -> np.ndarray:
    mask = stencil(spec.kind, spec.size)
    frames = [spec.background + spec.intensity * splat(mask, y, x, H, W) for y, x in positions]
    return np.clip(np.stack(frames)[:, None], -1.0, 1.0)


def _check_fits(spec: SceneSpec, H: int, W: int) -> None:
    if spec.size > min(H, W) or spec.size < 1:
        raise UsageError(f"shape of size {spec.size} does not fit a {H}x{W} frame")


def random_scene(rng: np.random.Generator, H: int, W: int) -> SceneSpec:
    kind = KINDS[int(rng.integers(len(KINDS)))]
    size = int(rng.integers(2, 4)) if kind == "square" else int(rng.integers(3, 5))
    size = min(size, H, W)
    speed = rng.uniform(0.5, 1.25)
    angle = rng.uniform(0, 2 * math.pi)
    return SceneSpec(
        kind=kind,
        size=size,
        start=(rng.uniform(0, H - size), rng.uniform(0, W - size)),
        velocity=(-speed * math.sin(angle), speed * math.cos(angle)),
        intensity=float(rng.uniform(1.4, 2.0)),
        background=-1.0,
    )


def gen_coherent(spec: Optional[SceneSpec], F: int, H: int, W: int, seed: int = 0):
    """Render linear motion; a random scene is drawn from ``seed`` when ``spec`` is None.

    Returns (video [F, 1, H, W], class id, spec).
    """
    if spec is None:
        spec = random_scene(np.random.default_rng(seed), H, W)
    _check_fits(spec, H, W)
    video = render(spec, trajectory(spec, F, H, W), H, W)
    return torch.from_numpy(video).to(default_dtype()), spec.class_id, spec


def inject_jitter(video: torch.Tensor, jitter: JitterSpec, scene: Optional[SceneSpec] = None) -> torch.Tensor:
    """Apply one temporal perturbation; amplitude 0 returns an exact copy.

    position_noise and teleport re-render the object and need its ``scene``.
    """
    if jitter.amplitude == 0:
        return video.clone()
    rng = np.random.default_rng(jitter.seed)
    F, _, H, W = video.shape
    if jitter.mode == "frame_shuffle":
        window = int(jitter.amplitude)
        if window <= 1:
            return video.clone()
        order = np.arange(F)
        for start in range(0, F, window):
            chunk = order[start : start + window]
            order[start : start + window] = rng.permutation(chunk)
        return video[torch.from_numpy(order)].clone()
    if scene is None:
        raise UsageError(f"jitter mode {jitter.mode!r} needs the scene spec")
    pos = trajectory(scene, F, H, W)
    lim = (H - scene.size, W - scene.size)
    if jitter.mode == "position_noise":
        noise = rng.normal(0.0, jitter.amplitude, size=pos.shape)
        pos = np.array([[reflect(p[0] + n[0], lim[0]), reflect(p[1] + n[1], lim[1])] for p, n in zip(pos, noise)])
    else:
        n_events = min(int(jitter.amplitude), F)
        for f in rng.choice(F, size=n_events, replace=False):
            pos[f] = (rng.uniform(0, lim[0]), rng.uniform(0, lim[1]))
    return torch.from_numpy(render(scene, pos, H, W)).to(video.dtype)


def make_clips(n: int, F: int, H: int, W: int, seed: int, jitter_rate: float = 0.0,
               jitter_mode: str = "position_noise", jitter_amplitude: float = 1.0):
    """In-memory corpus: (videos [n, F, 1, H, W], class ids [n], manifest entries).

    Exactly round(n * jitter_rate) clips are jittered; which ones is a seeded
    permutation (stratified, not Bernoulli).
    """
    if n < 1:
        raise UsageError("corpus needs n >= 1")
    rng = np.random.default_rng(seed)
    n_bad = int(round(n * jitter_rate))
    jittered = set(rng.permutation(n)[:n_bad].tolist())
    videos, ids, entries = [], [], []
    for i in range(n):
        clip_seed = int(rng.integers(2**31))
        video, cid, spec = gen_coherent(None, F, H, W, seed=clip_seed)
        jit = None
        if i in jittered:
            jit = JitterSpec(jitter_mode, jitter_amplitude, seed=clip_seed + 1)
            video = inject_jitter(video, jit, spec)
        videos.append(video)
        ids.append(cid)
        entries.append({
            "index": i,
            "file": f"clip_{i:05d}.tdt",
            "class_id": cid,
            "coherent": jit is None,
            "spec": dataclasses.asdict(spec),
            "jitter": None if jit is None else dataclasses.asdict(jit),
        })
    return torch.stack(videos), torch.tensor(ids, dtype=torch.long), entries


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def gen_corpus(out_dir, n: int, F: int, H: int, W: int, seed: int = 0, jitter_rate: float = 0.0,
               jitter_mode: str = "position_noise", jitter_amplitude: float = 1.0) -> dict:
    """Write clip_XXXXX.tdt files and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    videos, _, entries = make_clips(n, F, H, W, seed, jitter_rate, jitter_mode, jitter_amplitude)
    manifest = {
        "shape": [F, 1, H, W],
        "seed": seed,
        "jitter_rate": jitter_rate,
        "clips": entries,
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
        for entry, video in zip(entries, videos):
            tdt.save(out / entry["file"], video.float())
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise TDTIOError(f"cannot write corpus under {out}: {e}") from e
    return manifest


def load_corpus(corpus_dir):
    """Read a corpus written by gen_corpus: (videos, class ids, manifest)."""
    root = Path(corpus_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as e:
        raise TDTIOError(f"cannot read manifest in {root}: {e}") from e
    videos = torch.stack([tdt.load(root / c["file"]) for c in manifest["clips"]])
    ids = torch.tensor([c["class_id"] for c in manifest["clips"]], dtype=torch.long)
    return videos, ids, manifest


def write_ppm(path, frame: torch.Tensor) -> None:
    """Binary PGM (P5) for one channel, PPM (P6) for three; [-1, 1] maps onto 0..255."""
    arr = frame.detach().double().cpu().numpy()
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    pix = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if pix.ndim == 3 and pix.shape[2] == 1:
        pix = pix[..., 0]
    if pix.ndim == 2:
        head = f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode()
    elif pix.shape[2] == 3:
        head = f"P6\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode()
    else:
        raise UsageError("PPM export supports 1 or 3 channels")
    try:
        Path(path).write_bytes(head + pix.tobytes())
    except OSError as e:
        raise TDTIOError(f"cannot write {path}: {e}") from e
