"""Synthetic scenes with analytic groundtruth for all three tasks.

Each scene is a textured background plus a few non-overlapping axis-aligned
shapes (ellipses, rectangles, capsules). A random nonempty subset of the
shapes is drawn in a bright, saturated color and forms the saliency target;
the rest are drawn in muted colors close to the background. Edge targets are
the one-pixel inner boundaries of every shape, salient or not. Skeleton
targets are distance-transform ridges: pixels whose distance to background is
a local maximum along the distance-gradient direction.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from dfinet.errors import ConfigError
from dfinet.metrics import bilinear_sample
from dfinet.tasks import TASKS, check_tasks


@dataclass
class Sample:
    name: str
    image: np.ndarray  # float32, (3, H, W), values in [0, 1]
    targets: dict[str, np.ndarray]  # task -> float32 binary (1, H, W)


@dataclass
class SyntheticSpec:
    count: int = 16
    height: int = 64
    width: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    seed: int = 0
    tasks: tuple[str, ...] = TASKS

    def validate(self) -> "SyntheticSpec":
        if self.count < 1:
            raise ConfigError(f"count: must be >= 1, got {self.count}")
        if min(self.height, self.width) < 32:
            raise ConfigError(
                f"height/width: canvas must be at least 32, got {self.height}x{self.width}"
            )
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(
                f"min_shapes/max_shapes: need 1 <= {self.min_shapes} <= {self.max_shapes}"
            )
        self.tasks = check_tasks(self.tasks)
        return self


# --- groundtruth operators ---------------------------------------------------


def inner_boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel inner boundary: mask pixels with a 4-neighbor outside."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, border_value=0)
    return mask & ~eroded


def medial_ridge(mask: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Skeleton of a binary mask as the ridge of its distance transform.

    A mask pixel is kept when its distance to the background is at least the
    distance one unit step away along the gradient direction, in both senses
    (bilinearly interpolated). Pixels with a vanishing gradient sit on a
    plateau or a symmetric peak and are kept outright.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    d = ndimage.distance_transform_edt(mask)
    gy, gx = np.gradient(d)
    norm = np.hypot(gy, gx)
    flat = norm < tol
    safe = np.where(flat, 1.0, norm)
    uy = gy / safe
    ux = gx / safe
    ys, xs = np.indices(d.shape)
    fwd = bilinear_sample(d, ys + uy, xs + ux)
    bwd = bilinear_sample(d, ys - uy, xs - ux)
    ridge = (d + tol >= fwd) & (d + tol >= bwd)
    return mask & (flat | ridge)


# --- shape rasterization -----------------------------------------------------


def ellipse_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.indices((h, w))
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def rectangle_mask(h, w, cy, cx, hy, hx):
    yy, xx = np.indices((h, w))
    return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)


def capsule_mask(h, w, cy, cx, half_len, radius, vertical=False):
    """Points within `radius` of a centered axis-aligned segment."""
    yy, xx = np.indices((h, w))
    if vertical:
        along, across = yy - cy, xx - cx
    else:
        along, across = xx - cx, yy - cy
    excess = np.maximum(np.abs(along) - half_len, 0.0)
    return excess**2 + across**2 <= radius**2


def _sample_shape(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    s = min(h, w)
    margin = 3
    kind = rng.choice(["ellipse", "rectangle", "capsule"])
    if kind == "ellipse":
        ry = int(rng.integers(max(3, s // 12), max(4, s // 5) + 1))
        rx = int(rng.integers(max(3, s // 12), max(4, s // 5) + 1))
        cy = int(rng.integers(ry + margin, h - ry - margin))
        cx = int(rng.integers(rx + margin, w - rx - margin))
        return ellipse_mask(h, w, cy, cx, ry, rx)
    if kind == "rectangle":
        hy = int(rng.integers(max(3, s // 14), max(4, s // 5) + 1))
        hx = int(rng.integers(max(3, s // 14), max(4, s // 5) + 1))
        cy = int(rng.integers(hy + margin, h - hy - margin))
        cx = int(rng.integers(hx + margin, w - hx - margin))
        return rectangle_mask(h, w, cy, cx, hy, hx)
    radius = int(rng.integers(3, max(4, s // 9) + 1))
    half_len = int(rng.integers(radius + 2, max(radius + 3, s // 4) + 1))
    vertical = bool(rng.integers(0, 2))
    ey = half_len + radius if vertical else radius
    ex = radius if vertical else half_len + radius
    cy = int(rng.integers(ey + margin, h - ey - margin))
    cx = int(rng.integers(ex + margin, w - ex - margin))
    return capsule_mask(h, w, cy, cx, half_len, radius, vertical)


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.indices((h, w))
    freq_y, freq_x = rng.uniform(1.0, 3.0, size=2)
    phase = rng.uniform(0.0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (freq_y * yy / h + freq_x * xx / w) + phase)
    base = 0.35 + 0.06 * wave
    grain = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=1.5)
    tint = rng.uniform(0.9, 1.1, size=3)
    image = base[None] * tint[:, None, None] + 0.03 * grain[None]
    return image.astype(np.float64)


def _render_scene(rng: np.random.Generator, spec: SyntheticSpec, name: str) -> Sample:
    h, w = spec.height, spec.width
    image = _background(rng, h, w)
    occupied = np.zeros((h, w), dtype=bool)
    shapes = []
    wanted = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(wanted):
        for _ in range(40):
            mask = _sample_shape(rng, h, w)
            # keep a 2-px gap so boundaries of distinct shapes never merge
            grown = ndimage.binary_dilation(mask, iterations=2)
            if not (grown & occupied).any():
                occupied |= grown
                shapes.append(mask)
                break
    if not shapes:
        raise RuntimeError("failed to place any shape; canvas too small")

    while True:
        salient = rng.random(len(shapes)) < 0.5
        if salient.any():
            break

    for mask, is_salient in zip(shapes, salient):
        if is_salient:
            color = rng.uniform(0.65, 0.95, size=3)
            color[int(rng.integers(0, 3))] = rng.uniform(0.85, 1.0)
        else:
            color = rng.uniform(0.30, 0.50, size=3)
        shade = 1.0 - 0.1 * rng.random()
        image[:, mask] = (color * shade)[:, None]

    image = image + rng.normal(0.0, 0.015, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    saliency = np.zeros((h, w), dtype=bool)
    edge = np.zeros((h, w), dtype=bool)
    skeleton = np.zeros((h, w), dtype=bool)
    for mask, is_salient in zip(shapes, salient):
        if is_salient:
            saliency |= mask
        edge |= inner_boundary(mask)
        skeleton |= medial_ridge(mask)

    full = {"saliency": saliency, "edge": edge, "skeleton": skeleton}
    targets = {t: full[t][None].astype(np.float32) for t in spec.tasks}
    return Sample(name=name, image=image, targets=targets)


def generate_synthetic(spec: SyntheticSpec) -> list[Sample]:
    spec.validate()
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        samples.append(_render_scene(rng, spec, name=f"s{spec.seed}_{i:05d}"))
    return samples


# --- disk layout -------------------------------------------------------------
#
# root/images/<name>.png plus root/<task>/<name>.png per task, masks as 0/255.


def export_samples(samples: list[Sample], root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for sample in samples:
        arr = np.round(sample.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(root / "images" / f"{sample.name}.png")
        for task, target in sample.targets.items():
            task_dir = root / task
            task_dir.mkdir(parents=True, exist_ok=True)
            mask = (target[0] > 0.5).astype(np.uint8) * 255
            Image.fromarray(mask, mode="L").save(task_dir / f"{sample.name}.png")


def load_directory(root, tasks=TASKS) -> list[Sample]:
    root = Path(root)
    tasks = check_tasks(tasks)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"{image_dir}: no images directory")
    samples = []
    for path in sorted(image_dir.glob("*.png")):
        with Image.open(path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        targets = {}
        for task in tasks:
            mask_path = root / task / path.name
            if not mask_path.is_file():
                raise FileNotFoundError(f"{mask_path}: missing {task} target for {path.name}")
            with Image.open(mask_path) as im:
                mask = np.asarray(im.convert("L"))
            targets[task] = (mask > 127).astype(np.float32)[None]
        samples.append(Sample(path.stem, image.transpose(2, 0, 1), targets))
    if not samples:
        raise FileNotFoundError(f"{image_dir}: no PNG images found")
    return samples


def save_prediction(path, pred: np.ndarray) -> None:
    """Write a probability map in [0, 1] as an 8-bit grayscale PNG."""
    plane = np.asarray(pred, dtype=np.float64)
    while plane.ndim > 2 and plane.shape[0] == 1:
        plane = plane[0]
    arr = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_prediction(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def image_tensor(sample: Sample):
    import torch

    return torch.from_numpy(sample.image).unsqueeze(0)


def target_tensor(sample: Sample, task: str):
    import torch

    if task not in sample.targets:
        raise ConfigError(f"sample {sample.name!r} has no target for task {task!r}")
    return torch.from_numpy(sample.targets[task]).unsqueeze(0)
