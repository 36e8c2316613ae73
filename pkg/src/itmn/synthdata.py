"""Seeded paired visual/thermal scene generator, augmentation, scene measures
and the on-disk dataset format.

Scenes are deliberately simple: a smooth textured background plus up to five
upright pedestrian figures.  Illumination ``lam`` controls how visible the
figures are in the visual image (contrast and noise); temperature ``tau``
raises the thermal background towards body temperature, so thermal contrast
fades on hot scenes.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "1"
BODY_LEVEL = 0.80  # thermal intensity of a pedestrian, independent of the scene
THERMAL_GAIN = 0.75  # thermal background rises by this much from tau=0 to tau=1
DEFAULT_THERMAL_OFFSET = 0.179422  # from calibrate_thermal_offset() at the defaults
DAY_NIGHT_THERMAL_RATIO = 1.73
MAX_PEDESTRIANS = 5

# sRGB (D65) -> XYZ, second row only (Y) is needed for L*
_SRGB_TO_Y = np.array([0.212673, 0.715152, 0.072175])


class DatasetError(ValueError):
    """Malformed dataset directory or sample file."""


@dataclass(frozen=True)
class SceneParams:
    seed: int
    lam: float  # illumination, 0 = night, 1 = bright day
    tau: float  # temperature, 0 = cold, 1 = hot
    count: int  # number of pedestrians

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0 and 0.0 <= self.tau <= 1.0):
            raise ValueError(f"lam and tau must lie in [0, 1], got {self.lam}, {self.tau}")
        if not 0 <= self.count <= MAX_PEDESTRIANS:
            raise ValueError(f"pedestrian count must be in 0..{MAX_PEDESTRIANS}, got {self.count}")

    @property
    def tag(self) -> str:
        return "day" if self.lam >= 0.5 else "night"


@dataclass
class ImagePair:
    visual: np.ndarray  # uint8 [H, W, 3]
    thermal: np.ndarray  # uint8 [H, W]
    boxes: np.ndarray  # float64 [K, 4] normalized corners (x1, y1, x2, y2)
    params: SceneParams

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.visual.shape[:2] != self.thermal.shape:
            raise ValueError(f"visual {self.visual.shape} and thermal {self.thermal.shape} resolutions differ")
        if self.boxes.size and (self.boxes.min() < 0 or self.boxes.max() > 1):
            raise ValueError("ground-truth boxes must lie inside [0, 1]^2")

    @property
    def tag(self) -> str:
        return self.params.tag

    @property
    def resolution(self) -> int:
        return self.thermal.shape[0]


@dataclass
class Dataset:
    pairs: list = field(default_factory=list)
    seed: int | None = None
    resolution: int | None = None

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self.pairs[i], self.seed, self.resolution)
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    def subset(self, keep) -> "Dataset":
        return Dataset([p for p, k in zip(self.pairs, keep) if k], self.seed, self.resolution)

    def split(self, tag: str) -> "Dataset":
        if tag == "all":
            return self
        if tag not in ("day", "night"):
            raise ValueError(f"unknown split {tag!r}")
        return self.subset([p.tag == tag for p in self.pairs])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    """Bilinearly upsampled uniform noise in [0, 1]: a cheap smooth texture."""
    coarse = rng.random((cells + 1, cells + 1))
    return resize_bilinear(coarse, size, size)


def _figure_mask(h: int, w: int) -> np.ndarray:
    """Soft silhouette of an upright person filling an h x w box: head disc, torso, two legs."""
    yy, xx = np.mgrid[0:h, 0:w]
    y = (yy + 0.5) / h
    x = (xx + 0.5) / w
    head = ((x - 0.5) / 0.22) ** 2 + ((y - 0.11) / 0.10) ** 2 <= 1.0
    torso = (np.abs(x - 0.5) <= 0.42) & (y >= 0.19) & (y <= 0.62)
    legs = (y > 0.60) & (((x >= 0.14) & (x <= 0.46)) | ((x >= 0.54) & (x <= 0.86)))
    return (head | torso | legs).astype(np.float64)


def _place_boxes(rng, count: int, size: int) -> list:
    """Pixel boxes (x0, y0, w, h) that do not overlap much; may return fewer than ``count``."""
    placed = []
    for _ in range(count):
        for _attempt in range(20):
            h = int(round(rng.uniform(0.28, 0.70) * size))
            w = max(3, int(round(h * rng.uniform(0.36, 0.44))))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            cand = np.array([x0, y0, x0 + w, y0 + h], dtype=float)
            if all(_pixel_iou(cand, p) < 0.15 for p in placed):
                placed.append(cand)
                break
    return placed


def _pixel_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def generate_scene(params: SceneParams, resolution: int = 64, thermal_offset: float = DEFAULT_THERMAL_OFFSET) -> ImagePair:
    """Render one visual/thermal pair; identical params give identical bytes."""
    if resolution < 16:
        raise ValueError(f"resolution must be at least 16, got {resolution}")
    rng = np.random.default_rng([params.seed, 0x5CE0E])
    size, lam, tau = resolution, params.lam, params.tau

    # visual background: tinted smooth texture, overall brightness rising with lam
    brightness = 0.06 + 0.64 * lam
    tint = rng.uniform(0.75, 1.0, size=3)
    texture = 0.55 + 0.45 * _smooth_noise(rng, size, 6)
    visual = brightness * texture[..., None] * tint[None, None, :]

    # thermal background: level set by tau, mild structure
    thermal = thermal_offset + THERMAL_GAIN * tau + 0.06 * (_smooth_noise(rng, size, 4) - 0.5)

    boxes = []
    for x0, y0, x1, y1 in _place_boxes(rng, params.count, size):
        x0, y0, x1, y1 = int(x0), int(y0), int(x1), int(y1)
        mask = _figure_mask(y1 - y0, x1 - x0)
        # clothing: a per-channel shift, darker or lighter than the background; its size is proportional to lam
        colour = rng.uniform(0.0, 1.0, size=3)
        dark = rng.random() < 0.5
        shift = (0.15 + 0.15 * colour) * (-1.0 if dark else 1.0)
        patch = visual[y0:y1, x0:x1]
        figure = patch + lam * shift[None, None, :]
        visual[y0:y1, x0:x1] = patch + mask[..., None] * (figure - patch)
        tpatch = thermal[y0:y1, x0:x1]
        body = BODY_LEVEL + 0.04 * (rng.random() - 0.5)
        thermal[y0:y1, x0:x1] = tpatch + mask * (body - tpatch)
        boxes.append([x0 / size, y0 / size, x1 / size, y1 / size])

    sigma_v = 0.02 + 0.22 * (1.0 - lam) ** 2
    visual = visual + rng.normal(0.0, sigma_v, size=visual.shape)
    thermal = thermal + rng.normal(0.0, 0.03, size=thermal.shape)
    return ImagePair(_to_u8(visual), _to_u8(thermal), np.array(boxes).reshape(-1, 4), params)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def sample_params(rng, seed: int, day: bool) -> SceneParams:
    """Scene draw: days are bright and warm, nights dark and cool."""
    if day:
        lam, tau = rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0)
    else:
        lam, tau = rng.uniform(0.0, 0.5), rng.uniform(0.0, 0.5)
    count = int(rng.choice(np.arange(MAX_PEDESTRIANS + 1), p=[0.05, 0.25, 0.3, 0.2, 0.12, 0.08]))
    return SceneParams(seed=seed, lam=float(lam), tau=float(tau), count=count)


def generate_dataset(count: int, seed: int = 0, resolution: int = 64, day_fraction: float = 0.5,
                     thermal_offset: float = DEFAULT_THERMAL_OFFSET) -> Dataset:
    """``count`` pairs; exactly round(count * day_fraction) are day scenes, interleaved deterministically."""
    if count < 0 or not 0.0 <= day_fraction <= 1.0:
        raise ValueError("count must be >= 0 and day_fraction in [0, 1]")
    n_day = int(round(count * day_fraction))
    order = np.random.default_rng([seed, 0xDA7]).permutation(count)
    is_day = np.zeros(count, dtype=bool)
    is_day[order[:n_day]] = True
    pairs = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 0x9A2])
        params = sample_params(rng, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), day=bool(is_day[i]))
        pairs.append(generate_scene(params, resolution, thermal_offset))
    return Dataset(pairs, seed, resolution)


def calibrate_thermal_offset(target_ratio: float = DAY_NIGHT_THERMAL_RATIO, samples: int = 2000, seed: int = 12345,
                             resolution: int = 32, tol: float = 1e-5) -> float:
    """Thermal background offset giving mean(day thermal) / mean(night thermal) == target_ratio.

    The ratio decreases monotonically in the offset, so a bisection over
    [0, BODY_LEVEL] suffices.
    """
    def ratio(offset):
        ds = generate_dataset(samples, seed, resolution, 0.5, offset)
        day = np.mean([p.thermal.mean() for p in ds if p.tag == "day"])
        night = np.mean([p.thermal.mean() for p in ds if p.tag == "night"])
        return day / night

    lo, hi = 0.0, BODY_LEVEL
    if not ratio(hi) <= target_ratio <= ratio(lo):
        raise ValueError(f"target ratio {target_ratio} is outside the reachable range")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ratio(mid) > target_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# image utilities and augmentation
# ---------------------------------------------------------------------------


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a 2-D or [H, W, C] float array."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    img = img.astype(np.float64)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple = (0.6, 1.0)  # side length of the crop relative to the image
    crop_aspect: tuple = (0.8, 1.25)
    mirror_probability: float = 0.5
    saturation: float = 0.3
    min_area: float = 0.01  # boxes smaller than this fraction of the image are dropped
    min_visible: float = 0.4  # boxes keeping less than this fraction of their area are dropped
    retries: int = 5


def mirror_boxes(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([1.0 - b[:, 2], b[:, 1], 1.0 - b[:, 0], b[:, 3]], axis=1)


def crop_boxes(boxes: np.ndarray, window, min_area: float, min_visible: float) -> np.ndarray:
    """Re-express boxes in a crop window (x0, y0, x1, y1 normalized), clip and drop tiny leftovers."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, y0, x1, y1 = window
    cw, ch = x1 - x0, y1 - y0
    out = np.stack([(b[:, 0] - x0) / cw, (b[:, 1] - y0) / ch, (b[:, 2] - x0) / cw, (b[:, 3] - y0) / ch], axis=1)
    full = (out[:, 2] - out[:, 0]) * (out[:, 3] - out[:, 1])
    out = np.clip(out, 0.0, 1.0)
    area = (out[:, 2] - out[:, 0]) * (out[:, 3] - out[:, 1])
    keep = (area >= min_area) & (area >= min_visible * np.maximum(full, 1e-12))
    return out[keep]


def adjust_saturation(visual: np.ndarray, factor: float) -> np.ndarray:
    """Scale each pixel's distance from its own grey level."""
    x = visual.astype(np.float64)
    grey = x @ _SRGB_TO_Y
    return np.clip(np.rint(grey[..., None] + factor * (x - grey[..., None])), 0, 255).astype(np.uint8)


def augment(pair: ImagePair, seed: int | None, config: AugmentConfig = AugmentConfig()) -> ImagePair:
    """Random resized crop -> horizontal mirror -> saturation jitter (visual only).

    ``seed=None`` is the identity path and returns the pair unchanged.
    """
    if seed is None:
        return pair
    rng = np.random.default_rng([seed, 0xA06])
    size_h, size_w = pair.thermal.shape
    visual, thermal, boxes = pair.visual, pair.thermal, pair.boxes

    for attempt in range(config.retries + 1):
        side = rng.uniform(*config.crop_scale)
        aspect = rng.uniform(*config.crop_aspect)
        cw = min(1.0, side * math.sqrt(aspect))
        ch = min(1.0, side / math.sqrt(aspect))
        x0 = rng.uniform(0.0, 1.0 - cw)
        y0 = rng.uniform(0.0, 1.0 - ch)
        # snap to whole pixels so image and boxes see the same window
        px0, py0 = int(round(x0 * size_w)), int(round(y0 * size_h))
        px1, py1 = max(px0 + 2, int(round((x0 + cw) * size_w))), max(py0 + 2, int(round((y0 + ch) * size_h)))
        window = (px0 / size_w, py0 / size_h, px1 / size_w, py1 / size_h)
        new_boxes = crop_boxes(boxes, window, config.min_area, config.min_visible)
        if len(new_boxes) or not len(boxes) or attempt == config.retries:
            break
    v = resize_bilinear(visual[py0:py1, px0:px1], size_h, size_w)
    t = resize_bilinear(thermal[py0:py1, px0:px1], size_h, size_w)
    v = np.clip(np.rint(v), 0, 255).astype(np.uint8)
    t = np.clip(np.rint(t), 0, 255).astype(np.uint8)

    if rng.random() < config.mirror_probability:
        v, t = v[:, ::-1].copy(), t[:, ::-1].copy()
        new_boxes = mirror_boxes(new_boxes)

    factor = 1.0 + rng.uniform(-config.saturation, config.saturation)
    v = adjust_saturation(v, factor)
    return ImagePair(v, t, new_boxes, pair.params)


def to_model_input(pairs, dtype=np.float32) -> tuple:
    """Stack pairs as NCHW arrays scaled to [-0.5, 0.5]; thermal is replicated to three channels."""
    dtype = np.dtype(dtype).type
    visual = np.stack([p.visual for p in pairs]).transpose(0, 3, 1, 2)
    thermal = np.stack([p.thermal for p in pairs])[:, None]
    visual = visual.astype(dtype) / dtype(255.0) - dtype(0.5)
    thermal = thermal.astype(dtype) / dtype(255.0) - dtype(0.5)
    return np.ascontiguousarray(visual), np.ascontiguousarray(np.repeat(thermal, 3, axis=1))


# ---------------------------------------------------------------------------
# scene measures and scenario filter
# ---------------------------------------------------------------------------


def srgb_to_lightness(rgb: np.ndarray) -> np.ndarray:
    """CIE L* (D65 white) of 8-bit sRGB pixels."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    y = lin @ _SRGB_TO_Y
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(y > eps, np.cbrt(y), (kappa * y + 16.0) / 116.0)
    return 116.0 * f - 16.0


def illuminance_measure(visual: np.ndarray) -> float:
    """Sum of the L channel after sRGB -> LAB conversion."""
    return float(srgb_to_lightness(visual).sum())


def temperature_measure(thermal: np.ndarray) -> float:
    """Sum of the thermal channel's pixel values."""
    return float(np.asarray(thermal, dtype=np.float64).sum())


@dataclass(frozen=True)
class ScenarioFilter:
    t_ill: float
    t_tem: float

    @classmethod
    def from_dataset(cls, dataset) -> "ScenarioFilter":
        """Thresholds at the dataset means."""
        ill = [illuminance_measure(p.visual) for p in dataset]
        tem = [temperature_measure(p.thermal) for p in dataset]
        return cls(float(np.mean(ill)), float(np.mean(tem)))


def filter_scenario(dataset: Dataset, flt: ScenarioFilter) -> Dataset:
    """Pairs that are darker than T_ill and warmer than T_tem."""
    keep = [illuminance_measure(p.visual) < flt.t_ill and temperature_measure(p.thermal) > flt.t_tem for p in dataset]
    out = dataset.subset(keep)
    if not len(out):
        warnings.warn("scenario filter kept no pairs", stacklevel=2)
    return out


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------


def _write_pnm(path: Path, img: np.ndarray):
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _read_pnm(path: Path, channels: int) -> np.ndarray:
    data = path.read_bytes()
    want = b"P6" if channels == 3 else b"P5"
    if data[:2] != want:
        raise DatasetError(f"{path.name}: expected {want.decode()} header at byte offset 0")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path.name}: malformed header field at byte offset {start}")
        fields.append(int(data[start:pos]))
    pos += 1  # the single whitespace byte before the raster
    w, h, maxval = fields
    if maxval != 255:
        raise DatasetError(f"{path.name}: only 8-bit images are supported (maxval {maxval})")
    n = w * h * channels
    if len(data) - pos != n:
        raise DatasetError(f"{path.name}: raster at byte offset {pos} holds {len(data) - pos} bytes, expected {n}")
    img = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return img.reshape(h, w, 3).copy() if channels == 3 else img.reshape(h, w).copy()


def write_dataset(dataset: Dataset, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(dataset):
        stem = f"{i:06d}"
        _write_pnm(d / f"{stem}_visual.ppm", p.visual)
        _write_pnm(d / f"{stem}_thermal.pgm", p.thermal)
        meta = {
            "boxes": [[float(v) for v in b] for b in p.boxes],
            "lambda": p.params.lam,
            "tau": p.params.tau,
            "tag": p.params.tag,
            "seed": p.params.seed,
            "count": p.params.count,
        }
        (d / f"{stem}_meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    manifest = {
        "count": len(dataset),
        "resolution": dataset.resolution if dataset.resolution is not None else (dataset[0].resolution if len(dataset) else None),
        "generator_version": GENERATOR_VERSION,
        "seed": dataset.seed,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return d


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise DatasetError(f"{d}: no manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"manifest.json: invalid JSON at byte offset {e.pos}") from e
    stems = sorted({name.split("_", 1)[0] for name in os.listdir(d) if name[:6].isdigit()})
    if len(stems) != manifest.get("count"):
        raise DatasetError(f"manifest lists {manifest.get('count')} samples, directory holds {len(stems)}")
    pairs = []
    for stem in stems:
        meta_path = d / f"{stem}_meta.json"
        if not meta_path.is_file():
            raise DatasetError(f"sample {stem}: missing annotation sidecar {meta_path.name}")
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise DatasetError(f"{meta_path.name}: invalid JSON at byte offset {e.pos}") from e
        for name in (f"{stem}_visual.ppm", f"{stem}_thermal.pgm"):
            if not (d / name).is_file():
                raise DatasetError(f"sample {stem}: missing {name}")
        visual = _read_pnm(d / f"{stem}_visual.ppm", 3)
        thermal = _read_pnm(d / f"{stem}_thermal.pgm", 1)
        params = SceneParams(int(meta["seed"]), float(meta["lambda"]), float(meta["tau"]), int(meta["count"]))
        if params.tag != meta["tag"]:
            raise DatasetError(f"{meta_path.name}: tag {meta['tag']!r} disagrees with lambda {params.lam}")
        pairs.append(ImagePair(visual, thermal, np.array(meta["boxes"], dtype=np.float64).reshape(-1, 4), params))
    return Dataset(pairs, manifest.get("seed"), manifest.get("resolution"))
