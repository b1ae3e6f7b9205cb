"""Training tuples: synthetic generation with mock segmenters, and file ingestion.

Every random draw comes from a generator seeded by (master seed, purpose,
image index, object index, segmenter index), so a tuple never depends on the
order in which other tuples were generated.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import __version__, netpbm
from .errors import DatasetError, InvalidInputError, SegQualError, UndefinedMetricError
from .metrics import as_mask, dice, hausdorff, normalized_hd
from .preprocess import BoxPrompt, as_image

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# purpose tags mixed into per-tuple seeds
_SHAPE, _IMAGE, _JITTER, _SEGMENT = 0, 1, 2, 3

FG_MEAN = 0.65
BG_MEAN = 0.35
NOISE_SIGMA = 0.08

PROFILES: dict[str, tuple[float, float]] = {
    "good": (2.0, 8.0),
    "medium": (4.0, 4.0),
    "poor": (8.0, 4.0),
}


@dataclass
class TrainingTuple:
    image: np.ndarray
    prompt: BoxPrompt
    gt_mask: np.ndarray
    pred_mask: np.ndarray
    q_dice: float
    q_hd: float
    segmenter_id: str = ""
    sample_id: str = ""
    object_id: int = 0

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.sample_id, self.object_id, self.segmenter_id)


@dataclass
class DataConfig:
    n_images: int = 50
    objects_per_image: int = 1
    profiles: Sequence[str] = ("good", "medium", "poor")
    seed: int = 0
    image_size: int = 96
    jitter: float = 0.05

    def validate(self) -> None:
        if self.n_images < 1:
            raise InvalidInputError("n_images must be >= 1")
        if self.objects_per_image < 1:
            raise InvalidInputError("objects_per_image must be >= 1")
        if not self.profiles:
            raise InvalidInputError("at least one segmenter profile is required")
        for p in self.profiles:
            if p not in PROFILES:
                raise InvalidInputError(f"unknown segmenter profile {p!r}")
        if len(set(self.profiles)) != len(self.profiles):
            raise InvalidInputError("segmenter profiles must be distinct")
        if self.image_size < 32:
            raise InvalidInputError("image_size must be >= 32")
        if not 0.0 <= self.jitter <= 0.05:
            raise InvalidInputError("jitter must lie in [0, 0.05]")
        if self.seed < 0:
            raise InvalidInputError("seed must be nonnegative")


@dataclass
class DatasetManifest:
    version: int
    n: int
    segmenters: list[str]
    seed: int | None
    entries: list[dict]
    tuples: list[TrainingTuple] = field(default_factory=list, repr=False)
    root: Path | None = None

    @property
    def M(self) -> int:
        return len(self.segmenters)

    @property
    def objects_per_image(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e["id"]] = counts.get(e["id"], 0) + 1
        return counts


def tuple_rng(seed: int, purpose: int, *index: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, *index])


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def gen_shape(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """A connected blob: an ellipse whose radius is perturbed by low harmonics.

    The foreground covers between 2% and 40% of the w x h raster.
    """
    if w < 32 or h < 32:
        raise InvalidInputError(f"shape canvas must be at least 32x32, got {w}x{h}")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(100):
        area = rng.uniform(0.03, 0.25) * w * h
        aspect = rng.uniform(0.6, 1.6)
        a = math.sqrt(area / math.pi * aspect)
        b = math.sqrt(area / math.pi / aspect)
        tilt = rng.uniform(0.0, math.pi)
        amps = rng.uniform(0.0, 0.12, size=3)
        phases = rng.uniform(0.0, 2 * math.pi, size=3)
        reach = max(a, b) * (1.0 + amps.sum())
        if 2 * reach + 2 >= min(w, h):
            continue
        cx = rng.uniform(reach + 1, w - reach - 1)
        cy = rng.uniform(reach + 1, h - reach - 1)
        u = (xx - cx) * math.cos(tilt) + (yy - cy) * math.sin(tilt)
        v = -(xx - cx) * math.sin(tilt) + (yy - cy) * math.cos(tilt)
        theta = np.arctan2(v, u)
        limit = 1.0 + sum(amp * np.cos(k * theta + ph) for k, amp, ph in zip((2, 3, 4), amps, phases))
        mask = _largest_component(np.hypot(u / a, v / b) <= limit)
        frac = mask.mean()
        if 0.02 <= frac <= 0.40:
            return mask
    # unreachable in practice; a centered disk keeps the contract
    r = math.sqrt(0.1 * w * h / math.pi)
    return np.hypot(xx - w / 2, yy - h / 2) <= r


def render_image(rng: np.random.Generator, objects: Iterable[np.ndarray], w: int, h: int) -> np.ndarray:
    """Grayscale image: two intensity levels, an illumination ramp, Gaussian noise.

    Values are quantized to multiples of 1/255 so they survive an 8-bit round trip.
    """
    fg = np.zeros((h, w), dtype=bool)
    for m in objects:
        fg |= m
    img = np.where(fg, FG_MEAN, BG_MEAN)
    ramp_angle = rng.uniform(0.0, 2 * math.pi)
    ramp_amp = rng.uniform(0.0, 0.1)
    yy, xx = np.mgrid[0:h, 0:w]
    xn = 2.0 * xx / max(w - 1, 1) - 1.0
    yn = 2.0 * yy / max(h - 1, 1) - 1.0
    img = img + ramp_amp * (math.cos(ramp_angle) * xn + math.sin(ramp_angle) * yn)
    img = img + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def jitter_box(box: BoxPrompt, rng: np.random.Generator, fraction: float, w: int, h: int) -> BoxPrompt:
    """Move each side of the box by up to ``fraction`` of the box size, staying in-bounds."""
    if fraction <= 0:
        return box
    dx = fraction * box.width
    dy = fraction * box.height
    x0, x1 = (int(round(box.x0 + rng.uniform(-dx, dx))), int(round(box.x1 + rng.uniform(-dx, dx))))
    y0, y1 = (int(round(box.y0 + rng.uniform(-dy, dy))), int(round(box.y1 + rng.uniform(-dy, dy))))
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x1 <= x0 or y1 <= y0:
        return box
    return BoxPrompt(x0, y0, x1, y1)


def perturb(mask, rng: np.random.Generator, severity: float) -> np.ndarray:
    """Degrade a mask with morphology, translation and boundary flips.

    Magnitudes scale with ``severity`` and with the object's equivalent radius;
    severity 0 returns an unchanged copy. A mask emptied by the perturbation
    gets a single pixel at the input's centroid.
    """
    m = as_mask(mask)
    if not m.any():
        raise InvalidInputError("cannot perturb an empty mask")
    if not 0.0 <= severity <= 1.0:
        raise InvalidInputError(f"severity must lie in [0, 1], got {severity}")
    out = m.copy()
    if severity == 0:
        return out
    h, w = m.shape
    r_eq = math.sqrt(m.sum() / math.pi)

    radius = int(round(severity * r_eq * rng.uniform(0.3, 0.6)))
    grow = rng.random() < 0.5
    if radius > 0:
        op = ndimage.binary_dilation if grow else ndimage.binary_erosion
        out = op(out, structure=_disk(radius), border_value=0)

    dist = severity * r_eq * rng.uniform(1.0, 1.5)
    angle = rng.uniform(0.0, 2 * math.pi)
    dy, dx = int(round(dist * math.sin(angle))), int(round(dist * math.cos(angle)))
    shifted = np.zeros_like(out)
    src = out[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    shifted[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    out = shifted

    edge = ndimage.binary_dilation(out) & ~ndimage.binary_erosion(out, border_value=0)
    flips = edge & (rng.random(out.shape) < 0.5 * severity)
    out = out ^ flips

    if not out.any():
        cy, cx = ndimage.center_of_mass(m)
        out[int(round(cy)), int(round(cx))] = True
    return out


def register_profile(name: str, alpha: float, beta: float) -> None:
    if alpha <= 0 or beta <= 0:
        raise InvalidInputError("beta distribution parameters must be positive")
    PROFILES[name] = (float(alpha), float(beta))


def mock_segmenter(profile_id: str, gt, rng: np.random.Generator) -> np.ndarray:
    """Stand-in for a promptable segmenter with a characteristic quality regime."""
    try:
        alpha, beta = PROFILES[profile_id]
    except KeyError:
        raise InvalidInputError(f"unknown segmenter profile {profile_id!r}") from None
    return perturb(gt, rng, float(rng.beta(alpha, beta)))


def quality_scores(pred, gt, prompt: BoxPrompt) -> tuple[float, float]:
    """(dice, crop-normalized hausdorff). An empty mask gets the worst HD score, 1.0."""
    q_dice = dice(pred, gt)
    try:
        q_hd = normalized_hd(hausdorff(pred, gt), prompt.diagonal)
    except UndefinedMetricError:
        q_hd = 1.0
    return q_dice, q_hd


def build_tuple(image, gt, pred, prompt: BoxPrompt, *, segmenter_id: str = "",
                sample_id: str = "", object_id: int = 0) -> TrainingTuple:
    img = as_image(image)
    gt = as_mask(gt, "gt")
    pred = as_mask(pred, "pred")
    if gt.shape != img.shape[:2] or pred.shape != img.shape[:2]:
        raise InvalidInputError(
            f"inconsistent dimensions: image {img.shape[:2]}, gt {gt.shape}, pred {pred.shape}")
    prompt.validate(img.shape[1], img.shape[0])
    q_dice, q_hd = quality_scores(pred, gt, prompt)
    if img.shape[2] == 1:
        img = img[:, :, 0]
    return TrainingTuple(img, prompt, gt, pred, q_dice, q_hd, segmenter_id, sample_id, object_id)


def sample_name(i: int) -> str:
    return f"s{i:05d}"


def generate_image(config: DataConfig, i: int) -> list[TrainingTuple]:
    """All tuples (every object, every segmenter) for image ``i``."""
    size = config.image_size
    objects = [gen_shape(tuple_rng(config.seed, _SHAPE, i, j), size, size)
               for j in range(config.objects_per_image)]
    image = render_image(tuple_rng(config.seed, _IMAGE, i), objects, size, size)
    sid = sample_name(i)
    out = []
    for j, gt in enumerate(objects):
        box = jitter_box(BoxPrompt.tight(gt), tuple_rng(config.seed, _JITTER, i, j),
                         config.jitter, size, size)
        for m, profile in enumerate(config.profiles):
            pred = mock_segmenter(profile, gt, tuple_rng(config.seed, _SEGMENT, i, j, m))
            out.append(build_tuple(image, gt, pred, box, segmenter_id=profile,
                                   sample_id=sid, object_id=j))
    return out


def generate_tuples(config: DataConfig) -> list[TrainingTuple]:
    config.validate()
    tuples = []
    for i in range(config.n_images):
        tuples.extend(generate_image(config, i))
    return tuples


def _to_u8(values: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(values, dtype=np.float64) * 255.0).astype(np.uint8)


def write_dataset(tuples: Sequence[TrainingTuple], out_dir, *, seed: int | None = None,
                  extra: dict | None = None) -> DatasetManifest:
    """Write tuples in the on-disk dataset format and return the manifest."""
    out = Path(out_dir)
    segmenters: list[str] = []
    for t in tuples:
        if t.segmenter_id not in segmenters:
            segmenters.append(t.segmenter_id)
    try:
        for sub in ("images", "gt", "pred"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        entries: dict[tuple[str, int], dict] = {}
        written_images = set()
        for t in tuples:
            sid, j = t.sample_id, t.object_id
            if sid not in written_images:
                ext = "ppm" if t.image.ndim == 3 else "pgm"
                netpbm.write(out / "images" / f"{sid}.{ext}", _to_u8(t.image))
                written_images.add(sid)
            entry = entries.get((sid, j))
            if entry is None:
                ext = "ppm" if t.image.ndim == 3 else "pgm"
                netpbm.write(out / "gt" / f"{sid}_{j}.pgm", t.gt_mask.astype(np.uint8) * 255)
                entry = {"id": sid, "object": j, "image": f"images/{sid}.{ext}",
                         "gt": f"gt/{sid}_{j}.pgm", "prompt": t.prompt.as_list(),
                         "preds": {}, "q": {}}
                entries[(sid, j)] = entry
            m = segmenters.index(t.segmenter_id)
            rel = f"pred/{sid}_{j}_{m}.pgm"
            netpbm.write(out / rel, t.pred_mask.astype(np.uint8) * 255)
            entry["preds"][t.segmenter_id] = rel
            entry["q"][t.segmenter_id] = {"dice": t.q_dice, "hd": t.q_hd}
        ordered = [entries[k] for k in sorted(entries)]
        doc = {
            "version": MANIFEST_VERSION,
            "n": len(written_images),
            "M": len(segmenters),
            "seed": seed,
            "segmenters": segmenters,
            "entries": ordered,
        }
        if extra:
            doc.update(extra)
        (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc
    return DatasetManifest(MANIFEST_VERSION, len(written_images), segmenters, seed, ordered,
                           list(tuples), out)


def gen_dataset(config: DataConfig, out_dir) -> DatasetManifest:
    tuples = generate_tuples(config)
    log.info("generated %d tuples from %d images", len(tuples), config.n_images)
    cfg = asdict(config)
    cfg["profiles"] = list(config.profiles)
    return write_dataset(tuples, out_dir, seed=config.seed,
                         extra={"config": cfg, "generator": f"segqual {__version__}"})


def _read_mask(path: Path, shape) -> np.ndarray:
    raw = netpbm.read(path)
    if raw.ndim != 2:
        raise DatasetError(f"{path}: masks must be single-channel PGM")
    bad = raw[(raw != 0) & (raw != 255)]
    if bad.size:
        raise DatasetError(f"{path}: mask is not binary (found value {int(bad[0])}; only 0 and 255 allowed)")
    if raw.shape != shape:
        raise DatasetError(f"{path}: dimension mismatch, mask {raw.shape} vs image {shape}")
    return raw == 255


def load_dataset(path) -> DatasetManifest:
    """Read a dataset directory; quality targets are always recomputed from the masks."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    try:
        doc = json.loads(manifest_path.read_text())
    except OSError as exc:
        raise DatasetError(f"{manifest_path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("version", "n", "M", "entries"):
        if key not in doc:
            raise DatasetError(f"{manifest_path}: missing key {key!r}")
    if doc["version"] != MANIFEST_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported manifest version {doc['version']}")
    entries = doc["entries"]
    segmenters = doc.get("segmenters")
    if segmenters is None:
        segmenters = sorted({s for e in entries for s in e.get("preds", {})})
    if len(segmenters) != doc["M"] or doc["M"] < 1:
        raise DatasetError(f"{manifest_path}: M={doc['M']} but {len(segmenters)} segmenters listed")

    tuples: list[TrainingTuple] = []
    images: dict[str, np.ndarray] = {}
    for e in entries:
        sid = e.get("id")
        if sid is None:
            raise DatasetError(f"{manifest_path}: entry without an id")
        for key in ("image", "gt", "prompt", "preds"):
            if key not in e:
                raise DatasetError(f"{manifest_path}: entry {sid} lacks {key!r}")
        if sid not in images:
            raw = netpbm.read(root / e["image"])
            images[sid] = raw.astype(np.float64) / 255.0
        image = images[sid]
        shape = image.shape[:2]
        gt = _read_mask(root / e["gt"], shape)
        try:
            box = BoxPrompt(*(int(v) for v in e["prompt"]))
            box.validate(shape[1], shape[0])
        except (TypeError, SegQualError) as exc:
            raise DatasetError(f"{manifest_path}: entry {sid} has a bad prompt {e['prompt']}: {exc}") from exc
        for seg in segmenters:
            if seg not in e["preds"]:
                raise DatasetError(f"{manifest_path}: entry {sid} object {e.get('object', 0)} "
                                   f"has no prediction for segmenter {seg!r}")
            pred = _read_mask(root / e["preds"][seg], shape)
            tuples.append(build_tuple(image, gt, pred, box, segmenter_id=seg,
                                      sample_id=sid, object_id=int(e.get("object", 0))))
    if (root / "images").is_dir():
        on_disk = sorted(p.stem for p in (root / "images").iterdir() if p.suffix in (".pgm", ".ppm"))
        orphans = [s for s in on_disk if s not in images]
        if orphans:
            raise DatasetError(f"{manifest_path}: no manifest entry for image id {orphans[0]}")
    n_ids = len(images)
    if n_ids != doc["n"]:
        raise DatasetError(f"{manifest_path}: n={doc['n']} but entries reference {n_ids} images")
    return DatasetManifest(doc["version"], doc["n"], list(segmenters), doc.get("seed"),
                           entries, tuples, root)
