"""Paired cross-view dataset handling.

A dataset is a manifest file whose first line is a small JSON header
(declared image size plus the semantic palette) followed by line-delimited
records ``sample_id<TAB>condition<TAB>target<TAB>semantic`` with paths
relative to the manifest location.  Images are 8-bit PNG.

Also houses a deterministic procedural generator that renders paired
top-down / front-elevation scenes of colored boxes and discs, so training
and evaluation are self-contained without any external dataset.
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

MANIFEST_NAME = "manifest.tsv"

# Background color first, then up to ten well-separated class colors.
DEFAULT_PALETTE = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (128, 128, 0),
        (0, 128, 128),
    ],
    dtype=np.float64,
)


class DatasetError(RuntimeError):
    """Raised when a manifest entry cannot be loaded."""


@dataclass
class PairedSample:
    """One training unit: condition image, target image, target semantic map.

    All three tensors are float32 ``(3, H, W)`` in ``[-1, 1]``.
    """

    condition_image: torch.Tensor
    target_image: torch.Tensor
    target_semantic: torch.Tensor
    sample_id: str

    def __post_init__(self):
        shapes = {
            tuple(self.condition_image.shape[-2:]),
            tuple(self.target_image.shape[-2:]),
            tuple(self.target_semantic.shape[-2:]),
        }
        if len(shapes) != 1:
            raise ValueError(f"sample {self.sample_id}: grids disagree on size {shapes}")

    @property
    def height(self):
        return self.target_image.shape[-2]

    @property
    def width(self):
        return self.target_image.shape[-1]


@dataclass
class PairedBatch:
    condition: torch.Tensor        # (B, 3, H, W)
    target_image: torch.Tensor     # (B, 3, H, W)
    target_semantic: torch.Tensor  # (B, 3, H, W)
    sample_ids: list


def collate(samples) -> PairedBatch:
    return PairedBatch(
        condition=torch.stack([s.condition_image for s in samples]),
        target_image=torch.stack([s.target_image for s in samples]),
        target_semantic=torch.stack([s.target_semantic for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )


@dataclass
class ManifestEntry:
    sample_id: str
    condition_path: str
    target_path: str
    semantic_path: str


@dataclass
class DatasetManifest:
    root_path: str
    entries: list
    image_size: tuple          # (H, W)
    semantic_palette: np.ndarray

    def __post_init__(self):
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample_ids in manifest are not unique")

    def __len__(self):
        return len(self.entries)


def write_manifest(manifest: DatasetManifest, path: str) -> None:
    header = {
        "version": 1,
        "image_size": list(manifest.image_size),
        "palette": np.asarray(manifest.semantic_palette).astype(int).tolist(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for e in manifest.entries:
        lines.append("\t".join([e.sample_id, e.condition_path, e.target_path, e.semantic_path]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path: str) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise DatasetError(f"manifest {path} is empty")
    header = json.loads(lines[0])
    entries = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"malformed manifest record: {ln!r}")
        entries.append(ManifestEntry(*parts))
    return DatasetManifest(
        root_path=os.path.dirname(os.path.abspath(path)),
        entries=entries,
        image_size=tuple(header["image_size"]),
        semantic_palette=np.asarray(header["palette"], dtype=np.float64),
    )


def image_to_tensor(arr: np.ndarray) -> torch.Tensor:
    """8-bit HWC array -> float32 (C, H, W) tensor in [-1, 1] via v/127.5 - 1."""
    t = torch.from_numpy(np.array(arr, copy=True)).float().permute(2, 0, 1)
    return t / 127.5 - 1.0


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """Float (C, H, W) tensor in [-1, 1] -> 8-bit HWC array, round-to-nearest."""
    arr = t.detach().clamp(-1.0, 1.0).add(1.0).mul(127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_png(arr: np.ndarray, path: str) -> None:
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _decode_file(path: str, sample_id: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DatasetError(f"sample {sample_id}: cannot decode {path}: {exc}") from exc


def _resize_tensor(t: torch.Tensor, size) -> torch.Tensor:
    if tuple(t.shape[-2:]) == tuple(size):
        return t
    return F.interpolate(t.unsqueeze(0), size=tuple(size), mode="bilinear",
                         align_corners=False).squeeze(0)


def load_dataset(manifest: DatasetManifest, target_size=None):
    """Yield PairedSamples in manifest order.

    Every referenced file must exist and decode to the manifest's declared
    image size.  When ``target_size`` is given, all three grids are resized
    to it with bilinear interpolation after decoding.
    """
    for e in manifest.entries:
        tensors = []
        for rel in (e.condition_path, e.target_path, e.semantic_path):
            path = os.path.join(manifest.root_path, rel)
            if not os.path.exists(path):
                raise DatasetError(f"sample {e.sample_id}: missing file {path}")
            arr = _decode_file(path, e.sample_id)
            if arr.shape[:2] != tuple(manifest.image_size):
                raise DatasetError(
                    f"sample {e.sample_id}: {path} decodes to {arr.shape[:2]}, "
                    f"manifest declares {tuple(manifest.image_size)}"
                )
            t = image_to_tensor(arr)
            if target_size is not None:
                t = _resize_tensor(t, target_size)
            tensors.append(t)
        yield PairedSample(tensors[0], tensors[1], tensors[2], e.sample_id)


def load_all(manifest: DatasetManifest, target_size=None):
    return list(load_dataset(manifest, target_size=target_size))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    crop_fraction: float = 0.875  # crop to this fraction of each side, then resize back


def augment(sample: PairedSample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> PairedSample:
    """Jointly flip/crop all three grids; identical rng state -> identical output."""
    grids = torch.stack(
        [sample.condition_image, sample.target_image, sample.target_semantic]
    )
    if rng.random() < cfg.flip_prob:
        grids = torch.flip(grids, dims=[-1])
    h, w = grids.shape[-2:]
    ch = max(1, round(h * cfg.crop_fraction))
    cw = max(1, round(w * cfg.crop_fraction))
    if ch > h or cw > w:
        raise ValueError("crop size exceeds image size")
    i = int(rng.integers(0, h - ch + 1))
    j = int(rng.integers(0, w - cw + 1))
    grids = grids[..., i:i + ch, j:j + cw]
    if (ch, cw) != (h, w):
        grids = F.interpolate(grids, size=(h, w), mode="bilinear", align_corners=False)
    return PairedSample(grids[0], grids[1], grids[2], sample.sample_id)


# ---------------------------------------------------------------------------
# Semantic palette helpers
# ---------------------------------------------------------------------------

def decode_to_labels(arr: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Map an HWC image in [0, 255] to integer labels by nearest palette color."""
    palette = np.asarray(palette, dtype=np.float64)
    if palette.size == 0:
        raise ValueError("palette is empty")
    flat = arr.reshape(-1, arr.shape[-1]).astype(np.float64)
    d2 = ((flat[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1).reshape(arr.shape[:2])


def semantic_tensor_to_labels(t: torch.Tensor, palette: np.ndarray) -> np.ndarray:
    return decode_to_labels(tensor_to_image(t).astype(np.float64), palette)


def dominant_class(labels: np.ndarray) -> int:
    """Most frequent non-background label; ties broken low, 0 if none present."""
    fg = labels[labels > 0]
    if fg.size == 0:
        return 0
    counts = np.bincount(fg)
    return int(counts.argmax())


# ---------------------------------------------------------------------------
# Procedural synthetic dataset
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Fully determines a synthetic dataset byte-for-byte."""

    seed: int
    n_samples: int
    image_size: tuple = (64, 64)
    n_classes: int = 4
    shape_count_range: tuple = (2, 4)

    def __post_init__(self):
        if isinstance(self.image_size, int):
            self.image_size = (self.image_size, self.image_size)
        self.image_size = tuple(int(v) for v in self.image_size)
        self.shape_count_range = tuple(int(v) for v in self.shape_count_range)
        if self.n_classes < 1:
            raise ValueError("need at least one object class")
        if self.n_classes > len(DEFAULT_PALETTE) - 1:
            raise ValueError(
                f"n_classes={self.n_classes} exceeds palette capacity "
                f"{len(DEFAULT_PALETTE) - 1}"
            )
        lo, hi = self.shape_count_range
        if lo < 1 or hi < lo:
            raise ValueError("shape_count_range must satisfy 1 <= min <= max")


@dataclass
class ScenePlacement:
    """Ground-truth record of the objects rendered into one sample."""

    sample_id: str
    classes: list
    kinds: list  # "box" or "disc" per object


_GROUND_TOP = np.array((84, 121, 87), dtype=np.float64)
_GROUND_FRONT = np.array((96, 108, 82), dtype=np.float64)
_SKY_FRONT = np.array((132, 168, 205), dtype=np.float64)


def _fill_rect(img, r0, r1, c0, c1, color):
    r0, r1 = max(0, r0), min(img.shape[0], r1)
    c0, c1 = max(0, c0), min(img.shape[1], c1)
    if r0 < r1 and c0 < c1:
        img[r0:r1, c0:c1] = color


def _fill_disc(img, cy, cx, radius, color):
    h, w = img.shape[:2]
    yy, xx = np.ogrid[:h, :w]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    img[mask] = color


def _render_sample(rng, spec: SynthSpec, sample_id: str):
    h, w = spec.image_size
    palette = DEFAULT_PALETTE[: spec.n_classes + 1]
    k = int(rng.integers(spec.shape_count_range[0], spec.shape_count_range[1] + 1))
    slot_w = w // k

    classes = rng.integers(1, spec.n_classes + 1, size=k)
    kinds = rng.integers(0, 2, size=k)          # 0 = box, 1 = disc
    depths = rng.uniform(0.0, 1.0, size=k)      # 0 = far, 1 = near
    heights = rng.uniform(0.3, 0.95, size=k)
    half_ws = rng.integers(2, max(3, slot_w // 2), size=k)
    half_ds = rng.integers(2, max(3, h // 8), size=k)

    top = np.empty((h, w, 3), dtype=np.float64)
    top[:] = _GROUND_TOP
    front = np.empty((h, w, 3), dtype=np.float64)
    horizon = int(h * 0.42)
    front[:horizon] = _SKY_FRONT
    front[horizon:] = _GROUND_FRONT
    semantic = np.empty((h, w, 3), dtype=np.float64)
    semantic[:] = palette[0]

    objects = []
    for i in range(k):
        hw = int(min(half_ws[i], max(1, slot_w // 2 - 1)))
        cx = i * slot_w + slot_w // 2
        objects.append({
            "cls": int(classes[i]),
            "kind": "disc" if kinds[i] else "box",
            "cx": cx,
            "hw": hw,
            "hd": int(half_ds[i]),
            "depth": float(depths[i]),
            "height": float(heights[i]),
        })

    # Top-down view: footprints on the ground plane, taller objects painted last.
    margin = 2
    for obj in sorted(objects, key=lambda o: o["height"]):
        shade = 0.65 + 0.35 * obj["height"]
        color = np.clip(palette[obj["cls"]] * shade, 0, 255)
        cy = margin + int(round(obj["depth"] * (h - 1 - 2 * margin)))
        if obj["kind"] == "box":
            _fill_rect(top, cy - obj["hd"], cy + obj["hd"] + 1,
                       obj["cx"] - obj["hw"], obj["cx"] + obj["hw"] + 1, color)
        else:
            _fill_disc(top, cy, obj["cx"], obj["hw"], color)

    # Front elevation: far objects first; x-slots are disjoint so every object
    # keeps at least one visible pixel in both the image and the semantic map.
    for obj in sorted(objects, key=lambda o: o["depth"]):
        shade = 0.65 + 0.35 * obj["height"]
        color = np.clip(palette[obj["cls"]] * shade, 0, 255)
        scale = 0.55 + 0.45 * obj["depth"]
        base = horizon + 2 + int(round(obj["depth"] * (h - horizon - 4)))
        hw = max(1, int(round(obj["hw"] * scale)))
        if obj["kind"] == "box":
            h_px = max(2, int(round(obj["height"] * 0.55 * h * scale)))
            r0, r1 = max(0, base - h_px + 1), base + 1
            c0, c1 = obj["cx"] - hw, obj["cx"] + hw + 1
            _fill_rect(front, r0, r1, c0, c1, color)
            _fill_rect(semantic, r0, r1, c0, c1, palette[obj["cls"]])
        else:
            radius = hw
            cy = max(radius, base - radius)
            _fill_disc(front, cy, obj["cx"], radius, color)
            _fill_disc(semantic, cy, obj["cx"], radius, palette[obj["cls"]])

    record = ScenePlacement(
        sample_id=sample_id,
        classes=[o["cls"] for o in objects],
        kinds=[o["kind"] for o in objects],
    )
    return top.astype(np.uint8), front.astype(np.uint8), semantic.astype(np.uint8), record


def generate_synthetic(spec: SynthSpec, out_dir: str):
    """Render the dataset under ``out_dir`` and return (manifest, placements).

    The same spec always produces byte-identical files.
    """
    rng = np.random.default_rng(spec.seed)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    entries, placements = [], []
    for idx in range(spec.n_samples):
        sample_id = f"s{idx:05d}"
        top, front, semantic, record = _render_sample(rng, spec, sample_id)
        paths = {}
        for tag, arr in (("a", top), ("b", front), ("s", semantic)):
            rel = os.path.join("images", f"{sample_id}_{tag}.png")
            save_png(arr, os.path.join(out_dir, rel))
            paths[tag] = rel
        entries.append(ManifestEntry(sample_id, paths["a"], paths["b"], paths["s"]))
        placements.append(record)

    manifest = DatasetManifest(
        root_path=os.path.abspath(out_dir),
        entries=entries,
        image_size=spec.image_size,
        semantic_palette=DEFAULT_PALETTE[: spec.n_classes + 1].copy(),
    )
    write_manifest(manifest, os.path.join(out_dir, MANIFEST_NAME))
    with open(os.path.join(out_dir, "placements.json"), "w", encoding="utf-8") as fh:
        json.dump([dataclasses.asdict(p) for p in placements], fh, indent=1)
    return manifest, placements


def parse_synth_uri(uri: str) -> SynthSpec:
    """Parse ``synthetic:seed=7,n=64,size=64,classes=4`` into a SynthSpec."""
    body = uri.split(":", 1)[1] if ":" in uri else uri
    fields = {}
    for part in body.split(","):
        if not part:
            continue
        key, _, value = part.partition("=")
        fields[key.strip()] = value.strip()
    known = {"seed", "n", "size", "classes", "min_shapes", "max_shapes"}
    unknown = set(fields) - known
    if unknown:
        raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
    return SynthSpec(
        seed=int(fields.get("seed", 0)),
        n_samples=int(fields.get("n", 8)),
        image_size=int(fields.get("size", 64)),
        n_classes=int(fields.get("classes", 4)),
        shape_count_range=(
            int(fields.get("min_shapes", 2)),
            int(fields.get("max_shapes", 4)),
        ),
    )
