"""On-disk dataset: JSON manifest + PNG frames/masks + binary template tensors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image

from .decoder import GaussianAttributeMap
from .errors import MissingFile, ResolutionMismatch, SchemaViolation
from .geometry import AnchorLayout, Camera, build_anchor_layouts
from .skeleton import Pose, SkeletonTemplate
from .synth import FrameSample, SynthScene
from .tensorfile import atomic_write_bytes, atomic_write_text, load_tensors, save_tensors

MANIFEST_VERSION = 1
SOURCES = ("captured", "generated")


# --------------------------------------------------------------------------- PNG helpers

def write_png(path: str | Path, image: np.ndarray) -> None:
    """8-bit PNG of a float image in [0, 1] (H, W, 3) or a boolean/float mask (H, W)."""
    arr = np.asarray(image)
    if arr.dtype == bool:
        arr8 = arr.astype(np.uint8) * 255
    else:
        arr8 = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    import io

    buf = io.BytesIO()
    Image.fromarray(arr8).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    with Image.open(path) as im:
        return np.asarray(im)


def read_image(path: str | Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr[..., :3].astype(np.float64) / 255.0


def read_mask(path: str | Path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr != 0


# --------------------------------------------------------------------------- template / ground truth files

def save_template(path: str | Path, template: SkeletonTemplate) -> None:
    save_tensors(path, {"parent": template.parent, "rest_offset": template.rest_offset,
                        "canonical_vertices": template.canonical_vertices,
                        "skinning_weights": template.skinning_weights}, kind="skeleton_template")


def load_template(path: str | Path) -> SkeletonTemplate:
    t, _ = load_tensors(path, expect_kind="skeleton_template")
    try:
        return SkeletonTemplate(t["parent"], t["rest_offset"], t["canonical_vertices"], t["skinning_weights"])
    except KeyError as exc:
        raise SchemaViolation(f"template file lacks {exc}") from None


def save_attributes(path: str | Path, attrs: Sequence[GaussianAttributeMap]) -> None:
    tensors = {}
    for plane, a in zip(("front", "back"), attrs):
        tensors[f"{plane}/channels"] = a.channels()
        tensors[f"{plane}/mask"] = a.mask.astype(np.uint8)
    save_tensors(path, tensors, kind="gaussian_maps")


def load_attributes(path: str | Path) -> tuple[GaussianAttributeMap, GaussianAttributeMap]:
    t, _ = load_tensors(path, expect_kind="gaussian_maps")
    out = [GaussianAttributeMap.from_channels(t[f"{p}/channels"], t[f"{p}/mask"].astype(bool))
           for p in ("front", "back")]
    return out[0], out[1]


# --------------------------------------------------------------------------- manifest

@dataclass
class Dataset:
    root: Path
    frames: list[FrameSample]
    template: SkeletonTemplate
    layouts: tuple[AnchorLayout, AnchorLayout]
    cameras: list[Camera]
    poses: list[Pose]
    resolution: tuple[int, int]   # (W, H)
    meta: dict[str, Any] = field(default_factory=dict)
    ground_truth: tuple[GaussianAttributeMap, GaussianAttributeMap] | None = None


def save_dataset(root: str | Path, frames: Sequence[FrameSample], template: SkeletonTemplate,
                 layout_resolution: tuple[int, int], *, cameras: Sequence[Camera] | None = None,
                 poses: Sequence[Pose] | None = None, meta: dict[str, Any] | None = None,
                 ground_truth=None) -> Path:
    """Write ``root/manifest.json`` plus assets; returns the manifest path.

    Cameras and poses are taken from the explicit lists when given (frames
    then refer to them through ``pose_index``/``camera_index``), otherwise one
    entry per frame is stored.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if not frames:
        raise SchemaViolation("a dataset needs at least one frame")
    h, w = frames[0].mask.shape
    cams = list(cameras) if cameras is not None else [f.camera for f in frames]
    ps = list(poses) if poses is not None else [f.pose for f in frames]
    entries = []
    for i, fr in enumerate(frames):
        if fr.mask.shape != (h, w):
            raise ResolutionMismatch("all frames of a manifest share one resolution")
        pi = fr.pose_index if poses is not None else i
        ci = fr.camera_index if cameras is not None else i
        if not (0 <= pi < len(ps) and 0 <= ci < len(cams)):
            raise SchemaViolation(f"frame {i} refers to pose {pi} / camera {ci} outside the lists")
        img, msk = f"images/{i:06d}.png", f"masks/{i:06d}.png"
        write_png(root / img, fr.image)
        write_png(root / msk, fr.mask)
        entries.append({"image": img, "mask": msk, "pose": int(pi), "camera": int(ci),
                        "source": fr.source, "view": fr.view})
    save_template(root / "template.gsav", template)
    tdesc = {"file": "template.gsav", "n_joints": template.n_joints,
             "layout_resolution": [int(layout_resolution[0]), int(layout_resolution[1])]}
    manifest: dict[str, Any] = {
        "version": MANIFEST_VERSION,
        "resolution": [int(w), int(h)],
        "template": tdesc,
        "cameras": [c.to_json() for c in cams],
        "poses": [p.to_json() for p in ps],
        "frames": entries,
    }
    if ground_truth is not None:
        save_attributes(root / "ground_truth.gsav", ground_truth)
        manifest["ground_truth"] = "ground_truth.gsav"
    if meta:
        manifest["meta"] = meta
    path = root / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, indent=1))
    return path


def save_scene(root: str | Path, scene: SynthScene) -> Path:
    return save_dataset(root, scene.frames, scene.template, scene.layout_resolution, cameras=scene.cameras,
                        poses=scene.poses, meta={"seed": scene.seed, "azimuths": scene.azimuths, **scene.meta},
                        ground_truth=scene.gt)


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaViolation(f"{where}: missing key {key!r}")
    return obj[key]


def load_dataset(manifest_path: str | Path) -> Dataset:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFile(f"missing file: {path}")
    root = path.parent
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"{path}: not valid JSON ({exc})") from None
    if _require(m, "version", "manifest") != MANIFEST_VERSION:
        raise SchemaViolation(f"unsupported manifest version {m['version']}")
    w, h = (int(v) for v in _require(m, "resolution", "manifest"))
    tdesc = _require(m, "template", "manifest")
    template = load_template(root / _require(tdesc, "file", "template"))
    lres = tuple(int(v) for v in _require(tdesc, "layout_resolution", "template"))
    try:
        cameras = [Camera.from_json(c) for c in _require(m, "cameras", "manifest")]
        poses = [Pose.from_json(p) for p in _require(m, "poses", "manifest")]
    except (KeyError, TypeError) as exc:
        raise SchemaViolation(f"malformed camera or pose entry: {exc}") from None
    frames = []
    for i, e in enumerate(_require(m, "frames", "manifest")):
        where = f"frame {i}"
        pi, ci = int(_require(e, "pose", where)), int(_require(e, "camera", where))
        if not (0 <= pi < len(poses) and 0 <= ci < len(cameras)):
            raise SchemaViolation(f"{where}: pose {pi} / camera {ci} out of range")
        src = _require(e, "source", where)
        if src not in SOURCES:
            raise SchemaViolation(f"{where}: unknown source {src!r}")
        img = read_image(root / _require(e, "image", where))
        msk = read_mask(root / _require(e, "mask", where))
        if img.shape[:2] != (h, w) or msk.shape != (h, w):
            raise ResolutionMismatch(f"{where}: image is {img.shape[1]}x{img.shape[0]}, manifest says {w}x{h}")
        cam = cameras[ci]
        if (cam.width, cam.height) != (w, h):
            raise ResolutionMismatch(f"{where}: camera {ci} is {cam.width}x{cam.height}, manifest says {w}x{h}")
        frames.append(FrameSample(img, msk, poses[pi], cam, src, e.get("view", "input"), pi, ci))
    layouts = build_anchor_layouts(template.canonical_vertices, lres)
    gt = load_attributes(root / m["ground_truth"]) if "ground_truth" in m else None
    return Dataset(root, frames, template, layouts, cameras, poses, (w, h), m.get("meta", {}), gt)
