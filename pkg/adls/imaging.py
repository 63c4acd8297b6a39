"""PNG codecs (KITTI 16-bit depth convention), HSV conversion, cropping and manifests.

Depth PNGs are single-channel 16-bit: raw value v > 0 means v / 256 meters,
v = 0 means MISSING.
"""

from pathlib import Path

import numpy as np
import png
from pydantic import BaseModel, Field

from adls.errors import DepthRangeError, DimensionError, FormatError
from adls.models import DepthMap, RgbImage, Scene

DEPTH_SCALE = 256.0
MAX_RAW = 65535
MAX_DEPTH = 256.0


class HsvPixel(BaseModel):
    h: float = Field(ge=0, lt=360)   # degrees
    s: float = Field(ge=0, le=1)
    v: float = Field(ge=0, le=1)


def _read_png(path: Path) -> tuple[np.ndarray, dict]:
    """Decode a PNG into a (height, width * planes) integer array."""
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        data = np.array([np.asarray(row) for row in rows], dtype=np.int64)
    except png.Error as exc:
        raise FormatError(f"{path}: not a readable PNG ({exc})") from exc
    return data.reshape(height, width * info["planes"]), info


def load_depth_png(path: Path) -> DepthMap:
    raw, info = _read_png(path)
    if info["bitdepth"] != 16 or info["planes"] != 1 or not info["greyscale"]:
        raise FormatError(
            f"{path}: expected 16-bit single-channel PNG, got bitdepth={info['bitdepth']} planes={info['planes']}"
        )
    valid = raw > 0
    return DepthMap(values=np.where(valid, raw / DEPTH_SCALE, 0.0), valid=valid)


def depth_to_raw(depth: DepthMap) -> np.ndarray:
    """Quantize to the 16-bit encoding: floor(meters * 256), clamped to [1, 65535]."""
    observed = depth.values[depth.valid]
    if observed.size and observed.max() >= MAX_DEPTH:
        raise DepthRangeError(f"depth {observed.max():.3f} m is not representable (max < 256 m)")
    raw = np.clip(np.floor(depth.values * DEPTH_SCALE), 1, MAX_RAW).astype(np.uint16)
    return np.where(depth.valid, raw, 0).astype(np.uint16)


def save_depth_png(depth: DepthMap, path: Path) -> None:
    raw = depth_to_raw(depth)
    writer = png.Writer(width=depth.width, height=depth.height, greyscale=True, bitdepth=16)
    with open(path, "wb") as f:
        writer.write(f, raw.tolist())


def load_rgb_png(path: Path) -> RgbImage:
    raw, info = _read_png(path)
    if info["bitdepth"] != 8 or info["planes"] != 3:
        raise FormatError(
            f"{path}: expected 8-bit 3-channel PNG, got bitdepth={info['bitdepth']} planes={info['planes']}"
        )
    height = raw.shape[0]
    return RgbImage(pixels=raw.reshape(height, -1, 3).astype(np.uint8))


def save_rgb_png(image: RgbImage, path: Path) -> None:
    writer = png.Writer(width=image.width, height=image.height, greyscale=False, bitdepth=8)
    with open(path, "wb") as f:
        writer.write(f, image.pixels.reshape(image.height, -1).tolist())


def rgb_to_hsv_image(pixels: np.ndarray) -> np.ndarray:
    """Hexcone HSV for an (..., 3) uint8 array: h in degrees, s and v in [0, 1].

    Achromatic pixels get h = 0.
    """
    rgb = np.asarray(pixels, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    top = rgb.max(axis=-1)
    delta = top - rgb.min(axis=-1)
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        top == r,
        np.mod((g - b) / safe, 6.0),
        np.where(top == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    ) * 60.0
    hue = np.where(delta > 0, hue, 0.0)
    sat = np.divide(delta, top, out=np.zeros_like(top), where=top > 0)
    return np.stack([hue, sat, top / 255.0], axis=-1)


def rgb_to_hsv(r: int, g: int, b: int) -> HsvPixel:
    h, s, v = rgb_to_hsv_image(np.array([r, g, b], dtype=np.uint8))
    return HsvPixel(h=float(h), s=float(s), v=float(v))


def bottom_center_window(width: int, height: int, target_w: int, target_h: int) -> tuple[int, int]:
    """(top, left) of the crop; an odd horizontal remainder goes to the left margin."""
    if not (0 < target_w <= width and 0 < target_h <= height):
        raise DimensionError(f"cannot crop {width}x{height} to {target_w}x{target_h}")
    return height - target_h, (width - target_w + 1) // 2


def crop_bottom_center(scene: Scene, target_w: int, target_h: int) -> Scene:
    top, left = bottom_center_window(scene.width, scene.height, target_w, target_h)
    window = (top, left, target_h, target_w)
    return Scene(
        id=scene.id,
        ground_truth=scene.ground_truth.crop(*window),
        samples=scene.samples.crop(*window),
        rgb=scene.rgb.crop(*window) if scene.rgb is not None else None,
    )


class ManifestEntry(BaseModel):
    """One manifest line: scene id, optional RGB path, ground-truth depth path."""
    id: str
    depth: Path
    rgb: Path | None = None


def read_manifest(path: Path) -> list[ManifestEntry]:
    """Parse a tab-separated manifest; relative paths resolve against its directory."""
    base = path.parent
    entries: list[ManifestEntry] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        scene_id, rgb, depth = (field.strip() for field in fields)
        entries.append(ManifestEntry(
            id=scene_id,
            rgb=base / rgb if rgb not in ("", "-") else None,
            depth=base / depth,
        ))
    return entries


def write_manifest(entries: list[ManifestEntry], path: Path) -> None:
    base = path.parent.resolve()

    def _rel(p: Path) -> str:
        try:
            return p.resolve().relative_to(base).as_posix()
        except ValueError:
            return str(p.resolve())

    lines = [
        "\t".join([e.id, _rel(e.rgb) if e.rgb is not None else "-", _rel(e.depth)])
        for e in entries
    ]
    path.write_text("\n".join(lines) + "\n")


def load_scene(entry: ManifestEntry, crop: tuple[int, int] | None = None) -> Scene:
    """Load a scene with an empty sample map, optionally cropped (width, height)."""
    gt = load_depth_png(entry.depth)
    rgb = load_rgb_png(entry.rgb) if entry.rgb is not None else None
    if rgb is not None and (rgb.height, rgb.width) != gt.shape:
        raise DimensionError(f"{entry.id}: RGB is {rgb.width}x{rgb.height}, depth is {gt.width}x{gt.height}")
    scene = Scene.create(entry.id, gt, rgb)
    if crop is not None:
        scene = crop_bottom_center(scene, *crop)
    return scene


def save_scene(scene: Scene, out_dir: Path) -> ManifestEntry:
    """Write RGB (if any) and ground truth PNGs; return the manifest entry."""
    depth_path = out_dir / f"{scene.id}_depth.png"
    save_depth_png(scene.ground_truth, depth_path)
    rgb_path = None
    if scene.rgb is not None:
        rgb_path = out_dir / f"{scene.id}_rgb.png"
        save_rgb_png(scene.rgb, rgb_path)
    return ManifestEntry(id=scene.id, depth=depth_path, rgb=rgb_path)
