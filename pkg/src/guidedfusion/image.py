"""Image I/O, color conversion, padding and paired-dataset loading.

Images are channel-planar ``float32`` arrays of shape ``(C, H, W)`` with
values in ``[0, 1]``. Visible sources carry three channels, infrared one.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# Full-range BT.601. Rows map (R, G, B) to (Y, Cb - 0.5, Cr - 0.5).
RGB_TO_YCBCR = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.299 / 1.772, -0.587 / 1.772, 0.886 / 1.772],
        [0.701 / 1.402, -0.587 / 1.402, -0.114 / 1.402],
    ],
    dtype=np.float64,
)
YCBCR_TO_RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.114 * 1.772 / 0.587, -0.299 * 1.402 / 0.587],
        [1.0, 1.772, 0.0],
    ],
    dtype=np.float64,
)


class InvalidImageError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class YCbCrSplit:
    y: np.ndarray  # (1, H, W)
    cbcr: np.ndarray  # (2, H, W)


@dataclass
class SourcePair:
    vis: np.ndarray  # (3, H, W)
    ir: np.ndarray  # (1, H, W)
    id: str

    def __post_init__(self):
        if self.vis.ndim != 3 or self.vis.shape[0] != 3:
            raise InvalidImageError(f"{self.id}: visible source must be (3, H, W), got {self.vis.shape}")
        if self.ir.ndim != 3 or self.ir.shape[0] != 1:
            raise InvalidImageError(f"{self.id}: infrared source must be (1, H, W), got {self.ir.shape}")
        if self.vis.shape[1:] != self.ir.shape[1:]:
            raise InvalidImageError(
                f"{self.id}: size mismatch vis {self.vis.shape[1:]} vs ir {self.ir.shape[1:]}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.vis.shape[1], self.vis.shape[2]


@dataclass(frozen=True)
class PadRecord:
    original_h: int
    original_w: int
    pad_top: int
    pad_bottom: int
    pad_left: int
    pad_right: int

    @property
    def padded_shape(self) -> tuple[int, int]:
        return (
            self.original_h + self.pad_top + self.pad_bottom,
            self.original_w + self.pad_left + self.pad_right,
        )


@dataclass
class LoadReport:
    """Pairs skipped or rejected while loading a dataset directory."""

    skipped: list[tuple[str, str]] = field(default_factory=list)

    def add(self, key: str, reason: str) -> None:
        logger.warning("skipping %s: %s", key, reason)
        self.skipped.append((key, reason))


def _as_planar(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[None]
    if img.ndim != 3:
        raise InvalidImageError(f"expected a 2-D or 3-D array, got shape {img.shape}")
    return img


def rgb_to_ycbcr(img: np.ndarray) -> YCbCrSplit:
    img = _as_planar(np.asarray(img))
    if img.shape[0] != 3:
        raise InvalidImageError(f"rgb_to_ycbcr needs 3 channels, got {img.shape[0]}")
    flat = img.reshape(3, -1).astype(np.float64)
    out = RGB_TO_YCBCR @ flat
    out[1:] += 0.5
    out = out.reshape(img.shape).astype(np.float32)
    return YCbCrSplit(y=out[:1], cbcr=out[1:])


def ycbcr_to_rgb(split: YCbCrSplit, clamp: bool = True) -> np.ndarray:
    y = _as_planar(np.asarray(split.y))
    cbcr = np.asarray(split.cbcr)
    if y.shape[0] != 1 or cbcr.shape[0] != 2 or y.shape[1:] != cbcr.shape[1:]:
        raise InvalidImageError(f"malformed YCbCr split: y {y.shape}, cbcr {cbcr.shape}")
    stack = np.concatenate([y, cbcr], axis=0).reshape(3, -1).astype(np.float64)
    stack[1:] -= 0.5
    rgb = (YCBCR_TO_RGB @ stack).reshape(3, *y.shape[1:])
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return rgb.astype(np.float32)


def luminance(img: np.ndarray) -> np.ndarray:
    """Y plane ``(1, H, W)`` of a 3-channel image; 1-channel input is returned as is."""
    img = _as_planar(np.asarray(img, dtype=np.float32))
    if img.shape[0] == 1:
        return img
    return rgb_to_ycbcr(img).y


def pad_reflect(img: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, PadRecord]:
    if multiple < 1:
        raise ValueError("multiple must be >= 1")
    img = _as_planar(np.asarray(img))
    _, h, w = img.shape
    ph = -h % multiple
    pw = -w % multiple
    rec = PadRecord(h, w, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    if ph == 0 and pw == 0:
        return img.copy(), rec
    # numpy's reflect mode handles pads wider than the image by repeated reflection
    mode = "reflect" if min(h, w) > 1 else "edge"
    padded = np.pad(
        img,
        ((0, 0), (rec.pad_top, rec.pad_bottom), (rec.pad_left, rec.pad_right)),
        mode=mode,
    )
    return padded, rec


def crop_back(img, rec: PadRecord):
    """Undo :func:`pad_reflect` on any array or tensor whose last two axes are (H, W)."""
    return img[..., rec.pad_top : rec.pad_top + rec.original_h, rec.pad_left : rec.pad_left + rec.original_w]


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8- or 16-bit image as a planar float32 array in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InvalidImageError(f"unreadable image: {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InvalidImageError(f"unsupported pixel type {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGB)
        elif raw.shape[2] == 3:
            raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
        else:
            raw = raw[..., :1]
        planar = np.ascontiguousarray(raw.transpose(2, 0, 1))
    else:
        planar = raw[None]
    return (planar.astype(np.float32) / scale).astype(np.float32)


def quantize(img: np.ndarray, bits: int = 8) -> np.ndarray:
    """Clamp to [0, 1] and round half away from zero to an unsigned integer grid."""
    peak = (1 << bits) - 1
    dtype = np.uint8 if bits == 8 else np.uint16
    scaled = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * peak
    return np.floor(scaled + 0.5).astype(dtype)


def save_image(path: str | Path, img: np.ndarray, bits: int = 8) -> None:
    img = _as_planar(np.asarray(img))
    q = quantize(img, bits)
    if q.shape[0] == 3:
        out = cv2.cvtColor(np.ascontiguousarray(q.transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)
    elif q.shape[0] == 1:
        out = q[0]
    else:
        raise InvalidImageError(f"cannot save an image with {q.shape[0]} channels")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), out):
        raise OSError(f"failed to write {path}")


def save_guidance(path: str | Path, mu: np.ndarray) -> None:
    """Export a guidance map as a 16-bit single-channel PNG (mu * 65535, rounded)."""
    save_image(path, _as_planar(np.asarray(mu))[:1], bits=16)


def as_visible(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return img
    if img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    raise InvalidImageError(f"visible source has {img.shape[0]} channels")


def as_infrared(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img
    if img.shape[0] == 3:
        return luminance(img)
    raise InvalidImageError(f"infrared source has {img.shape[0]} channels")


def _index_dir(d: Path) -> dict[str, Path]:
    entries: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            entries.setdefault(p.stem, p)
    return entries


def list_pair_ids(root: str | Path) -> list[str]:
    root = Path(root)
    vi_dir, ir_dir = root / "vi", root / "ir"
    if not vi_dir.is_dir() or not ir_dir.is_dir():
        raise DatasetError(f"{root} must contain 'vi/' and 'ir/' subdirectories")
    return sorted(set(_index_dir(vi_dir)) & set(_index_dir(ir_dir)))


def load_pair_dataset(root: str | Path, report: LoadReport | None = None) -> list[SourcePair]:
    """Load every filename-matched ``vi/``/``ir/`` pair under ``root``, sorted by stem.

    Grayscale visible images are replicated to three channels; colour infrared
    images are reduced to luminance. Unreadable files and size-mismatched pairs
    are skipped and listed in ``report``.
    """
    root = Path(root)
    vi_dir, ir_dir = root / "vi", root / "ir"
    if not vi_dir.is_dir() or not ir_dir.is_dir():
        raise DatasetError(f"{root} must contain 'vi/' and 'ir/' subdirectories")
    vi_files, ir_files = _index_dir(vi_dir), _index_dir(ir_dir)
    stems = sorted(set(vi_files) & set(ir_files))
    if not stems:
        raise DatasetError(f"no filename stems shared between {vi_dir} and {ir_dir}")
    report = report if report is not None else LoadReport()
    pairs = []
    for stem in stems:
        try:
            vis = as_visible(load_image(vi_files[stem]))
            ir = as_infrared(load_image(ir_files[stem]))
            pairs.append(SourcePair(vis=vis, ir=ir, id=stem))
        except InvalidImageError as exc:
            report.add(stem, str(exc))
    if not pairs:
        raise DatasetError(f"no loadable pairs under {root}")
    return pairs


def write_pair_dataset(root: str | Path, pairs: list[SourcePair]) -> Path:
    root = Path(root)
    for p in pairs:
        save_image(root / "vi" / f"{p.id}.png", p.vis)
        save_image(root / "ir" / f"{p.id}.png", p.ir)
    return root
