"""Face-mask and image preprocessing.

Raw masks use the 19 CelebAMask-HQ label ids (0 = background). They are
merged into five groups, one-hot encoded, and paired with resized,
normalized images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

RAW_LABELS = (
    "background", "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow",
    "l_ear", "r_ear", "mouth", "u_lip", "l_lip", "hair", "hat", "ear_r", "neck_l",
    "neck", "cloth",
)
RAW_CLASSES = len(RAW_LABELS)
MERGED_CLASSES = 5

BACKGROUND, COMPONENTS, WEARABLES, FACE, HAIR = range(5)

_GROUPS = {
    COMPONENTS: ("nose", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear",
                 "mouth", "u_lip", "l_lip"),
    WEARABLES: ("hat", "ear_r", "eye_g", "neck_l"),
    FACE: ("skin",),
    HAIR: ("hair",),
}

LUMA = (0.299, 0.587, 0.114)
TARGET_SIZE = 256


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray  # (H, W) integer ids
    space: str = "raw19"

    def __post_init__(self):
        if self.space not in ("raw19", "merged5"):
            raise MaskError(f"unknown label space {self.space!r}")
        if self.labels.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {self.labels.shape}")
        bad = (self.labels < 0) | (self.labels >= self.classes)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise MaskError(f"label {self.labels[y, x]} at pixel ({y}, {x}) "
                            f"outside {self.space} range 0..{self.classes - 1}")

    @property
    def classes(self) -> int:
        return RAW_CLASSES if self.space == "raw19" else MERGED_CLASSES

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class MergeTable:
    """Total map raw label id -> merged group id."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if len(self.mapping) != RAW_CLASSES:
            raise MaskError(f"merge table needs {RAW_CLASSES} entries, got {len(self.mapping)}")
        if set(self.mapping) != set(range(MERGED_CLASSES)):
            raise MaskError(f"merge table must be onto 0..{MERGED_CLASSES - 1}")

    @classmethod
    def default(cls) -> "MergeTable":
        table = [BACKGROUND] * RAW_CLASSES
        for group, names in _GROUPS.items():
            for name in names:
                table[RAW_LABELS.index(name)] = group
        return cls(tuple(table))

    @classmethod
    def from_json(cls, path: str | Path) -> "MergeTable":
        """Load ``{"raw_label": merged_label}``; keys may be ids or label names.

        Raw labels left out of the file keep their default group.
        """
        table = list(cls.default().mapping)
        for key, val in json.loads(Path(path).read_text()).items():
            raw = RAW_LABELS.index(key) if key in RAW_LABELS else int(key)
            if not 0 <= raw < RAW_CLASSES:
                raise MaskError(f"raw label {key!r} out of range")
            table[raw] = int(val)
        return cls(tuple(table))

    def to_json(self) -> str:
        return json.dumps({str(i): g for i, g in enumerate(self.mapping)}, indent=2)


def merge_labels(mask: LabelMask, table: MergeTable | None = None) -> LabelMask:
    if mask.space != "raw19":
        raise MaskError("merge_labels expects a raw19 mask")
    table = table or MergeTable.default()
    lut = np.asarray(table.mapping, dtype=np.uint8)
    return LabelMask(lut[mask.labels], "merged5")


def one_hot(labels: np.ndarray | LabelMask, classes: int = MERGED_CLASSES) -> np.ndarray:
    """(H, W) ids -> (H, W, classes) float32 indicator array."""
    ids = labels.labels if isinstance(labels, LabelMask) else np.asarray(labels)
    if ids.size and (ids.min() < 0 or ids.max() >= classes):
        y, x = np.argwhere((ids < 0) | (ids >= classes))[0][:2]
        raise MaskError(f"label {ids[y, x]} at ({y}, {x}) not below {classes}")
    return np.eye(classes, dtype=np.float32)[ids]


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma, keeping a trailing channel axis."""
    return (np.asarray(rgb, dtype=np.float64) @ np.asarray(LUMA))[..., None]


def resize_image(image: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] == (size, size):
        return img.copy()
    out = cv2.resize(img, (size, size), interpolation=cv2.INTER_LINEAR)
    return out if out.ndim == img.ndim else out[..., None]


def resize_mask(labels: np.ndarray, size: int = TARGET_SIZE) -> np.ndarray:
    """Nearest-neighbour resize; never invents labels."""
    if labels.shape[:2] == (size, size):
        return labels.copy()
    return cv2.resize(labels.astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST)


@dataclass(frozen=True)
class TrainingPair:
    sharp: np.ndarray        # (S, S, 3) in [0, 1]
    blurry: np.ndarray       # (S, S, 3) in [0, 1]
    blurry_gray: np.ndarray  # (S, S, 1)
    mask: LabelMask          # merged5
    mask_onehot: np.ndarray  # (S, S, 5)


def make_pair(sharp: np.ndarray, blurry: np.ndarray, merged: np.ndarray) -> TrainingPair:
    """Assemble a pair from already-normalized images and merged labels."""
    return TrainingPair(sharp, blurry, to_grayscale(blurry), LabelMask(merged, "merged5"),
                        one_hot(merged, MERGED_CLASSES))


def prepare_pair(sharp: np.ndarray, blurry: np.ndarray, mask: LabelMask,
                 table: MergeTable | None = None, size: int = TARGET_SIZE) -> TrainingPair:
    """Resize to ``size`` x ``size``, merge and encode the mask, scale images by 1/255."""
    if sharp.shape[:2] != blurry.shape[:2] or sharp.shape[:2] != mask.labels.shape:
        raise MaskError(f"extent mismatch: sharp {sharp.shape[:2]}, blurry {blurry.shape[:2]}, "
                        f"mask {mask.labels.shape}")
    merged = merge_labels(mask, table).labels if mask.space == "raw19" else mask.labels
    merged = resize_mask(merged, size)
    s = resize_image(sharp, size) / 255.0
    b = resize_image(blurry, size) / 255.0
    return make_pair(np.clip(s, 0, 1), np.clip(b, 0, 1), merged)
