"""Region crops -> VGG19-bn conv trunk -> binary feature file.

The input TSV carries one example per line: image id, crop rectangle
(x, y, w, h), source text, target text. Each row becomes one record in
the output file, keyed "{row_index}_{image_id}" so repeated images stay
distinct. Features are the network's final convolutional block output on
the 224x224-resized crop, flattened row-major to a (49, 512) matrix.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image

MAGIC = b"MMTF"
VERSION = 1
N_REGIONS = 49
FEATURE_DIM = 512
CROP_SIZE = 224

# standard ImageNet channel statistics
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

IMAGE_SUFFIXES = ("", ".jpg", ".jpeg", ".png")


class ExtractError(ValueError):
    """Raised for malformed rows, missing or unreadable images."""


@dataclass(frozen=True)
class Row:
    index: int
    image_id: str
    x: int
    y: int
    w: int
    h: int

    @property
    def record_id(self) -> str:
        return f"{self.index}_{self.image_id}"


def read_rows(path) -> list[Row]:
    """Parse the 7-column TSV; line numbers in errors are 1-based."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != 7:
                raise ExtractError(
                    f"line {lineno}: expected 7 tab-separated fields, got {len(fields)}")
            image_id = fields[0]
            if not image_id:
                raise ExtractError(f"line {lineno}: empty image id")
            try:
                x, y, w, h = (int(v) for v in fields[1:5])
            except ValueError:
                raise ExtractError(
                    f"line {lineno}: region coordinates must be integers") from None
            if w <= 0 or h <= 0:
                raise ExtractError(f"line {lineno}: region has no area")
            rows.append(Row(len(rows), image_id, x, y, w, h))
    return rows


def find_image(images_dir, image_id: str) -> Path:
    images_dir = Path(images_dir)
    for suffix in IMAGE_SUFFIXES:
        candidate = images_dir / (image_id + suffix)
        if candidate.is_file():
            return candidate
    raise ExtractError(f"no image file for id {image_id} under {images_dir}")


def crop_box(row: Row, width: int, height: int) -> tuple[int, int, int, int]:
    """Intersect the row's rectangle with the image; empty overlap is fatal."""
    x0, y0 = max(row.x, 0), max(row.y, 0)
    x1, y1 = min(row.x + row.w, width), min(row.y + row.h, height)
    if x1 <= x0 or y1 <= y0:
        raise ExtractError(
            f"record {row.record_id}: region ({row.x}, {row.y}, {row.w}, {row.h}) "
            f"lies outside the {width}x{height} image")
    return x0, y0, x1, y1


def load_crop(images_dir, row: Row) -> Image.Image:
    path = find_image(images_dir, row.image_id)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
    except OSError as exc:
        raise ExtractError(f"record {row.record_id}: unreadable image {path}: {exc}") from exc
    return img.crop(crop_box(row, img.width, img.height))


def preprocess(img: Image.Image) -> np.ndarray:
    """Crop image -> normalized (3, 224, 224) float32 array."""
    img = img.resize((CROP_SIZE, CROP_SIZE), Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - MEAN) / STD
    return arr.transpose(2, 0, 1)


class FeatureNet:
    """VGG19 (batch-norm variant) convolutional trunk in inference mode.

    With `weights_path` the trunk loads a locally supplied state file;
    without one it falls back to a seeded random initialization, which
    keeps every run reproducible where pretrained weights cannot be
    fetched. Either way the tap point is the final conv block's pooled
    output, (512, 7, 7) per image.
    """

    def __init__(self, weights_path=None, seed: int = 0):
        torch.manual_seed(seed)
        net = torchvision.models.vgg19_bn(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        net.eval()
        self.trunk = net.features

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        """(B, 3, 224, 224) float32 -> (B, 49, 512) float32."""
        with torch.no_grad():
            out = self.trunk(torch.from_numpy(batch))
        out = out.permute(0, 2, 3, 1).reshape(out.shape[0], N_REGIONS, FEATURE_DIM)
        return out.numpy()


def write_features(path, records: list[tuple[str, np.ndarray]]) -> None:
    """Write records in order; ids must be unique, matrices (49, 512) finite."""
    seen = set()
    payload = [struct.pack("<IIII", VERSION, len(records), N_REGIONS, FEATURE_DIM)]
    for record_id, mat in records:
        if record_id in seen:
            raise ExtractError(f"duplicate record id {record_id}")
        seen.add(record_id)
        mat = np.ascontiguousarray(mat, dtype=np.float32)
        if mat.shape != (N_REGIONS, FEATURE_DIM):
            raise ExtractError(f"record {record_id}: shape {mat.shape}")
        if not np.isfinite(mat).all():
            raise ExtractError(f"record {record_id}: non-finite values")
        encoded = record_id.encode("utf-8")
        payload.append(struct.pack("<I", len(encoded)))
        payload.append(encoded)
        payload.append(mat.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for chunk in payload:
            fh.write(chunk)


def extract(tsv_path, images_dir, out_path, batch_size: int = 32,
            weights_path=None, seed: int = 0) -> int:
    """Run the extractor over every TSV row; returns the record count."""
    if batch_size < 1:
        raise ExtractError(f"batch size must be >= 1, got {batch_size}")
    rows = read_rows(tsv_path)
    net = FeatureNet(weights_path, seed)
    records: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(rows), batch_size):
        group = rows[start : start + batch_size]
        crops = np.stack([preprocess(load_crop(images_dir, row)) for row in group])
        feats = net(crops)
        records.extend((row.record_id, feats[k]) for k, row in enumerate(group))
    write_features(out_path, records)
    return len(records)
