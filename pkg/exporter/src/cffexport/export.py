"""Run a directory of images through a backbone and write CFF1/CFL1."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import PREPROCESS_RECIPE, load_backbone, preprocess
from .formats import labels_path_for, manifest_path_for, write_cff, write_cfl

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


class ExportError(RuntimeError):
    pass


@dataclass
class ExportManifest:
    model_id: str
    weights_source: str
    layer: str
    preprocess: dict
    image_dir: str
    images: list[str]
    skipped: list[dict]
    n: int
    d: int
    labels_file: str | None = None
    num_classes: int | None = None
    label_names: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _list_images(image_dir: Path) -> list[Path]:
    return sorted(p for p in image_dir.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)


def _resolve_labels(names: list[str], labels_map: dict):
    """Map exported file names through the label map to contiguous ids."""
    missing = [n for n in names if n not in labels_map]
    if missing:
        raise ExportError(f"label map is missing entries for: {missing[:5]}")
    raw = [labels_map[n] for n in names]
    if all(isinstance(v, int) for v in raw):
        ids = np.array(raw, dtype=np.int64)
        if ids.min() < 0:
            raise ExportError("integer labels must be non-negative")
        return ids, int(ids.max()) + 1, None
    classes = sorted({str(v) for v in raw})
    lookup = {c: i for i, c in enumerate(classes)}
    ids = np.array([lookup[str(v)] for v in raw], dtype=np.int64)
    return ids, len(classes), {c: i for c, i in lookup.items()}


def export_features(model_id: str, image_dir, out_path,
                    labels_map: dict | None = None,
                    weights: str | None = None,
                    batch_size: int = 16, seed: int = 0) -> ExportManifest:
    """Export one CFF1 row per decodable image, in sorted listing order.

    Undecodable images are skipped with a warning and recorded in the
    manifest. Zero exported rows is a failure. The manifest JSON is
    written beside the output file; with ``labels_map`` a CFL1 file is
    written as well.
    """
    from PIL import Image, UnidentifiedImageError

    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise ExportError(f"image directory not found: {image_dir}")
    paths = _list_images(image_dir)

    backbone = load_backbone(model_id, weights=weights, seed=seed)
    exported: list[str] = []
    skipped: list[dict] = []
    batches: list[np.ndarray] = []
    pending: list[np.ndarray] = []

    def flush():
        if pending:
            batches.append(backbone.features(np.stack(pending)))
            pending.clear()

    for path in paths:
        try:
            with Image.open(path) as img:
                pending.append(preprocess(img))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            warnings.warn(f"skipping undecodable image {path.name}: {exc}")
            skipped.append({"file": path.name, "reason": str(exc)})
            continue
        exported.append(path.name)
        if len(pending) == batch_size:
            flush()
    flush()

    if not exported:
        raise ExportError(f"no decodable images in {image_dir}")
    rows = np.concatenate(batches, axis=0)

    out_path = Path(out_path)
    write_cff(out_path, rows)

    manifest = ExportManifest(
        model_id=model_id, weights_source=backbone.weights_source,
        layer=backbone.layer, preprocess=PREPROCESS_RECIPE,
        image_dir=str(image_dir), images=exported, skipped=skipped,
        n=rows.shape[0], d=rows.shape[1])

    if labels_map is not None:
        ids, num_classes, label_names = _resolve_labels(exported, labels_map)
        cfl = labels_path_for(out_path)
        write_cfl(cfl, ids, num_classes)
        manifest.labels_file = cfl.name
        manifest.num_classes = num_classes
        manifest.label_names = label_names

    manifest_path_for(out_path).write_text(manifest.to_json())
    return manifest
