"""Pretrained-backbone loading and penultimate-layer feature capture.

A backbone is any torchvision classification model; the classifier head
is replaced with an identity so the forward pass returns the
penultimate activation directly. The preprocessing recipe follows the
standard torchvision evaluation transform for these models and is
recorded verbatim in the export manifest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

PREPROCESS_RECIPE = {
    "resize": {"size": 256, "interpolation": "bilinear"},
    "center_crop": {"size": 224},
    "to_float": {"scale": "1/255"},
    "normalize": {
        "mean": [0.485, 0.456, 0.406],
        "std": [0.229, 0.224, 0.225],
    },
}


class BackboneError(RuntimeError):
    pass


@dataclass(eq=False)
class Backbone:
    model_id: str
    module: nn.Module
    layer: str
    feature_dim: int
    weights_source: str

    @torch.no_grad()
    def features(self, batch: np.ndarray) -> np.ndarray:
        """Map a preprocessed NCHW float32 batch to penultimate features."""
        out = self.module(torch.from_numpy(batch))
        return out.reshape(out.shape[0], -1).numpy().astype(np.float64)


def _strip_head(model: nn.Module) -> str:
    """Replace the classifier with an identity; return the tapped layer name."""
    if hasattr(model, "fc") and isinstance(model.fc, nn.Linear):
        model.fc = nn.Identity()
        return "pre-fc (global pooled)"
    if hasattr(model, "classifier"):
        head = model.classifier
        if isinstance(head, nn.Linear):
            model.classifier = nn.Identity()
            return "pre-classifier"
        if isinstance(head, nn.Sequential) and len(head) > 0:
            # drop the final linear layer, keep any preceding dropout/activation
            for i in range(len(head) - 1, -1, -1):
                if isinstance(head[i], nn.Linear):
                    model.classifier = nn.Sequential(*list(head[:i]))
                    return f"classifier[:{i}]"
    if hasattr(model, "heads"):  # vision transformers
        model.heads = nn.Identity()
        return "pre-heads (class token)"
    raise BackboneError("could not locate a classifier head to remove; "
                        "unsupported architecture")


def load_backbone(model_id: str, weights: str | None = None,
                  seed: int = 0) -> Backbone:
    """Build a headless backbone.

    ``weights`` is an optional path to a local state dict. Without one,
    the model is initialized from a fixed seed so exports stay
    deterministic even when no pretrained weights are available.
    """
    import torchvision.models as tvm

    torch.manual_seed(seed)
    try:
        model = tvm.get_model(model_id, weights=None)
    except ValueError as exc:
        raise BackboneError(f"unknown model id {model_id!r}") from exc
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
        source = f"state dict from {weights}"
    else:
        source = f"random initialization (seed={seed}); no pretrained weights loaded"
    layer = _strip_head(model)
    model.eval()

    with torch.no_grad():
        probe = model(torch.zeros(1, 3, PREPROCESS_RECIPE["center_crop"]["size"],
                                  PREPROCESS_RECIPE["center_crop"]["size"]))
    feature_dim = int(probe.reshape(1, -1).shape[1])
    return Backbone(model_id=model_id, module=model, layer=layer,
                    feature_dim=feature_dim, weights_source=source)


def preprocess(image) -> np.ndarray:
    """Apply the recorded recipe to a PIL image; returns CHW float32."""
    from PIL import Image

    size = PREPROCESS_RECIPE["resize"]["size"]
    crop = PREPROCESS_RECIPE["center_crop"]["size"]
    img = image.convert("RGB")
    w, h = img.size
    scale = size / min(w, h)
    img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))),
                     Image.BILINEAR)
    w, h = img.size
    left, top = (w - crop) // 2, (h - crop) // 2
    img = img.crop((left, top, left + crop, top + crop))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.array(PREPROCESS_RECIPE["normalize"]["mean"], dtype=np.float32)
    std = np.array(PREPROCESS_RECIPE["normalize"]["std"], dtype=np.float32)
    arr = (arr - mean) / std
    return arr.transpose(2, 0, 1)
