"""Feature exporter: run images through a pretrained vision backbone and
write penultimate-layer activations in the pipeline's CFF1/CFL1 formats."""

from .backbone import Backbone, BackboneError, load_backbone, preprocess
from .export import ExportError, ExportManifest, export_features
from .formats import write_cff, write_cfl

__version__ = "0.1.0"
