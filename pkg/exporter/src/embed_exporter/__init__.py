"""embed-exporter: utterance/caption/image embeddings in the engine's store format."""

__version__ = "0.1.0"

from .export import ExportError, ExportJob, ExportSummary, export_embeddings
from .models import ModelLoadError, load_model
from .store_writer import write_store

__all__ = [
    "ExportError",
    "ExportJob",
    "ExportSummary",
    "export_embeddings",
    "ModelLoadError",
    "load_model",
    "write_store",
    "__version__",
]
