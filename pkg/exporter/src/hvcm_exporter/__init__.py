from hvcm_exporter.export import ExportError, export_arrays, export_images
from hvcm_exporter.manifest import ExportManifest

__all__ = ["ExportError", "ExportManifest", "export_arrays", "export_images"]
