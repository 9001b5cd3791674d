from dataclasses import dataclass, field

SOURCE_KINDS = ("array-dump", "image-folder")


@dataclass
class ExportManifest:
    """What to export and how to label it.

    ``label_map`` maps class names to label ids and must be a bijection
    onto [0, C): every id in that range appears exactly once.
    """

    source_kind: str
    output_path: str
    label_map: dict[str, int] = field(default_factory=dict)
    backbone: str = "resnet50"
    layer: str = "avgpool"

    def __post_init__(self):
        if self.source_kind not in SOURCE_KINDS:
            raise ValueError(f"source_kind must be one of {SOURCE_KINDS}, "
                             f"got {self.source_kind!r}")
        ids = sorted(self.label_map.values())
        if ids != list(range(len(ids))):
            raise ValueError(f"label map must be a bijection onto [0, {len(ids)}), "
                             f"got ids {ids}")

    @property
    def n_classes(self) -> int:
        return len(self.label_map)
