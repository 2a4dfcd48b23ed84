"""Extraction manifests: what to encode, with what, and where to put it."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

DEFAULT_TEMPLATE = "a photo of a [CLS]"


class ManifestError(ValueError):
    """The manifest is inconsistent with itself or the dataset layout."""


@dataclass
class ExtractionManifest:
    """One extraction job.

    ``dataset_root`` holds one subdirectory per class. ``class_names``, when
    given, must match those subdirectories exactly; left unset, the sorted
    directory names are used. ``prompt_templates`` fill their ``[CLS]``
    placeholder with the class name; multiple templates are averaged into
    one embedding per class.
    """

    dataset_root: str
    output_path: str
    encoder: str = "lite"
    prompt_templates: list[str] = field(
        default_factory=lambda: [DEFAULT_TEMPLATE]
    )
    class_names: list[str] | None = None
    test_fraction: float = 0.25

    def __post_init__(self):
        if not self.prompt_templates:
            raise ManifestError("at least one prompt template is required")
        for template in self.prompt_templates:
            if "[CLS]" not in template:
                raise ManifestError(
                    f"template {template!r} has no [CLS] placeholder"
                )
        if not 0.0 <= self.test_fraction < 1.0:
            raise ManifestError(
                f"test_fraction must be in [0, 1), got {self.test_fraction}"
            )

    def resolve_class_names(self) -> list[str]:
        """Class list from the directory structure, checked against any
        explicit list."""
        if not os.path.isdir(self.dataset_root):
            raise FileNotFoundError(
                f"dataset root {self.dataset_root!r} is not a directory"
            )
        discovered = sorted(
            entry
            for entry in os.listdir(self.dataset_root)
            if os.path.isdir(os.path.join(self.dataset_root, entry))
        )
        if not discovered:
            raise ManifestError(
                f"no class subdirectories under {self.dataset_root!r}"
            )
        if self.class_names is None:
            return discovered
        if sorted(self.class_names) != discovered:
            raise ManifestError(
                f"manifest class names {sorted(self.class_names)} do not match "
                f"directories {discovered}"
            )
        return list(self.class_names)

    def to_json(self) -> str:
        return json.dumps(
            {
                "dataset_root": self.dataset_root,
                "output_path": self.output_path,
                "encoder": self.encoder,
                "prompt_templates": self.prompt_templates,
                "class_names": self.class_names,
                "test_fraction": self.test_fraction,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json_file(cls, path) -> "ExtractionManifest":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(**payload)
