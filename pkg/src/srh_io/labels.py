"""Diagnostic classes and their fixed output ordering."""

from __future__ import annotations

from enum import Enum

from src.errors import LabelError


class ClassLabel(str, Enum):
    """The 8 output classes. Declaration order is the class index."""
    PITUITARY_ADENOMA = "pituitary_adenoma"
    MENINGIOMA = "meningioma"
    SCHWANNOMA = "schwannoma"
    LYMPHOMA = "lymphoma"
    METASTASIS = "metastasis"
    NORMAL_BRAIN = "normal_brain"
    NORMAL_PITUITARY = "normal_pituitary"
    NONDIAGNOSTIC = "nondiagnostic"

    @property
    def class_index(self) -> int:
        return _INDEX[self]

    @property
    def is_tumor(self) -> bool:
        return self in TUMOR_CLASSES

    @classmethod
    def from_index(cls, idx: int) -> ClassLabel:
        i = int(idx)
        if not 0 <= i < len(ALL_CLASSES):
            raise LabelError(f"class index out of range: {idx}")
        return ALL_CLASSES[i]

    @classmethod
    def parse(cls, value: str | ClassLabel) -> ClassLabel:
        """Accept enum members, canonical names and a few aliases."""
        if isinstance(value, ClassLabel):
            return value
        key = str(value).strip().lower().replace(" ", "_").replace("-", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise LabelError(f"unknown class label: {value!r}") from None


ALL_CLASSES: tuple[ClassLabel, ...] = tuple(ClassLabel)
_INDEX = {label: i for i, label in enumerate(ALL_CLASSES)}

TUMOR_CLASSES: tuple[ClassLabel, ...] = (
    ClassLabel.PITUITARY_ADENOMA,
    ClassLabel.MENINGIOMA,
    ClassLabel.SCHWANNOMA,
    ClassLabel.LYMPHOMA,
    ClassLabel.METASTASIS,
)
NONTUMOR_CLASSES: tuple[ClassLabel, ...] = (
    ClassLabel.NORMAL_BRAIN,
    ClassLabel.NORMAL_PITUITARY,
    ClassLabel.NONDIAGNOSTIC,
)

NUM_CLASSES = len(ALL_CLASSES)
CLASS_NAMES: list[str] = [c.value for c in ALL_CLASSES]
TUMOR_INDICES: list[int] = [c.class_index for c in TUMOR_CLASSES]
NONTUMOR_INDICES: list[int] = [c.class_index for c in NONTUMOR_CLASSES]

# Dura lacks cytologic features and is annotated as nondiagnostic.
_ALIASES = {
    "dura": "nondiagnostic",
    "normal_dura": "nondiagnostic",
    "pcnsl": "lymphoma",
    "adenoma": "pituitary_adenoma",
}
