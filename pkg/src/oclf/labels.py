from enum import Enum


class BinaryLabel(str, Enum):
    """Binary class label. REAL is the positive class; class index 1."""

    REAL = "real"
    FAKE = "fake"

    @property
    def index(self) -> int:
        return 1 if self is BinaryLabel.REAL else 0

    @classmethod
    def from_index(cls, i: int) -> "BinaryLabel":
        return cls.REAL if int(i) == 1 else cls.FAKE

    @classmethod
    def parse(cls, value) -> "BinaryLabel":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower())
