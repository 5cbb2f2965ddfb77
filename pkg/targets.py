"""
This module defines the canonical ordering of the ten regression targets, the
three regression heads that partition them, and the masked target vector used
as the supervision signal.

>>> HEADS["A"].targets
(1, 2, 3)
>>> [TARGET_NAMES[j] for j in HEADS["BC"].targets]
['SAT', 'IMVAT', 'VAT', 'body', 'LT', 'MV']
"""

from dataclasses import dataclass, field

import numpy as np

from errors import FormatError

# Canonical target order. Heights and circumferences in cm, volumes in liters.
TARGET_NAMES = ("height", "chest", "waist", "hip",
                "SAT", "IMVAT", "VAT", "body", "LT", "MV")

TARGET_UNITS = {
    "height": "cm",
    "chest": "cm",
    "waist": "cm",
    "hip": "cm",
    "SAT": "L",
    "IMVAT": "L",
    "VAT": "L",
    "body": "L",
    "LT": "L",
    "MV": "L",
}

NUM_TARGETS = len(TARGET_NAMES)


@dataclass(frozen=True)
class HeadSpec:
    """
    One regression head: its name, output width, and the indices of the
    targets it predicts in the canonical 10-target vector.
    """
    name: str
    targets: tuple

    @property
    def output_dim(self):
        return len(self.targets)


HEADS = {
    "H": HeadSpec("H", (0,)),
    "A": HeadSpec("A", (1, 2, 3)),
    "BC": HeadSpec("BC", (4, 5, 6, 7, 8, 9)),
}

HEAD_ORDER = ("H", "A", "BC")


def target_index(name):
    """
    Position of a target in the canonical vector.

    :param name: the target name, e.g. ``"VAT"``
    :type name: str

    :return: the index of the target
    :rtype: int
    """
    try:
        return TARGET_NAMES.index(name)
    except ValueError:
        raise FormatError(f"unknown target '{name}', must be one of {TARGET_NAMES}")


@dataclass
class MaskedTargetVector:
    """
    Ten target values with a presence mask. Entries whose mask bit is 0 carry
    no meaning and are stored as NaN.
    """
    sample_id: str
    y: np.ndarray = field(default_factory=lambda: np.full(NUM_TARGETS, np.nan))
    mask: np.ndarray = field(default_factory=lambda: np.zeros(NUM_TARGETS, dtype=bool))

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.y.shape != (NUM_TARGETS,) or self.mask.shape != (NUM_TARGETS,):
            raise FormatError(f"target vector of '{self.sample_id}' must have {NUM_TARGETS} entries")
        if not self.sample_id:
            raise FormatError("target vector has no sample id")
        self.y = np.where(self.mask, self.y, np.nan)

    @classmethod
    def from_values(cls, sample_id, values):
        """
        Builds a vector from a mapping of target name to value. Missing names
        and NaN values are masked out.

        :param sample_id: the sample identifier
        :type sample_id: str

        :param values: target values keyed by target name
        :type values: {str : float}

        :return: the masked target vector
        :rtype: MaskedTargetVector
        """
        y = np.full(NUM_TARGETS, np.nan)
        for name, v in values.items():
            if v is not None:
                y[target_index(name)] = v
        mask = ~np.isnan(y)
        return cls(sample_id, y, mask)

    def as_dict(self):
        """
        Target values keyed by name, with ``None`` for masked entries.
        """
        return {name: (float(self.y[j]) if self.mask[j] else None)
                for j, name in enumerate(TARGET_NAMES)}

    def head_labeled(self, head):
        """
        Whether the sample carries at least one label for ``head``.

        :param head: the head
        :type head: HeadSpec

        :rtype: bool
        """
        return bool(self.mask[list(head.targets)].any())
