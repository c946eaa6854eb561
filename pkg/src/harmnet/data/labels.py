"""Severity codes and their groupings into task classes."""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

from ..errors import ConfigError, DataError

SEVERITY_CODES = ("A", "B1", "B2", "C", "D", "E", "F", "G", "H", "I")
NO_HARM_CODES = ("A", "B1", "B2", "C", "D")
HARM_CODES = ("E", "F", "G", "H", "I")

DEFAULT_FOUR_LEVEL = {
    "A": "unsafe",
    "B1": "near_miss",
    "B2": "near_miss",
    "C": "reached_no_harm",
    "D": "reached_no_harm",
    "E": "harm",
    "F": "harm",
    "G": "harm",
    "H": "harm",
    "I": "harm",
}


@dataclass(frozen=True)
class LabelSchema:
    name: str
    class_names: Tuple[str, ...]
    mapping: Mapping[str, int]

    def __post_init__(self):
        missing = [c for c in SEVERITY_CODES if c not in self.mapping]
        if missing:
            raise ConfigError(f"schema {self.name!r} does not map codes {missing}")
        used = sorted(set(self.mapping.values()))
        if used != list(range(len(self.class_names))):
            raise ConfigError(f"schema {self.name!r} class indices must be contiguous from 0, got {used}")

    @property
    def num_classes(self):
        return len(self.class_names)

    @property
    def positive_class(self) -> Optional[int]:
        """Index of the harm class when the schema has one."""
        return self.class_names.index("harm") if "harm" in self.class_names else None

    def map(self, severity):
        return map_label(severity, self)


def _grouped(name, groups: Mapping[str, str], order: Sequence[str]):
    unknown = set(groups.values()) - set(order)
    if unknown:
        raise ConfigError(f"schema {name!r}: groups {sorted(unknown)} missing from class order")
    return LabelSchema(name, tuple(order), {code: order.index(g) for code, g in groups.items()})


BINARY = LabelSchema("binary", ("no_harm", "harm"), {c: int(c in HARM_CODES) for c in SEVERITY_CODES})
FOUR_LEVEL = _grouped("four_level", DEFAULT_FOUR_LEVEL, ("unsafe", "near_miss", "reached_no_harm", "harm"))
FULL = LabelSchema("full", SEVERITY_CODES, {c: i for i, c in enumerate(SEVERITY_CODES)})

SCHEMAS: Dict[str, LabelSchema] = {s.name: s for s in (BINARY, FOUR_LEVEL, FULL)}


def four_level_schema(groups: Optional[Mapping[str, str]] = None, order=None) -> LabelSchema:
    """Four-way grouping with a caller-supplied code to group assignment."""
    groups = dict(DEFAULT_FOUR_LEVEL if groups is None else groups)
    order = tuple(order or ("unsafe", "near_miss", "reached_no_harm", "harm"))
    return _grouped("four_level", groups, order)


def get_schema(name) -> LabelSchema:
    if isinstance(name, LabelSchema):
        return name
    try:
        return SCHEMAS[name]
    except KeyError:
        raise ConfigError(f"unknown label schema {name!r}; valid: {', '.join(SCHEMAS)}") from None


def map_label(severity, schema) -> int:
    schema = get_schema(schema)
    if severity not in schema.mapping:
        raise DataError(f"unknown severity code {severity!r}; expected one of {', '.join(SEVERITY_CODES)}")
    return schema.mapping[severity]
