"""Incident reports and their JSON-lines storage."""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from ..errors import DataError
from ..io_utils import atomic_write_text
from .labels import SEVERITY_CODES

_KNOWN = ("text", "severity", "category")


@dataclass
class Report:
    text: str
    severity: Optional[str] = None
    category: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.severity is not None and self.severity not in SEVERITY_CODES:
            raise DataError(f"severity {self.severity!r} not in {SEVERITY_CODES}")

    def to_dict(self):
        d = {"text": self.text}
        if self.severity is not None:
            d["severity"] = self.severity
        if self.category is not None:
            d["category"] = self.category
        for k, v in self.extra.items():
            d.setdefault(k, v)
        return d

    @classmethod
    def from_dict(cls, d):
        if "text" not in d or not isinstance(d["text"], str):
            raise DataError("report is missing a string 'text' field")
        extra = {k: v for k, v in d.items() if k not in _KNOWN}
        return cls(d["text"], d.get("severity"), d.get("category"), extra)


def load_jsonl(path) -> List[Report]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: malformed JSON on line {lineno}: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno} is not a JSON object")
            try:
                reports.append(Report.from_dict(obj))
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
    return reports


def dumps_jsonl(reports: Iterable[Report]) -> str:
    return "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in reports)


def save_jsonl(reports: Iterable[Report], path):
    atomic_write_text(path, dumps_jsonl(reports))


def checksum(reports: Iterable[Report]) -> str:
    return hashlib.sha256(dumps_jsonl(reports).encode("utf-8")).hexdigest()
