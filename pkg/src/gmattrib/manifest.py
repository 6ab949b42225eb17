"""Dataset manifests: a versioned JSON-lines header followed by one row per image."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA = "gmattrib-manifest"
SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test", "external")
LABELS = ("real", "fake")


class ManifestError(ValueError):
    pass


@dataclass
class SampleRecord:
    path: str
    label: str
    source: str
    split: str
    image_id: str = ""

    def __post_init__(self):
        if not self.image_id:
            self.image_id = Path(self.path).stem


@dataclass
class DatasetManifest:
    rows: list[SampleRecord] = field(default_factory=list)
    seed: int = 0
    image_size: int = 64
    notes: dict = field(default_factory=dict)
    root: Path | None = None

    def header(self) -> dict:
        return {"schema": SCHEMA, "version": SCHEMA_VERSION, "seed": self.seed,
                "image_size": self.image_size, "notes": self.notes}

    def validate(self) -> "DatasetManifest":
        problems = validate_rows([asdict(r) for r in self.rows])
        if problems:
            raise ManifestError("; ".join(problems[:5]))
        return self

    def select(self, split=None, source=None, label=None) -> list[SampleRecord]:
        def keep(r):
            return ((split is None or r.split in _as_set(split))
                    and (source is None or r.source in _as_set(source))
                    and (label is None or r.label == label))
        return [r for r in self.rows if keep(r)]

    def sources(self, include_external=False) -> list[str]:
        out = []
        for r in self.rows:
            if r.label == "fake" and r.source not in out and (include_external or r.split != "external"):
                out.append(r.source)
        return out

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.validate()
        path.write_text(self.dumps())
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        except OSError as exc:
            raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise ManifestError(f"{path}: empty manifest")
        try:
            header = json.loads(lines[0])
            raw = [json.loads(ln) for ln in lines[1:]]
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: malformed line: {exc}") from exc
        problems = validate_header(header) + validate_rows(raw)
        if problems:
            raise ManifestError(f"{path}: " + "; ".join(problems[:5]))
        rows = [SampleRecord(**r) for r in raw]
        return cls(rows, header["seed"], header["image_size"], header.get("notes", {}), path.parent)


def _as_set(x):
    return {x} if isinstance(x, str) else set(x)


def validate_header(header) -> list[str]:
    if not isinstance(header, dict):
        return ["header must be an object"]
    problems = []
    if header.get("schema") != SCHEMA:
        problems.append(f"schema must be {SCHEMA!r}")
    if header.get("version") != SCHEMA_VERSION:
        problems.append(f"unsupported manifest version {header.get('version')!r}")
    for key in ("seed", "image_size"):
        if not isinstance(header.get(key), int):
            problems.append(f"header.{key} must be an integer")
    return problems


def validate_rows(rows: list[dict]) -> list[str]:
    problems = []
    seen = set()
    required = {"path", "label", "source", "split"}
    for i, r in enumerate(rows):
        if not isinstance(r, dict) or not required <= set(r):
            problems.append(f"row {i}: missing fields {sorted(required - set(r or {}))}")
            continue
        if set(r) - required - {"image_id"}:
            problems.append(f"row {i}: unknown fields {sorted(set(r) - required - {'image_id'})}")
        if r["path"] in seen:
            problems.append(f"row {i}: duplicate path {r['path']}")
        seen.add(r["path"])
        if r["label"] not in LABELS:
            problems.append(f"row {i}: bad label {r['label']!r}")
        if r["split"] not in SPLITS:
            problems.append(f"row {i}: bad split {r['split']!r}")
        if (r["label"] == "fake") != (r["source"] != "real"):
            problems.append(f"row {i}: label/source mismatch ({r['label']}, {r['source']})")
    external = {r["source"] for r in rows if isinstance(r, dict) and r.get("split") == "external"}
    for i, r in enumerate(rows):
        if isinstance(r, dict) and r.get("source") in external and r.get("split") in ("train", "val"):
            problems.append(f"row {i}: external source {r['source']} appears in {r['split']}")
    return problems
