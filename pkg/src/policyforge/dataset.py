"""Record ingestion, sanitization, and deterministic split construction.

Input rows arrive from CSV or JSONL files with arbitrary column names; a
field mapping selects the two profile texts and the outcome label. Records
are stripped down to exactly those fields (plus a stable record_id) before
anything downstream sees them, so identifying information never reaches a
prompt. Splits are sampled without replacement per label with a seeded
Mersenne Twister, making membership reproducible across machines.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

RECORD_FIELDS = ("record_id", "linkedin_profile", "cb_profile", "success")

_TRUE_TOKENS = {"true", "1", "yes", "y", "t"}
_FALSE_TOKENS = {"false", "0", "no", "n", "f"}


class DataError(Exception):
    """Raised for unreadable files, schema problems, or bad rows."""


class SanitizeError(DataError):
    """Raised when a raw record cannot become a valid FounderRecord."""


class SplitError(DataError):
    """Raised when a split spec cannot be satisfied or is inconsistent."""


@dataclass(frozen=True)
class FounderRecord:
    """One sanitized labeled profile: two text fields and an outcome."""

    record_id: str
    linkedin_profile: str
    cb_profile: str
    success: bool


@dataclass(frozen=True)
class SplitSpec:
    """Requested per-label counts for the train set and named eval subsets."""

    seed: int
    train_pos: int
    train_neg: int
    eval_subsets: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self) -> None:
        counts = [self.train_pos, self.train_neg]
        names = set()
        for name, pos, neg in self.eval_subsets:
            if name in names:
                raise SplitError(f"duplicate eval subset name: {name!r}")
            names.add(name)
            counts.extend([pos, neg])
        if any(c < 0 for c in counts):
            raise SplitError("all split counts must be >= 0")

    @property
    def total_pos(self) -> int:
        return self.train_pos + sum(p for _, p, _ in self.eval_subsets)

    @property
    def total_neg(self) -> int:
        return self.train_neg + sum(n for _, _, n in self.eval_subsets)


@dataclass(frozen=True)
class DatasetSplit:
    """Materialized split: an ordered train list plus named eval subsets."""

    train: tuple[FounderRecord, ...]
    eval_subsets: dict[str, tuple[FounderRecord, ...]] = field(default_factory=dict)

    def subset(self, name: str) -> tuple[FounderRecord, ...]:
        if name == "train":
            return self.train
        if name not in self.eval_subsets:
            known = ", ".join(sorted(self.eval_subsets)) or "<none>"
            raise SplitError(f"unknown subset {name!r}; available: train, {known}")
        return self.eval_subsets[name]


def _parse_success(value: object, row_index: int) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    token = str(value).strip().casefold()
    if token in _TRUE_TOKENS:
        return True
    if token in _FALSE_TOKENS:
        return False
    raise DataError(f"row {row_index}: unparseable success label {value!r}")


DEFAULT_SCHEMA = {
    "linkedin_profile": "clean_linkedin_profile",
    "cb_profile": "clean_cb_profile",
    "success": "success",
}


def load_records(
    source_path: str | Path,
    schema: Mapping[str, str] | None = None,
) -> list[dict]:
    """Read raw rows from a CSV (header required) or JSONL file.

    `schema` maps canonical field names (linkedin_profile, cb_profile,
    success, optionally record_id) to source column names. Mapped columns
    are renamed to their canonical names in the returned dicts; all other
    columns pass through untouched for `sanitize` to drop.
    """
    path = Path(source_path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    mapping = dict(DEFAULT_SCHEMA)
    if schema:
        mapping.update(schema)

    suffix = path.suffix.lower()
    if suffix == ".csv":
        rows = _read_csv(path)
    elif suffix in (".jsonl", ".ndjson"):
        rows = _read_jsonl(path)
    else:
        raise DataError(f"unsupported input format {suffix!r} (expected .csv or .jsonl)")

    records: list[dict] = []
    for index, row in enumerate(rows):
        raw = dict(row)
        for canonical, source in mapping.items():
            if source in raw:
                raw[canonical] = raw.pop(source)
            elif canonical not in raw and canonical != "record_id":
                raise DataError(
                    f"row {index}: missing mapped column {source!r} (for {canonical})"
                )
        raw["success"] = _parse_success(raw["success"], index)
        records.append(raw)
    return records


def _read_csv(path: Path) -> Iterable[dict]:
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty CSV, header row required")
        yield from reader


def _read_jsonl(path: Path) -> Iterable[dict]:
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(row, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            yield row


def save_records(records: Sequence[FounderRecord], path: str | Path) -> None:
    """Write sanitized records back out as CSV or JSONL (by extension)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(RECORD_FIELDS))
            writer.writeheader()
            for record in records:
                writer.writerow(
                    {
                        "record_id": record.record_id,
                        "linkedin_profile": record.linkedin_profile,
                        "cb_profile": record.cb_profile,
                        "success": record.success,
                    }
                )
    elif suffix in (".jsonl", ".ndjson"):
        with path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(
                    json.dumps(
                        {
                            "record_id": record.record_id,
                            "linkedin_profile": record.linkedin_profile,
                            "cb_profile": record.cb_profile,
                            "success": record.success,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    else:
        raise DataError(f"unsupported output format {suffix!r} (expected .csv or .jsonl)")


def sanitize(raw: Mapping[str, object]) -> FounderRecord:
    """Whitelist a raw record down to the three content fields plus an id.

    Any other field (names, descriptions, funding columns) is discarded so
    the record carries nothing a model could use to identify the company.
    """
    try:
        linkedin = str(raw["linkedin_profile"]).strip()
        cb = str(raw["cb_profile"]).strip()
        success = raw["success"]
    except KeyError as exc:
        raise SanitizeError(f"raw record missing required field: {exc}") from exc
    if not isinstance(success, bool):
        success = _parse_success(success, -1)
    if not linkedin:
        raise SanitizeError("linkedin_profile is empty after trimming")
    if not cb:
        raise SanitizeError("cb_profile is empty after trimming")
    record_id = str(raw.get("record_id") or "").strip()
    if not record_id:
        digest = hashlib.sha256(
            f"{linkedin}\x1f{cb}\x1f{success}".encode("utf-8")
        ).hexdigest()
        record_id = digest[:12]
    return FounderRecord(
        record_id=record_id,
        linkedin_profile=linkedin,
        cb_profile=cb,
        success=success,
    )


def make_split(records: Sequence[FounderRecord], spec: SplitSpec) -> DatasetSplit:
    """Sample disjoint train/eval subsets without replacement, per label.

    The only randomness source is random.Random(spec.seed); identical
    inputs produce identical membership and order.
    """
    positives = [r for r in records if r.success]
    negatives = [r for r in records if not r.success]
    if len(positives) < spec.total_pos:
        raise SplitError(
            f"need {spec.total_pos} positive records, only {len(positives)} available"
        )
    if len(negatives) < spec.total_neg:
        raise SplitError(
            f"need {spec.total_neg} negative records, only {len(negatives)} available"
        )

    rng = random.Random(spec.seed)
    pos_order = rng.sample(positives, len(positives))
    neg_order = rng.sample(negatives, len(negatives))

    pos_cursor = neg_cursor = 0

    def take(pos_n: int, neg_n: int) -> list[FounderRecord]:
        nonlocal pos_cursor, neg_cursor
        chunk = pos_order[pos_cursor : pos_cursor + pos_n]
        pos_cursor += pos_n
        chunk += neg_order[neg_cursor : neg_cursor + neg_n]
        neg_cursor += neg_n
        rng.shuffle(chunk)
        return chunk

    train = take(spec.train_pos, spec.train_neg)
    subsets = {
        name: tuple(take(pos_n, neg_n)) for name, pos_n, neg_n in spec.eval_subsets
    }
    return DatasetSplit(train=tuple(train), eval_subsets=subsets)


def save_manifest(split: DatasetSplit, spec: SplitSpec, path: str | Path) -> None:
    """Write a JSON manifest sufficient to reconstruct split membership."""
    payload = {
        "seed": spec.seed,
        "spec": {
            "train_pos": spec.train_pos,
            "train_neg": spec.train_neg,
            "eval_subsets": [list(s) for s in spec.eval_subsets],
        },
        "subsets": {
            "train": [r.record_id for r in split.train],
            **{
                name: [r.record_id for r in records]
                for name, records in split.eval_subsets.items()
            },
        },
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_manifest(
    path: str | Path, records: Sequence[FounderRecord]
) -> tuple[DatasetSplit, SplitSpec]:
    """Rebuild a DatasetSplit from a manifest and the full record list."""
    manifest_path = Path(path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    payload = json.loads(manifest_path.read_text(encoding="utf-8"))
    by_id = {r.record_id: r for r in records}

    def resolve(ids: list[str], subset: str) -> tuple[FounderRecord, ...]:
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise DataError(
                f"manifest subset {subset!r} references unknown record ids: {missing[:5]}"
            )
        return tuple(by_id[i] for i in ids)

    subsets = dict(payload["subsets"])
    train_ids = subsets.pop("train")
    spec = SplitSpec(
        seed=payload["seed"],
        train_pos=payload["spec"]["train_pos"],
        train_neg=payload["spec"]["train_neg"],
        eval_subsets=tuple(tuple(s) for s in payload["spec"]["eval_subsets"]),
    )
    split = DatasetSplit(
        train=resolve(train_ids, "train"),
        eval_subsets={name: resolve(ids, name) for name, ids in subsets.items()},
    )
    return split, spec


# -- Synthetic fixtures -------------------------------------------------

# Filler vocabulary is deliberately short-worded (< 6 characters) so that
# the scripted mock's keyword rule keys only on the planted signal word and
# the made-up venture tokens below.
_LINKEDIN_FILLER = (
    "Led a team of {n} at a seed stage firm for {m} years.",
    "Began in sales and rose to run a small group of {n}.",
    "Ran ops at a web shop and later led a crew of {n}.",
    "Spent {m} years as head of sales at a data firm.",
)
_CB_FILLER = (
    "Runs {token}, an early stage firm in the {sector} space.",
    "Co-owns {token}, a young firm with a seed round of {amount}k.",
    "Set up {token} in {year}; the firm is still small.",
)
_SECTORS = ("bio", "web", "data", "agri", "media")
_NOISE_TOKENS = (
    "quantek",
    "fernova",
    "miradyne",
    "voltspan",
    "kitewave",
    "parazen",
    "bryndle",
    "solvexa",
)


@dataclass(frozen=True)
class SignalSpec:
    """Keyword-plant rule: P(keyword | positive) = correlation,
    P(keyword | negative) = 1 - correlation."""

    keyword: str = "patented"
    correlation: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.correlation <= 1.0:
            raise DataError(
                f"signal correlation must be in [0, 1], got {self.correlation}"
            )


def synth_fixture(
    seed: int,
    pos: int,
    neg: int,
    signal: SignalSpec | None = None,
) -> list[FounderRecord]:
    """Generate deterministic synthetic profiles with a plantable signal."""
    if pos < 0 or neg < 0:
        raise DataError("pos and neg must be >= 0")
    signal = signal or SignalSpec()
    rng = random.Random(seed)
    records: list[FounderRecord] = []
    for i in range(pos + neg):
        success = i < pos
        planted_p = signal.correlation if success else 1.0 - signal.correlation
        planted = rng.random() < planted_p
        linkedin = rng.choice(_LINKEDIN_FILLER).format(
            n=rng.randint(3, 9), m=rng.randint(2, 8)
        )
        token = rng.choice(_NOISE_TOKENS)
        cb = rng.choice(_CB_FILLER).format(
            token=token,
            sector=rng.choice(_SECTORS),
            amount=rng.randint(50, 900),
            year=rng.randint(2012, 2021),
        )
        if planted:
            linkedin += f" Holds a {signal.keyword} way to sort data."
        label = "s" if success else "f"
        records.append(
            FounderRecord(
                record_id=f"syn-{label}{i:04d}",
                linkedin_profile=linkedin,
                cb_profile=cb,
                success=success,
            )
        )
    return records
