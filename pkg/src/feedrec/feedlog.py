"""Feedback taxonomy, dwell-time quantization and JSONL log I/O.

A corpus on disk is a directory with three line-delimited JSON files:

``news.jsonl``
    ``news_id``, ``title_tokens``, ``category_id``
``impressions.jsonl``
    ``impression_id``, ``user_id``, ``shown_news``, ``clicked``, ``timestamp``
``feedback.jsonl``
    ``user_id``, ``news_id``, ``type``, ``event_time``, ``dwell_time``

``feedback.jsonl`` carries the logged records only: clicks (with dwell time),
finish markers, shares and dislikes. Skips and quick closes are re-derived from
the impressions with :func:`derive_feedbacks` so the quick-close threshold can
be changed without regenerating data.
"""

from __future__ import annotations

import json
import math
import random
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

BUCKET_CAP = 12

NEWS_FILE = "news.jsonl"
IMPRESSIONS_FILE = "impressions.jsonl"
FEEDBACK_FILE = "feedback.jsonl"


class FeedlogError(ValueError):
    """Bad input to a feedlog operation."""


class LogParseError(FeedlogError):
    def __init__(self, path: Path | str, line_no: int, reason: str) -> None:
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class FeedbackType(str, Enum):
    CLICK = "click"
    SKIP = "skip"
    SHARE = "share"
    DISLIKE = "dislike"
    FINISH = "finish"
    QUICK_CLOSE = "quick_close"

    @property
    def index(self) -> int:
        return TYPE_INDEX[self]


# Row order of the feedback-type embedding table.
TYPE_INDEX = {t: i for i, t in enumerate(FeedbackType)}
# Intra-second tie-break when sorting records.
TYPE_SORT_ORDER = {
    FeedbackType.CLICK: 0,
    FeedbackType.FINISH: 1,
    FeedbackType.QUICK_CLOSE: 2,
    FeedbackType.SHARE: 3,
    FeedbackType.DISLIKE: 4,
    FeedbackType.SKIP: 5,
}
DWELL_TYPES = frozenset({FeedbackType.CLICK, FeedbackType.FINISH, FeedbackType.QUICK_CLOSE})


@dataclass(frozen=True, slots=True)
class FeedbackRecord:
    user_id: str
    news_id: str
    type: FeedbackType
    event_time: int
    dwell_time: int | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.type, FeedbackType):
            object.__setattr__(self, "type", FeedbackType(self.type))
        has_dwell = self.dwell_time is not None
        if has_dwell != (self.type in DWELL_TYPES):
            raise FeedlogError(
                f"{self.type.value} record {'must not' if has_dwell else 'must'} carry dwell_time"
            )
        if has_dwell and self.dwell_time < 0:
            raise FeedlogError(f"negative dwell_time {self.dwell_time}")

    def sort_key(self) -> tuple:
        return (self.event_time, self.news_id, TYPE_SORT_ORDER[self.type])

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "news_id": self.news_id,
            "type": self.type.value,
            "event_time": self.event_time,
            "dwell_time": self.dwell_time,
        }


@dataclass(frozen=True, slots=True)
class ImpressionLog:
    impression_id: str
    user_id: str
    shown_news: tuple[str, ...]
    clicked: tuple[str, ...]
    timestamp: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "shown_news", tuple(self.shown_news))
        object.__setattr__(self, "clicked", tuple(self.clicked))
        if not self.shown_news:
            raise FeedlogError(f"impression {self.impression_id} shows no news")
        if len(set(self.shown_news)) != len(self.shown_news):
            raise FeedlogError(f"impression {self.impression_id} shows duplicate news")
        missing = set(self.clicked) - set(self.shown_news)
        if missing:
            raise FeedlogError(f"impression {self.impression_id} clicks unshown news {sorted(missing)}")

    @property
    def skipped(self) -> tuple[str, ...]:
        clicked = set(self.clicked)
        return tuple(n for n in self.shown_news if n not in clicked)

    def to_dict(self) -> dict:
        return {
            "impression_id": self.impression_id,
            "user_id": self.user_id,
            "shown_news": list(self.shown_news),
            "clicked": list(self.clicked),
            "timestamp": self.timestamp,
        }


@dataclass(frozen=True, slots=True)
class NewsArticle:
    news_id: str
    title_tokens: tuple[int, ...]
    category_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "title_tokens", tuple(self.title_tokens))
        if not self.title_tokens:
            raise FeedlogError(f"news {self.news_id} has an empty title")

    def to_dict(self) -> dict:
        return {
            "news_id": self.news_id,
            "title_tokens": list(self.title_tokens),
            "category_id": self.category_id,
        }


@dataclass(frozen=True, slots=True)
class RawImpression:
    """An impression plus what happened after each click on it."""

    impression: ImpressionLog
    dwell: Mapping[str, int]
    finished: frozenset[str] = frozenset()


GROUP_ORDER = (
    FeedbackType.SHARE,
    FeedbackType.FINISH,
    FeedbackType.CLICK,
    FeedbackType.SKIP,
    FeedbackType.QUICK_CLOSE,
    FeedbackType.DISLIKE,
)


@dataclass(frozen=True)
class UserState:
    """One user's feedback, grouped by type with chronological order kept."""

    user_id: str
    records: tuple[FeedbackRecord, ...]
    groups: Mapping[FeedbackType, tuple[FeedbackRecord, ...]] = field(repr=False)

    @classmethod
    def from_records(cls, user_id: str, records: Iterable[FeedbackRecord]) -> UserState:
        ordered = tuple(sorted(records, key=FeedbackRecord.sort_key))
        groups: dict[FeedbackType, list[FeedbackRecord]] = {t: [] for t in GROUP_ORDER}
        for r in ordered:
            if r.user_id != user_id:
                raise FeedlogError(f"record for {r.user_id} in state of {user_id}")
            groups[r.type].append(r)
        return cls(user_id, ordered, {t: tuple(v) for t, v in groups.items()})

    def count(self, kind: FeedbackType) -> int:
        return len(self.groups[kind])

    @property
    def counts(self) -> dict[str, int]:
        return {t.value: len(self.groups[t]) for t in GROUP_ORDER}


def quantize_time(t: float) -> int:
    """Bucket a duration in seconds as ``min(floor(log2(t + 1)), BUCKET_CAP)``."""
    if isinstance(t, bool) or not isinstance(t, (int, float, np.integer, np.floating)):
        raise FeedlogError(f"duration must be a number, got {t!r}")
    if not math.isfinite(t) or t < 0:
        raise FeedlogError(f"duration must be finite and nonnegative, got {t!r}")
    if isinstance(t, (int, np.integer)):
        bucket = (int(t) + 1).bit_length() - 1
    else:
        # frexp is exact: x = m * 2**e with m in [0.5, 1)
        bucket = math.frexp(float(t) + 1.0)[1] - 1
    return min(bucket, BUCKET_CAP)


def quantize_times(t: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quantize_time`."""
    t = np.asarray(t, dtype=np.float64)
    if t.size and (not np.all(np.isfinite(t)) or np.any(t < 0)):
        raise FeedlogError("durations must be finite and nonnegative")
    _, exp = np.frexp(t + 1.0)
    return np.minimum(exp - 1, BUCKET_CAP).astype(np.int64)


def sort_records(records: Iterable[FeedbackRecord]) -> list[FeedbackRecord]:
    return sorted(records, key=lambda r: (r.event_time, r.user_id, r.news_id, TYPE_SORT_ORDER[r.type]))


def derive_feedbacks(
    raw_clicks: Sequence[RawImpression],
    raw_explicit: Iterable[FeedbackRecord],
    T: float,
) -> list[FeedbackRecord]:
    """Expand impressions into the six-type feedback stream.

    Every clicked item yields a click record, a finish record when the reader
    finished it, and a quick-close record when its dwell time is strictly below
    ``T``. Every shown-but-unclicked item yields a skip. Share and dislike
    records pass through unchanged.
    """
    if not T > 0:
        raise FeedlogError(f"quick-close threshold must be positive, got {T}")
    out: list[FeedbackRecord] = []
    for raw in raw_clicks:
        imp = raw.impression
        for news_id in imp.clicked:
            if news_id not in raw.dwell or raw.dwell[news_id] is None:
                raise FeedlogError(f"click on {news_id} in impression {imp.impression_id} has no dwell_time")
            dwell = int(raw.dwell[news_id])
            out.append(FeedbackRecord(imp.user_id, news_id, FeedbackType.CLICK, imp.timestamp, dwell))
            if news_id in raw.finished:
                out.append(FeedbackRecord(imp.user_id, news_id, FeedbackType.FINISH, imp.timestamp, dwell))
            if dwell < T:
                out.append(FeedbackRecord(imp.user_id, news_id, FeedbackType.QUICK_CLOSE, imp.timestamp, dwell))
        for news_id in imp.skipped:
            out.append(FeedbackRecord(imp.user_id, news_id, FeedbackType.SKIP, imp.timestamp))
    for r in raw_explicit:
        if r.type not in (FeedbackType.SHARE, FeedbackType.DISLIKE):
            raise FeedlogError(f"explicit feedback must be share or dislike, got {r.type.value}")
        out.append(r)
    return sort_records(out)


def subsample_skips(records: Sequence[FeedbackRecord], rate: float, seed: int) -> list[FeedbackRecord]:
    """Keep each skip independently with probability ``rate``; keep everything else."""
    if not 0 < rate <= 1:
        raise FeedlogError(f"skip subsample rate must be in (0, 1], got {rate}")
    if rate == 1:
        return list(records)
    rng = random.Random(seed)
    return [r for r in records if r.type is not FeedbackType.SKIP or rng.random() < rate]


# ---------------------------------------------------------------------------
# raw <-> logged conversion


def split_logged(records: Iterable[FeedbackRecord]) -> tuple[dict, list[FeedbackRecord]]:
    """Index logged click/finish records and collect explicit ones."""
    clicks: dict[tuple[str, str, int], int] = {}
    finished: set[tuple[str, str, int]] = set()
    explicit: list[FeedbackRecord] = []
    for r in records:
        key = (r.user_id, r.news_id, r.event_time)
        if r.type is FeedbackType.CLICK:
            clicks[key] = r.dwell_time
        elif r.type is FeedbackType.FINISH:
            finished.add(key)
        elif r.type in (FeedbackType.SHARE, FeedbackType.DISLIKE):
            explicit.append(r)
    return {"dwell": clicks, "finished": finished}, explicit


def raw_from_logs(
    impressions: Sequence[ImpressionLog], records: Iterable[FeedbackRecord]
) -> tuple[list[RawImpression], list[FeedbackRecord]]:
    """Rejoin impressions with their logged click outcomes."""
    index, explicit = split_logged(records)
    raws = []
    for imp in impressions:
        dwell = {}
        fin = set()
        for n in imp.clicked:
            key = (imp.user_id, n, imp.timestamp)
            if key not in index["dwell"]:
                raise FeedlogError(f"click on {n} in impression {imp.impression_id} has no dwell_time")
            dwell[n] = index["dwell"][key]
            if key in index["finished"]:
                fin.add(n)
        raws.append(RawImpression(imp, dwell, frozenset(fin)))
    return raws, explicit


def logged_records(raws: Iterable[RawImpression], explicit: Iterable[FeedbackRecord]) -> list[FeedbackRecord]:
    """Inverse of :func:`raw_from_logs`: the records that go in ``feedback.jsonl``."""
    out = []
    for raw in raws:
        imp = raw.impression
        for n in imp.clicked:
            out.append(FeedbackRecord(imp.user_id, n, FeedbackType.CLICK, imp.timestamp, int(raw.dwell[n])))
            if n in raw.finished:
                out.append(FeedbackRecord(imp.user_id, n, FeedbackType.FINISH, imp.timestamp, int(raw.dwell[n])))
    out.extend(explicit)
    return sort_records(out)


def group_by_user(records: Iterable[FeedbackRecord]) -> dict[str, list[FeedbackRecord]]:
    by_user: dict[str, list[FeedbackRecord]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    for seq in by_user.values():
        seq.sort(key=FeedbackRecord.sort_key)
    return dict(by_user)


# ---------------------------------------------------------------------------
# JSONL I/O


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(_dumps(row))
            fh.write("\n")


def _read_jsonl(path: Path, build) -> list:
    out = []
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                out.append(build(obj))
            except (ValueError, TypeError, KeyError) as exc:
                raise LogParseError(path, line_no, str(exc) or type(exc).__name__) from exc
    return out


def _exact(obj: dict, keys: tuple[str, ...]) -> dict:
    if set(obj) != set(keys):
        extra = sorted(set(obj) - set(keys))
        missing = sorted(set(keys) - set(obj))
        raise KeyError(f"field mismatch (missing={missing}, unexpected={extra})")
    return obj


def _news(obj: dict) -> NewsArticle:
    _exact(obj, ("news_id", "title_tokens", "category_id"))
    tokens = obj["title_tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, int) and t >= 0 for t in tokens):
        raise ValueError("title_tokens must be a list of nonnegative integers")
    return NewsArticle(str(obj["news_id"]), tuple(tokens), int(obj["category_id"]))


def _impression(obj: dict) -> ImpressionLog:
    _exact(obj, ("impression_id", "user_id", "shown_news", "clicked", "timestamp"))
    return ImpressionLog(
        str(obj["impression_id"]),
        str(obj["user_id"]),
        tuple(str(n) for n in obj["shown_news"]),
        tuple(str(n) for n in obj["clicked"]),
        int(obj["timestamp"]),
    )


def _record(obj: dict) -> FeedbackRecord:
    _exact(obj, ("user_id", "news_id", "type", "event_time", "dwell_time"))
    dwell = obj["dwell_time"]
    return FeedbackRecord(
        str(obj["user_id"]),
        str(obj["news_id"]),
        FeedbackType(obj["type"]),
        int(obj["event_time"]),
        None if dwell is None else int(dwell),
    )


def write_logs(
    out_dir: Path | str,
    impressions: Iterable[ImpressionLog],
    records: Iterable[FeedbackRecord],
    catalog: Iterable[NewsArticle],
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out / NEWS_FILE, (a.to_dict() for a in catalog))
    _write_jsonl(out / IMPRESSIONS_FILE, (i.to_dict() for i in impressions))
    _write_jsonl(out / FEEDBACK_FILE, (r.to_dict() for r in records))


def read_logs(path: Path | str) -> tuple[list[ImpressionLog], list[FeedbackRecord], list[NewsArticle]]:
    """Read a corpus directory. Missing files read as empty."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    catalog = _read_jsonl(root / NEWS_FILE, _news)
    impressions = _read_jsonl(root / IMPRESSIONS_FILE, _impression)
    records = _read_jsonl(root / FEEDBACK_FILE, _record)
    return impressions, records, catalog


@dataclass
class Corpus:
    """News catalog, impressions and logged records held together."""

    catalog: list[NewsArticle]
    impressions: list[ImpressionLog]
    records: list[FeedbackRecord]

    @classmethod
    def read(cls, path: Path | str) -> Corpus:
        impressions, records, catalog = read_logs(path)
        return cls(catalog, impressions, records)

    def write(self, path: Path | str) -> None:
        write_logs(path, self.impressions, self.records, self.catalog)

    def raw(self) -> tuple[list[RawImpression], list[FeedbackRecord]]:
        return raw_from_logs(self.impressions, self.records)

    def derive(self, T: float) -> list[FeedbackRecord]:
        raws, explicit = self.raw()
        return derive_feedbacks(raws, explicit, T)
