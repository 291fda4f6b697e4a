"""Evaluation protocols: precision@k over retrieval rankings, the
location-sensitive variant at five distance granularities, the
proximity-oracle upper bound, tagging accuracy@k, prediction-diversity
percentages, visual-agnostic frequency baselines, and query-set
construction.

All metric functions are pure over precomputed rankings and aggregate with
integer counts; percentages are in [0, 100]. A ``level`` of ``None`` means
location-agnostic (an infinite distance threshold).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geo import GeoCoord, GranularityLevel, haversine_km_many, within_threshold


@dataclass(frozen=True)
class Query:
    tag_id: int
    coord: GeoCoord | None = None


# ---------------------------------------------------------------------------
# Retrieval metrics
# ---------------------------------------------------------------------------


def precision_at_k(rankings, relevant_sets, k: int) -> float:
    """Mean over queries of |top-k intersect relevant| / k, as a percentage.
    Rankings shorter than k count their missing tail as irrelevant."""
    if not rankings:
        raise ValueError("empty query set")
    if len(rankings) != len(relevant_sets):
        raise ValueError("rankings and relevant sets differ in length")
    hits = 0
    for ranking, relevant in zip(rankings, relevant_sets):
        hits += sum(1 for rid in ranking[:k] if rid in relevant)
    return 100.0 * hits / (k * len(rankings))


def _is_relevant(record, query: Query, level) -> bool:
    if query.tag_id not in record.tags:
        return False
    if level is None:
        return True
    return within_threshold(record.location, query.coord, level)


def ls_precision_at_10(rankings, queries, records_by_id, level, k: int = 10) -> float:
    """Location-sensitive precision: a retrieved image is relevant iff the
    query tag is in its groundtruth and it lies strictly within the level's
    distance threshold of the query location. ``level=None`` reduces to
    plain precision@k. Groundtruth locations are used only for scoring."""
    if not rankings:
        raise ValueError("empty query set")
    if len(rankings) != len(queries):
        raise ValueError("rankings and queries differ in length")
    hits = 0
    for ranking, query in zip(rankings, queries):
        hits += sum(1 for rid in ranking[:k] if _is_relevant(records_by_id[rid], query, level))
    return 100.0 * hits / (k * len(rankings))


def upper_bound(queries, test_records, level, k: int = 10) -> float:
    """The optimum of ls_precision: rank the images containing the query tag
    by proximity to the query location and score that ranking."""
    if not queries:
        raise ValueError("empty query set")
    postings = {}
    for rec in test_records:
        for t in rec.tags:
            postings.setdefault(t, []).append(rec)
    hits = 0
    for query in queries:
        matching = postings.get(query.tag_id, [])
        if not matching:
            continue
        lats = np.array([r.location.lat_deg for r in matching])
        lons = np.array([r.location.lon_deg for r in matching])
        dists = haversine_km_many(query.coord, lats, lons)
        ids = np.array([r.id for r in matching])
        order = np.lexsort((ids, dists))[:k]
        if level is None:
            hits += len(order)
        else:
            hits += int((dists[order] < level.threshold_km).sum())
    return 100.0 * hits / (k * len(queries))


# ---------------------------------------------------------------------------
# Tagging metrics
# ---------------------------------------------------------------------------


def accuracy_at_k(rankings, groundtruth_sets, k: int) -> float:
    """Percentage of images whose top-k predicted tags intersect the
    groundtruth."""
    if not rankings:
        raise ValueError("empty test set")
    if len(rankings) != len(groundtruth_sets):
        raise ValueError("rankings and groundtruth differ in length")
    if k < 1:
        raise ValueError("k must be >= 1")
    hit = sum(
        1
        for ranking, gt in zip(rankings, groundtruth_sets)
        if any(t in gt for t in ranking[:k])
    )
    return 100.0 * hit / len(rankings)


def diversity(rankings, groundtruth_sets, universe, k: int = 10):
    """(pct_pred, pct_cpred): the share of the test-tag universe predicted at
    least once, and predicted correctly at least once, over top-k lists."""
    if not universe:
        raise ValueError("empty test tag universe")
    universe = set(universe)
    predicted = set()
    correct = set()
    for ranking, gt in zip(rankings, groundtruth_sets):
        top = [t for t in ranking[:k] if t in universe]
        predicted.update(top)
        correct.update(t for t in top if t in gt)
    return 100.0 * len(predicted) / len(universe), 100.0 * len(correct) / len(universe)


# ---------------------------------------------------------------------------
# Frequency baselines
# ---------------------------------------------------------------------------


def _ranked(counter: Counter):
    return [t for t, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))]


@dataclass
class FrequencyTables:
    global_ranking: list
    by_country: dict
    by_town: dict

    @classmethod
    def from_records(cls, train_records) -> "FrequencyTables":
        global_counts = Counter()
        country_counts = {}
        town_counts = {}
        for rec in train_records:
            global_counts.update(rec.tags)
            if rec.country is not None:
                country_counts.setdefault(rec.country, Counter()).update(rec.tags)
            if rec.town is not None:
                town_counts.setdefault(rec.town, Counter()).update(rec.tags)
        return cls(
            global_ranking=_ranked(global_counts),
            by_country={c: _ranked(cnt) for c, cnt in country_counts.items()},
            by_town={t: _ranked(cnt) for t, cnt in town_counts.items()},
        )

    def without_tags(self, stop_ids) -> "FrequencyTables":
        stop = set(stop_ids)
        return FrequencyTables(
            global_ranking=[t for t in self.global_ranking if t not in stop],
            by_country={c: [t for t in r if t not in stop] for c, r in self.by_country.items()},
            by_town={t: [x for x in r if x not in stop] for t, r in self.by_town.items()},
        )


def frequency_tagger(tables: FrequencyTables, scope: str, record, k: int):
    """Most frequent training tags for the record's location scope. An
    unseen or missing town falls back to the country ranking, then global."""
    if scope == "global":
        return tables.global_ranking[:k]
    if scope == "town":
        if record.town is not None and record.town in tables.by_town:
            return tables.by_town[record.town][:k]
        scope = "country"
    if scope == "country":
        if record.country is not None and record.country in tables.by_country:
            return tables.by_country[record.country][:k]
        return tables.global_ranking[:k]
    raise ValueError(f"unknown frequency scope {scope!r}")


# ---------------------------------------------------------------------------
# Query sets
# ---------------------------------------------------------------------------


def build_query_set(test_records, n: int, mode: str, min_count: int = 10, seed: int = 0):
    """agnostic: one query per tag appearing at least ``min_count`` times in
    the test set (no locations). location_sensitive: sample ``n`` records
    without replacement and pair each record's location with one uniformly
    random groundtruth tag."""
    if mode == "agnostic":
        counts = Counter()
        for rec in test_records:
            counts.update(rec.tags)
        tags = sorted(t for t, c in counts.items() if c >= min_count)
        if not tags:
            raise ValueError(f"no tags appear at least {min_count} times in the test set")
        return [Query(tag_id=t) for t in tags]

    if mode == "location_sensitive":
        if n > len(test_records):
            raise ValueError(f"cannot sample {n} of {len(test_records)} records without replacement")
        rng = np.random.default_rng(seed)
        order = sorted(test_records, key=lambda r: r.id)
        chosen = rng.choice(len(order), size=n, replace=False)
        queries = []
        for i in chosen:
            rec = order[int(i)]
            tags = sorted(rec.tags)
            queries.append(Query(tag_id=tags[rng.integers(len(tags))], coord=rec.location))
        return queries

    raise ValueError(f"unknown query-set mode {mode!r}")


# ---------------------------------------------------------------------------
# Reports and stop tags
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Named metric values plus provenance; serialized one metric per line as
    name<TAB>value<TAB>model_id<TAB>dataset_id<TAB>seed."""

    metrics: dict
    model_id: str
    dataset_id: str
    seed: int

    def lines(self):
        if not self.metrics:
            raise ValueError("refusing to emit an empty metrics report")
        return [
            f"{name}\t{value!r}\t{self.model_id}\t{self.dataset_id}\t{self.seed}"
            for name, value in self.metrics.items()
        ]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        metrics = {}
        model_id = dataset_id = None
        seed = 0
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            name, value, model_id, dataset_id, seed = parts
            metrics[name] = float(value)
        if not metrics:
            raise ValueError(f"{path}: empty metrics report")
        return cls(metrics=metrics, model_id=model_id, dataset_id=dataset_id, seed=int(seed))


def load_stop_tags(path, vocab) -> set:
    """Stop-tag list file: one label per line; labels missing from the
    vocabulary are ignored."""
    ids = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        label = line.strip()
        if label and label in vocab:
            ids.add(vocab.id_of(label))
    return ids


def strip_tags_from_rankings(rankings, stop_ids):
    stop = set(stop_ids)
    return [[t for t in ranking if t not in stop] for ranking in rankings]
