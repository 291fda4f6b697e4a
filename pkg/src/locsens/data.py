"""Dataset plumbing: photo records, the vocabulary/filter/split pipeline,
versioned on-disk formats, and a seeded synthetic generator that plants
verifiable tag-location structure.

On-disk layout of a dataset directory:
  dataset.json      manifest with format version and counts
  records.tsv       id <TAB> lat <TAB> lon <TAB> country <TAB> town <TAB> tag1,tag2,...
  features.bin      magic "LSFV", version, count, dim, then count*dim little-endian f32
  vocab.txt         one tag label per line, in vocabulary order
  splits.tsv        id <TAB> train|val|test
  word_vectors.txt  optional; header "H D", then "label v1 ... vD" per tag
  planted.json      optional; the generator's planted-truth manifest
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geo import EARTH_RADIUS_KM, GeoCoord, haversine_km, haversine_km_many

DATASET_FORMAT = "locsens-dataset"
DATASET_VERSION = 1
FEATURES_MAGIC = b"LSFV"
FEATURES_VERSION = 1
MAX_TAGS_PER_PHOTO = 15


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Records and vocabulary
# ---------------------------------------------------------------------------


@dataclass
class RawRecord:
    """A photo as ingested: free-text tags, optional location and labels."""

    id: int
    feature: np.ndarray
    tags: tuple
    lat: float | None
    lon: float | None
    country: str | None = None
    town: str | None = None


@dataclass(eq=False)
class PhotoRecord:
    """A photo after vocabulary filtering: tag ids, mandatory location."""

    id: int
    feature: np.ndarray
    tags: frozenset
    location: GeoCoord
    country: str | None = None
    town: str | None = None


@dataclass(frozen=True)
class VocabSpec:
    drop_top_n: int = 10
    keep_next_k: int = 100_000
    numeric_exclusion: bool = True

    def __post_init__(self):
        if self.drop_top_n < 0:
            raise ValueError("drop_top_n must be >= 0")
        if self.keep_next_k < 1:
            raise ValueError("keep_next_k must be >= 1")


class TagVocabulary:
    """Ordered tag labels with an index <-> label bijection."""

    def __init__(self, labels):
        labels = tuple(labels)
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate labels in vocabulary")
        if len(labels) < 2:
            raise ValueError("vocabulary needs at least 2 tags")
        self.labels = labels
        self._index = {label: i for i, label in enumerate(labels)}

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label):
        return label in self._index

    def __eq__(self, other):
        return isinstance(other, TagVocabulary) and self.labels == other.labels

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"tag {label!r} not in vocabulary") from None

    def label_of(self, tag_id: int) -> str:
        return self.labels[tag_id]


def _is_numeric_label(label: str) -> bool:
    # "Numerical hashtag" = label consisting solely of digit characters.
    return label != "" and all(c.isdigit() for c in label)


def build_vocabulary(records, spec: VocabSpec) -> TagVocabulary:
    """Rank tags by corpus frequency, drop the most frequent ``drop_top_n``,
    keep the next ``keep_next_k``. Digit-only labels are excluded first; ties
    break by ascending label."""
    counts = Counter()
    for rec in records:
        for label in set(rec.tags):
            if spec.numeric_exclusion and _is_numeric_label(label):
                continue
            counts[label] += 1
    if not counts:
        raise ValueError("no tags left after exclusion; cannot build vocabulary")
    ranked = sorted(counts, key=lambda label: (-counts[label], label))
    kept = ranked[spec.drop_top_n : spec.drop_top_n + spec.keep_next_k]
    if not kept:
        raise ValueError(
            f"empty vocabulary: {len(ranked)} distinct tags, dropped {spec.drop_top_n}"
        )
    return TagVocabulary(kept)


def filter_records(records, vocab: TagVocabulary) -> list:
    """Keep records that have a location, at most 15 raw tags, and at least
    one vocabulary tag; restrict kept records' tags to vocabulary ids.

    The 15-tag cap counts raw (deduplicated) tags, before the vocabulary
    restriction.
    """
    out = []
    for rec in records:
        if rec.lat is None or rec.lon is None:
            continue
        raw_tags = set(rec.tags)
        if len(raw_tags) > MAX_TAGS_PER_PHOTO:
            continue
        ids = frozenset(vocab.id_of(t) for t in raw_tags if t in vocab)
        if not ids:
            continue
        out.append(
            PhotoRecord(
                id=rec.id,
                feature=rec.feature,
                tags=ids,
                location=GeoCoord(rec.lat, rec.lon),
                country=rec.country,
                town=rec.town,
            )
        )
    return out


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        parts = [set(self.train), set(self.val), set(self.test)]
        total = len(self.train) + len(self.val) + len(self.test)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise ValueError("split parts must be disjoint")


def split_records(records, val_size: int, test_size: int, seed: int) -> DatasetSplit:
    """Uniform random disjoint partition into train/val/test, deterministic
    by seed and independent of the input record order."""
    ids = sorted(rec.id for rec in records)
    if val_size + test_size > len(ids):
        raise ValueError(
            f"val_size + test_size = {val_size + test_size} exceeds {len(ids)} records"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    val = tuple(sorted(shuffled[:val_size]))
    test = tuple(sorted(shuffled[val_size : val_size + test_size]))
    train = tuple(sorted(shuffled[val_size + test_size :]))
    return DatasetSplit(train=train, val=val, test=test)


# ---------------------------------------------------------------------------
# Word vectors
# ---------------------------------------------------------------------------


class WordVectorTable:
    """One vector per vocabulary tag, aligned to vocabulary order."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("word vectors must be a [H, D] matrix")
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return self.vectors.shape[0]

    @classmethod
    def from_mapping(cls, mapping, vocab: TagVocabulary) -> "WordVectorTable":
        missing = [label for label in vocab.labels if label not in mapping]
        if missing:
            raise ValueError(f"word vectors missing for {len(missing)} tags, e.g. {missing[:3]}")
        return cls(np.stack([mapping[label] for label in vocab.labels]))


def save_word_vectors(path, table: WordVectorTable, vocab: TagVocabulary) -> None:
    if len(table) != len(vocab):
        raise ValueError("table and vocabulary sizes differ")
    lines = [f"{len(vocab)} {table.dim}"]
    for label, vec in zip(vocab.labels, table.vectors):
        lines.append(label + " " + " ".join(repr(float(x)) for x in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_word_vectors(path, vocab: TagVocabulary) -> WordVectorTable:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise DatasetFormatError(f"{path}: empty word-vector file")
    try:
        h, d = (int(x) for x in text[0].split())
    except ValueError:
        raise DatasetFormatError(f"{path}: bad header {text[0]!r}, expected 'H D'") from None
    if h != len(text) - 1:
        raise DatasetFormatError(f"{path}: header says {h} tags, file has {len(text) - 1}")
    mapping = {}
    for lineno, line in enumerate(text[1:], start=2):
        parts = line.split(" ")
        if len(parts) != d + 1:
            raise DatasetFormatError(f"{path}:{lineno}: expected label + {d} floats")
        mapping[parts[0]] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
    return WordVectorTable.from_mapping(mapping, vocab)


# ---------------------------------------------------------------------------
# Dataset bundle and on-disk round trip
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Dataset:
    records: list
    vocab: TagVocabulary
    split: DatasetSplit
    word_vectors: WordVectorTable | None = None
    planted: dict | None = None
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {rec.id: rec for rec in self.records}

    def by_id(self, rec_id: int) -> PhotoRecord:
        return self._by_id[rec_id]

    def subset(self, ids) -> list:
        return [self._by_id[i] for i in ids]

    @property
    def train_records(self):
        return self.subset(self.split.train)

    @property
    def val_records(self):
        return self.subset(self.split.val)

    @property
    def test_records(self):
        return self.subset(self.split.test)

    @property
    def feature_dim(self) -> int:
        return int(self.records[0].feature.shape[0])


def _check_label(label):
    if any(c in label for c in "\t\n,"):
        raise ValueError(f"label {label!r} contains a reserved character")
    return label


def save_dataset(dataset: Dataset, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    records = sorted(dataset.records, key=lambda r: r.id)

    meta_lines = []
    for rec in records:
        tags = ",".join(_check_label(dataset.vocab.label_of(t)) for t in sorted(rec.tags))
        meta_lines.append(
            f"{rec.id}\t{rec.location.lat_deg!r}\t{rec.location.lon_deg!r}"
            f"\t{rec.country or ''}\t{rec.town or ''}\t{tags}"
        )
    (out / "records.tsv").write_text("\n".join(meta_lines) + "\n", encoding="utf-8")

    dim = dataset.feature_dim
    feat = np.stack([rec.feature for rec in records]).astype("<f4")
    header = FEATURES_MAGIC + struct.pack("<III", FEATURES_VERSION, len(records), dim)
    (out / "features.bin").write_bytes(header + feat.tobytes())

    (out / "vocab.txt").write_text(
        "\n".join(_check_label(l) for l in dataset.vocab.labels) + "\n", encoding="utf-8"
    )

    split_lines = []
    part_of = {}
    for part_name, ids in (("train", dataset.split.train), ("val", dataset.split.val), ("test", dataset.split.test)):
        for i in ids:
            part_of[i] = part_name
    for rec in records:
        split_lines.append(f"{rec.id}\t{part_of[rec.id]}")
    (out / "splits.tsv").write_text("\n".join(split_lines) + "\n", encoding="utf-8")

    if dataset.word_vectors is not None:
        save_word_vectors(out / "word_vectors.txt", dataset.word_vectors, dataset.vocab)
    if dataset.planted is not None:
        (out / "planted.json").write_text(
            json.dumps(dataset.planted, indent=1, sort_keys=True), encoding="utf-8"
        )

    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "records": len(records),
        "feature_dim": dim,
        "vocab_size": len(dataset.vocab),
        "has_word_vectors": dataset.word_vectors is not None,
        "has_planted": dataset.planted is not None,
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def _load_features(path, expect_count, expect_dim):
    data = Path(path).read_bytes()
    head = 4 + 12
    if len(data) < head:
        raise DatasetFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != FEATURES_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r} at offset 0")
    version, count, dim = struct.unpack("<III", data[4:head])
    if version != FEATURES_VERSION:
        raise DatasetFormatError(f"{path}: unsupported feature-file version {version}")
    if count != expect_count or dim != expect_dim:
        raise DatasetFormatError(
            f"{path}: header says {count}x{dim}, manifest says {expect_count}x{expect_dim}"
        )
    expected = head + 4 * count * dim
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data[head:], dtype="<f4").reshape(count, dim).astype(np.float32)


def load_dataset(path) -> Dataset:
    root = Path(path)
    manifest_path = root / "dataset.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"{root}: missing dataset.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{root}: not a {DATASET_FORMAT} directory")
    if manifest.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"{root}: unsupported dataset version {manifest.get('version')}")

    vocab = TagVocabulary((root / "vocab.txt").read_text(encoding="utf-8").splitlines())
    if len(vocab) != manifest["vocab_size"]:
        raise DatasetFormatError(f"{root}: vocab has {len(vocab)} tags, manifest says {manifest['vocab_size']}")

    meta_lines = (root / "records.tsv").read_text(encoding="utf-8").splitlines()
    if len(meta_lines) != manifest["records"]:
        raise DatasetFormatError(
            f"{root}: records.tsv has {len(meta_lines)} lines, manifest says {manifest['records']}"
        )
    features = _load_features(root / "features.bin", manifest["records"], manifest["feature_dim"])

    records = []
    for lineno, (line, feat) in enumerate(zip(meta_lines, features), start=1):
        parts = line.split("\t")
        if len(parts) != 6:
            raise DatasetFormatError(f"{root}/records.tsv:{lineno}: expected 6 fields, got {len(parts)}")
        rec_id, lat, lon, country, town, tags = parts
        records.append(
            PhotoRecord(
                id=int(rec_id),
                feature=feat,
                tags=frozenset(vocab.id_of(t) for t in tags.split(",")),
                location=GeoCoord(float(lat), float(lon)),
                country=country or None,
                town=town or None,
            )
        )

    parts = {"train": [], "val": [], "test": []}
    for lineno, line in enumerate((root / "splits.tsv").read_text(encoding="utf-8").splitlines(), start=1):
        rec_id, part = line.split("\t")
        if part not in parts:
            raise DatasetFormatError(f"{root}/splits.tsv:{lineno}: unknown split part {part!r}")
        parts[part].append(int(rec_id))
    split = DatasetSplit(
        train=tuple(sorted(parts["train"])),
        val=tuple(sorted(parts["val"])),
        test=tuple(sorted(parts["test"])),
    )

    word_vectors = None
    if manifest["has_word_vectors"]:
        word_vectors = load_word_vectors(root / "word_vectors.txt", vocab)
    planted = None
    if manifest["has_planted"]:
        planted = json.loads((root / "planted.json").read_text(encoding="utf-8"))

    return Dataset(records=records, vocab=vocab, split=split, word_vectors=word_vectors, planted=planted)


# ---------------------------------------------------------------------------
# Synthetic generator with planted tag-location structure
# ---------------------------------------------------------------------------

TAG_PLACE = "place_name"
TAG_CONDITIONED = "location_conditioned"
TAG_INVARIANT = "location_invariant"

# Keep planted geography well separated so granularity levels are meaningful:
# clusters of the same conditioned tag must not blur into each other.
_MIN_PLACE_SEPARATION_KM = 300.0
_MIN_LOCALE_SEPARATION_KM = 1500.0


@dataclass(frozen=True)
class SyntheticConfig:
    """Planted structure: a pool of far-apart locale centers, each with a
    shared visual style vector. Location-conditioned tags live in several
    locales with sub-prototypes mixing the tag's base appearance with the
    locale style ("temple" looks different per region but shares the region's
    style with everything else photographed there); place-name tags anchor
    one tight cluster styled by its surrounding locale; location-invariant
    tags look the same everywhere and scatter uniformly."""

    n_images: int = 1000
    n_tags: int = 50
    d_feat: int = 128
    frac_place: float = 0.2
    frac_conditioned: float = 0.3
    frac_invariant: float = 0.5
    regions_per_tag: int = 3
    n_locales: int = 12
    style_weight: float = 1.0
    place_spread_km: float = 8.0
    region_spread_km: float = 8.0
    feature_noise: float = 0.1
    mean_tags: float = 4.25
    word_dim: int = 300
    min_images_per_tag: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.n_tags < 2:
            raise ValueError("need at least 1 image and 2 tags")
        total = self.frac_place + self.frac_conditioned + self.frac_invariant
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"tag-type fractions sum to {total}, expected 1")
        if not 1.0 <= self.mean_tags <= MAX_TAGS_PER_PHOTO:
            raise ValueError(f"mean_tags must be in [1, {MAX_TAGS_PER_PHOTO}]")
        if self.regions_per_tag < 2:
            raise ValueError("location-conditioned tags need at least 2 regions")
        if self.n_locales < self.regions_per_tag:
            raise ValueError("need at least regions_per_tag locales")
        if self.style_weight < 0:
            raise ValueError("style_weight must be >= 0")
        if self.n_tags + self.n_locales > self.d_feat:
            raise ValueError(
                "d_feat must be at least n_tags + n_locales so prototypes and "
                "styles can be mutually orthogonal"
            )
        counts = self._type_counts()
        if min(counts) < 0 or sum(counts) != self.n_tags:
            raise ValueError("tag-type mix is infeasible for this tag count")

    def _type_counts(self):
        n_place = round(self.frac_place * self.n_tags)
        n_cond = round(self.frac_conditioned * self.n_tags)
        return n_place, n_cond, self.n_tags - n_place - n_cond


def _sphere_uniform(rng) -> GeoCoord:
    lat = math.degrees(math.asin(min(1.0, max(-1.0, 2.0 * rng.uniform() - 1.0))))
    lon = rng.uniform(-180.0, 180.0)
    return GeoCoord(lat, lon)


def _offset_km(origin: GeoCoord, bearing_rad: float, distance_km: float) -> GeoCoord:
    """Destination point along a great circle; pole-safe."""
    delta = distance_km / EARTH_RADIUS_KM
    lat1 = math.radians(origin.lat_deg)
    lon1 = math.radians(origin.lon_deg)
    sin_lat2 = math.sin(lat1) * math.cos(delta) + math.cos(lat1) * math.sin(delta) * math.cos(bearing_rad)
    lat2 = math.asin(min(1.0, max(-1.0, sin_lat2)))
    lon2 = lon1 + math.atan2(
        math.sin(bearing_rad) * math.sin(delta) * math.cos(lat1),
        math.cos(delta) - math.sin(lat1) * sin_lat2,
    )
    lon_deg = (math.degrees(lon2) + 180.0) % 360.0 - 180.0
    if lon_deg >= 180.0:
        lon_deg = -180.0
    return GeoCoord(math.degrees(lat2), lon_deg)


def _scatter(rng, center: GeoCoord, spread_km: float) -> GeoCoord:
    # Rayleigh radius + uniform bearing == isotropic 2D Gaussian displacement.
    return _offset_km(center, rng.uniform(0.0, 2.0 * math.pi), rng.rayleigh(spread_km))


def _separated_point(rng, taken, min_km):
    for _ in range(1000):
        p = _sphere_uniform(rng)
        if all(haversine_km(p, q) >= min_km for q in taken):
            return p
    raise ValueError("could not place a sufficiently separated cluster center")


def _unit(vec):
    return vec / np.linalg.norm(vec)


def generate_synthetic(config: SyntheticConfig):
    """Returns (raw records, word-vector mapping, planted-truth manifest).

    Place-name tags anchor a single geographic cluster; location-conditioned
    tags get several far-apart regions with region-specific visual
    prototypes; location-invariant tags scatter uniformly over the globe.
    An image's feature is the mean of its tags' (region-resolved) prototypes
    plus isotropic Gaussian noise with expected norm ``feature_noise``; its
    location comes from its most location-specific tag.
    Tags seen fewer than ``min_images_per_tag`` times get dedicated
    top-up images appended, so every tag has enough exemplars for retrieval
    evaluation. Fully deterministic per seed.
    """
    rng = np.random.default_rng(config.seed)
    n_place, n_cond, n_inv = config._type_counts()

    labels = (
        [f"place{i:03d}" for i in range(n_place)]
        + [f"regional{i:03d}" for i in range(n_cond)]
        + [f"common{i:03d}" for i in range(n_inv)]
    )
    kinds = [TAG_PLACE] * n_place + [TAG_CONDITIONED] * n_cond + [TAG_INVARIANT] * n_inv

    # Shared geography: locale centers partition the globe into style zones.
    locale_centers: list[GeoCoord] = []
    for _ in range(config.n_locales):
        locale_centers.append(_separated_point(rng, locale_centers, _MIN_LOCALE_SEPARATION_KM))

    # Mutually orthonormal directions: one base per tag, one style per locale.
    # Orthogonality removes prototype crosstalk, so tag presence is decodable
    # from a feature up to dilution and noise.
    basis, _ = np.linalg.qr(rng.normal(size=(config.d_feat, config.n_tags + config.n_locales)))
    tag_bases = basis[:, : config.n_tags].T
    locale_styles = basis[:, config.n_tags :].T

    locale_lats = np.array([c.lat_deg for c in locale_centers])
    locale_lons = np.array([c.lon_deg for c in locale_centers])

    def nearest_locale(loc: GeoCoord) -> int:
        return int(np.argmin(haversine_km_many(loc, locale_lats, locale_lons)))

    def styled(base: np.ndarray, locale: int) -> np.ndarray:
        return _unit(base + config.style_weight * locale_styles[locale])

    place_centers: list[GeoCoord] = []
    tag_geo = []  # per tag: None | GeoCoord | list of locale indices
    prototypes = []  # per tag: [d] | [K, d]
    for t in range(config.n_tags):
        base = tag_bases[t]
        if kinds[t] == TAG_PLACE:
            center = _separated_point(rng, place_centers, _MIN_PLACE_SEPARATION_KM)
            place_centers.append(center)
            tag_geo.append(center)
            prototypes.append(styled(base, nearest_locale(center)))
        elif kinds[t] == TAG_CONDITIONED:
            regions = sorted(int(i) for i in rng.choice(config.n_locales, size=config.regions_per_tag, replace=False))
            tag_geo.append(regions)
            prototypes.append(np.stack([styled(base, reg) for reg in regions]))
        else:
            tag_geo.append(None)
            prototypes.append(base)

    def nearest_region(tag: int, loc: GeoCoord) -> int:
        regions = tag_geo[tag]
        dists = [haversine_km(loc, locale_centers[reg]) for reg in regions]
        return int(np.argmin(dists))

    def make_image(rec_id: int, forced_tags=None) -> RawRecord:
        if forced_tags is None:
            n_t = 1 + min(int(rng.poisson(config.mean_tags - 1.0)), MAX_TAGS_PER_PHOTO - 1)
            tags = sorted(int(t) for t in rng.choice(config.n_tags, size=n_t, replace=False))
        else:
            tags = sorted(forced_tags)

        place_tags = [t for t in tags if kinds[t] == TAG_PLACE]
        cond_tags = [t for t in tags if kinds[t] == TAG_CONDITIONED]
        if place_tags:
            anchor = int(rng.choice(place_tags))
            loc = _scatter(rng, tag_geo[anchor], config.place_spread_km)
        elif cond_tags:
            anchor = int(rng.choice(cond_tags))
            region = tag_geo[anchor][int(rng.integers(config.regions_per_tag))]
            loc = _scatter(rng, locale_centers[region], config.region_spread_km)
        else:
            loc = _sphere_uniform(rng)

        contribs = []
        for t in tags:
            if kinds[t] == TAG_CONDITIONED:
                contribs.append(prototypes[t][nearest_region(t, loc)])
            else:
                contribs.append(prototypes[t])
        # Noise is norm-calibrated: feature_noise is the expected norm of the
        # added isotropic Gaussian, independent of d_feat.
        noise = rng.normal(size=config.d_feat) / math.sqrt(config.d_feat)
        feature = np.mean(contribs, axis=0) + config.feature_noise * noise

        if place_centers:
            j = int(np.argmin(haversine_km_many(loc, np.array([c.lat_deg for c in place_centers]), np.array([c.lon_deg for c in place_centers]))))
            country, town = f"country{j // 3:02d}", f"town{j:02d}"
        else:
            country = town = None
        return RawRecord(
            id=rec_id,
            feature=feature.astype(np.float32),
            tags=tuple(labels[t] for t in tags),
            lat=loc.lat_deg,
            lon=loc.lon_deg,
            country=country,
            town=town,
        )

    records = [make_image(i) for i in range(config.n_images)]

    counts = Counter()
    for rec in records:
        counts.update(rec.tags)
    next_id = config.n_images
    for t in range(config.n_tags):
        deficit = config.min_images_per_tag - counts[labels[t]]
        for _ in range(max(0, deficit)):
            records.append(make_image(next_id, forced_tags=[t]))
            next_id += 1

    word_vectors = {label: _unit(rng.normal(size=config.word_dim)) for label in labels}

    manifest = {
        "config": {
            "n_images": config.n_images,
            "n_tags": config.n_tags,
            "d_feat": config.d_feat,
            "mean_tags": config.mean_tags,
            "feature_noise": config.feature_noise,
            "style_weight": config.style_weight,
            "seed": config.seed,
        },
        "generated_images": len(records),
        "locales": [[c.lat_deg, c.lon_deg] for c in locale_centers],
        "tags": {
            labels[t]: {
                "kind": kinds[t],
                "center": [tag_geo[t].lat_deg, tag_geo[t].lon_deg] if kinds[t] == TAG_PLACE else None,
                "spread_km": config.place_spread_km
                if kinds[t] == TAG_PLACE
                else (config.region_spread_km if kinds[t] == TAG_CONDITIONED else None),
                "regions": [
                    [locale_centers[reg].lat_deg, locale_centers[reg].lon_deg] for reg in tag_geo[t]
                ]
                if kinds[t] == TAG_CONDITIONED
                else None,
            }
            for t in range(config.n_tags)
        },
    }
    return records, word_vectors, manifest


def build_synthetic_dataset(config: SyntheticConfig, val_size: int, test_size: int) -> Dataset:
    """Run the full pipeline on generator output: vocabulary over all planted
    tags (nothing dropped), filtering, splitting, word-vector table."""
    raw, word_vectors, manifest = generate_synthetic(config)
    vocab = build_vocabulary(raw, VocabSpec(drop_top_n=0, keep_next_k=config.n_tags))
    records = filter_records(raw, vocab)
    split = split_records(records, val_size, test_size, seed=config.seed)
    table = WordVectorTable.from_mapping(word_vectors, vocab)
    return Dataset(records=records, vocab=vocab, split=split, word_vectors=table, planted=manifest)
