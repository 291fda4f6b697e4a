"""Glue between models, datasets, and evaluation protocols: checkpoint IO
with a model-kind prefix, ranking sweeps for each model family, the standard
metric suites, and the gradient-check battery."""

from __future__ import annotations

import copy

import numpy as np

from . import baselines, evaluation, ranker
from .baselines import HERModel, MCCModel, MLCModel, baseline_rank, her_loss, mcc_loss, mlc_loss
from .data import Dataset
from .evaluation import (
    FrequencyTables,
    MetricsReport,
    Query,
    accuracy_at_k,
    diversity,
    ls_precision_at_10,
    upper_bound,
)
from .geo import GranularityLevel
from .nn import (
    Dense,
    GroupNorm,
    dense_forward,
    gradcheck,
    group_norm_forward,
    l2norm_forward,
    load_params,
    relu_forward,
    save_params,
)
from .ranker import LocSensModel, TripletEmbeddings, margin_ranking_loss

MODEL_CLASSES = {"mlc": MLCModel, "mcc": MCCModel, "her": HERModel, "locsens": LocSensModel}

# Metric-name suffix per granularity; None is the location-agnostic column.
LEVEL_NAMES = [
    (None, "agnostic"),
    (GranularityLevel.CONTINENT, "continent"),
    (GranularityLevel.COUNTRY, "country"),
    (GranularityLevel.REGION, "region"),
    (GranularityLevel.CITY, "city"),
    (GranularityLevel.STREET, "street"),
]


# ---------------------------------------------------------------------------
# Model checkpoints (kind encoded as a name prefix; alpha as a parameter)
# ---------------------------------------------------------------------------


def save_model(path, model) -> None:
    params = {f"{model.kind}/{name}": arr for name, arr in model.params().items()}
    if isinstance(model, LocSensModel):
        params["locsens/alpha"] = np.array([model.alpha], dtype=np.float64)
    save_params(path, params)


def load_model(path, dtype=None):
    raw = load_params(path)
    kinds = {name.split("/", 1)[0] for name in raw}
    if len(kinds) != 1 or next(iter(kinds)) not in MODEL_CLASSES:
        raise ValueError(f"{path}: cannot infer model kind from parameter names {sorted(kinds)}")
    kind = next(iter(kinds))
    params = {name.split("/", 1)[1]: arr for name, arr in raw.items()}
    if dtype is not None:
        params = {name: arr.astype(dtype) for name, arr in params.items()}
    if kind == "locsens":
        alpha = float(params.pop("alpha")[0])
        return LocSensModel.from_params(params, alpha=alpha)
    return MODEL_CLASSES[kind].from_params(params)


# ---------------------------------------------------------------------------
# Ranking sweeps
# ---------------------------------------------------------------------------


def retrieval_rankings(model, queries, candidates, k: int = 10, embeddings: TripletEmbeddings | None = None):
    """Top-k image ids per query. ``candidates`` is a list of (id, feature)
    pairs; the triplet ranker additionally needs the embedding table."""
    if isinstance(model, LocSensModel):
        if embeddings is None:
            raise ValueError("ranking with a locsens model requires embeddings")
        ids = [c[0] for c in candidates]
        return [
            [rid for rid, _ in ranker.retrieve(model, embeddings, q.tag_id, q.coord, ids, k)]
            for q in queries
        ]
    word_vectors = None
    return [
        [rid for rid, _ in baseline_rank(model, "retrieve_by_tag", q.tag_id, candidates, k, word_vectors)]
        for q in queries
    ]


def model_vocab_size(model) -> int:
    if isinstance(model, HERModel):
        return model.word_vectors.shape[0]
    if isinstance(model, MCCModel):
        return model.classifier.out_dim
    if isinstance(model, MLCModel):
        return model.head.out_dim
    raise ValueError(f"no vocabulary size for {type(model).__name__}")


def tagging_rankings(model, records, k: int = 10, embeddings: TripletEmbeddings | None = None, coords=None):
    """Top-k tag ids per record. ``coords`` optionally fakes each record's
    location (triplet ranker only)."""
    if isinstance(model, LocSensModel):
        if embeddings is None:
            raise ValueError("tagging with a locsens model requires embeddings")
        out = []
        for i, rec in enumerate(records):
            coord = rec.location if coords is None else coords[i]
            ranked = ranker.tag_image(model, embeddings, embeddings.image_vec(rec.id), coord, k)
            out.append([tid for tid, _ in ranked])
        return out
    all_tags = range(model_vocab_size(model))
    return [
        [tid for tid, _ in baseline_rank(model, "tag_image", rec.feature.astype(np.float64), all_tags, k)]
        for rec in records
    ]


def frequency_rankings(tables: FrequencyTables, scope: str, records, k: int = 10):
    return [list(evaluation.frequency_tagger(tables, scope, rec, k)) for rec in records]


# ---------------------------------------------------------------------------
# Metric suites
# ---------------------------------------------------------------------------


def retrieval_metric_suite(rankings, queries, records_by_id) -> dict:
    return {
        f"p10_{name}": ls_precision_at_10(rankings, queries, records_by_id, level)
        for level, name in LEVEL_NAMES
    }


def upper_bound_suite(queries, test_records) -> dict:
    return {
        f"ub_p10_{name}": upper_bound(queries, test_records, level)
        for level, name in LEVEL_NAMES
    }


def tagging_metric_suite(rankings, records, universe, ks=(1, 10, 50)) -> dict:
    gts = [rec.tags for rec in records]
    out = {f"a_at_{k}": accuracy_at_k(rankings, gts, k) for k in ks}
    pct_pred, pct_cpred = diversity(rankings, gts, universe)
    out["pct_pred"] = pct_pred
    out["pct_cpred"] = pct_cpred
    return out


def test_tag_universe(test_records) -> set:
    universe = set()
    for rec in test_records:
        universe.update(rec.tags)
    return universe


def apply_stop_tags(rankings, records, universe, stop_ids):
    """Drop stop tags from rankings, groundtruth, and the tag universe before
    scoring (place-name-omission evaluation)."""
    stripped = evaluation.strip_tags_from_rankings(rankings, stop_ids)
    filtered_records = []
    for rec in records:
        clone = copy.copy(rec)
        clone.tags = frozenset(t for t in rec.tags if t not in stop_ids)
        filtered_records.append(clone)
    return stripped, filtered_records, universe - set(stop_ids)


# ---------------------------------------------------------------------------
# Gradient-check battery
# ---------------------------------------------------------------------------


def gradcheck_battery(seed: int = 0, tolerance: float = 1e-4, full_path_entries: int = 12):
    """Finite-difference checks for every layer, every loss, and the full
    triplet-scorer forward path (64-bit). Returns [(name, report), ...]."""
    rng = np.random.default_rng(seed)
    checks = []

    dense = Dense.init(7, 5, rng, np.float64)
    x = rng.normal(size=(4, 7))
    c = rng.normal(size=(4, 5))

    def dense_fn(params):
        layer = Dense(params["weight"], params["bias"])
        y, cache = dense_forward(layer, params["x"])
        from .nn import dense_backward

        dx, dw, db = dense_backward(c, cache)
        return float((y * c).sum()), {"weight": dw, "bias": db, "x": dx}

    checks.append(("dense", gradcheck(dense_fn, {"weight": dense.weight, "bias": dense.bias, "x": x.copy()}, tolerance)))

    xr = rng.normal(size=(4, 6))
    xr[np.abs(xr) < 0.1] += 0.2  # keep away from the ReLU kink
    cr = rng.normal(size=(4, 6))

    def relu_fn(params):
        y, cache = relu_forward(params["x"])
        from .nn import relu_backward

        return float((y * cr).sum()), {"x": relu_backward(cr, cache)}

    checks.append(("relu", gradcheck(relu_fn, {"x": xr}, tolerance)))

    xn = rng.normal(size=(4, 6)) + 0.5
    cn = rng.normal(size=(4, 6))

    def l2norm_fn(params):
        y, cache = l2norm_forward(params["x"])
        from .nn import l2norm_backward

        return float((y * cn).sum()), {"x": l2norm_backward(cn, cache)}

    checks.append(("l2_normalize", gradcheck(l2norm_fn, {"x": xn}, tolerance)))

    gn = GroupNorm.init(8, num_groups=2, dtype=np.float64)
    xg = rng.normal(size=(3, 8)) * 2.0
    cg = rng.normal(size=(3, 8))

    def gn_fn(params):
        layer = GroupNorm(2, params["gamma"], params["beta"])
        y, cache = group_norm_forward(layer, params["x"])
        from .nn import group_norm_backward

        dx, dgamma, dbeta = group_norm_backward(cg, cache)
        return float((y * cg).sum()), {"gamma": dgamma, "beta": dbeta, "x": dx}

    checks.append(
        ("group_norm", gradcheck(gn_fn, {"gamma": gn.gamma + rng.normal(size=8) * 0.1, "beta": gn.beta.copy(), "x": xg}, tolerance))
    )

    targets = (rng.random((3, 9)) < 0.3).astype(np.float64)

    def mlc_fn(params):
        loss, grad = mlc_loss(params["logits"], targets)
        return loss, {"logits": grad}

    checks.append(("mlc_loss", gradcheck(mlc_fn, {"logits": rng.normal(size=(3, 9))}, tolerance)))

    idx = rng.integers(9, size=3)

    def mcc_fn(params):
        loss, grad = mcc_loss(params["logits"], idx)
        return loss, {"logits": grad}

    checks.append(("mcc_loss", gradcheck(mcc_fn, {"logits": rng.normal(size=(3, 9))}, tolerance)))

    t_fixed = rng.normal(size=(3, 9))

    def her_fn(params):
        loss, grad = her_loss(params["f"], t_fixed)
        return loss, {"f": grad}

    checks.append(("her_loss", gradcheck(her_fn, {"f": rng.normal(size=(3, 9)) + 0.5}, tolerance)))

    def margin_fn(params):
        s = params["s"]
        loss = float(margin_ranking_loss(s[0], s[1], 0.1))
        from .ranker import margin_ranking_backward

        dx, dn = margin_ranking_backward(s[0], s[1], 0.1)
        return loss, {"s": np.array([float(dx), float(dn)])}

    checks.append(("margin_ranking_loss", gradcheck(margin_fn, {"s": np.array([0.1, 0.3])}, tolerance)))

    from .nn import l2_normalize

    model = LocSensModel(300, rng, np.float64)
    r = l2_normalize(rng.normal(size=(3, 300)))
    v = l2_normalize(rng.normal(size=(3, 300)))
    g = rng.random((3, 2))
    _clear_relu_kinks(model, r, v, g)

    def full_path_fn(params):
        scores, caches = model.forward(r, v, g, 1.0)
        grads = model.backward(np.ones_like(scores), caches)
        return float(scores.sum()), grads

    def full_path_loss(params):
        scores, _ = model.forward(r, v, g, 1.0)
        return float(scores.sum())

    checks.append(
        (
            "locsens_forward_path",
            gradcheck(
                full_path_fn,
                model.params(),
                tolerance,
                max_entries=full_path_entries,
                rng=np.random.default_rng(seed),
                loss_fn=full_path_loss,
            ),
        )
    )
    return checks


def _clear_relu_kinks(model: LocSensModel, r, v, g, margin: float = 1e-3) -> None:
    """Shift biases so no ReLU pre-activation sits within ``margin`` of zero
    for the given check inputs. Finite differencing is only meaningful at a
    point of differentiability; a perturbation of 1e-5 must not cross a kink."""
    from .nn import l2_normalize as _l2

    def clear_branch(dense, x):
        for _ in range(100):
            h, _ = dense_forward(dense, x)
            bad = np.abs(h).min(axis=0) < margin
            if not bad.any():
                return np.maximum(h, 0.0)
            dense.bias[bad] += 3.0 * margin
        raise RuntimeError("could not move pre-activations off the ReLU kink")

    z = np.concatenate(
        [
            _l2(clear_branch(model.img_proj, r)),
            _l2(clear_branch(model.tag_proj, v)),
            _l2(clear_branch(model.loc_proj, g)),
        ],
        axis=1,
    )
    for dense, gn in model.trunk:
        hz, _ = dense_forward(dense, z)
        for _ in range(100):
            gz, _ = group_norm_forward(gn, hz)
            bad = np.abs(gz).min(axis=0) < margin
            if not bad.any():
                break
            gn.beta[bad] += 3.0 * margin
        else:
            raise RuntimeError("could not move pre-activations off the ReLU kink")
        z = np.maximum(gz, 0.0)


def dataset_candidates(dataset: Dataset, ids):
    return [(rec.id, rec.feature) for rec in dataset.subset(ids)]
