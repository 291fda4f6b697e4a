"""Location-agnostic hashtag-supervised learners over precomputed backbone
features: multi-label classification (MLC), softmax multi-class
classification (MCC), and embedding regression onto word vectors (HER).

MCC doubles as the embedding provider for the triplet ranker: its bottleneck
activations are the image embeddings and its classifier weight rows are the
tag embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, PhotoRecord, WordVectorTable
from .nn import (
    AdamState,
    Dense,
    TrainingDivergence,
    adam_step,
    clip_grad_norm,
    dense_backward,
    dense_forward,
)
from .nn.precision import default_dtype

BASELINE_KINDS = ("mlc", "mcc", "her")


# ---------------------------------------------------------------------------
# Losses (each returns loss and the gradient w.r.t. its first argument)
# ---------------------------------------------------------------------------


def mlc_loss(logits, targets):
    """Mean over classes of per-class sigmoid cross-entropy; batched inputs
    average over the batch as well."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"logits shape {z.shape} != targets shape {y.shape}")
    squeeze = z.ndim == 1
    z2 = z[None, :] if squeeze else z
    y2 = y[None, :] if squeeze else y
    n, h = z2.shape
    # Stable sigmoid cross-entropy: max(z,0) - z*y + log(1 + exp(-|z|)).
    per_class = np.maximum(z2, 0.0) - z2 * y2 + np.log1p(np.exp(-np.abs(z2)))
    loss = float(per_class.sum() / (n * h))
    sig = 1.0 / (1.0 + np.exp(-z2))
    grad = (sig - y2) / (n * h)
    return loss, (grad[0] if squeeze else grad)


def mcc_loss(logits, target_index):
    """Softmax cross-entropy against one target class per row."""
    z = np.asarray(logits, dtype=np.float64)
    squeeze = z.ndim == 1
    z2 = z[None, :] if squeeze else z
    idx = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    n, h = z2.shape
    if idx.shape != (n,):
        raise ValueError(f"target_index shape {idx.shape} incompatible with {n} rows")
    if np.any(idx < 0) or np.any(idx >= h):
        raise ValueError("target_index out of range")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float((logsumexp - shifted[rows, idx]).mean())
    softmax = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    grad = softmax
    grad[rows, idx] -= 1.0
    grad /= n
    return loss, (grad[0] if squeeze else grad)


def her_loss(f, t):
    """Cosine embedding loss 1 - cos(f, t); gradient w.r.t. f."""
    f2 = np.atleast_2d(np.asarray(f, dtype=np.float64))
    t2 = np.atleast_2d(np.asarray(t, dtype=np.float64))
    squeeze = np.asarray(f).ndim == 1
    fn = np.linalg.norm(f2, axis=1, keepdims=True)
    tn = np.linalg.norm(t2, axis=1, keepdims=True)
    if np.any(fn == 0.0) or np.any(tn == 0.0):
        raise ValueError("cosine loss undefined for zero-norm input")
    n = f2.shape[0]
    dot = (f2 * t2).sum(axis=1, keepdims=True)
    cos = dot / (fn * tn)
    loss = float((1.0 - cos).mean())
    # d cos/d f = t/(|f||t|) - cos * f/|f|^2
    grad = -(t2 / (fn * tn) - cos * f2 / (fn * fn)) / n
    return loss, (grad[0] if squeeze else grad)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class MLCModel:
    """Single dense head over backbone features, one logit per tag."""

    kind = "mlc"

    def __init__(self, head: Dense):
        self.head = head

    @classmethod
    def init(cls, d_feat: int, n_tags: int, rng, dtype=None):
        return cls(Dense.init(d_feat, n_tags, rng, dtype))

    def params(self):
        return {"head.weight": self.head.weight, "head.bias": self.head.bias}

    @classmethod
    def from_params(cls, params):
        return cls(Dense(params["head.weight"], params["head.bias"]))

    def logits(self, x):
        y, _ = dense_forward(self.head, x)
        return y


class MCCModel:
    """Bottleneck (features -> D) followed by a classifier (D -> tags)."""

    kind = "mcc"

    def __init__(self, bottleneck: Dense, classifier: Dense):
        if bottleneck.out_dim != classifier.in_dim:
            raise ValueError("bottleneck output and classifier input dims differ")
        self.bottleneck = bottleneck
        self.classifier = classifier

    @classmethod
    def init(cls, d_feat: int, n_tags: int, embed_dim: int, rng, dtype=None):
        return cls(
            Dense.init(d_feat, embed_dim, rng, dtype),
            Dense.init(embed_dim, n_tags, rng, dtype),
        )

    @property
    def embed_dim(self):
        return self.bottleneck.out_dim

    def params(self):
        return {
            "bottleneck.weight": self.bottleneck.weight,
            "bottleneck.bias": self.bottleneck.bias,
            "classifier.weight": self.classifier.weight,
            "classifier.bias": self.classifier.bias,
        }

    @classmethod
    def from_params(cls, params):
        return cls(
            Dense(params["bottleneck.weight"], params["bottleneck.bias"]),
            Dense(params["classifier.weight"], params["classifier.bias"]),
        )

    def logits(self, x):
        r, _ = dense_forward(self.bottleneck, x)
        y, _ = dense_forward(self.classifier, r)
        return y


class HERModel:
    """Dense regression head mapping features into the word-vector space."""

    kind = "her"

    def __init__(self, head: Dense, word_vectors: np.ndarray):
        self.head = head
        self.word_vectors = word_vectors  # [H, D], fixed

    @classmethod
    def init(cls, d_feat: int, word_vectors: WordVectorTable, rng, dtype=None):
        vecs = word_vectors.vectors.astype(dtype if dtype is not None else default_dtype())
        return cls(Dense.init(d_feat, word_vectors.dim, rng, dtype), vecs)

    def params(self):
        return {
            "head.weight": self.head.weight,
            "head.bias": self.head.bias,
            "word_vectors": self.word_vectors,
        }

    @classmethod
    def from_params(cls, params):
        return cls(Dense(params["head.weight"], params["head.bias"]), params["word_vectors"])

    def embed(self, x):
        y, _ = dense_forward(self.head, x)
        return y


def image_embedding(model: MCCModel, feature):
    """Bottleneck activation (linear output) for one feature vector; the
    triplet ranker L2-normalizes it downstream."""
    r, _ = dense_forward(model.bottleneck, feature)
    return r


def image_embeddings(model: MCCModel, features):
    r, _ = dense_forward(model.bottleneck, features)
    return r


def tag_embeddings(model: MCCModel):
    """Classifier weight rows, one per vocabulary tag, in vocabulary order."""
    return model.classifier.weight.copy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class BaselineConfig:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-4
    embed_dim: int = 300
    clip_norm: float = 5.0  # applied to MLC only; its training is unstable otherwise

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class BaselineResult:
    model: object
    epoch_losses: list = field(default_factory=list)


def _feature_matrix(records, dtype):
    return np.stack([rec.feature for rec in records]).astype(dtype)


def train_baseline(
    kind: str,
    records,
    n_tags: int,
    config: BaselineConfig,
    seed: int,
    word_vectors: WordVectorTable | None = None,
) -> BaselineResult:
    """Minibatch training of one baseline kind; deterministic given seed.

    MCC resamples one random target tag per image each epoch; HER regresses
    onto the (cached) sum of the groundtruth tags' word vectors.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}")
    if not records:
        raise ValueError("cannot train on an empty dataset")
    if kind == "her" and word_vectors is None:
        raise ValueError("HER training requires word vectors")

    dtype = default_dtype()
    rng = np.random.default_rng(seed)
    x = _feature_matrix(records, dtype)
    n, d_feat = x.shape
    tag_lists = [sorted(rec.tags) for rec in records]

    if kind == "mlc":
        model = MLCModel.init(d_feat, n_tags, rng, dtype)
        targets = np.zeros((n, n_tags), dtype=dtype)
        for i, tags in enumerate(tag_lists):
            targets[i, tags] = 1.0
    elif kind == "mcc":
        model = MCCModel.init(d_feat, n_tags, config.embed_dim, rng, dtype)
    else:
        model = HERModel.init(d_feat, word_vectors, rng, dtype)
        sums = np.stack([word_vectors.vectors[tags].sum(axis=0) for tags in tag_lists]).astype(dtype)

    params = model.params()
    if kind == "her":
        params = {k: v for k, v in params.items() if k != "word_vectors"}
    opt = AdamState(lr=config.lr)
    epoch_losses = []

    for _epoch in range(config.epochs):
        perm = rng.permutation(n)
        if kind == "mcc":
            epoch_targets = np.array([tags[rng.integers(len(tags))] for tags in tag_lists])
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = x[idx]
            if kind == "mlc":
                logits, cache = dense_forward(model.head, xb)
                loss, dlogits = mlc_loss(logits, targets[idx])
                _, dw, db = dense_backward(dlogits.astype(dtype), cache)
                grads = {"head.weight": dw, "head.bias": db}
                clip_grad_norm(grads, config.clip_norm)
            elif kind == "mcc":
                r, cache_b = dense_forward(model.bottleneck, xb)
                logits, cache_c = dense_forward(model.classifier, r)
                loss, dlogits = mcc_loss(logits, epoch_targets[idx])
                dr, dwc, dbc = dense_backward(dlogits.astype(dtype), cache_c)
                _, dwb, dbb = dense_backward(dr, cache_b)
                grads = {
                    "bottleneck.weight": dwb,
                    "bottleneck.bias": dbb,
                    "classifier.weight": dwc,
                    "classifier.bias": dbc,
                }
            else:
                f, cache = dense_forward(model.head, xb)
                loss, df = her_loss(f, sums[idx])
                _, dw, db = dense_backward(df.astype(dtype), cache)
                grads = {"head.weight": dw, "head.bias": db}

            if not np.isfinite(loss):
                raise TrainingDivergence(f"{kind} training produced non-finite loss {loss}")
            adam_step(opt, params, grads)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return BaselineResult(model=model, epoch_losses=epoch_losses)


# ---------------------------------------------------------------------------
# Ranking
# ---------------------------------------------------------------------------


def rank_top_k(ids, scores, k: int):
    """Descending score, ties by ascending identifier; truncates to k."""
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((ids, -scores))[: min(k, len(ids))]
    return [(int(ids[i]), float(scores[i])) for i in order]


def baseline_rank(model, mode: str, query, candidates, k: int, word_vectors: WordVectorTable | None = None):
    """Top-k ranking by a trained baseline.

    retrieve_by_tag: query is a tag id, candidates are (image_id, feature)
    pairs. tag_image: query is a feature vector, candidates are tag ids.
    Scores are class logits for MLC/MCC and cosine similarity for HER.
    """
    if mode == "retrieve_by_tag":
        tag_id = int(query)
        ids = np.array([c[0] for c in candidates])
        feats = np.stack([np.asarray(c[1]) for c in candidates]).astype(np.float64)
        if isinstance(model, HERModel):
            h = model.word_vectors.shape[0]
            if not 0 <= tag_id < h:
                raise ValueError(f"tag id {tag_id} outside vocabulary of {h}")
            f = model.embed(feats)
            v = model.word_vectors[tag_id]
            scores = (f @ v) / (np.linalg.norm(f, axis=1) * np.linalg.norm(v))
        else:
            logits = model.logits(feats)
            if not 0 <= tag_id < logits.shape[1]:
                raise ValueError(f"tag id {tag_id} outside vocabulary of {logits.shape[1]}")
            scores = logits[:, tag_id]
        return rank_top_k(ids, scores, k)

    if mode == "tag_image":
        tag_ids = np.asarray(list(candidates), dtype=np.int64)
        feat = np.asarray(query, dtype=np.float64)
        if isinstance(model, HERModel):
            f = model.embed(feat)
            vecs = model.word_vectors[tag_ids]
            scores = (vecs @ f) / (np.linalg.norm(vecs, axis=1) * np.linalg.norm(f))
        else:
            scores = model.logits(feat)[tag_ids]
        return rank_top_k(tag_ids, scores, k)

    raise ValueError(f"unknown ranking mode {mode!r}")
