"""The location-sensitive triplet scorer and its training machinery.

A triplet is (image embedding, tag embedding, normalized coordinate). Each
modality is projected to 300 dimensions (dense + ReLU + L2 normalization),
the location projection is scaled by a fusion weight alpha, the three vectors
are concatenated and pushed through a five-layer trunk (dense + group norm +
ReLU; widths 2048, 2048, 2048, 1024, 512) ending in a scalar score head.

Training ranks observed triplets above synthesized negatives with a margin
loss. Two schedules balance how much the ranking leans on location: a
progressive fusion ramp with location dropout, and Gaussian location
sampling with an annealed standard deviation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geo import GeoCoord, NormCoord, normalize_coord, sample_location
from .nn import (
    AdamState,
    Dense,
    GroupNorm,
    TrainingDivergence,
    adam_step,
    dense_backward,
    dense_forward,
    group_norm_backward,
    group_norm_forward,
    l2_normalize,
    l2norm_backward,
    l2norm_forward,
    relu_backward,
    relu_forward,
)
from .nn.precision import default_dtype

PROJ_DIM = 300
TRUNK_WIDTHS = (2048, 2048, 2048, 1024, 512)
NEGATIVE_MODES = ("replace_image", "replace_tag", "mixed")
SIGMA_LADDER = (1.0, 0.5, 0.2, 0.1, 0.05, 0.01, 0.0)
MAX_REJECTION_DRAWS = 1000


@dataclass(frozen=True)
class Triplet:
    image_id: int
    tag_id: int
    coord: NormCoord


# ---------------------------------------------------------------------------
# Margin ranking loss
# ---------------------------------------------------------------------------


def margin_ranking_loss(s_x, s_n, m: float):
    """max(0, s_n - s_x + m), elementwise over broadcastable score arrays."""
    if m <= 0:
        raise ValueError("margin must be positive")
    return np.maximum(0.0, np.asarray(s_n) - np.asarray(s_x) + m)


def margin_ranking_backward(s_x, s_n, m: float):
    """Gradients (d/ds_x, d/ds_n) of the elementwise margin loss."""
    active = (np.asarray(s_n) - np.asarray(s_x) + m) > 0.0
    g = active.astype(np.float64)
    return -g, g


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class LocSensModel:
    """Triplet plausibility scorer. ``alpha`` is the inference-time location
    weight: 1 for location-using models, 0 for zeroed (location-agnostic)
    ones."""

    kind = "locsens"

    def __init__(self, embed_dim: int, rng: np.random.Generator, dtype=None, alpha: float = 1.0):
        dtype = default_dtype() if dtype is None else np.dtype(dtype)
        self.embed_dim = embed_dim
        self.alpha = float(alpha)
        self.img_proj = Dense.init(embed_dim, PROJ_DIM, rng, dtype)
        self.tag_proj = Dense.init(embed_dim, PROJ_DIM, rng, dtype)
        self.loc_proj = Dense.init(2, PROJ_DIM, rng, dtype)
        self.trunk = []
        width = 3 * PROJ_DIM
        for out in TRUNK_WIDTHS:
            self.trunk.append((Dense.init(width, out, rng, dtype), GroupNorm.init(out, dtype=dtype)))
            width = out
        self.head = Dense.init(width, 1, rng, dtype)

    # -- parameter plumbing --------------------------------------------------

    def params(self) -> dict:
        out = {}
        for name, layer in (("img_proj", self.img_proj), ("tag_proj", self.tag_proj), ("loc_proj", self.loc_proj)):
            out[f"{name}.weight"] = layer.weight
            out[f"{name}.bias"] = layer.bias
        for i, (dense, gn) in enumerate(self.trunk):
            out[f"trunk{i}.weight"] = dense.weight
            out[f"trunk{i}.bias"] = dense.bias
            out[f"trunk{i}.gamma"] = gn.gamma
            out[f"trunk{i}.beta"] = gn.beta
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    @classmethod
    def from_params(cls, params: dict, alpha: float = 1.0) -> "LocSensModel":
        model = cls.__new__(cls)
        model.alpha = float(alpha)
        model.embed_dim = params["img_proj.weight"].shape[1]
        model.img_proj = Dense(params["img_proj.weight"], params["img_proj.bias"])
        model.tag_proj = Dense(params["tag_proj.weight"], params["tag_proj.bias"])
        model.loc_proj = Dense(params["loc_proj.weight"], params["loc_proj.bias"])
        model.trunk = []
        i = 0
        while f"trunk{i}.weight" in params:
            gamma = params[f"trunk{i}.gamma"]
            gn = GroupNorm(num_groups=_groups_for(gamma.shape[0]), gamma=gamma, beta=params[f"trunk{i}.beta"])
            model.trunk.append((Dense(params[f"trunk{i}.weight"], params[f"trunk{i}.bias"]), gn))
            i += 1
        model.head = Dense(params["head.weight"], params["head.bias"])
        return model

    # -- forward / backward ---------------------------------------------------

    def forward(self, r, v, g, alpha):
        """Batched scores for rows of (r, v, g). ``alpha`` may be a scalar or
        a per-row vector (location dropout zeroes individual rows)."""
        r = np.atleast_2d(r)
        v = np.atleast_2d(v)
        g = np.atleast_2d(g)
        n = r.shape[0]
        scalar_alpha = np.isscalar(alpha)
        if scalar_alpha and float(alpha) == 0.0:
            # Location silenced by construction: its branch cannot influence
            # the score, so it is not evaluated at all.
            p_loc = np.zeros((n, PROJ_DIM), dtype=r.dtype)
            loc_cache = None
            alpha_col = None
        else:
            alpha_col = np.full((n, 1), float(alpha), dtype=r.dtype) if scalar_alpha else np.asarray(alpha, dtype=r.dtype).reshape(n, 1)
            h, c_dense = dense_forward(self.loc_proj, g)
            a, c_relu = relu_forward(h)
            p, c_norm = l2norm_forward(a)
            p_loc = p * alpha_col
            loc_cache = (c_dense, c_relu, c_norm)

        hi, ci_dense = dense_forward(self.img_proj, r)
        ai, ci_relu = relu_forward(hi)
        p_img, ci_norm = l2norm_forward(ai)
        ht, ct_dense = dense_forward(self.tag_proj, v)
        at, ct_relu = relu_forward(ht)
        p_tag, ct_norm = l2norm_forward(at)

        z = np.concatenate([p_img, p_tag, p_loc], axis=1)
        trunk_caches = []
        for dense, gn in self.trunk:
            hz, c1 = dense_forward(dense, z)
            gz, c2 = group_norm_forward(gn, hz)
            z, c3 = relu_forward(gz)
            trunk_caches.append((c1, c2, c3))
        scores, head_cache = dense_forward(self.head, z)
        caches = {
            "img": (ci_dense, ci_relu, ci_norm),
            "tag": (ct_dense, ct_relu, ct_norm),
            "loc": loc_cache,
            "alpha_col": alpha_col,
            "trunk": trunk_caches,
            "head": head_cache,
        }
        return scores[:, 0], caches

    def backward(self, dscores, caches) -> dict:
        """Parameter gradients given d(loss)/d(score) per row."""
        grads = {}
        dz, dwh, dbh = dense_backward(np.asarray(dscores).reshape(-1, 1), caches["head"])
        grads["head.weight"] = dwh
        grads["head.bias"] = dbh
        for i in range(len(self.trunk) - 1, -1, -1):
            c1, c2, c3 = caches["trunk"][i]
            dgz = relu_backward(dz, c3)
            dhz, dgamma, dbeta = group_norm_backward(dgz, c2)
            dz, dw, db = dense_backward(dhz, c1)
            grads[f"trunk{i}.weight"] = dw
            grads[f"trunk{i}.bias"] = db
            grads[f"trunk{i}.gamma"] = dgamma
            grads[f"trunk{i}.beta"] = dbeta

        d_img = dz[:, :PROJ_DIM]
        d_tag = dz[:, PROJ_DIM : 2 * PROJ_DIM]
        d_loc = dz[:, 2 * PROJ_DIM :]

        for name, branch_cache, dout in (
            ("img_proj", caches["img"], d_img),
            ("tag_proj", caches["tag"], d_tag),
        ):
            c_dense, c_relu, c_norm = branch_cache
            da = l2norm_backward(dout, c_norm)
            dh = relu_backward(da, c_relu)
            _, dw, db = dense_backward(dh, c_dense)
            grads[f"{name}.weight"] = dw
            grads[f"{name}.bias"] = db

        if caches["loc"] is None:
            grads["loc_proj.weight"] = np.zeros_like(self.loc_proj.weight)
            grads["loc_proj.bias"] = np.zeros_like(self.loc_proj.bias)
        else:
            c_dense, c_relu, c_norm = caches["loc"]
            da = l2norm_backward(d_loc * caches["alpha_col"], c_norm)
            dh = relu_backward(da, c_relu)
            _, dw, db = dense_backward(dh, c_dense)
            grads["loc_proj.weight"] = dw
            grads["loc_proj.bias"] = db
        return grads

    def score_many(self, r, v, g, alpha: float | None = None, chunk: int = 1024) -> np.ndarray:
        """Forward-only scoring; defaults to the model's inference alpha."""
        alpha = self.alpha if alpha is None else alpha
        r = np.atleast_2d(r)
        v = np.atleast_2d(v)
        g = np.atleast_2d(g)
        n = r.shape[0]
        out = np.empty(n, dtype=np.float64)
        for start in range(0, n, chunk):
            end = min(n, start + chunk)
            s, _ = self.forward(r[start:end], v[start:end], g[start:end], alpha)
            out[start:end] = s
        return out


def _groups_for(channels: int) -> int:
    from .nn.layers import default_group_count

    return default_group_count(channels)


def score_triplet(model: LocSensModel, r, v, coord: NormCoord, alpha: float | None = None) -> float:
    """Score a single (image embedding, tag embedding, coordinate) triplet.
    ``r`` and ``v`` must already be L2-normalized by the caller."""
    g = np.array([[coord.u, coord.v]], dtype=np.asarray(r).dtype)
    alpha = model.alpha if alpha is None else alpha
    s, _ = model.forward(np.atleast_2d(r), np.atleast_2d(v), g, alpha)
    return float(s[0])


# ---------------------------------------------------------------------------
# Embeddings and negatives
# ---------------------------------------------------------------------------


class TripletEmbeddings:
    """L2-normalized image and tag embeddings keyed by id, as the scorer's
    input contract requires."""

    def __init__(self, image_ids, image_rows: np.ndarray, tag_rows: np.ndarray):
        self.image_ids = np.asarray(image_ids)
        self.image_rows = image_rows
        self.tag_rows = tag_rows
        self._row_of = {int(i): k for k, i in enumerate(self.image_ids)}

    @classmethod
    def from_mcc(cls, model, records) -> "TripletEmbeddings":
        from .baselines import image_embeddings, tag_embeddings

        feats = np.stack([rec.feature for rec in records]).astype(model.bottleneck.weight.dtype)
        imgs = l2_normalize(image_embeddings(model, feats))
        tags = l2_normalize(tag_embeddings(model))
        return cls([rec.id for rec in records], imgs, tags)

    @property
    def n_tags(self) -> int:
        return self.tag_rows.shape[0]

    def image_vec(self, image_id: int) -> np.ndarray:
        return self.image_rows[self._row_of[image_id]]

    def image_matrix(self, image_ids) -> np.ndarray:
        rows = [self._row_of[int(i)] for i in image_ids]
        return self.image_rows[rows]


class TripletIndex:
    """Groundtruth lookup used by negative construction."""

    def __init__(self, image_ids, tags_by_image: dict, n_tags: int):
        self.image_ids = np.asarray(sorted(image_ids))
        self.tags_by_image = tags_by_image
        self.n_tags = n_tags

    @classmethod
    def from_records(cls, records, n_tags: int) -> "TripletIndex":
        return cls([rec.id for rec in records], {rec.id: rec.tags for rec in records}, n_tags)


def make_negatives(positive: Triplet, mode: str, count: int, index: TripletIndex, rng: np.random.Generator):
    """Synthesize ``count`` negatives by replacing the image (with one not
    associated with the tag) or the tag (with one absent from the image's
    groundtruth); the coordinate is always kept. Uniform over valid
    replacements via rejection sampling."""
    if mode not in NEGATIVE_MODES:
        raise ValueError(f"unknown negative mode {mode!r}")
    pos_tags = index.tags_by_image[positive.image_id]
    negatives = []
    for _ in range(count):
        replace_image = mode == "replace_image" or (mode == "mixed" and rng.random() < 0.5)
        if replace_image:
            for _ in range(MAX_REJECTION_DRAWS):
                cand = int(index.image_ids[rng.integers(len(index.image_ids))])
                if positive.tag_id not in index.tags_by_image[cand]:
                    negatives.append(Triplet(cand, positive.tag_id, positive.coord))
                    break
            else:
                raise ValueError(
                    f"no image without tag {positive.tag_id} found in "
                    f"{MAX_REJECTION_DRAWS} draws; dataset is degenerate"
                )
        else:
            for _ in range(MAX_REJECTION_DRAWS):
                cand = int(rng.integers(index.n_tags))
                if cand not in pos_tags:
                    negatives.append(Triplet(positive.image_id, cand, positive.coord))
                    break
            else:
                raise ValueError(
                    f"no tag outside the groundtruth of image {positive.image_id} "
                    f"found in {MAX_REJECTION_DRAWS} draws; dataset is degenerate"
                )
    return negatives


# ---------------------------------------------------------------------------
# Training strategies and loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainStrategy:
    """How the location modality enters training.

    zeroed   - fusion weight alpha fixed at 0 (location-agnostic model)
    raw      - alpha fixed at 1, exact coordinates
    dropout  - alpha 0 until the loss plateaus, then a linear ramp to 1 while
               location representations are zeroed per triplet with
               probability ``zero_prob``
    sampling - alpha 1, coordinates drawn around the true location with a
               stepwise-annealed sigma ending at ``final_sigma``
    """

    kind: str
    ramp_epochs: int = 5
    zero_prob: float = 0.5
    final_sigma: float = 0.0
    epochs_per_rung: int = 1
    plateau_window: int = 3
    plateau_tol: float = 0.01

    def __post_init__(self):
        if self.kind not in ("zeroed", "raw", "dropout", "sampling"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if not 0.0 <= self.zero_prob <= 1.0:
            raise ValueError("zero_prob must be in [0, 1]")
        if self.final_sigma < 0:
            raise ValueError("final_sigma must be >= 0")
        if self.ramp_epochs < 1 or self.epochs_per_rung < 1:
            raise ValueError("ramp_epochs and epochs_per_rung must be >= 1")

    @classmethod
    def zeroed(cls):
        return cls("zeroed")

    @classmethod
    def raw(cls):
        return cls("raw")

    @classmethod
    def dropout(cls, ramp_epochs: int = 5, zero_prob: float = 0.5):
        return cls("dropout", ramp_epochs=ramp_epochs, zero_prob=zero_prob)

    @classmethod
    def sampling(cls, final_sigma: float, epochs_per_rung: int = 1):
        return cls("sampling", final_sigma=final_sigma, epochs_per_rung=epochs_per_rung)


def sigma_schedule(strategy: TrainStrategy, epochs: int):
    """Per-epoch sigma for the sampling strategy: descend the ladder one rung
    per ``epochs_per_rung`` epochs, then hold the final sigma."""
    rungs = [s for s in SIGMA_LADDER if s > strategy.final_sigma]
    needed = len(rungs) * strategy.epochs_per_rung + 1
    if epochs < needed:
        raise ValueError(
            f"sampling to sigma={strategy.final_sigma} needs at least {needed} epochs, got {epochs}"
        )
    out = []
    for s in rungs:
        out.extend([s] * strategy.epochs_per_rung)
    out.extend([strategy.final_sigma] * (epochs - len(out)))
    return out


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    margin: float = 0.1
    negatives: int = 6
    negative_mode: str = "replace_image"
    lr: float = 1e-4
    seed: int = 0
    steps_per_epoch: Optional[int] = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives < 1:
            raise ValueError("need at least one negative per positive")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"unknown negative mode {self.negative_mode!r}")


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    alpha: float
    sigma: float
    wallclock_s: float


def train_locsens(records, embeddings: TripletEmbeddings, strategy: TrainStrategy, config: TrainConfig):
    """Margin-ranking training over positives from ``records`` with
    ``config.negatives`` synthesized negatives each. Returns the trained
    model and one log record per epoch. Bit-reproducible for a fixed seed
    in 64-bit mode."""
    if not records:
        raise ValueError("cannot train on an empty dataset")
    dtype = embeddings.image_rows.dtype
    rng = np.random.default_rng(config.seed)
    model = LocSensModel(embeddings.image_rows.shape[1], rng, dtype)
    index = TripletIndex.from_records(records, embeddings.n_tags)
    opt = AdamState(lr=config.lr)
    params = model.params()

    n = len(records)
    tag_lists = [sorted(rec.tags) for rec in records]
    true_coords = [normalize_coord(rec.location) for rec in records]
    rows_per_pos = 1 + config.negatives

    sigmas = sigma_schedule(strategy, config.epochs) if strategy.kind == "sampling" else [0.0] * config.epochs

    logs = []
    ramp_start = None  # dropout: epoch where the alpha ramp began
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        if strategy.kind == "zeroed":
            alpha = 0.0
        elif strategy.kind in ("raw", "sampling"):
            alpha = 1.0
        else:  # dropout
            alpha = 0.0 if ramp_start is None else min(1.0, (epoch - ramp_start) / strategy.ramp_epochs)
        sigma = sigmas[epoch]

        perm = rng.permutation(n)
        n_steps = -(-n // config.batch_size)
        if config.steps_per_epoch is not None:
            n_steps = min(n_steps, config.steps_per_epoch)

        loss_sum = 0.0
        loss_count = 0
        for step in range(n_steps):
            idx = perm[step * config.batch_size : (step + 1) * config.batch_size]
            b = len(idx)
            if b == 0:
                break

            r_rows = np.empty((b * rows_per_pos, embeddings.image_rows.shape[1]), dtype=dtype)
            v_ids = np.empty(b * rows_per_pos, dtype=np.int64)
            g_rows = np.empty((b * rows_per_pos, 2), dtype=dtype)
            for j, rec_pos in enumerate(idx):
                rec = records[rec_pos]
                tags = tag_lists[rec_pos]
                tag = tags[rng.integers(len(tags))]
                positive = Triplet(rec.id, tag, true_coords[rec_pos])
                trips = [positive] + make_negatives(
                    positive, config.negative_mode, config.negatives, index, rng
                )
                base = j * rows_per_pos
                for k, trip in enumerate(trips):
                    coord = trip.coord
                    if sigma > 0.0:
                        coord = sample_location(coord, sigma, rng)
                    r_rows[base + k] = embeddings.image_vec(trip.image_id)
                    v_ids[base + k] = trip.tag_id
                    g_rows[base + k] = (coord.u, coord.v)

            if strategy.kind == "dropout" and ramp_start is not None:
                keep = (rng.random(b * rows_per_pos) >= strategy.zero_prob).astype(dtype)
                alpha_arg = alpha * keep
            else:
                alpha_arg = alpha

            scores, caches = model.forward(r_rows, embeddings.tag_rows[v_ids], g_rows, alpha_arg)
            s = scores.reshape(b, rows_per_pos)
            s_x = s[:, :1]
            s_n = s[:, 1:]
            losses = margin_ranking_loss(s_x, s_n, config.margin)
            loss = float(losses.mean())
            if not np.isfinite(loss):
                raise TrainingDivergence(f"non-finite ranking loss at epoch {epoch}, step {step}")

            dx, dn = margin_ranking_backward(s_x, s_n, config.margin)
            dscores = np.empty((b, rows_per_pos), dtype=np.float64)
            dscores[:, :1] = dx.sum(axis=1, keepdims=True)
            dscores[:, 1:] = dn
            dscores /= losses.size
            grads = model.backward(dscores.reshape(-1).astype(dtype), caches)
            adam_step(opt, params, grads)

            loss_sum += loss * losses.size
            loss_count += losses.size

        mean_loss = loss_sum / loss_count
        logs.append(EpochLog(epoch, mean_loss, alpha, sigma, time.perf_counter() - t0))

        if strategy.kind == "dropout" and ramp_start is None:
            past = [log.mean_loss for log in logs]
            w = strategy.plateau_window
            if len(past) > w:
                prev = past[-1 - w]
                if prev <= 0.0 or (prev - past[-1]) / prev < strategy.plateau_tol:
                    ramp_start = epoch + 1

    model.alpha = 0.0 if strategy.kind == "zeroed" else 1.0
    return model, logs


# ---------------------------------------------------------------------------
# Ranking with a trained model
# ---------------------------------------------------------------------------


def retrieve(model: LocSensModel, embeddings: TripletEmbeddings, tag_id: int, query_coord: GeoCoord, candidate_ids, k: int):
    """Rank candidate images for a (tag, location) query. Candidate locations
    are never consulted: test-set locations are unavailable at inference."""
    if not 0 <= tag_id < embeddings.n_tags:
        raise ValueError(f"tag id {tag_id} outside vocabulary of {embeddings.n_tags}")
    from .baselines import rank_top_k

    ids = np.asarray(list(candidate_ids))
    r = embeddings.image_matrix(ids)
    nc = normalize_coord(query_coord)
    v = np.broadcast_to(embeddings.tag_rows[tag_id], r.shape)
    g = np.broadcast_to(np.array([nc.u, nc.v], dtype=r.dtype), (r.shape[0], 2))
    scores = model.score_many(r, v, g)
    return rank_top_k(ids, scores, k)


def tag_image(model: LocSensModel, embeddings: TripletEmbeddings, r, coord: GeoCoord, k: int):
    """Rank the whole vocabulary for one image embedding at a location."""
    from .baselines import rank_top_k

    h = embeddings.n_tags
    r2 = np.broadcast_to(np.asarray(r), (h, len(r)))
    nc = normalize_coord(coord)
    g = np.broadcast_to(np.array([nc.u, nc.v], dtype=embeddings.tag_rows.dtype), (h, 2))
    scores = model.score_many(r2, embeddings.tag_rows, g)
    return rank_top_k(np.arange(h), scores, k)
