"""Synthetic click / reading-duration logs with known ground truth.

Users and items carry latent factors. The true click probability is a
sigmoid of a scaled user-item affinity. The true long-read probability given
a click is a sigmoid of a second affinity plus an item quality term.
Clickbait items get a click boost and a long-read penalty. Clicked
impressions get a log-normal duration truncated above the threshold (long
read) or at or below it (short read). Un-clicked impressions have zero
duration.

Categorical features are quantized latent factors, an item publisher field
that carries most of the clickbait signal, and a pure-noise user field.
Dense features are teacher-only pair features: noisy views of the true
click and long-read logits (ranker-style cross statistics) and one noise
column.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from . import tensorio
from .config import GenConfig
from .features import Batch, FeatureSchema

log = logging.getLogger(__name__)

DENSE_DIM = 3


@dataclass
class WorldModel:
    config: GenConfig
    user_factors: np.ndarray       # (n_users, d)  drives both affinities
    item_click_factors: np.ndarray  # (n_items, d)
    item_read_factors: np.ndarray   # (n_items, d)
    item_quality: np.ndarray       # (n_items,)
    clickbait: np.ndarray          # (n_items,) bool
    user_features: np.ndarray      # (n_users, 3) categorical ids
    item_features: np.ndarray      # (n_items, 3)

    @property
    def num_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_click_factors.shape[0]

    def schema(self, embedding_dim: int = 30) -> FeatureSchema:
        c = self.config
        return FeatureSchema(
            user_fields=(("user_id", c.num_users), ("user_cluster", c.user_clusters),
                         ("user_noise", c.noise_cardinality)),
            item_fields=(("item_id", c.num_items), ("item_cluster", c.item_clusters),
                         ("item_publisher", c.num_publishers)),
            dense_dim=DENSE_DIM,
            embedding_dim=embedding_dim,
        )

    def click_affinity(self, users, items):
        return np.sum(self.user_factors[users] * self.item_click_factors[items], axis=-1)

    def read_affinity(self, users, items):
        return np.sum(self.user_factors[users] * self.item_read_factors[items], axis=-1)

    def ctr_logit(self, users, items):
        c = self.config
        return (c.ctr_scale * self.click_affinity(users, items) + c.ctr_bias
                + c.clickbait_ctr_boost * self.clickbait[items])

    def cvr_logit(self, users, items):
        c = self.config
        return (c.cvr_scale * self.read_affinity(users, items) + c.cvr_bias + self.item_quality[items]
                - c.clickbait_cvr_penalty * self.clickbait[items])

    def ctr(self, users, items):
        return _sigmoid(self.ctr_logit(users, items))

    def cvr(self, users, items):
        return _sigmoid(self.cvr_logit(users, items))

    def expected_duration(self, users, items):
        """E[duration] = ctr * (cvr * mean_long + (1 - cvr) * mean_short)."""
        mu_long, mu_short = duration_means(self.config)
        cvr = self.cvr(users, items)
        return self.ctr(users, items) * (cvr * mu_long + (1.0 - cvr) * mu_short)

    def user_item_matrix(self, users, fn: str = "expected_duration"):
        """Evaluate ``fn`` for every (user in users) x (all items), shape (len(users), n_items)."""
        users = np.asarray(users)
        items = np.arange(self.num_items)
        return getattr(self, fn)(users[:, None], items[None, :])

    def dense_features(self, users, items, rng: np.random.Generator):
        c = self.config
        n = np.broadcast(users, items).shape[0]
        noise = rng.standard_normal((n, DENSE_DIM))
        out = np.stack([
            self.ctr_logit(users, items) + c.dense_noise_std * noise[:, 0],
            self.cvr_logit(users, items) + c.dense_noise_std * noise[:, 1],
            noise[:, 2],
        ], axis=1)
        # fixed precision so the written dataset round-trips exactly
        return np.round(out, 4)

    def save(self, path) -> str:
        tensors = {
            "user_factors": self.user_factors, "item_click_factors": self.item_click_factors,
            "item_read_factors": self.item_read_factors, "item_quality": self.item_quality,
            "clickbait": self.clickbait.astype(np.int64), "user_features": self.user_features,
            "item_features": self.item_features,
        }
        return tensorio.save(path, tensors, {"kind": "world", "gen": _config_dict(self.config)})

    @classmethod
    def load(cls, path) -> "WorldModel":
        t, meta = tensorio.load(path)
        if meta.get("kind") != "world":
            raise ValueError(f"{path} is not a world file")
        return cls(GenConfig(**meta["gen"]), t["user_factors"], t["item_click_factors"],
                   t["item_read_factors"], t["item_quality"], t["clickbait"].astype(bool),
                   t["user_features"], t["item_features"])


def _config_dict(cfg: GenConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _truncated_moment(mu, sigma, a, upper: bool):
    """E[exp(X) | X > a] (upper) or E[exp(X) | X <= a] for X ~ N(mu, sigma^2)."""
    if sigma == 0:
        return float(np.exp(mu))
    alpha = (a - mu) / sigma
    scale = np.exp(mu + 0.5 * sigma * sigma)
    if upper:
        return float(scale * ndtr(sigma - alpha) / ndtr(-alpha))
    return float(scale * ndtr(alpha - sigma) / ndtr(alpha))


def duration_means(cfg: GenConfig) -> tuple[float, float]:
    """(mean long-read duration, mean short-read duration) in seconds."""
    a = np.log(cfg.duration_threshold)
    return (_truncated_moment(cfg.long_log_mean, cfg.long_log_std, a, upper=True),
            _truncated_moment(cfg.short_log_mean, cfg.short_log_std, a, upper=False))


def sample_durations(rng: np.random.Generator, long_read: np.ndarray, cfg: GenConfig) -> np.ndarray:
    """Truncated log-normal durations: > threshold for long reads, <= threshold otherwise."""
    long_read = np.asarray(long_read, dtype=bool)
    a = np.log(cfg.duration_threshold)
    u = rng.uniform(size=long_read.shape)
    out = np.empty(long_read.shape)
    for mask, mu, sd, upper in ((long_read, cfg.long_log_mean, cfg.long_log_std, True),
                                (~long_read, cfg.short_log_mean, cfg.short_log_std, False)):
        if not mask.any():
            continue
        if sd == 0:
            if (mu > a) != upper:
                raise ValueError("degenerate duration distribution lies on the wrong side of the threshold")
            x = np.full(mask.sum(), mu)
        else:
            cut = ndtr((a - mu) / sd)
            p = cut + u[mask] * (1.0 - cut) if upper else u[mask] * cut
            p = np.clip(p, 1e-300, 1.0 - 1e-16)
            x = mu + sd * ndtri(p)
            x = np.maximum(x, a) if upper else np.minimum(x, a)
        out[mask] = np.exp(x)
    thr = cfg.duration_threshold
    out[long_read] = np.maximum(out[long_read], np.nextafter(thr, np.inf))
    out[~long_read] = np.minimum(out[~long_read], thr)
    return out


def _nearest(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (np.sum(points ** 2, axis=1)[:, None] - 2.0 * points @ centers.T
          + np.sum(centers ** 2, axis=1)[None, :])
    return np.argmin(d2, axis=1).astype(np.int64)


def generate_world(config: GenConfig, seed: int | None = None) -> WorldModel:
    """Latent factors are cluster centroids plus individual deviations.

    The cluster feature is the nearest centroid to an entity's own factors, so
    it is informative without always revealing the generating cluster.
    Clickbait items are taken first from "baity" publishers, which makes the
    publisher field a strong but imperfect clickbait signal.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng([seed, 100])
    c = config
    d = c.latent_dim
    spread = c.cluster_spread
    # per-coordinate std so that inner products have unit variance overall
    sd = d ** -0.25

    def clustered(n, n_clusters, width):
        centers = rng.normal(0.0, sd * np.sqrt(1.0 - spread ** 2), (n_clusters, width))
        member = rng.integers(0, n_clusters, n)
        return centers[member] + rng.normal(0.0, sd * spread, (n, width)), centers, member

    U, u_centers, _ = clustered(c.num_users, c.user_clusters, d)
    VW, i_centers, i_member = clustered(c.num_items, c.item_clusters, 2 * d)
    V, W = VW[:, :d], VW[:, d:]
    cluster_quality = rng.normal(0.0, c.cvr_item_quality_std, c.item_clusters)
    quality = (np.sqrt(c.quality_cluster_share) * cluster_quality[i_member]
               + np.sqrt(1.0 - c.quality_cluster_share) * rng.normal(0.0, c.cvr_item_quality_std, c.num_items))
    publisher = rng.integers(0, c.num_publishers, c.num_items)
    baity = np.zeros(c.num_publishers, dtype=bool)
    baity[rng.choice(c.num_publishers, size=int(round(c.clickbait_fraction * c.num_publishers)),
                     replace=False)] = True
    n_bait = int(np.floor(c.clickbait_fraction * c.num_items + 1e-9))
    priority = baity[publisher].astype(np.float64) * c.publisher_bait_signal + rng.uniform(size=c.num_items)
    clickbait = np.zeros(c.num_items, dtype=bool)
    clickbait[np.argsort(-priority, kind="stable")[:n_bait]] = True
    user_feats = np.stack([np.arange(c.num_users), _nearest(U, u_centers),
                           rng.integers(0, c.noise_cardinality, c.num_users)], axis=1)
    item_feats = np.stack([np.arange(c.num_items), _nearest(VW, i_centers), publisher], axis=1)
    return WorldModel(c, U, V, W, quality, clickbait, user_feats.astype(np.int64),
                      item_feats.astype(np.int64))


@dataclass
class ImpressionLog:
    user: np.ndarray
    item: np.ndarray
    click: np.ndarray
    long_read: np.ndarray
    duration: np.ndarray

    def __len__(self):
        return int(self.user.shape[0])

    @property
    def clicked_durations(self):
        return self.duration[self.click == 1]


def simulate_logs(world: WorldModel, config: GenConfig | None = None, impressions_per_user: int | None = None,
                  stream: int = 0, ctr_override: float | None = None,
                  cvr_override: float | None = None) -> ImpressionLog:
    """Impressions drawn uniformly over items, one seeded stream per user.

    ``stream`` separates independent log draws (train vs test) from the same
    world. The overrides force constant ctr* / cvr* for degenerate checks.
    """
    config = config or world.config
    n_imp = config.impressions_per_user if impressions_per_user is None else impressions_per_user
    users, items, clicks, longs, durs = [], [], [], [], []
    for u in range(world.num_users):
        rng = np.random.default_rng([config.seed, 200, stream, u])
        it = rng.integers(0, world.num_items, n_imp)
        uu = np.full(n_imp, u)
        ctr = world.ctr(uu, it) if ctr_override is None else np.full(n_imp, ctr_override)
        cvr = world.cvr(uu, it) if cvr_override is None else np.full(n_imp, cvr_override)
        click = rng.uniform(size=n_imp) < ctr
        long_read = click & (rng.uniform(size=n_imp) < cvr)
        dur = np.where(click, sample_durations(rng, long_read, config), 0.0)
        users.append(uu)
        items.append(it)
        clicks.append(click)
        longs.append(long_read)
        durs.append(dur)
    cat = np.concatenate
    return ImpressionLog(cat(users).astype(np.int64), cat(items).astype(np.int64),
                         cat(clicks).astype(np.int64), cat(longs), cat(durs))


def click_frequencies(logs: ImpressionLog, num_items: int) -> np.ndarray:
    return np.bincount(logs.item[logs.click == 1], minlength=num_items).astype(np.float64)


def negative_distribution(click_counts, smoothing: float) -> np.ndarray:
    w = np.asarray(click_counts, dtype=np.float64) + smoothing
    if np.any(w < 0):
        raise ValueError("click counts must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("all click counts are zero and smoothing is 0: nothing to sample")
    return w / total


def sample_negatives(click_counts, n: int, smoothing: float, rng: np.random.Generator) -> np.ndarray:
    """n iid item ids with P(item) proportional to click_count + smoothing."""
    p = negative_distribution(click_counts, smoothing)
    return rng.choice(p.shape[0], size=n, p=p).astype(np.int64)


@dataclass
class BuildResult:
    dataset: Batch
    truth: dict
    warnings: list[str] = field(default_factory=list)

    @property
    def status(self) -> str:
        return "warning" if self.warnings else "ok"


def build_training_set(logs: ImpressionLog, world: WorldModel, config: GenConfig | None = None,
                       click_counts: np.ndarray | None = None, stream: int = 0) -> BuildResult:
    """Clicked impressions as positives plus ``negative_ratio`` frequency-sampled
    negatives per positive, each paired with the positive's user.

    Records are ordered by user: that user's clicked impressions in log order,
    then their negatives.
    """
    config = config or world.config
    if len(logs) == 0:
        raise ValueError("impression log is empty")
    if click_counts is None:
        click_counts = click_frequencies(logs, world.num_items)
    rng = np.random.default_rng([config.seed, 300, stream])
    warnings = []
    pos = np.flatnonzero(logs.click == 1)
    if pos.size == 0:
        warnings.append("no clicked impressions: dataset has no positives")
        log.warning(warnings[-1])
    pos_users = logs.user[pos]
    n_neg = pos.size * config.negative_ratio
    neg_items = sample_negatives(click_counts, n_neg, config.negative_smoothing, rng) if n_neg else \
        np.zeros(0, dtype=np.int64)
    neg_users = np.repeat(pos_users, config.negative_ratio)
    users = np.concatenate([pos_users, neg_users])
    items = np.concatenate([logs.item[pos], neg_items])
    clicks = np.concatenate([np.ones(pos.size, np.int64), np.zeros(n_neg, np.int64)])
    durations = np.concatenate([logs.duration[pos], np.zeros(n_neg)])
    order = np.lexsort((np.arange(users.size), 1 - clicks, users))
    users, items, clicks, durations = users[order], items[order], clicks[order], durations[order]
    dense = world.dense_features(users, items, rng) if users.size else np.zeros((0, DENSE_DIM))
    batch = Batch(world.user_features[users].reshape(-1, 3), world.item_features[items].reshape(-1, 3),
                  dense, clicks, durations, config.duration_threshold)
    truth = {
        "user": users, "item": items, "ctr": world.ctr(users, items), "cvr": world.cvr(users, items),
        "expected_duration": world.expected_duration(users, items), "clickbait": world.clickbait[items],
    }
    return BuildResult(batch.validate(), truth, warnings)


def write_truth(truth: dict, path):
    """Ground-truth sidecar: one JSON object per dataset record, same order."""
    with open(path, "w") as fh:
        for u, i, ctr, cvr, ed, cb in zip(truth["user"].tolist(), truth["item"].tolist(), truth["ctr"].tolist(),
                                          truth["cvr"].tolist(), truth["expected_duration"].tolist(),
                                          truth["clickbait"].tolist()):
            fh.write(json.dumps({"user": u, "item": i, "ctr": ctr, "cvr": cvr, "expected_duration": ed,
                                 "clickbait": bool(cb)}, separators=(",", ":")))
            fh.write("\n")


def read_truth(path) -> dict:
    cols = {k: [] for k in ("user", "item", "ctr", "cvr", "expected_duration", "clickbait")}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            for k in cols:
                cols[k].append(rec[k])
    return {"user": np.array(cols["user"], dtype=np.int64), "item": np.array(cols["item"], dtype=np.int64),
            "ctr": np.array(cols["ctr"]), "cvr": np.array(cols["cvr"]),
            "expected_duration": np.array(cols["expected_duration"]),
            "clickbait": np.array(cols["clickbait"], dtype=bool)}


@dataclass
class GeneratedData:
    world: WorldModel
    train: BuildResult
    test: BuildResult
    train_logs: ImpressionLog
    test_logs: ImpressionLog


def generate_all(config: GenConfig) -> GeneratedData:
    """World, train/test logs from disjoint impression streams, and both datasets.

    Test negatives are drawn from training click frequencies, as they would
    be known at training time.
    """
    world = generate_world(config)
    train_logs = simulate_logs(world, config, stream=0)
    test_logs = simulate_logs(world, config, config.test_impressions_per_user, stream=1)
    counts = click_frequencies(train_logs, world.num_items)
    train = build_training_set(train_logs, world, config, counts, stream=0)
    test = build_training_set(test_logs, world, config, counts, stream=1)
    return GeneratedData(world, train, test, train_logs, test_logs)
