"""Synthetic impression logs with a controllable visual signal.

Click probabilities follow sigmoid(id_weight * <u, a> + gamma * <u_vis, z_img>
+ noise + offset): the first term is learnable from IDs alone, the second
only through image latents, and the offset is calibrated so the empirical
CTR matches the configured base rate. Test impressions can target cold items
whose IDs never occur in training but whose image latents are drawn from the
training distribution.

Samples serialize one JSON object per line (integer id arrays plus label);
image latents use the binary float32 matrix format from ``dicm.images``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .images import ImageFeatureStore

SAMPLE_KEYS = ("user", "scenario", "ad", "ad_category", "ad_image",
               "behavior_items", "behavior_images", "label", "day")


@dataclass
class Sample:
    user: int
    scenario: int
    ad: int
    ad_category: int
    ad_image: int
    behavior_items: list
    behavior_images: list
    label: int
    day: int


@dataclass
class SampleGroup:
    """Per-user common features stored once, impression leftovers per member."""

    user: int
    behavior_items: list
    behavior_images: list
    rest: list  # (scenario, ad, ad_category, ad_image, label, day)


@dataclass
class SyntheticConfig:
    users: int = 100
    items: int = 400
    images: int = 400
    scenarios: int = 4
    categories: int = 8
    latent_dim: int = 8
    behaviors_mean: float = 60.0
    behaviors_cap: int = 200
    post_filter_max: int = 32
    behavior_sharpness: float = 2.0
    train_days: int = 3
    test_days: int = 1
    impressions_per_user_day: int = 8
    base_ctr: float = 0.3
    gamma: float = 2.0
    id_weight: float = 1.0
    noise: float = 0.3
    cold_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.users, self.items, self.images, self.scenarios,
               self.categories, self.latent_dim) < 1:
            raise ValueError("all counts must be >= 1")
        if self.images > self.items:
            raise ValueError("images must be <= items (items map onto images)")
        if not 0.0 <= self.cold_fraction <= 1.0:
            raise ValueError("cold_fraction must be in [0, 1]")

    @property
    def cold_items(self):
        return max(1, int(round(self.cold_fraction * self.items))) if self.cold_fraction > 0 else 0

    @property
    def ad_vocab(self):
        return self.items + self.cold_items

    @property
    def image_count(self):
        return self.images + self.cold_items


@dataclass
class GroundTruth:
    user_pref: np.ndarray
    user_visual: np.ndarray
    item_vec: np.ndarray
    item_image: np.ndarray
    item_category: np.ndarray
    offset: float
    train_probs: np.ndarray
    test_probs: np.ndarray
    behaviors_full: list


class GeneratedData(NamedTuple):
    train: list
    test: list
    store: ImageFeatureStore
    truth: GroundTruth


def filter_behaviors(behaviors, b_max):
    """Keep the most recent ``b_max`` entries, order preserved."""
    if b_max < 0:
        raise ValueError("b_max must be >= 0")
    return list(behaviors[-b_max:]) if len(behaviors) > b_max else list(behaviors)


def _calibrate_offset(raw_logits, base_ctr):
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(raw_logits + mid)))) < base_ctr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(cfg):
    """Build (train, test, image store, ground truth) deterministically."""
    rng = np.random.default_rng(cfg.seed)
    k = cfg.latent_dim
    scale = 1.0 / np.sqrt(k)

    latents = rng.standard_normal((cfg.image_count, k)).astype(np.float32)
    store = ImageFeatureStore(latents)
    z = latents.astype(np.float64)

    user_pref = rng.standard_normal((cfg.users, k))
    user_visual = rng.standard_normal((cfg.users, k))
    item_vec = rng.standard_normal((cfg.ad_vocab, k))
    item_image = np.concatenate([
        np.arange(cfg.items, dtype=np.int64) % cfg.images,
        cfg.images + np.arange(cfg.cold_items, dtype=np.int64),
    ])
    cat_centers = rng.standard_normal((cfg.categories, k))
    item_category = np.argmax(z[item_image] @ cat_centers.T, axis=1).astype(np.int64)

    # user histories: visually-biased clicks over regular items, capped; the
    # history reveals the visual preference vector and nothing else, so with
    # gamma = 0 behaviors carry no label signal at all
    behaviors_full = []
    for u in range(cfg.users):
        n = int(np.clip(rng.poisson(cfg.behaviors_mean), 1, cfg.behaviors_cap))
        affinity = user_visual[u] @ z[item_image[: cfg.items]].T * scale
        w = np.exp(cfg.behavior_sharpness * (affinity - affinity.max()))
        w /= w.sum()
        picks = rng.choice(cfg.items, size=min(n, cfg.items), replace=False, p=w)
        behaviors_full.append(picks.tolist())

    def draw_impressions(day, test):
        recs = []
        for u in range(cfg.users):
            n_ads = min(cfg.impressions_per_user_day, cfg.ad_vocab)
            if test and cfg.cold_items > 0:
                cold_mask = rng.random(n_ads) < cfg.cold_fraction
                ads = np.where(
                    cold_mask,
                    cfg.items + rng.integers(0, cfg.cold_items, size=n_ads),
                    rng.integers(0, cfg.items, size=n_ads),
                )
                # disjoint (user, ad, day): dedupe within the day
                ads = np.unique(ads)
            else:
                ads = rng.choice(cfg.items, size=n_ads, replace=False)
            for a in ads:
                recs.append((u, int(a), int(rng.integers(0, cfg.scenarios)), day))
        return recs

    train_recs, test_recs = [], []
    for day in range(cfg.train_days):
        train_recs.extend(draw_impressions(day, test=False))
    for day in range(cfg.train_days, cfg.train_days + cfg.test_days):
        test_recs.extend(draw_impressions(day, test=True))

    def raw_logit(recs):
        users = np.array([r[0] for r in recs])
        ads = np.array([r[1] for r in recs])
        id_term = np.einsum("ij,ij->i", user_pref[users], item_vec[ads]) * scale
        vis_term = np.einsum("ij,ij->i", user_visual[users], z[item_image[ads]]) * scale
        eps = rng.standard_normal(len(recs))
        return cfg.id_weight * id_term + cfg.gamma * vis_term + cfg.noise * eps

    logits_train = raw_logit(train_recs)
    logits_test = raw_logit(test_recs)
    offset = _calibrate_offset(np.concatenate([logits_train, logits_test]), cfg.base_ctr)
    probs_train = 1.0 / (1.0 + np.exp(-(logits_train + offset)))
    probs_test = 1.0 / (1.0 + np.exp(-(logits_test + offset)))
    labels_train = (rng.random(len(train_recs)) < probs_train).astype(int)
    labels_test = (rng.random(len(test_recs)) < probs_test).astype(int)

    def build(recs, labels):
        out = []
        for (u, a, sc, day), y in zip(recs, labels):
            items = filter_behaviors(behaviors_full[u], cfg.post_filter_max)
            out.append(Sample(
                user=u,
                scenario=sc,
                ad=a,
                ad_category=int(item_category[a]),
                ad_image=int(item_image[a]),
                behavior_items=list(items),
                behavior_images=[int(item_image[i]) for i in items],
                label=int(y),
                day=day,
            ))
        return out

    truth = GroundTruth(user_pref, user_visual, item_vec, item_image,
                        item_category, offset, probs_train, probs_test,
                        behaviors_full)
    return GeneratedData(build(train_recs, labels_train),
                         build(test_recs, labels_test), store, truth)


# ---------------------------------------------------------------------------
# common-feature grouping
# ---------------------------------------------------------------------------


def group_common_features(samples):
    """Gather samples into per-user groups sharing the behavior lists.

    Grouping key includes the behavior lists so regrouping is lossless even
    if one user's history differs between samples.
    """
    groups, index = [], {}
    for s in samples:
        key = (s.user, tuple(s.behavior_items), tuple(s.behavior_images))
        if key not in index:
            index[key] = len(groups)
            groups.append(SampleGroup(s.user, list(s.behavior_items),
                                      list(s.behavior_images), []))
        groups[index[key]].rest.append(
            (s.scenario, s.ad, s.ad_category, s.ad_image, s.label, s.day)
        )
    return groups


def ungroup(groups):
    out = []
    for g in groups:
        for sc, a, cat, img, y, day in g.rest:
            out.append(Sample(g.user, sc, a, cat, img,
                              list(g.behavior_items), list(g.behavior_images), y, day))
    return out


def sample_int_count(s):
    """Number of integers in one encoded sample record."""
    return 7 + len(s.behavior_items) + len(s.behavior_images)


def ungrouped_bytes(samples, int_bytes=4):
    return int_bytes * sum(sample_int_count(s) for s in samples)


def grouped_bytes(groups, int_bytes=4):
    total = 0
    for g in groups:
        total += 1 + len(g.behavior_items) + len(g.behavior_images) + 6 * len(g.rest)
    return int_bytes * total


# ---------------------------------------------------------------------------
# batching and files
# ---------------------------------------------------------------------------


def minibatches(samples, batch_size, seed, epoch=0):
    """Deterministically shuffled batches; the final short batch is emitted."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([int(seed) & 0xFFFFFFFF, epoch]).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield [samples[i] for i in order[start : start + batch_size]]


def write_samples(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {k: getattr(s, k) for k in SAMPLE_KEYS}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_samples(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{line_no}: bad sample record: {e}") from e
            out.append(Sample(**{k: rec[k] for k in SAMPLE_KEYS}))
    return out
