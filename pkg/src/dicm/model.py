"""CTR networks: ID embeddings, trainable image embedding net, behavior
aggregators, MLP head, and the two-tower pre-rank variant.

Parameters are named tensors; the name prefix decides the checkpoint group
and which side of the cluster owns them (``img/`` trains on servers,
``id_emb/`` is sharded by key, everything else replicates on workers).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter

AGGREGATOR_KINDS = ("concat", "max", "sum", "attn", "multiquery-attn")

GROUP_ID = "id-embeddings"
GROUP_IMAGE = "image-embedding-model"
GROUP_MLP = "mlp"
GROUP_ATTN = "aggregator-attention"
GROUPS = (GROUP_ID, GROUP_IMAGE, GROUP_MLP, GROUP_ATTN)


def group_of(name):
    if name.startswith("id_emb/"):
        return GROUP_ID
    if name.startswith("img/"):
        return GROUP_IMAGE
    if name.startswith("attn/"):
        return GROUP_ATTN
    return GROUP_MLP


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab: int
    multi: bool = False


@dataclass
class FeatureSchema:
    """ID fields plus the dimension settings shared by every model."""

    fields: list[FieldSpec]
    d_id: int = 12
    d_raw: int = 64
    d_img: int = 12
    b_max: int = 32
    query_fields: tuple = ("ad", "ad_category")

    def __post_init__(self):
        if min(self.d_id, self.d_raw, self.d_img, self.b_max) < 1:
            raise ValueError("schema dimensions must be >= 1")
        for f in self.fields:
            if f.vocab < 1:
                raise ValueError(f"field {f.name}: vocabulary must be >= 1")

    def field(self, name):
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"schema has no field {name!r}")


@dataclass
class AggregatorSpec:
    kind: str = "sum"
    attention_hidden: int = 32
    normalize: bool = True  # softmax over attention scores; False = raw weights

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}; use one of {AGGREGATOR_KINDS}")

    def output_width(self, d_img, b_max):
        if self.kind == "concat":
            return d_img * b_max
        if self.kind == "multiquery-attn":
            return 2 * d_img
        return d_img


def image_net_widths(d_raw, d_img):
    """Hidden widths of the trainable image net, scaled from the input dim
    (4096 -> 256 -> 64 -> 12 at the full-size configuration)."""
    return max(d_raw // 16, d_img), max(d_raw // 64, d_img)


def _rng_for(seed, name):
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _init_linear(params, seed, prefix, n_in, n_out, alpha=True):
    rng = _rng_for(seed, prefix + "w")
    params[prefix + "w"] = Parameter(
        rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in)), prefix + "w"
    )
    params[prefix + "b"] = Parameter(np.zeros(n_out), prefix + "b")
    if alpha:
        params[prefix + "a"] = Parameter(np.full(n_out, 0.25), prefix + "a")


def _layer(params, prefix, x, activate):
    out = ag.linear(x, params[prefix + "w"], params[prefix + "b"])
    if activate:
        out = ag.prelu(out, params[prefix + "a"])
    return out


def image_net_apply(params, x):
    """Trainable image compressor forward over any parameter set holding the
    ``img/`` tensors (models and server replicas share this)."""
    h = _layer(params, "img/0/", x, activate=True)
    h = _layer(params, "img/1/", h, activate=True)
    return _layer(params, "img/2/", h, activate=False)


def embed_field(table, ids):
    """One-hot id -> the table row; multi-hot id set -> sum of rows."""
    table_arr = table.data if isinstance(table, ag.Tensor) else np.asarray(table)
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    if ids.size and (ids.min() < 0 or ids.max() >= table_arr.shape[0]):
        bad = ids[(ids < 0) | (ids >= table_arr.shape[0])][0]
        raise KeyError(f"id {bad} outside vocabulary of size {table_arr.shape[0]}")
    return table_arr[ids].sum(axis=0)


# ---------------------------------------------------------------------------
# batch encoding
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Index arrays for one minibatch, shared by local and distributed paths."""

    size: int
    labels: np.ndarray
    onehot: dict  # field -> ids [B]
    multihot: dict  # field -> (flat ids [R_f], segment [R_f])
    ad_image_ids: np.ndarray  # [B]
    beh_image_ids: np.ndarray  # [R]
    beh_seg: np.ndarray
    beh_pos: np.ndarray
    unique_images: np.ndarray  # sorted ids the model needs embedded

    def unique_field_ids(self, fname):
        if fname in self.onehot:
            return np.unique(self.onehot[fname])
        return np.unique(self.multihot[fname][0])


def encode_batch(samples, model):
    """Build the index arrays the graph needs; behavior lists are capped to
    the schema's maximum, keeping the most recent entries."""
    schema = model.schema
    b_max = schema.b_max
    onehot, multihot = {}, {}
    for f in schema.fields:
        if f.multi:
            flat, seg = [], []
            for i, s in enumerate(samples):
                ids = getattr(s, f.name)[-b_max:]
                flat.extend(ids)
                seg.extend([i] * len(ids))
            multihot[f.name] = (np.array(flat, dtype=np.int64), np.array(seg, dtype=np.int64))
        else:
            onehot[f.name] = np.array([getattr(s, f.name) for s in samples], dtype=np.int64)
    beh_ids, beh_seg, beh_pos = [], [], []
    for i, s in enumerate(samples):
        imgs = s.behavior_images[-b_max:]
        beh_ids.extend(imgs)
        beh_seg.extend([i] * len(imgs))
        beh_pos.extend(range(len(imgs)))
    ad_img = np.array([s.ad_image for s in samples], dtype=np.int64)
    beh_ids = np.array(beh_ids, dtype=np.int64)
    needed = []
    if model.use_ad_image:
        needed.append(ad_img)
    if model.use_behavior_images:
        needed.append(beh_ids)
    unique = np.unique(np.concatenate(needed)) if needed else np.array([], dtype=np.int64)
    return Batch(
        size=len(samples),
        labels=np.array([s.label for s in samples], dtype=np.float64),
        onehot=onehot,
        multihot=multihot,
        ad_image_ids=ad_img,
        beh_image_ids=beh_ids,
        beh_seg=np.array(beh_seg, dtype=np.int64),
        beh_pos=np.array(beh_pos, dtype=np.int64),
        unique_images=unique,
    )


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _attention_pool(params, prefix, query_vecs, beh_rows, seg, n, normalize):
    """Weighted sum per sample; weights from a small net on [query || key]."""
    q = ag.rows(query_vecs, seg)
    h = _layer(params, prefix + "0/", ag.hstack([q, beh_rows]), activate=True)
    scores = ag.squeeze1(ag.linear(h, params[prefix + "1/w"], params[prefix + "1/b"]))
    if normalize:
        weights = ag.segment_softmax(scores, seg, n)
    else:
        weights = scores
    return ag.segment_sum(ag.col_scale(beh_rows, weights), seg, n)


def aggregate_graph(spec, params, beh_rows, seg, pos, n, b_max, ad_img_vec, ad_id_query):
    if spec.kind == "sum":
        return ag.segment_sum(beh_rows, seg, n)
    if spec.kind == "max":
        return ag.segment_max(beh_rows, seg, n)
    if spec.kind == "concat":
        return ag.scatter_concat(beh_rows, seg, pos, n, b_max)
    if spec.kind == "attn":
        return _attention_pool(params, "attn/img/", ad_img_vec, beh_rows, seg, n, spec.normalize)
    img_pool = _attention_pool(params, "attn/img/", ad_img_vec, beh_rows, seg, n, spec.normalize)
    id_pool = _attention_pool(params, "attn/id/", ad_id_query, beh_rows, seg, n, spec.normalize)
    return ag.hstack([img_pool, id_pool])


def aggregate(behavior_embs, ad_img_emb, ad_id_query, spec, params=None, b_max=32):
    """Pool a single sample's behavior embeddings into one vector.

    Attentive kinds need the attention-net parameters of a model built with
    matching dimensions. An empty behavior list yields the zero vector of the
    aggregator's output width.
    """
    if len(behavior_embs) > b_max:
        raise ValueError(f"{len(behavior_embs)} behaviors exceed the cap {b_max}")
    d = len(ad_img_emb)
    if len(behavior_embs) == 0:
        return np.zeros(spec.output_width(d, b_max))
    rows_arr = np.asarray(behavior_embs, dtype=np.float64)
    seg = np.zeros(len(behavior_embs), dtype=np.int64)
    pos = np.arange(len(behavior_embs), dtype=np.int64)
    out = aggregate_graph(
        spec,
        params or {},
        ag.constant(rows_arr),
        seg,
        pos,
        1,
        b_max,
        ag.constant(np.asarray(ad_img_emb, dtype=np.float64)[None, :]),
        ag.constant(np.asarray(ad_id_query, dtype=np.float64)[None, :]),
    )
    return out.data[0]


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


class DicmModel:
    """Embedding&MLP CTR net with optional ad-image and behavior-image paths."""

    def __init__(
        self,
        schema,
        aggregator,
        extractor,
        seed=0,
        mlp_widths=(128, 64),
        use_ad_image=True,
        use_behavior_images=True,
    ):
        if use_behavior_images and aggregator.kind in ("attn", "multiquery-attn") and not use_ad_image:
            raise ValueError(f"aggregator {aggregator.kind!r} needs the ad image as query")
        if aggregator.kind == "multiquery-attn" and not any(
            q in [f.name for f in schema.fields] for q in schema.query_fields
        ):
            raise ValueError("multiquery-attn needs at least one ad-side query field")
        if extractor.out_dim != schema.d_raw:
            raise ValueError(
                f"extractor emits {extractor.out_dim}-D features, schema expects {schema.d_raw}"
            )
        self.schema = schema
        self.aggregator = aggregator
        self.extractor = extractor
        self.seed = seed
        self.mlp_widths = tuple(mlp_widths)
        self.use_ad_image = use_ad_image
        self.use_behavior_images = use_behavior_images
        self.params = {}
        self._build_params()

    # -- construction

    def _id_query_width(self):
        names = [f.name for f in self.schema.fields]
        return sum(self.schema.d_id for q in self.schema.query_fields if q in names)

    def mlp_input_width(self):
        s = self.schema
        w = len(s.fields) * s.d_id
        if self.use_ad_image:
            w += s.d_img
        if self.use_behavior_images:
            w += self.aggregator.output_width(s.d_img, s.b_max)
        return w

    def _build_params(self):
        s = self.schema
        for f in s.fields:
            name = f"id_emb/{f.name}"
            rng = _rng_for(self.seed, name)
            self.params[name] = Parameter(0.05 * rng.standard_normal((f.vocab, s.d_id)), name)
        h1, h2 = image_net_widths(s.d_raw, s.d_img)
        _init_linear(self.params, self.seed, "img/0/", s.d_raw, h1)
        _init_linear(self.params, self.seed, "img/1/", h1, h2)
        _init_linear(self.params, self.seed, "img/2/", h2, s.d_img, alpha=False)
        if self.use_behavior_images and self.aggregator.kind in ("attn", "multiquery-attn"):
            hidden = self.aggregator.attention_hidden
            _init_linear(self.params, self.seed, "attn/img/0/", 2 * s.d_img, hidden)
            _init_linear(self.params, self.seed, "attn/img/1/", hidden, 1, alpha=False)
            if self.aggregator.kind == "multiquery-attn":
                qw = self._id_query_width()
                _init_linear(self.params, self.seed, "attn/id/0/", qw + s.d_img, hidden)
                _init_linear(self.params, self.seed, "attn/id/1/", hidden, 1, alpha=False)
        widths = [self.mlp_input_width(), *self.mlp_widths]
        for i in range(len(widths) - 1):
            _init_linear(self.params, self.seed, f"mlp/{i}/", widths[i], widths[i + 1])
        _init_linear(self.params, self.seed, f"mlp/{len(widths) - 1}/", widths[-1], 1, alpha=False)

    # -- parameter bookkeeping

    def worker_param_names(self):
        """Dense parameters replicated on every worker (MLP + attention)."""
        return sorted(n for n in self.params if group_of(n) in (GROUP_MLP, GROUP_ATTN))

    def image_param_names(self):
        return sorted(n for n in self.params if group_of(n) == GROUP_IMAGE)

    def table_fields(self):
        return [f.name for f in self.schema.fields]

    # -- graphs

    def image_net_graph(self, raw):
        """Trainable compressor: raw features [k, d_raw] -> embeddings [k, d_img]."""
        return image_net_apply(self.params, raw)

    def embed_images(self, raw_matrix):
        return self.image_net_graph(ag.constant(raw_matrix)).data

    def logits_graph(self, batch, image_matrix, id_rows_fn):
        """Forward pass to logits [B]; ``image_matrix`` is a node of embeddings
        aligned with ``batch.unique_images``; ``id_rows_fn(field, ids)`` yields
        embedding rows for global ids."""
        s = self.schema
        parts, field_vecs = [], {}
        for f in s.fields:
            if f.multi:
                flat, seg = batch.multihot[f.name]
                vec = ag.segment_sum(id_rows_fn(f.name, flat), seg, batch.size)
            else:
                vec = id_rows_fn(f.name, batch.onehot[f.name])
            field_vecs[f.name] = vec
            parts.append(vec)
        ad_vec = None
        if self.use_ad_image:
            local = np.searchsorted(batch.unique_images, batch.ad_image_ids)
            ad_vec = ag.rows(image_matrix, local)
            parts.append(ad_vec)
        if self.use_behavior_images:
            local = np.searchsorted(batch.unique_images, batch.beh_image_ids)
            beh_rows = ag.rows(image_matrix, local)
            query = None
            if self.aggregator.kind == "multiquery-attn":
                qparts = [field_vecs[q] for q in s.query_fields if q in field_vecs]
                query = ag.hstack(qparts) if len(qparts) > 1 else qparts[0]
            parts.append(
                aggregate_graph(
                    self.aggregator,
                    self.params,
                    beh_rows,
                    batch.beh_seg,
                    batch.beh_pos,
                    batch.size,
                    s.b_max,
                    ad_vec,
                    query,
                )
            )
        x = ag.hstack(parts) if len(parts) > 1 else parts[0]
        for i in range(len(self.mlp_widths)):
            x = _layer(self.params, f"mlp/{i}/", x, activate=True)
        return ag.squeeze1(ag.linear(x, self.params[f"mlp/{len(self.mlp_widths)}/w"],
                                     self.params[f"mlp/{len(self.mlp_widths)}/b"]))

    def local_image_matrix(self, batch, store):
        raw = store.raw_features(batch.unique_images, self.extractor)
        return self.image_net_graph(ag.constant(raw))

    def local_id_rows(self, fname, ids):
        return ag.rows(self.params[f"id_emb/{fname}"], ids)


def forward_ctr(model, samples, store):
    """Score samples with local parameters -> (probabilities, logits)."""
    batch = encode_batch(samples, model)
    logits = model.logits_graph(batch, model.local_image_matrix(batch, store),
                                model.local_id_rows)
    z = logits.data
    return 1.0 / (1.0 + np.exp(-z)), z


class PrerankModel:
    """Two-tower variant: user and ad representations scored by inner product.

    Behavior images enter the user tower through sum pooling; the ad image
    enters the ad tower. Both towers end at the same representation width.
    """

    def __init__(
        self,
        schema,
        extractor,
        seed=0,
        user_fields=("user", "behavior_items"),
        ad_fields=("ad", "ad_category"),
        tower_hidden=64,
        rep_dim=16,
        use_images=True,
    ):
        if extractor.out_dim != schema.d_raw:
            raise ValueError(
                f"extractor emits {extractor.out_dim}-D features, schema expects {schema.d_raw}"
            )
        names = [f.name for f in schema.fields]
        for fn in (*user_fields, *ad_fields):
            if fn not in names:
                raise ValueError(f"tower field {fn!r} missing from schema")
        self.schema = schema
        self.extractor = extractor
        self.seed = seed
        self.user_fields = tuple(user_fields)
        self.ad_fields = tuple(ad_fields)
        self.tower_hidden = tower_hidden
        self.rep_dim = rep_dim
        self.use_images = use_images
        self.use_ad_image = use_images
        self.use_behavior_images = use_images
        self.aggregator = AggregatorSpec("sum")
        self.params = {}
        self._build_params()

    def _tower_input_width(self, fields, image_width):
        return len(fields) * self.schema.d_id + (image_width if self.use_images else 0)

    def _build_params(self):
        s = self.schema
        for f in s.fields:
            if f.name not in self.user_fields and f.name not in self.ad_fields:
                continue
            name = f"id_emb/{f.name}"
            rng = _rng_for(self.seed, name)
            self.params[name] = Parameter(0.05 * rng.standard_normal((f.vocab, s.d_id)), name)
        h1, h2 = image_net_widths(s.d_raw, s.d_img)
        _init_linear(self.params, self.seed, "img/0/", s.d_raw, h1)
        _init_linear(self.params, self.seed, "img/1/", h1, h2)
        _init_linear(self.params, self.seed, "img/2/", h2, s.d_img, alpha=False)
        for prefix, fields in (("user_tower/", self.user_fields), ("ad_tower/", self.ad_fields)):
            _init_linear(self.params, self.seed, prefix + "0/",
                         self._tower_input_width(fields, s.d_img), self.tower_hidden)
            _init_linear(self.params, self.seed, prefix + "1/",
                         self.tower_hidden, self.rep_dim, alpha=False)

    worker_param_names = DicmModel.worker_param_names
    image_param_names = DicmModel.image_param_names
    image_net_graph = DicmModel.image_net_graph
    embed_images = DicmModel.embed_images
    local_image_matrix = DicmModel.local_image_matrix
    local_id_rows = DicmModel.local_id_rows

    def table_fields(self):
        return [f.name for f in self.schema.fields
                if f.name in self.user_fields or f.name in self.ad_fields]

    def _field_vec(self, batch, fname, id_rows_fn):
        f = self.schema.field(fname)
        if f.multi:
            flat, seg = batch.multihot[fname]
            return ag.segment_sum(id_rows_fn(fname, flat), seg, batch.size)
        return id_rows_fn(fname, batch.onehot[fname])

    def _tower(self, prefix, parts):
        x = ag.hstack(parts) if len(parts) > 1 else parts[0]
        h = _layer(self.params, prefix + "0/", x, activate=True)
        return _layer(self.params, prefix + "1/", h, activate=False)

    def tower_reps(self, batch, image_matrix, id_rows_fn):
        user_parts = [self._field_vec(batch, fn, id_rows_fn) for fn in self.user_fields]
        ad_parts = [self._field_vec(batch, fn, id_rows_fn) for fn in self.ad_fields]
        if self.use_images:
            beh_local = np.searchsorted(batch.unique_images, batch.beh_image_ids)
            user_parts.append(
                ag.segment_sum(ag.rows(image_matrix, beh_local), batch.beh_seg, batch.size)
            )
            ad_local = np.searchsorted(batch.unique_images, batch.ad_image_ids)
            ad_parts.append(ag.rows(image_matrix, ad_local))
        return self._tower("user_tower/", user_parts), self._tower("ad_tower/", ad_parts)

    def logits_graph(self, batch, image_matrix, id_rows_fn):
        user_rep, ad_rep = self.tower_reps(batch, image_matrix, id_rows_fn)
        if user_rep.data.shape != ad_rep.data.shape:
            raise ValueError(
                f"tower widths differ: user {user_rep.data.shape} vs ad {ad_rep.data.shape}"
            )
        return ag.rowwise_dot(user_rep, ad_rep)


def forward_prerank(model, samples, store):
    """Two-tower scores (inner products) -> (probabilities, scores)."""
    batch = encode_batch(samples, model)
    scores = model.logits_graph(batch, model.local_image_matrix(batch, store),
                                model.local_id_rows)
    z = scores.data
    return 1.0 / (1.0 + np.exp(-z)), z
