"""Synchronous in-process training cluster.

Workers and servers are actors owning their parameter state; everything they
exchange crosses a channel that serializes to bytes, meters traffic, and
deserializes on the far side. One iteration runs in fixed phases:

  1. every worker requests image embeddings and ID-parameter rows for its
     sub-batch from the owning servers,
  2. servers answer, embedding each distinct image at most once per iteration,
  3. workers run forward/backward and push embedding and ID gradients back,
     sending their dense-model gradient to the root worker,
  4. the root worker sums dense gradients in ascending worker order and
     broadcasts the total; every worker applies the same optimizer step,
  5. servers sum pushed gradients per key in ascending worker order, backprop
     the cached embedding passes, all-reduce the shared image-net gradient
     through the root server, and step their replicas identically,
  6. every node acknowledges the iteration barrier to the scheduler.

All reductions run in ascending node-id and sorted-key order, so a run is
bit-reproducible and server replicas stay bit-identical; the single-process
trainer on the concatenated batch is the numerical reference.
"""

from __future__ import annotations

import copy
import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import optim, protocol
from .accounting import batch_stats, id_param_bytes
from .model import encode_batch, image_net_apply
from .protocol import (Barrier, EmbedGradPush, EmbedRequest, EmbedResponse,
                       IdParamPull, IdParamPush, IdParamResponse,
                       ProtocolError, ServerSync, WorkerSync)
from .training import batch_loss_graph
from . import autograd as ag

MODES = ("ams", "ps-store-in-server", "store-in-worker")


@dataclass
class ClusterConfig:
    workers: int = 4
    servers: int = 2
    mode: str = "ams"
    batch_per_worker: int = 64
    deterministic: bool = True

    def __post_init__(self):
        if self.workers < 1 or self.servers < 1:
            raise ValueError("cluster needs at least one worker and one server")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; use one of {MODES}")


def shard_of(key, n):
    """Stable hash placement of a key onto one of n servers."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not isinstance(key, (str, bytes)):
        key = repr(key)
    if isinstance(key, str):
        key = key.encode()
    return zlib.crc32(key) % n


def _image_key(image_id):
    return f"img/{image_id}"


def _id_key(field_name, row):
    return f"{field_name}/{row}"


def params_digest(params):
    """Order-independent fingerprint of a named parameter set."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = params[name].data if isinstance(params[name], ag.Tensor) else params[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class RunLog:
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    embed_forwards: list = field(default_factory=list)  # per iteration, cluster-wide
    unique_images: list = field(default_factory=list)  # per iteration, union batch
    replica_digests: list = field(default_factory=list)  # per iteration, per server


class ServerNode:
    """Owns an image shard, a shard of ID rows, and a replica of the shared
    image embedding net with its optimizer state."""

    def __init__(self, sid, n_servers, model, store):
        self.sid = sid
        self.n_servers = n_servers
        self.store = store
        self.extractor = model.extractor
        self.d_img = model.schema.d_img
        self.params = {
            n: ag.Parameter(model.params[n].data.copy(), n)
            for n in model.image_param_names()
        }
        self.opt = {n: optim.AdamState.like(p.data) for n, p in self.params.items()}
        self.fields = model.table_fields()
        self.id_rows = {}
        self.id_opt = {}
        self.id_dim = model.schema.d_id
        for f in self.fields:
            table = model.params[f"id_emb/{f}"].data
            for row in range(table.shape[0]):
                if shard_of(_id_key(f, row), n_servers) == sid:
                    key = (f, row)
                    self.id_rows[key] = table[row].copy()
                    self.id_opt[key] = optim.AdamState.like(table[row])
        self.reset_iteration()

    def reset_iteration(self):
        self.embed_cache = {}
        self.tapes = []  # (ids, output node) per forward pass
        self.new_embeds = 0
        self.grad_pushes = {}  # worker id -> EmbedGradPush
        self.id_pushes = {}

    def owns_image(self, image_id):
        return shard_of(_image_key(image_id), self.n_servers) == self.sid

    def handle_embed_request(self, msg):
        ids = msg.ids
        for i in ids:
            if not self.owns_image(int(i)):
                raise ProtocolError(
                    f"server {self.sid}: image {int(i)} belongs to another shard"
                )
        new = np.array([i for i in ids if int(i) not in self.embed_cache], dtype=np.int64)
        if new.size:
            raw = ag.constant(self.store.raw_features(new, self.extractor))
            out = image_net_apply(self.params, raw)
            self.tapes.append((new, out))
            for j, i in enumerate(new):
                self.embed_cache[int(i)] = out.data[j]
            self.new_embeds += new.size
        vectors = (np.stack([self.embed_cache[int(i)] for i in ids])
                   if len(ids) else np.zeros((0, self.d_img)))
        return EmbedResponse(msg.iteration, self.sid, ids, vectors)

    def handle_id_pull(self, msg):
        rows = []
        for fidx, row in msg.keys:
            key = (self.fields[fidx], int(row))
            if key not in self.id_rows:
                raise ProtocolError(f"server {self.sid}: key {key} not on this shard")
            rows.append(self.id_rows[key])
        vectors = np.stack(rows) if rows else np.zeros((0, self.id_dim))
        return IdParamResponse(msg.iteration, self.sid, msg.keys, vectors)

    def collect_push(self, msg):
        table = self.grad_pushes if isinstance(msg, EmbedGradPush) else self.id_pushes
        table[msg.sender] = msg

    def local_model_gradient(self, n_workers, iteration):
        """Sum pushed embedding gradients per id, backprop every cached pass."""
        if set(self.grad_pushes) != set(range(n_workers)) or set(self.id_pushes) != set(
            range(n_workers)
        ):
            raise ProtocolError(
                f"server {self.sid}: missing barrier participant at iteration {iteration}"
            )
        total = {}
        for wid in sorted(self.grad_pushes):
            push = self.grad_pushes[wid]
            for j, i in enumerate(push.ids):
                i = int(i)
                if i in total:
                    total[i] = total[i] + push.vectors[j]
                else:
                    total[i] = push.vectors[j].copy()
        for p in self.params.values():
            p.grad = None
        root = None
        for ids, out in self.tapes:
            seed = np.zeros_like(out.data)
            for j, i in enumerate(ids):
                if int(i) in total:
                    seed[j] = total[int(i)]
            term = ag.vsum(ag.mul_const(out, seed))
            root = term if root is None else ag.add(root, term)
        if root is not None:
            ag.backward(root)
        return {
            n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in self.params.items()
        }

    def apply_model_update(self, summed, lr):
        for n in sorted(self.params):
            optim.adam_step(self.params[n].data, summed[n].reshape(self.params[n].shape),
                            self.opt[n], lr)

    def apply_id_updates(self, n_workers, lr):
        total = {}
        for wid in sorted(self.id_pushes):
            push = self.id_pushes[wid]
            for (fidx, row), vec in zip(push.keys, push.vectors):
                key = (self.fields[fidx], int(row))
                if key in total:
                    total[key] = total[key] + vec
                else:
                    total[key] = vec.copy()
        for key in sorted(total):
            optim.adam_step(self.id_rows[key], total[key], self.id_opt[key], lr)

    def digest(self):
        return params_digest(self.params)


class WorkerNode:
    """Holds a replica of the dense model part and its optimizer state."""

    def __init__(self, wid, model):
        self.wid = wid
        self.model = copy.copy(model)
        self.model.params = {
            n: ag.Parameter(model.params[n].data.copy(), n)
            for n in model.worker_param_names()
        }
        self.fields = model.table_fields()
        self.d_img = model.schema.d_img
        self.d_id = model.schema.d_id
        self.opt = {n: optim.AdamState.like(p.data) for n, p in self.model.params.items()}
        self.batch = None
        self.encoded = None
        self.field_unique = None
        self.loss = None
        self.dense_grads = None
        self.embed_grads = None
        self.id_grads = None

    def start_iteration(self, samples):
        self.batch = samples
        self.encoded = encode_batch(samples, self.model)
        self.field_unique = {
            f: self.encoded.unique_field_ids(f) for f in self.fields
        }

    def needed_images(self):
        return self.encoded.unique_images

    def needed_keys(self):
        """(field index, id) pairs for every distinct id in the sub-batch."""
        pairs = []
        for fidx, f in enumerate(self.fields):
            for i in self.field_unique[f]:
                pairs.append((fidx, int(i)))
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def compute(self, embeddings, id_vectors, denominator, iteration):
        """Forward/backward on leaf tensors pulled from the servers."""
        enc = self.encoded
        for i in enc.unique_images:
            if int(i) not in embeddings:
                raise ProtocolError(
                    f"worker {self.wid}: embedding for image {int(i)} missing "
                    f"at iteration {iteration}"
                )
        img_leaf = ag.constant(
            np.stack([embeddings[int(i)] for i in enc.unique_images])
            if len(enc.unique_images) else np.zeros((0, self.d_img))
        )
        leaves = {}
        for f in self.fields:
            uniq = self.field_unique[f]
            mat = (np.stack([id_vectors[(f, int(i))] for i in uniq])
                   if len(uniq) else np.zeros((0, self.d_id)))
            leaves[f] = (ag.constant(mat), uniq)

        def id_rows_fn(fname, occ_ids):
            leaf, uniq = leaves[fname]
            return ag.rows(leaf, np.searchsorted(uniq, occ_ids))

        for p in self.model.params.values():
            p.grad = None
        loss, _ = batch_loss_graph(self.model, enc, img_leaf, id_rows_fn, denominator)
        ag.backward(loss)
        self.loss = float(loss.data)
        self.dense_grads = {
            n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in self.model.params.items()
        }
        dE = img_leaf.grad if img_leaf.grad is not None else np.zeros_like(img_leaf.data)
        self.embed_grads = {int(i): dE[j] for j, i in enumerate(enc.unique_images)}
        self.id_grads = {}
        for f in self.fields:
            leaf, uniq = leaves[f]
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            for j, i in enumerate(uniq):
                self.id_grads[(f, int(i))] = g[j]

    def apply_dense_update(self, summed, lr):
        for n in sorted(self.model.params):
            p = self.model.params[n]
            optim.adam_step(p.data, summed[n].reshape(p.shape), self.opt[n], lr)


class Cluster:
    """Builds the node set from a model and drives synchronous iterations."""

    def __init__(self, cfg, model, store, lr0=optim.LR0, lr_decay=optim.DECAY,
                 lr_interval=optim.DECAY_INTERVAL):
        if cfg.mode != "ams":
            raise ValueError(
                f"training runs under mode 'ams' only; {cfg.mode!r} is an "
                "accounting-only storage strategy (see dicm.accounting)"
            )
        self.cfg = cfg
        self.model = model
        self.store = store
        self.lr0 = lr0
        self.lr_decay = lr_decay
        self.lr_interval = lr_interval
        self.meter = protocol.TrafficMeter()
        self.workers = [WorkerNode(w, model) for w in range(cfg.workers)]
        self.servers = [ServerNode(s, cfg.servers, model, store) for s in range(cfg.servers)]
        self.iteration = 0
        self._delivery_rng = np.random.default_rng(0xD1C3)

    # -- channel

    def _route(self, msg, src_kind, dst_kind):
        frame = protocol.encode(msg)
        link = f"{src_kind}->{dst_kind}"
        self.meter.record_send(msg, link)
        out = protocol.decode(frame)
        self.meter.record_receive(out, link)
        return out

    def _maybe_shuffle(self, items):
        items = list(items)
        if not self.cfg.deterministic:
            self._delivery_rng.shuffle(items)
        return items

    # -- iteration phases

    def _embed_plan(self, worker):
        """Split a worker's needed ids by owning server, sorted within shard."""
        plan = {s: [] for s in range(self.cfg.servers)}
        for i in worker.needed_images():
            plan[shard_of(_image_key(int(i)), self.cfg.servers)].append(int(i))
        return {s: np.array(ids, dtype=np.int64) for s, ids in plan.items()}

    def _key_plan(self, worker):
        plan = {s: [] for s in range(self.cfg.servers)}
        for fidx, row in worker.needed_keys():
            s = shard_of(_id_key(worker.fields[fidx], int(row)), self.cfg.servers)
            plan[s].append((int(fidx), int(row)))
        return {
            s: np.array(keys, dtype=np.int64).reshape(-1, 2)
            for s, keys in plan.items()
        }

    def run_iteration(self, union_batch):
        cfg = self.cfg
        it = self.iteration
        lr = optim.lr_schedule(it, self.lr0, self.lr_decay, self.lr_interval)
        denominator = len(union_batch)
        for s in self.servers:
            s.reset_iteration()

        # phase 1+2: requests and responses
        slices = [
            union_batch[w * cfg.batch_per_worker : (w + 1) * cfg.batch_per_worker]
            for w in range(cfg.workers)
        ]
        embeddings = [dict() for _ in self.workers]
        id_vectors = [dict() for _ in self.workers]
        requests = []
        for w in self.workers:
            w.start_iteration(slices[w.wid])
            for sid, ids in self._embed_plan(w).items():
                if len(ids):  # nothing to request means no message at all
                    requests.append((w.wid, sid, EmbedRequest(it, w.wid, ids)))
            for sid, keys in self._key_plan(w).items():
                if len(keys):
                    requests.append((w.wid, sid, IdParamPull(it, w.wid, keys)))
        for wid, sid, msg in self._maybe_shuffle(requests):
            delivered = self._route(msg, "worker", "server")
            server = self.servers[sid]
            if isinstance(delivered, EmbedRequest):
                reply = server.handle_embed_request(delivered)
                reply = self._route(reply, "server", "worker")
                for j, i in enumerate(reply.ids):
                    embeddings[wid][int(i)] = reply.vectors[j]
            else:
                reply = server.handle_id_pull(delivered)
                reply = self._route(reply, "server", "worker")
                for (fidx, row), vec in zip(reply.keys, reply.vectors):
                    id_vectors[wid][(self.workers[wid].fields[fidx], int(row))] = vec

        # phase 3: compute and push
        for w in self.workers:
            w.compute(embeddings[w.wid], id_vectors[w.wid], denominator, it)
        pushes = []
        for w in self.workers:
            for sid, ids in self._embed_plan(w).items():
                vectors = (np.stack([w.embed_grads[int(i)] for i in ids])
                           if len(ids) else np.zeros((0, w.d_img)))
                pushes.append((sid, EmbedGradPush(it, w.wid, ids, vectors)))
            for sid, keys in self._key_plan(w).items():
                vectors = (np.stack([w.id_grads[(w.fields[f], int(r))] for f, r in keys])
                           if len(keys) else np.zeros((0, w.d_id)))
                pushes.append((sid, IdParamPush(it, w.wid, keys, vectors)))
        for sid, msg in self._maybe_shuffle(pushes):
            self.servers[sid].collect_push(self._route(msg, "worker", "server"))

        # phase 4: worker-side all-reduce through worker 0, then local Adam
        root = self.workers[0]
        dense_total = {n: g.copy() for n, g in root.dense_grads.items()}
        for w in self.workers[1:]:
            flat = {n: g.reshape(-1) for n, g in w.dense_grads.items()}
            sync = self._route(WorkerSync(it, w.wid, flat), "worker", "worker")
            for n in dense_total:
                dense_total[n] += sync.grads[n].reshape(dense_total[n].shape)
        for w in self.workers:
            if w.wid == 0:
                summed = dense_total
            else:
                flat = {n: g.reshape(-1) for n, g in dense_total.items()}
                summed = self._route(WorkerSync(it, 0, flat), "worker", "worker").grads
            w.apply_dense_update(summed, lr)

        # phase 5: server update (embedding model all-reduce + sharded id rows)
        local_grads = [
            s.local_model_gradient(cfg.workers, it) for s in self.servers
        ]
        model_total = {n: g.copy() for n, g in local_grads[0].items()}
        for s in self.servers[1:]:
            flat = {n: g.reshape(-1) for n, g in local_grads[s.sid].items()}
            sync = self._route(ServerSync(it, s.sid, flat), "server", "server")
            for n in model_total:
                model_total[n] += sync.grads[n].reshape(model_total[n].shape)
        for s in self.servers:
            if s.sid == 0:
                summed = model_total
            else:
                flat = {n: g.reshape(-1) for n, g in model_total.items()}
                summed = self._route(ServerSync(it, 0, flat), "server", "server").grads
            s.apply_model_update(summed, lr)
            s.apply_id_updates(cfg.workers, lr)

        # phase 6: barrier acknowledgements to the scheduler
        for w in self.workers:
            self._route(Barrier(it, w.wid), "worker", "scheduler")
        for s in self.servers:
            self._route(Barrier(it, s.sid), "server", "scheduler")

        self.iteration += 1
        loss = sum(w.loss for w in self.workers)
        union_unique = len({int(i) for w in self.workers for i in w.needed_images()})
        forwards = sum(s.new_embeds for s in self.servers)
        digests = [s.digest() for s in self.servers]
        return loss, union_unique, forwards, digests

    # -- public API

    def snapshot(self):
        """Current parameter values assembled from the owning nodes."""
        out = {n: p.data.copy() for n, p in self.workers[0].model.params.items()}
        for n, p in self.servers[0].params.items():
            out[n] = p.data.copy()
        tables = {
            f: self.model.params[f"id_emb/{f}"].data.copy()
            for f in self.model.table_fields()
        }
        for s in self.servers:
            for (f, row), vec in s.id_rows.items():
                tables[f][row] = vec
        for f, table in tables.items():
            out[f"id_emb/{f}"] = table
        return out

    def collect_into_model(self):
        """Write the trained parameters back into the source model."""
        snap = self.snapshot()
        for n, p in self.model.params.items():
            p.data[...] = snap[n]
        return self.model

    def optimizer_tensors(self):
        """Checkpoint-ready optimizer state gathered from the owning nodes."""
        out = {}
        for n, st in self.workers[0].opt.items():
            out[f"{n}#m"], out[f"{n}#v"] = st.m, st.v
            out[f"{n}#t"] = np.array(st.t, dtype=np.int64)
        for n, st in self.servers[0].opt.items():
            out[f"{n}#m"], out[f"{n}#v"] = st.m, st.v
            out[f"{n}#t"] = np.array(st.t, dtype=np.int64)
        for f in self.model.table_fields():
            table = self.model.params[f"id_emb/{f}"].data
            m, v = np.zeros_like(table), np.zeros_like(table)
            t = np.zeros(table.shape[0], dtype=np.int64)
            for s in self.servers:
                for (fname, row), st in s.id_opt.items():
                    if fname == f:
                        m[row], v[row], t[row] = st.m, st.v, st.t
            base = f"id_emb/{f}"
            out[f"{base}#m"], out[f"{base}#v"], out[f"{base}#t"] = m, v, t
        return out


def run_training(cluster_cfg, model, store, train_samples, train_cfg, log=None):
    """Synchronous distributed training; updates ``model`` in place.

    The batch stream is identical to the single-process trainer's: union
    batches of workers * batch_per_worker samples, sliced contiguously across
    workers (the final short batch leaves trailing workers short or empty).
    """
    from .data import minibatches

    cluster = Cluster(cluster_cfg, model, store, train_cfg.lr0, train_cfg.lr_decay,
                      train_cfg.lr_interval)
    cluster.meter.add_storage("worker-samples", batch_stats(train_samples, model.schema).sample_bytes)
    cluster.meter.add_storage("server-image-features", len(store) * model.schema.d_raw * 4)
    cluster.meter.add_storage("server-id-params", id_param_bytes(model.schema))
    log = log or RunLog()
    union_size = cluster_cfg.workers * cluster_cfg.batch_per_worker
    stop = train_cfg.max_iterations or None
    done = False
    for epoch in range(train_cfg.epochs):
        if done:
            break
        for union in minibatches(train_samples, union_size, train_cfg.seed, epoch):
            log.lrs.append(optim.lr_schedule(cluster.iteration, train_cfg.lr0,
                                             train_cfg.lr_decay, train_cfg.lr_interval))
            loss, unique, forwards, digests = cluster.run_iteration(union)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at iteration {cluster.iteration}")
            log.losses.append(loss)
            log.unique_images.append(unique)
            log.embed_forwards.append(forwards)
            log.replica_digests.append(digests)
            if stop and cluster.iteration >= stop:
                done = True
                break
    cluster.collect_into_model()
    return cluster, log
