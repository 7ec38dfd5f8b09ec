import numpy as np
import pytest

from conftest import bench_data, bench_model
from dicm.data import minibatches
from dicm.model import encode_batch
from dicm.protocol import CAT_ID_PARAM, CAT_IMAGE_EMBEDDING, ProtocolError
from dicm.runtime import (Cluster, ClusterConfig, run_training, shard_of)
from dicm.training import LocalTrainer, TrainConfig


def test_shard_of_basics():
    assert shard_of("img/42", 1) == 0
    assert shard_of("img/42", 4) == shard_of("img/42", 4)
    assert shard_of(("ad", 7), 3) == shard_of(("ad", 7), 3)
    with pytest.raises(ValueError):
        shard_of("x", 0)


def test_shard_of_balances_keys():
    counts = np.zeros(4, dtype=int)
    for i in range(10000):
        counts[shard_of(f"img/{i}", 4)] += 1
    assert np.all(np.abs(counts - 2500) <= 200)


def test_degenerate_cluster_matches_local_trainer_bitwise():
    cfg, gen = bench_data(seed=2)
    model_cluster = bench_model(cfg, seed=5)
    model_local = bench_model(cfg, seed=5)
    tc = TrainConfig(epochs=1, batch_size=32, seed=11, max_iterations=8)
    cluster, log = run_training(
        ClusterConfig(workers=1, servers=1, batch_per_worker=32),
        model_cluster, gen.store, gen.train, tc)
    local = LocalTrainer(model_local, gen.store, tc)
    local_log = local.run(gen.train)
    assert len(log.losses) == len(local_log.losses) == 8
    for a, b in zip(log.losses, local_log.losses):
        assert abs(a - b) <= 1e-9
    snap_c = cluster.snapshot()
    snap_l = local.snapshot()
    for n in snap_l:
        assert np.array_equal(snap_c[n], snap_l[n]), f"{n} diverged"


def test_m4_n2_matches_local_trainer_per_iteration():
    cfg, gen = bench_data(seed=3)
    model_cluster = bench_model(cfg, seed=7)
    model_local = bench_model(cfg, seed=7)
    cluster = Cluster(ClusterConfig(workers=4, servers=2, batch_per_worker=8),
                      model_cluster, gen.store)
    local = LocalTrainer(model_local, gen.store, TrainConfig(batch_size=32, seed=4))
    batches = list(minibatches(gen.train, 32, seed=4))[:10]
    for union in batches:
        cluster.run_iteration(union)
        local.train_batch(union)
        snap_c, snap_l = cluster.snapshot(), local.snapshot()
        worst = max(np.max(np.abs(snap_c[n] - snap_l[n])) for n in snap_l)
        assert worst < 1e-6, f"divergence {worst}"


def test_dedup_and_replica_consistency():
    cfg, gen = bench_data(seed=4)
    model = bench_model(cfg, seed=9)
    tc = TrainConfig(epochs=3, seed=5, max_iterations=30)
    cluster, log = run_training(
        ClusterConfig(workers=3, servers=2, batch_per_worker=8),
        model, gen.store, gen.train, tc)
    assert len(log.embed_forwards) == 30
    # every iteration: forwards across servers == distinct images in the union
    assert log.embed_forwards == log.unique_images
    for digests in log.replica_digests:
        assert len(set(digests)) == 1


def test_unique_images_log_matches_independent_count():
    cfg, gen = bench_data(seed=6)
    model = bench_model(cfg, seed=2)
    tc = TrainConfig(epochs=1, seed=8, max_iterations=5)
    _, log = run_training(ClusterConfig(workers=2, servers=2, batch_per_worker=8),
                          model, gen.store, gen.train, tc)
    check_model = bench_model(cfg, seed=2)
    for union, logged in zip(minibatches(gen.train, 16, seed=8), log.unique_images):
        batch = encode_batch(union, check_model)
        assert len(batch.unique_images) == logged


def test_server_embed_bit_equal_to_model_forward():
    cfg, gen = bench_data(seed=1)
    model = bench_model(cfg, seed=3)
    cluster = Cluster(ClusterConfig(workers=1, servers=2, batch_per_worker=4),
                      model, gen.store)
    server = cluster.servers[0]
    ids = np.array([i for i in range(12) if server.owns_image(i)], dtype=np.int64)
    from dicm.protocol import EmbedRequest
    reply = server.handle_embed_request(EmbedRequest(0, 0, ids))
    expect = model.embed_images(gen.store.raw_features(ids, model.extractor))
    assert np.array_equal(reply.vectors, expect)
    # duplicate ids across requests in one iteration embed once
    before = server.new_embeds
    server.handle_embed_request(EmbedRequest(0, 0, ids))
    assert server.new_embeds == before


def test_server_rejects_foreign_shard_id():
    cfg, gen = bench_data(seed=1)
    model = bench_model(cfg, seed=3)
    cluster = Cluster(ClusterConfig(workers=1, servers=2, batch_per_worker=4),
                      model, gen.store)
    server = cluster.servers[0]
    foreign = next(i for i in range(64) if not server.owns_image(i))
    from dicm.protocol import EmbedRequest
    with pytest.raises(ProtocolError, match="shard"):
        server.handle_embed_request(EmbedRequest(0, 0, np.array([foreign])))


def test_no_image_traffic_when_model_uses_no_images():
    cfg, gen = bench_data(seed=2)
    model = bench_model(cfg, seed=4, use_ad_image=False, use_behavior_images=False,
                        aggregator="sum")
    tc = TrainConfig(epochs=1, seed=1, max_iterations=3)
    cluster, _ = run_training(ClusterConfig(workers=2, servers=2, batch_per_worker=8),
                              model, gen.store, gen.train, tc)
    sent_requests = sum(
        v for (c, link), v in cluster.meter.sent.items()
        if c == CAT_IMAGE_EMBEDDING and link == "worker->server"
    )
    # only the (empty) gradient-push barrier messages remain on that link
    per_push = 13 + 8
    iterations = 3
    assert sent_requests == per_push * 2 * 2 * iterations


def test_duplicate_image_in_worker_batch_requested_once_grads_summed():
    cfg, gen = bench_data(seed=9)
    model = bench_model(cfg, seed=5)
    dup = [s for s in gen.train[:64]]
    dup[1].ad_image = dup[0].ad_image  # two occurrences of one image
    cluster = Cluster(ClusterConfig(workers=1, servers=1, batch_per_worker=4),
                      model, gen.store)
    cluster.run_iteration(dup[:4])
    worker = cluster.workers[0]
    ids = list(worker.embed_grads)
    assert len(ids) == len(set(ids))
    # reference: single-process gradient of the embedding matrix rows
    ref_model = bench_model(cfg, seed=5)
    from dicm import autograd as ag
    from dicm.training import batch_loss_graph
    batch = encode_batch(dup[:4], ref_model)
    img_node = ref_model.local_image_matrix(batch, gen.store)
    loss, _ = batch_loss_graph(ref_model, batch, img_node, ref_model.local_id_rows, 4)
    ag.backward(loss)
    for j, i in enumerate(batch.unique_images):
        assert np.allclose(worker.embed_grads[int(i)], img_node.grad[j], atol=1e-12)


def test_meter_conservation_by_category():
    cfg, gen = bench_data(seed=2)
    model = bench_model(cfg, seed=4)
    tc = TrainConfig(epochs=1, seed=1, max_iterations=4)
    cluster, _ = run_training(ClusterConfig(workers=3, servers=2, batch_per_worker=8),
                              model, gen.store, gen.train, tc)
    meter = cluster.meter
    assert meter.sent == meter.received
    assert meter.sent_total(CAT_IMAGE_EMBEDDING) > 0
    assert meter.sent_total(CAT_ID_PARAM) > 0


def test_loss_decreases_on_learnable_data():
    cfg, gen = bench_data(seed=7, gamma=2.0, noise=0.2)
    model = bench_model(cfg, seed=1)
    tc = TrainConfig(epochs=8, seed=2, lr0=0.01, lr_interval=100000)
    cluster, log = run_training(ClusterConfig(workers=2, servers=2, batch_per_worker=32),
                                model, gen.store, gen.train, tc)
    assert np.mean(log.losses[-5:]) < np.mean(log.losses[:5]) - 0.02


def test_replicas_consistent_with_shuffled_delivery():
    cfg, gen = bench_data(seed=3)
    model = bench_model(cfg, seed=6)
    tc = TrainConfig(epochs=1, seed=3, max_iterations=6)
    _, log = run_training(
        ClusterConfig(workers=3, servers=3, batch_per_worker=6, deterministic=False),
        model, gen.store, gen.train, tc)
    for digests in log.replica_digests:
        assert len(set(digests)) == 1


def test_training_requires_ams_mode():
    cfg, gen = bench_data(seed=1)
    model = bench_model(cfg, seed=1)
    with pytest.raises(ValueError, match="accounting-only"):
        Cluster(ClusterConfig(mode="store-in-worker"), model, gen.store)
    with pytest.raises(ValueError, match="unknown mode"):
        ClusterConfig(mode="bogus")
