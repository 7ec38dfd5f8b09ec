import numpy as np
import pytest

from conftest import bench_data, bench_model
from dicm.images import ImageFeatureStore
from dicm.inference import InferenceTable, KvPredictor, export_inference
from dicm.training import LocalTrainer, TrainConfig, predict_logits


def trained():
    cfg, gen = bench_data(seed=12)
    model = bench_model(cfg, seed=3)
    LocalTrainer(model, gen.store, TrainConfig(epochs=1, batch_size=32, seed=1,
                                               max_iterations=8)).run(gen.train)
    return cfg, gen, model


def test_table_lookup_bit_equal_to_live_embedding():
    cfg, gen, model = trained()
    table = export_inference(model, gen.store)
    assert len(table) == len(gen.store)
    ids = np.arange(len(gen.store))
    live = model.embed_images(gen.store.raw_features(ids, model.extractor))
    assert np.array_equal(table.lookup(ids), live)


def test_kv_predictor_matches_full_model():
    cfg, gen, model = trained()
    predictor = KvPredictor(model, export_inference(model, gen.store), gen.store)
    samples = gen.test
    probs, logits = predictor.predict(samples)
    full = predict_logits(model, samples, gen.store)
    assert np.max(np.abs(logits - full)) < 1e-12
    assert np.all((probs > 0) & (probs < 1))


def test_cold_image_id_scores_via_live_path():
    cfg, gen, model = trained()
    table = export_inference(model, gen.store)
    # the store grows after export: fresh latents for never-trained images
    rng = np.random.default_rng(0)
    grown = ImageFeatureStore(np.vstack([
        gen.store.latents, rng.standard_normal((3, cfg.latent_dim)).astype(np.float32)
    ]))
    predictor = KvPredictor(model, table, grown)
    cold = [s for s in gen.test[:4]]
    for s in cold:
        s.ad_image = len(gen.store)  # beyond the exported table
    probs, logits = predictor.predict(cold)
    assert np.all(np.isfinite(logits))
    assert np.all((probs > 0) & (probs < 1))
    # cold embedding equals the live net applied to the new latents
    raw = grown.raw_features([len(gen.store)], model.extractor)
    assert np.isfinite(model.embed_images(raw)).all()


def test_lookup_beyond_table_raises():
    cfg, gen, model = trained()
    table = export_inference(model, gen.store)
    with pytest.raises(KeyError, match="exported table"):
        table.lookup([len(gen.store)])


def test_table_file_round_trip(tmp_path):
    cfg, gen, model = trained()
    table = export_inference(model, gen.store)
    path = tmp_path / "table.bin"
    table.save(path)
    again = InferenceTable.load(path)
    # disk format is float32; values match at that precision
    assert np.allclose(again.embeddings, table.embeddings, atol=1e-6)
    assert len(again) == len(table)
