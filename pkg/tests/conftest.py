import numpy as np

from dicm.data import Sample, SyntheticConfig, generate
from dicm.experiments import build_dicm, default_schema
from dicm.images import FixedExtractor, ImageFeatureStore
from dicm.model import AggregatorSpec, DicmModel, FeatureSchema, FieldSpec


def tiny_schema():
    return FeatureSchema(
        fields=[FieldSpec("user", 5), FieldSpec("ad", 7)],
        d_id=3, d_raw=8, d_img=4, b_max=4, query_fields=("ad",),
    )


def tiny_store(n_images=10, latent_dim=6, seed=99):
    rng = np.random.default_rng(seed)
    return ImageFeatureStore(rng.standard_normal((n_images, latent_dim)).astype(np.float32))


def tiny_extractor(latent_dim=6, d_raw=8, seed=42):
    return FixedExtractor(seed=seed, latent_dim=latent_dim, out_dim=d_raw)


def tiny_model(agg="multiquery-attn", seed=1, use_ad_image=True, use_behavior_images=True):
    return DicmModel(
        tiny_schema(),
        AggregatorSpec(agg, attention_hidden=5),
        tiny_extractor(),
        seed=seed,
        mlp_widths=(6, 4),
        use_ad_image=use_ad_image,
        use_behavior_images=use_behavior_images,
    )


def make_sample(user=0, ad=0, ad_image=0, behavior_images=(), label=0, scenario=0, day=0):
    return Sample(
        user=user, scenario=scenario, ad=ad, ad_category=0, ad_image=ad_image,
        behavior_items=[], behavior_images=list(behavior_images), label=label, day=day,
    )


def tiny_samples():
    return [
        make_sample(user=1, ad=2, ad_image=3, behavior_images=[0, 5, 7], label=1),
        make_sample(user=4, ad=0, ad_image=9, behavior_images=[2], label=0),
        make_sample(user=2, ad=6, ad_image=1, behavior_images=[], label=0),
    ]


def bench_data(seed=0, **overrides):
    base = dict(users=40, items=80, images=64, latent_dim=4, behaviors_mean=12.0,
                behaviors_cap=30, post_filter_max=8, train_days=2, test_days=1,
                impressions_per_user_day=6, seed=seed)
    base.update(overrides)
    cfg = SyntheticConfig(**base)
    return cfg, generate(cfg)


def bench_model(cfg, aggregator="multiquery-attn", seed=1, **kw):
    schema = default_schema(cfg, d_id=4, d_raw=16, d_img=4, b_max=8,
                            image_id_fields=False)
    kw.setdefault("mlp_widths", (16, 8))
    kw.setdefault("attention_hidden", 8)
    return build_dicm(schema, cfg.latent_dim, aggregator=aggregator, seed=seed, **kw)
