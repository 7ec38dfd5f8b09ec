"""Wiring between synthetic datasets and model construction.

The benchmark schema mirrors the production field layout: user, scenario, ad,
ad category, the behavior-item list, and (so every comparison shares a common
basis) the image ids themselves as plain sparse fields. Image-enabled models
add the embedding paths on top of the same fields.
"""

from __future__ import annotations

from .images import FixedExtractor
from .model import AggregatorSpec, DicmModel, FeatureSchema, FieldSpec, PrerankModel

EXTRACTOR_SEED = 0x5EED


def default_schema(data_cfg, d_id=12, d_raw=64, d_img=12, b_max=32,
                   image_id_fields=True):
    """ID fields with vocabularies sized to a SyntheticConfig, including the
    reserved cold-start tail."""
    fields = [
        FieldSpec("user", data_cfg.users),
        FieldSpec("scenario", data_cfg.scenarios),
        FieldSpec("ad", data_cfg.ad_vocab),
        FieldSpec("ad_category", data_cfg.categories),
        FieldSpec("behavior_items", data_cfg.ad_vocab, multi=True),
    ]
    if image_id_fields:
        fields.append(FieldSpec("ad_image", data_cfg.image_count))
        fields.append(FieldSpec("behavior_images", data_cfg.image_count, multi=True))
    return FeatureSchema(fields=fields, d_id=d_id, d_raw=d_raw, d_img=d_img,
                         b_max=b_max)


def build_extractor(schema, latent_dim, seed=EXTRACTOR_SEED):
    return FixedExtractor(seed=seed, latent_dim=latent_dim, out_dim=schema.d_raw)


def build_dicm(schema, latent_dim, aggregator="multiquery-attn", seed=0,
               mlp_widths=(128, 64), attention_hidden=32, normalize=True,
               use_ad_image=True, use_behavior_images=True,
               extractor_seed=EXTRACTOR_SEED):
    return DicmModel(
        schema,
        AggregatorSpec(aggregator, attention_hidden=attention_hidden, normalize=normalize),
        build_extractor(schema, latent_dim, extractor_seed),
        seed=seed,
        mlp_widths=tuple(mlp_widths),
        use_ad_image=use_ad_image,
        use_behavior_images=use_behavior_images,
    )


def build_prerank(schema, latent_dim, seed=0, tower_hidden=64, rep_dim=16,
                  use_images=True, extractor_seed=EXTRACTOR_SEED):
    return PrerankModel(
        schema,
        build_extractor(schema, latent_dim, extractor_seed),
        seed=seed,
        tower_hidden=tower_hidden,
        rep_dim=rep_dim,
        use_images=use_images,
    )
