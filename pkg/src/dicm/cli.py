"""Experiment driver: generate data, train, evaluate, account, export, predict.

Every command resolves its configuration (file plus flag overrides), writes
the resolved document beside its outputs, and emits CSV reports with fixed
header rows plus rendered figures. Outputs are deterministic given the seeds
in the resolved configuration.
"""

from __future__ import annotations

import csv
from pathlib import Path

import click
import numpy as np

from . import plots
from .accounting import accounting_table, compression_ratio
from .checkpoint import WarmupMask, load, load_warmup, save
from .config import ConfigError, load_config, write_resolved
from .data import generate, minibatches, read_samples, write_samples
from .experiments import build_dicm, build_prerank, default_schema
from .images import ImageFeatureStore
from .inference import KvPredictor, export_inference
from .metrics import auc, gauc, log_loss
from .model import AGGREGATOR_KINDS
from .runtime import MODES, run_training
from .training import TrainConfig, predict_logits

AGG_FLAG = {"concat": "concat", "max": "max", "sum": "sum", "attn": "attn",
            "multiquery-attn": "multiquery-attn"}


def _overrides(seed, out, mode, aggregator, warmup):
    ov = {}
    if seed is not None:
        ov[("data", "seed")] = str(seed)
        ov[("train", "seed")] = str(seed)
    if mode:
        ov[("cluster", "mode")] = mode
    if aggregator:
        ov[("model", "aggregator")] = aggregator
    if warmup:
        ov[("train", "warmup")] = warmup
    return ov, out


def _resolve(config, seed, out, mode=None, aggregator=None, warmup=None):
    ov, out = _overrides(seed, out, mode, aggregator, warmup)
    try:
        cfg = load_config(config, ov)
    except ConfigError as e:
        raise click.ClickException(str(e))
    if out:
        cfg.out_dir = out
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    return cfg


def _dataset_paths(out_dir):
    out = Path(out_dir)
    return out / "train.jsonl", out / "test.jsonl", out / "latents.bin"


def _ensure_dataset(cfg, echo=click.echo):
    train_p, test_p, lat_p = _dataset_paths(cfg.out_dir)
    if train_p.exists() and test_p.exists() and lat_p.exists():
        return read_samples(train_p), read_samples(test_p), ImageFeatureStore.load(lat_p)
    echo(f"dataset missing under {cfg.out_dir}, generating from [data] seed={cfg.data.seed}")
    gen = generate(cfg.data)
    write_samples(train_p, gen.train)
    write_samples(test_p, gen.test)
    gen.store.save(lat_p)
    return gen.train, gen.test, gen.store


def _build_model(cfg, aggregator=None, model_type=None, use_ad=None, use_beh=None):
    m = cfg.model
    schema = default_schema(cfg.data, d_id=m.d_id, d_raw=m.d_raw, d_img=m.d_img,
                            b_max=m.b_max, image_id_fields=m.image_id_fields)
    mtype = model_type or m.type
    if mtype == "prerank":
        return build_prerank(schema, cfg.data.latent_dim, seed=m.seed,
                             tower_hidden=m.tower_hidden, rep_dim=m.rep_dim,
                             use_images=m.use_ad_image if use_ad is None else use_ad,
                             extractor_seed=m.extractor_seed)
    return build_dicm(
        schema, cfg.data.latent_dim,
        aggregator=aggregator or m.aggregator, seed=m.seed,
        mlp_widths=m.mlp_widths, attention_hidden=m.attention_hidden,
        normalize=m.normalize_attention,
        use_ad_image=m.use_ad_image if use_ad is None else use_ad,
        use_behavior_images=m.use_behavior_images if use_beh is None else use_beh,
        extractor_seed=m.extractor_seed,
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return f"{x:.17g}"


@click.group()
def main():
    """Image-aware CTR training and its distributed runtime."""


_config_opt = click.option("--config", required=True, type=click.Path(exists=True),
                           help="experiment INI file")
_seed_opt = click.option("--seed", type=int, default=None, help="override data/train seed")
_out_opt = click.option("--out", type=click.Path(), default=None, help="output directory")


@main.command("gen-data")
@_config_opt
@_seed_opt
@_out_opt
def cmd_gen_data(config, seed, out):
    """Generate the synthetic dataset files."""
    cfg = _resolve(config, seed, out)
    gen = generate(cfg.data)
    train_p, test_p, lat_p = _dataset_paths(cfg.out_dir)
    write_samples(train_p, gen.train)
    write_samples(test_p, gen.test)
    gen.store.save(lat_p)
    write_resolved(cfg, Path(cfg.out_dir) / "resolved.ini")
    ctr = np.mean([s.label for s in gen.train])
    click.echo(f"wrote {len(gen.train)} train / {len(gen.test)} test samples, "
               f"{len(gen.store)} image latents (train CTR {ctr:.3f}) to {cfg.out_dir}")


@main.command("train")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--mode", type=click.Choice(MODES), default=None, help="cluster mode")
@click.option("--aggregator", type=click.Choice(sorted(AGG_FLAG)), default=None)
@click.option("--warmup", type=click.Choice(["non", "partial", "full"]), default=None)
def cmd_train(config, seed, out, mode, aggregator, warmup):
    """Train under the distributed runtime and write checkpoint + reports."""
    cfg = _resolve(config, seed, out, mode, aggregator, warmup)
    train_samples, _, store = _ensure_dataset(cfg)
    model = _build_model(cfg)
    if cfg.train.warmup != "non":
        mask = WarmupMask.named(cfg.train.warmup)
        try:
            load_warmup(cfg.train.warmup_checkpoint, model, mask,
                        fresh_seed=cfg.model.seed)
        except Exception as e:
            raise click.ClickException(f"warm-up failed: {e}")
    tc = TrainConfig(epochs=cfg.train.epochs, seed=cfg.train.seed,
                     lr0=cfg.train.lr0, lr_decay=cfg.train.lr_decay,
                     lr_interval=cfg.train.lr_interval,
                     max_iterations=cfg.train.max_iterations)
    try:
        cluster, log = run_training(cfg.cluster, model, store, train_samples, tc)
    except ValueError as e:
        raise click.ClickException(str(e))
    out_dir = Path(cfg.out_dir)
    meta = {
        "model_type": cfg.model.type,
        "aggregator": model.aggregator.kind,
        "use_ad_image": str(model.use_ad_image),
        "use_behavior_images": str(model.use_behavior_images),
    }
    save(out_dir / "checkpoint.ckpt", model, cluster.optimizer_tensors(), meta)
    _write_csv(out_dir / "metrics.csv", ["iteration", "loss", "lr"],
               [(i, _fmt(l), _fmt(lr)) for i, (l, lr) in
                enumerate(zip(log.losses, log.lrs))])
    meter = cluster.meter
    _write_csv(out_dir / "traffic.csv", ["category", "link", "bytes"],
               [(c, link, v) for (c, link), v in sorted(meter.sent.items())])
    plots.save_training_curves(log.losses, log.lrs, out_dir / "training.png")
    write_resolved(cfg, out_dir / "resolved.ini")
    click.echo(f"trained {len(log.losses)} iterations; final loss {log.losses[-1]:.4f}; "
               f"outputs in {cfg.out_dir}")


@main.command("eval")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--checkpoint", "checkpoints", multiple=True, required=True,
              type=click.Path(exists=True), help="repeat to compare runs")
def cmd_eval(config, seed, out, checkpoints):
    """Score the test split: AUC, GAUC, log loss (sweep table when several
    checkpoints are given)."""
    cfg = _resolve(config, seed, out)
    _, test_samples, store = _ensure_dataset(cfg)
    labels = np.array([s.label for s in test_samples])
    users = np.array([s.user for s in test_samples])
    rows, chart_rows, chart_labels = [], [], []
    for path in checkpoints:
        try:
            ckpt = load(path)
            model = _build_model(
                cfg,
                aggregator=ckpt.meta.get("aggregator"),
                model_type=ckpt.meta.get("model_type"),
                use_ad=ckpt.meta.get("use_ad_image") == "True",
                use_beh=ckpt.meta.get("use_behavior_images") == "True",
            )
            load_warmup(ckpt, model, WarmupMask.full(), fresh_seed=0)
        except Exception as e:
            raise click.ClickException(f"{path}: {e}")
        z = predict_logits(model, test_samples, store)
        probs = 1.0 / (1.0 + np.exp(-z))
        report = {"auc": auc(probs, labels), "gauc": gauc(users, probs, labels),
                  "log_loss": log_loss(probs, labels)}
        label = ckpt.meta.get("aggregator", Path(path).stem)
        rows.append((path, label, _fmt(report["auc"]), _fmt(report["gauc"]),
                     _fmt(report["log_loss"])))
        chart_rows.append(report)
        chart_labels.append(label)
        click.echo(f"{label}: auc {report['auc']:.4f} gauc {report['gauc']:.4f} "
                   f"log_loss {report['log_loss']:.4f}")
    out_dir = Path(cfg.out_dir)
    _write_csv(out_dir / "eval.csv",
               ["checkpoint", "aggregator", "auc", "gauc", "log_loss"], rows)
    if len(rows) > 1:
        plots.save_eval_chart(chart_labels, chart_rows, out_dir / "eval.png")
    write_resolved(cfg, out_dir / "resolved.ini")


@main.command("accounting")
@_config_opt
@_seed_opt
@_out_opt
def cmd_accounting(config, seed, out):
    """Storage/communication table for the three placement strategies."""
    cfg = _resolve(config, seed, out)
    train_samples, _, store = _ensure_dataset(cfg)
    m = cfg.model
    schema = default_schema(cfg.data, d_id=m.d_id, d_raw=m.d_raw, d_img=m.d_img,
                            b_max=m.b_max, image_id_fields=m.image_id_fields)
    union = cfg.cluster.workers * cfg.cluster.batch_per_worker
    batch = next(minibatches(train_samples, union, cfg.train.seed))
    rows = accounting_table(batch, schema, len(store))
    out_dir = Path(cfg.out_dir)
    _write_csv(out_dir / "accounting.csv",
               ["mode", "worker_storage", "server_storage", "comm_all", "comm_image"],
               [(r.mode, r.worker_storage, r.server_storage, r.comm_all, r.comm_image)
                for r in rows])
    plots.save_accounting_chart(rows, out_dir / "accounting.png")
    write_resolved(cfg, out_dir / "resolved.ini")
    ratio = compression_ratio(schema)
    for r in rows:
        click.echo(f"{r.mode:17s} worker {r.worker_storage:>14,d}  server "
                   f"{r.server_storage:>14,d}  comm all {r.comm_all:>14,d}  "
                   f"image {r.comm_image:>14,d}")
    click.echo(f"per-image compression (ams vs store-in-server): {ratio:.1f}x "
               f"(batch of {len(batch)} samples)")


@main.command("export")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
def cmd_export(config, seed, out, checkpoint):
    """Precompute the image-embedding table for key-value serving."""
    cfg = _resolve(config, seed, out)
    _, _, store = _ensure_dataset(cfg)
    try:
        ckpt = load(checkpoint)
        model = _build_model(cfg, aggregator=ckpt.meta.get("aggregator"),
                             model_type=ckpt.meta.get("model_type"),
                             use_ad=ckpt.meta.get("use_ad_image") == "True",
                             use_beh=ckpt.meta.get("use_behavior_images") == "True")
        load_warmup(ckpt, model, WarmupMask.full(), fresh_seed=0)
    except Exception as e:
        raise click.ClickException(f"{checkpoint}: {e}")
    table = export_inference(model, store)
    out_dir = Path(cfg.out_dir)
    table.save(out_dir / "embedding_table.bin")
    save(out_dir / "inference_params.ckpt", model, meta=ckpt.meta)
    write_resolved(cfg, out_dir / "resolved.ini")
    click.echo(f"exported {len(table)} embeddings of width {model.schema.d_img} "
               f"plus frozen parameters to {cfg.out_dir}")


@main.command("predict")
@_config_opt
@_seed_opt
@_out_opt
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--samples", "samples_path", required=True, type=click.Path(exists=True),
              help="jsonl sample file to score")
def cmd_predict(config, seed, out, checkpoint, samples_path):
    """Score samples through the key-value predictor; write a scores file."""
    cfg = _resolve(config, seed, out)
    _, _, store = _ensure_dataset(cfg)
    try:
        ckpt = load(checkpoint)
        model = _build_model(cfg, aggregator=ckpt.meta.get("aggregator"),
                             model_type=ckpt.meta.get("model_type"),
                             use_ad=ckpt.meta.get("use_ad_image") == "True",
                             use_beh=ckpt.meta.get("use_behavior_images") == "True")
        load_warmup(ckpt, model, WarmupMask.full(), fresh_seed=0)
        samples = read_samples(samples_path)
    except Exception as e:
        raise click.ClickException(str(e))
    predictor = KvPredictor(model, export_inference(model, store), store)
    probs, logits = predictor.predict(samples)
    out_dir = Path(cfg.out_dir)
    _write_csv(out_dir / "scores.csv", ["index", "probability", "logit"],
               [(i, _fmt(p), _fmt(z)) for i, (p, z) in enumerate(zip(probs, logits))])
    write_resolved(cfg, out_dir / "resolved.ini")
    click.echo(f"scored {len(samples)} samples -> {out_dir / 'scores.csv'}")


if __name__ == "__main__":
    main()
