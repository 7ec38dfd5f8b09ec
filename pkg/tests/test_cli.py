import numpy as np
import pytest
from click.testing import CliRunner

from dicm.cli import main

CONFIG = """
[data]
users = 30
items = 60
images = 50
latent_dim = 4
behaviors_mean = 12
behaviors_cap = 30
post_filter_max = 8
train_days = 2
test_days = 1
impressions_per_user_day = 5
seed = 7

[model]
d_id = 4
d_raw = 16
d_img = 4
b_max = 8
mlp_widths = 16,8
attention_hidden = 8
image_id_fields = false

[cluster]
workers = 2
servers = 2
batch_per_worker = 16

[train]
epochs = 1
seed = 3
max_iterations = 4

[output]
dir = {out}
"""


def write_config(tmp_path, name="exp.ini", **kw):
    out = tmp_path / "run"
    body = CONFIG.format(out=out)
    for k, v in kw.items():
        section, key = k.split(".")
        lines, in_section, replaced = [], False, False
        for line in body.splitlines():
            if line.startswith("["):
                in_section = line.strip() == f"[{section}]"
                lines.append(line)
                if in_section:
                    lines.append(f"{key} = {v}")
                    replaced = True
            elif in_section and line.split("=")[0].strip() == key:
                continue
            else:
                lines.append(line)
        assert replaced, f"section {section} missing"
        body = "\n".join(lines) + "\n"
    path = tmp_path / name
    path.write_text(body)
    return path, out


def invoke(args):
    runner = CliRunner()
    return runner.invoke(main, args, catch_exceptions=False)


def test_gen_data_writes_files_and_resolved_config(tmp_path):
    cfg, out = write_config(tmp_path)
    res = invoke(["gen-data", "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    for name in ("train.jsonl", "test.jsonl", "latents.bin", "resolved.ini"):
        assert (out / name).exists()
    assert "train" in res.output


def test_train_emits_reports_figures_and_is_reproducible(tmp_path):
    cfg, out = write_config(tmp_path)
    invoke(["gen-data", "--config", str(cfg)])
    res = invoke(["train", "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    for name in ("checkpoint.ckpt", "metrics.csv", "traffic.csv",
                 "training.png", "resolved.ini"):
        assert (out / name).exists()
    first = (out / "metrics.csv").read_bytes()
    res = invoke(["train", "--config", str(cfg)])
    assert res.exit_code == 0
    assert (out / "metrics.csv").read_bytes() == first
    header = first.decode().splitlines()[0]
    assert header == "iteration,loss,lr"


def test_train_rejects_accounting_only_modes(tmp_path):
    cfg, out = write_config(tmp_path)
    invoke(["gen-data", "--config", str(cfg)])
    res = CliRunner().invoke(main, ["train", "--config", str(cfg),
                                    "--mode", "store-in-worker"])
    assert res.exit_code != 0
    assert "accounting-only" in res.output


def test_eval_single_and_sweep(tmp_path):
    cfg, out = write_config(tmp_path)
    invoke(["gen-data", "--config", str(cfg)])
    invoke(["train", "--config", str(cfg)])
    sum_dir = tmp_path / "sum_run"
    res = invoke(["train", "--config", str(cfg), "--aggregator", "sum",
                  "--out", str(sum_dir)])
    assert res.exit_code == 0, res.output
    res = invoke(["eval", "--config", str(cfg),
                  "--checkpoint", str(out / "checkpoint.ckpt"),
                  "--checkpoint", str(sum_dir / "checkpoint.ckpt")])
    assert res.exit_code == 0, res.output
    lines = (out / "eval.csv").read_text().splitlines()
    assert lines[0] == "checkpoint,aggregator,auc,gauc,log_loss"
    assert len(lines) == 3
    assert "multiquery-attn" in lines[1] and "sum" in lines[2]
    assert (out / "eval.png").exists()


def test_eval_perfectly_separable_scores_auc_one(tmp_path):
    # degenerate direct check of the reporting path: metrics on toy scores
    from dicm.metrics import auc
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0


def test_accounting_reports_compression_over_340_at_full_width(tmp_path):
    cfg, out = write_config(tmp_path, **{"model.d_raw": 4096, "model.d_img": 12})
    invoke(["gen-data", "--config", str(cfg)])
    res = invoke(["accounting", "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    assert "341.3x" in res.output
    lines = (out / "accounting.csv").read_text().splitlines()
    assert lines[0] == "mode,worker_storage,server_storage,comm_all,comm_image"
    assert [l.split(",")[0] for l in lines[1:]] == [
        "store-in-worker", "store-in-server", "ams"]
    assert (out / "accounting.png").exists()


def test_export_and_predict_round_trip(tmp_path):
    cfg, out = write_config(tmp_path)
    invoke(["gen-data", "--config", str(cfg)])
    invoke(["train", "--config", str(cfg)])
    res = invoke(["export", "--config", str(cfg),
                  "--checkpoint", str(out / "checkpoint.ckpt")])
    assert res.exit_code == 0, res.output
    assert (out / "embedding_table.bin").exists()
    assert (out / "inference_params.ckpt").exists()
    res = invoke(["predict", "--config", str(cfg),
                  "--checkpoint", str(out / "checkpoint.ckpt"),
                  "--samples", str(out / "test.jsonl")])
    assert res.exit_code == 0, res.output
    rows = (out / "scores.csv").read_text().splitlines()
    assert rows[0] == "index,probability,logit"
    probs = np.array([float(r.split(",")[1]) for r in rows[1:]])
    assert np.all((probs > 0) & (probs < 1))


def test_config_errors_cite_section_and_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[data]\nusers = 10\nbogus_key = 3\n")
    res = CliRunner().invoke(main, ["gen-data", "--config", str(path)])
    assert res.exit_code != 0
    assert "[data]" in res.output and "bogus_key" in res.output
    path.write_text("[data]\nusers = not_a_number\n")
    res = CliRunner().invoke(main, ["gen-data", "--config", str(path)])
    assert res.exit_code != 0
    assert "users" in res.output


def test_prerank_train_and_eval(tmp_path):
    cfg, out = write_config(tmp_path, **{"model.type": "prerank"})
    invoke(["gen-data", "--config", str(cfg)])
    res = invoke(["train", "--config", str(cfg)])
    assert res.exit_code == 0, res.output
    res = invoke(["eval", "--config", str(cfg),
                  "--checkpoint", str(out / "checkpoint.ckpt")])
    assert res.exit_code == 0, res.output
