import json
import os

import numpy as np
import pytest

from siamret import cli
from siamret.config import RunConfig, parse_config_file
from siamret.errors import ConfigError
from siamret.imaging import generate_synthetic, write_dataset

TINY_CONFIG = """\
# tiny end-to-end run used by the test suite
seed = 3
data.classes = 3
synth.per_class = 4
synth.size = 16

network.input_size = 16
network.channels = 4
network.blocks = 1
network.embedding_dim = 8

train.epochs = 1
train.batch_size = 4
train.pairs_per_epoch = 8

project.pca_dim = 4
project.perplexity = 2.0
project.iterations = 80
"""


class TestConfigFile:
    def test_defaults_without_file(self):
        cfg = RunConfig()
        assert cfg["seed"] == 0
        assert cfg["train.batch_size"] == 16
        assert cfg["train.epochs"] == 20
        assert cfg["eval.k"] == 0

    def test_parse_comments_and_values(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(TINY_CONFIG)
        cfg = parse_config_file(p)
        assert cfg["seed"] == 3
        assert cfg["synth.size"] == 16
        assert cfg["project.perplexity"] == 2.0
        # untouched keys keep their defaults
        assert cfg["train.margin"] == 1.0

    def test_unknown_key_names_line(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("seed = 1\ntrain.warmup = 5\n")
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_file(p)

    def test_wrong_type_names_line_and_key(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("train.epochs = soon\n")
        with pytest.raises(ConfigError, match="train.epochs.*line 1"):
            parse_config_file(p)

    def test_duplicate_key_rejected(self, tmp_path):
        p = tmp_path / "dup.cfg"
        p.write_text("seed = 1\nseed = 2\n")
        with pytest.raises(ConfigError, match="line 2.*duplicate"):
            parse_config_file(p)

    def test_line_without_equals_rejected(self, tmp_path):
        p = tmp_path / "eq.cfg"
        p.write_text("just some words\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(p)

    def test_bool_parsing(self, tmp_path):
        p = tmp_path / "b.cfg"
        p.write_text("eval.include_self = true\naugment.hflip = false\n")
        cfg = parse_config_file(p)
        assert cfg["eval.include_self"] is True
        assert cfg["augment.hflip"] is False
        p.write_text("eval.include_self = yes\n")
        with pytest.raises(ConfigError, match="true or false"):
            parse_config_file(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config_file(tmp_path / "absent.cfg")

    def test_hash_stable_and_sensitive(self, tmp_path):
        p = tmp_path / "h.cfg"
        p.write_text(TINY_CONFIG)
        a = parse_config_file(p).hash()
        b = parse_config_file(p).hash()
        assert a == b and len(a) == 64
        cfg = parse_config_file(p)
        cfg.override("seed", 4)
        assert cfg.hash() != a

    def test_hash_ignores_key_order(self, tmp_path):
        pa = tmp_path / "a.cfg"
        pb = tmp_path / "b.cfg"
        pa.write_text("seed = 5\ntrain.epochs = 2\n")
        pb.write_text("train.epochs = 2\nseed = 5\n")
        assert parse_config_file(pa).hash() == parse_config_file(pb).hash()

    def test_override_coerces_strings(self):
        cfg = RunConfig()
        cfg.override("train.epochs", "7")
        assert cfg["train.epochs"] == 7
        with pytest.raises(ConfigError):
            cfg.override("no.such.key", 1)

    def test_canonical_sorted_and_complete(self):
        cfg = RunConfig()
        lines = cfg.canonical().strip().split("\n")
        keys = [ln.split(" = ")[0] for ln in lines]
        assert keys == sorted(keys)
        assert "train.margin" in keys


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny synth -> train -> embed run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "run.cfg"
    cfg_path.write_text(TINY_CONFIG)
    data_dir = root / "data"
    ckpt = root / "net.ckpt"
    emb = root / "embeddings.semb"

    assert cli.main(["synth", "--config", str(cfg_path), "--out", str(data_dir)]) == 0
    manifest = data_dir / "manifest.csv"
    assert (
        cli.main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--manifest",
                str(manifest),
                "--out",
                str(ckpt),
            ]
        )
        == 0
    )
    assert (
        cli.main(
            [
                "embed",
                "--config",
                str(cfg_path),
                "--ckpt",
                str(ckpt),
                "--manifest",
                str(manifest),
                "--out",
                str(emb),
            ]
        )
        == 0
    )
    return {"root": root, "cfg": cfg_path, "manifest": manifest, "ckpt": ckpt, "emb": emb}


class TestPipeline:
    def test_synth_artifacts(self, pipeline):
        manifest = pipeline["manifest"]
        assert manifest.exists()
        lines = manifest.read_text().strip().split("\n")
        assert lines[0] == "id,path,label"
        assert len(lines) == 1 + 3 * 4
        meta = json.loads((manifest.parent / "manifest.csv.meta.json").read_text())
        assert meta["command"] == "synth"
        assert meta["seed"] == 3
        assert "config_hash" in meta and "versions" in meta
        assert meta["versions"]["siamret"]

    def test_train_artifacts(self, pipeline):
        ckpt = pipeline["ckpt"]
        assert ckpt.exists()
        history = ckpt.parent / (ckpt.name + ".history.csv")
        rows = history.read_text().strip().split("\n")
        assert rows[0] == "epoch,mean_loss,mean_same_dist,mean_diff_dist"
        assert len(rows) == 2  # one epoch
        meta = json.loads((ckpt.parent / "net.ckpt.meta.json").read_text())
        assert meta["command"] == "train"

    def test_embed_artifacts(self, pipeline):
        emb = pipeline["emb"]
        assert emb.exists()
        from siamret.retrieval import load_embeddings

        records = load_embeddings(emb)
        assert len(records) == 12
        assert records[0].vector.shape == (8,)

    def test_index_summary(self, pipeline, capsys):
        assert cli.main(["index", "--emb", str(pipeline["emb"])]) == 0
        out = capsys.readouterr().out
        assert "entries = 12" in out
        assert "dim = 8" in out
        assert "label 0: 4" in out and "label 2: 4" in out

    def test_query_by_id(self, pipeline, capsys):
        assert (
            cli.main(["query", "--emb", str(pipeline["emb"]), "--k", "5", "--id", "synth-0-0000"])
            == 0
        )
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 5
        dists = []
        for line in lines:
            ident, label, dist = line.split()
            assert ident != "synth-0-0000"  # self excluded by default
            int(label)
            dists.append(float(dist))
        assert dists == sorted(dists)

    def test_query_include_self_puts_query_first(self, pipeline, capsys):
        assert (
            cli.main(
                [
                    "query",
                    "--emb",
                    str(pipeline["emb"]),
                    "--k",
                    "3",
                    "--id",
                    "synth-1-0002",
                    "--include-self",
                ]
            )
            == 0
        )
        first = capsys.readouterr().out.strip().split("\n")[0].split()
        assert first[0] == "synth-1-0002"
        assert float(first[2]) == 0.0

    def test_query_by_image(self, pipeline, capsys):
        entries = (pipeline["root"] / "data" / "manifest.csv").read_text().strip().split("\n")
        rel = entries[1].split(",")[1]
        img_path = pipeline["root"] / "data" / rel
        assert (
            cli.main(
                [
                    "query",
                    "--emb",
                    str(pipeline["emb"]),
                    "--k",
                    "2",
                    "--image",
                    str(img_path),
                    "--ckpt",
                    str(pipeline["ckpt"]),
                ]
            )
            == 0
        )
        lines = capsys.readouterr().out.strip().split("\n")
        assert len(lines) == 2
        # the stored image embeds to the same vector, so it comes back first
        assert lines[0].split()[0] == "synth-0-0000"

    def test_evaluate_writes_metrics_json(self, pipeline, capsys):
        out = pipeline["root"] / "metrics.json"
        assert (
            cli.main(
                [
                    "evaluate",
                    "--config",
                    str(pipeline["cfg"]),
                    "--emb",
                    str(pipeline["emb"]),
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        printed = capsys.readouterr().out
        assert "map = " in printed and "mrr = " in printed
        doc = json.loads(out.read_text())
        assert set(doc) >= {"map", "mrr", "q", "per_class", "queries", "config_hash"}
        assert doc["q"] == 12
        assert 0.0 <= doc["map"] <= 1.0
        assert doc["config_hash"] == parse_config_file(pipeline["cfg"]).hash()
        assert (pipeline["root"] / "metrics.json.meta.json").exists()

    def test_project_writes_points_csv(self, pipeline, capsys):
        out = pipeline["root"] / "proj.csv"
        assert (
            cli.main(
                [
                    "project",
                    "--config",
                    str(pipeline["cfg"]),
                    "--emb",
                    str(pipeline["emb"]),
                    "--out",
                    str(out),
                ]
            )
            == 0
        )
        printed = capsys.readouterr().out
        assert "kl_initial" in printed and "kl_final" in printed
        rows = out.read_text().strip().split("\n")
        assert rows[0] == "id,label,x,y"
        assert len(rows) == 13
        for row in rows[1:]:
            ident, label, x, y = row.split(",")
            int(label)
            float(x)
            float(y)


class TestDeterminism:
    def test_synth_rerun_byte_identical(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_CONFIG)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        assert cli.main(["synth", "--config", str(cfg), "--out", str(a_dir)]) == 0
        assert cli.main(["synth", "--config", str(cfg), "--out", str(b_dir)]) == 0
        assert (a_dir / "manifest.csv").read_bytes() == (b_dir / "manifest.csv").read_bytes()
        img = "images/synth-2-0003.png"
        assert (a_dir / img).read_bytes() == (b_dir / img).read_bytes()

    def test_embed_rerun_byte_identical(self, pipeline, tmp_path):
        out2 = tmp_path / "again.semb"
        assert (
            cli.main(
                [
                    "embed",
                    "--config",
                    str(pipeline["cfg"]),
                    "--ckpt",
                    str(pipeline["ckpt"]),
                    "--manifest",
                    str(pipeline["manifest"]),
                    "--out",
                    str(out2),
                ]
            )
            == 0
        )
        assert out2.read_bytes() == pipeline["emb"].read_bytes()

    def test_seed_flag_changes_synth_output(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(TINY_CONFIG)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        assert cli.main(["synth", "--config", str(cfg), "--out", str(a_dir)]) == 0
        assert (
            cli.main(["synth", "--config", str(cfg), "--seed", "99", "--out", str(b_dir)]) == 0
        )
        img = "images/synth-0-0000.png"
        assert (a_dir / img).read_bytes() != (b_dir / img).read_bytes()


class TestErrors:
    def read_error(self, capsys):
        err = capsys.readouterr().err.strip().split("\n")[-1]
        return json.loads(err)

    def test_missing_manifest_flag(self, capsys):
        code = cli.main(["train", "--out", "/tmp/x.ckpt"])
        assert code == 2
        doc = self.read_error(capsys)
        assert doc["category"] == "config"
        assert "--manifest" in doc["message"]

    def test_unknown_config_key_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nope.key = 1\n")
        code = cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "d")])
        assert code == 2
        assert self.read_error(capsys)["category"] == "config"

    def test_missing_manifest_file_is_format_error(self, tmp_path, capsys):
        code = cli.main(
            ["train", "--manifest", str(tmp_path / "gone.csv"), "--out", str(tmp_path / "x.ckpt")]
        )
        assert code == 6
        assert self.read_error(capsys)["category"] == "format"

    def test_unpreprocessed_images_rejected_by_train(self, tmp_path, capsys):
        # 16px images against the default 32px network input
        items = generate_synthetic(classes=2, per_class=2, size=16, seed=1)
        manifest = write_dataset(tmp_path / "d", items)
        code = cli.main(["train", "--manifest", manifest, "--out", str(tmp_path / "x.ckpt")])
        assert code == 3
        doc = self.read_error(capsys)
        assert doc["category"] == "validation"
        assert "preprocess" in doc["message"]

    def test_query_needs_exactly_one_source(self, pipeline, capsys):
        code = cli.main(
            [
                "query",
                "--emb",
                str(pipeline["emb"]),
                "--k",
                "3",
                "--id",
                "synth-0-0000",
                "--image",
                "x.png",
            ]
        )
        assert code == 2
        assert self.read_error(capsys)["category"] == "config"

    def test_query_image_without_ckpt(self, pipeline, capsys):
        code = cli.main(
            ["query", "--emb", str(pipeline["emb"]), "--k", "3", "--image", "x.png"]
        )
        assert code == 2
        assert "--ckpt" in self.read_error(capsys)["message"]

    def test_query_unknown_id(self, pipeline, capsys):
        code = cli.main(
            ["query", "--emb", str(pipeline["emb"]), "--k", "3", "--id", "who"]
        )
        assert code == 3
        assert self.read_error(capsys)["category"] == "validation"

    def test_corrupt_embedding_file(self, tmp_path, capsys):
        bad = tmp_path / "bad.semb"
        bad.write_bytes(b"not an embedding file")
        code = cli.main(["index", "--emb", str(bad)])
        assert code == 6
        assert self.read_error(capsys)["category"] == "format"

    def test_missing_required_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth"])  # --out is required by argparse
        assert exc.value.code == 2

    def test_radius_error_exit_code(self, tmp_path, capsys):
        from siamret.imaging import LabeledImage

        black = [
            LabeledImage(f"b{i}", np.zeros((16, 16, 3), dtype=np.float32), i % 2)
            for i in range(4)
        ]
        manifest = write_dataset(tmp_path / "d", black)
        code = cli.main(
            ["preprocess", "--manifest", manifest, "--out", str(tmp_path / "out")]
        )
        assert code == 7
        assert self.read_error(capsys)["category"] == "radius_estimation"
