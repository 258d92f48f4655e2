import json
import subprocess
import sys
from pathlib import Path

import pytest

from slicenet import config as config_mod
from slicenet.cli import audit_report, main, parse_stack, UsageError
from slicenet.convops import table1_params
from slicenet.errors import ConfigurationError
from slicenet.model import CHECKPOINT_MAGIC, ModelConfig, SliceNet

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "copy_smoke.json"


def tiny_config(**train):
    t = {"steps": 6, "batch_size": 4, "eval_every": 3, "eval_batches": 1, "dropout": False}
    t.update(train)
    return {
        "model": {
            "depth": 8,
            "vocab_src": 8,
            "vocab_tgt": 8,
            "encoder_modules": 1,
            "decoder_modules": 1,
            "module": {"steps": [[3, 1], [3, 1]], "residual_after": [2], "dropout_p": 0.0},
        },
        "train": t,
        "data": {"task": "copy", "max_len": 4},
    }


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_config(), indent=2))
    return p


@pytest.fixture
def trained(tmp_path, cfg_file, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--out", str(out), "--seed", "3"]) == 0
    capsys.readouterr()
    return out


class TestConfigFiles:
    def test_defaults_filled(self):
        cfg = config_mod.from_dict({})
        assert cfg.decode.beam == 4
        assert cfg.model.encoder_modules == 6

    def test_unknown_key_has_line(self):
        text = '{\n  "model": {\n    "depht": 8\n  }\n}\n'
        with pytest.raises(ConfigurationError, match=r"x\.json:3: model\.depht: unknown key"):
            config_mod.loads(text, "x.json")

    def test_bad_type_has_field(self):
        text = '{"train": {"steps": "many"}}'
        with pytest.raises(ConfigurationError, match=r"train\.steps: expected an integer"):
            config_mod.loads(text, "x.json")

    def test_invalid_json_position(self):
        with pytest.raises(ConfigurationError, match=r"x\.json:2:"):
            config_mod.loads('{\n  "model": ,\n}', "x.json")

    def test_semantic_error_located(self):
        with pytest.raises(ConfigurationError, match=r"model.*even"):
            config_mod.loads('{"model": {"depth": 7}}', "x.json")

    def test_synthetic_vocab_must_agree(self):
        with pytest.raises(ConfigurationError, match="vocab_src == model.vocab_tgt"):
            config_mod.from_dict({"model": {"vocab_src": 8, "vocab_tgt": 9}})

    def test_resolved_roundtrip(self):
        cfg = config_mod.from_dict(tiny_config())
        again = config_mod.loads(cfg.to_json())
        assert again == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="nope.json"):
            config_mod.load(tmp_path / "nope.json")

    @pytest.mark.parametrize("path", sorted((ROOT / "configs").glob("*.json")), ids=lambda p: p.name)
    def test_shipped_configs_load(self, path):
        cfg = config_mod.load(path)
        assert audit_report(cfg)["total"] > 0


class TestTrain:
    def test_outputs(self, trained, capsys):
        assert (trained / "final.ckpt").read_bytes().startswith(CHECKPOINT_MAGIC)
        for name in ("best.ckpt", "metrics.jsonl", "config.json", "vocab.src.txt", "vocab.tgt.txt"):
            assert (trained / name).exists(), name

    def test_config_echo_rebuilds_model(self, trained):
        cfg = config_mod.load(trained / "config.json")
        assert cfg.train.seed == 3
        names = set(SliceNet(cfg.model).params.names())
        original = set(SliceNet(config_mod.from_dict(tiny_config()).model).params.names())
        assert names == original

    def test_same_seed_same_bytes(self, tmp_path, cfg_file, capsys):
        outs = []
        for i in range(2):
            out = tmp_path / f"r{i}"
            assert main(["train", "--config", str(cfg_file), "--out", str(out), "--seed", "1"]) == 0
            outs.append((out / "final.ckpt").read_bytes())
        assert outs[0] == outs[1]

    def test_seed_precedence(self, tmp_path, cfg_file, monkeypatch, capsys):
        monkeypatch.setenv("SLICENET_SEED", "11")
        main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "env")])
        assert config_mod.load(tmp_path / "env" / "config.json").train.seed == 11
        main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "cli"), "--seed", "12"])
        assert config_mod.load(tmp_path / "cli" / "config.json").train.seed == 12
        monkeypatch.delenv("SLICENET_SEED")
        main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "cfg")])
        assert config_mod.load(tmp_path / "cfg" / "config.json").train.seed == 0

    def test_bad_env_seed(self, tmp_path, cfg_file, monkeypatch, capsys):
        monkeypatch.setenv("SLICENET_SEED", "abc")
        assert main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "x")]) == 2
        assert "SLICENET_SEED" in capsys.readouterr().err

    def test_missing_config(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
        assert code == 2
        assert "missing.json" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text('{"train": {"stepz": 3}}')
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
        assert "train.stepz" in capsys.readouterr().err

    def test_non_finite_exit_code(self, tmp_path, capsys):
        cfg = tiny_config()
        cfg["train"]["optimizer"] = {"lr": 1e300, "warmup": 0}
        p = tmp_path / "nan.json"
        p.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 3
        assert "non-finite" in capsys.readouterr().err

    def test_quiet_unless_verbose(self, tmp_path, cfg_file, capsys):
        main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "q")])
        assert capsys.readouterr().err == ""
        main(["train", "--config", str(cfg_file), "--out", str(tmp_path / "v"), "--verbose"])
        assert "step 3" in capsys.readouterr().err

    def test_corpus_data(self, tmp_path, capsys):
        for name, text in {"s": "a b\nb a a\nc\n", "t": "x\ny y\nx z\n"}.items():
            (tmp_path / name).write_text(text)
        cfg = tiny_config()
        del cfg["model"]["vocab_src"], cfg["model"]["vocab_tgt"]
        files = {"train_src": "s", "train_tgt": "t", "eval_src": "s", "eval_tgt": "t"}
        cfg["data"] = {"corpus": {k: str(tmp_path / v) for k, v in files.items()}}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["train", "--config", str(p), "--out", str(out)]) == 0
        resolved = config_mod.load(out / "config.json")
        assert resolved.model.vocab_src == 7 and resolved.model.vocab_tgt == 7
        (tmp_path / "in.txt").write_text("a b\n")
        assert main(["decode", "--checkpoint", str(out / "final.ckpt"), "--input", str(tmp_path / "in.txt")]) == 0


class TestDecode:
    def run(self, trained, capsys, *extra, text="3 4 5\n\n6 7\n"):
        inp = trained / "in.txt"
        inp.write_text(text)
        code = main(["decode", "--checkpoint", str(trained / "final.ckpt"), "--input", str(inp), *extra])
        return code, capsys.readouterr()

    def test_line_aligned(self, trained, capsys):
        code, cap = self.run(trained, capsys)
        assert code == 0 and cap.err == ""
        lines = cap.out.split("\n")
        assert len(lines) == 4 and lines[1] == "" and lines[3] == ""

    def test_rerun_identical(self, trained, capsys):
        a = self.run(trained, capsys, "--beam", "1")[1].out
        b = self.run(trained, capsys, "--beam", "1")[1].out
        assert a == b

    def test_workers_do_not_change_output(self, trained, capsys):
        text = "".join(f"{3 + i % 5} {3 + (i * 3) % 5}\n" for i in range(6))
        a = self.run(trained, capsys, "--workers", "1", text=text)[1].out
        b = self.run(trained, capsys, "--workers", "3", text=text)[1].out
        assert a == b

    def test_empty_input(self, trained, capsys):
        code, cap = self.run(trained, capsys, text="")
        assert code == 0 and cap.out == ""

    def test_out_file(self, trained, capsys):
        code, cap = self.run(trained, capsys, "--out", str(trained / "o.txt"))
        assert code == 0 and cap.out == ""
        assert len((trained / "o.txt").read_text().splitlines()) == 3

    def test_unknown_token(self, trained, capsys):
        code, cap = self.run(trained, capsys, text="3 banana\n")
        assert code == 2 and "banana" in cap.err

    def test_mismatch_names_parameter(self, trained, capsys):
        cfg = tiny_config()
        cfg["model"]["decoder_modules"] = 2
        other = trained / "other.json"
        other.write_text(json.dumps(cfg))
        code, cap = self.run(trained, capsys, "--config", str(other))
        assert code == 2 and "decoder/module2" in cap.err

    def test_bad_beam(self, trained, capsys):
        code, cap = self.run(trained, capsys, "--beam", "0")
        assert code == 2


class TestAudit:
    def test_matches_formulas_and_model(self, cfg_file, capsys):
        cfg = config_mod.load(cfg_file)
        rep = audit_report(cfg)
        assert (rep["embedding"], rep["non_embedding"]) == SliceNet(cfg.model).count_parameters()
        for row in rep["layers"]:
            if "formula" in row:
                assert row["params"] == row["formula"]
        assert rep["non_embedding"] == rep["conv_params"] + rep["layer_norm_params"] + rep["projection_params"]

    def test_full_vs_separable_large(self, tmp_path, capsys):
        out = {}
        for mode in ("full", "separable"):
            p = tmp_path / f"{mode}.json"
            p.write_text(json.dumps({"model": {"depth": 1000, "mode": mode, "encoder_modules": 1, "decoder_modules": 0,
                                               "module": {"steps": [[3, 1]], "residual_after": []}}}))
            assert main(["audit", "--config", str(p), "--json"]) == 0
            rep = json.loads(capsys.readouterr().out)
            out[mode] = rep["layers"][0]["params"]
        assert out == {"full": 3_000_000, "separable": 1_003_000}
        assert out["full"] == table1_params("full", 3, 1000)

    def test_stable_text(self, cfg_file, capsys):
        main(["audit", "--config", str(cfg_file)])
        a = capsys.readouterr().out
        main(["audit", "--config", str(cfg_file)])
        assert capsys.readouterr().out == a
        assert "non-embedding" in a


class TestAnalyze:
    def report(self, capsys, stack):
        assert main(["analyze", "--stack", stack, "--json"]) == 0
        return json.loads(capsys.readouterr().out)

    def test_dilated_stack(self, capsys):
        rep = self.report(capsys, '{"k": [3, 3, 3, 3], "d": [1, 2, 4, 8]}')
        assert rep["stack"]["receptive_field"] == 31 == rep["stack"]["probe_receptive_field"]
        assert rep["undilated_alternative"]["receptive_field"] == 31

    def test_wide_stack(self, capsys):
        rep = self.report(capsys, "[[3, 1], [7, 1], [15, 1], [31, 1]]")
        assert rep["stack"]["receptive_field"] == 53
        assert rep["stack"]["dead_zones"] == []

    def test_single_dilated_layer(self, capsys):
        rep = self.report(capsys, '[{"k": 3, "d": 2}]')
        assert rep["stack"]["dead_zones"] == [-1, 1]
        assert rep["undilated_alternative"]["layers"] == [[5, 1]]
        assert rep["param_ratio"] > 1.0

    def test_options_and_file(self, tmp_path, capsys):
        p = tmp_path / "s.json"
        p.write_text('{"layers": [[3, 1], [3, 2]], "channels": 6, "mode": "super", "g": 3, "padding": "causal"}')
        rep = self.report(capsys, str(p))
        assert rep["mode"] == "super" and rep["stack"]["params"] == 2 * (3 * 6 + 36 // 3)
        assert max(int(o) for o in rep["stack"]["coverage"]) == 0

    def test_text_output(self, capsys):
        assert main(["analyze", "--stack", "[[3, 2]]"]) == 0
        out = capsys.readouterr().out
        assert "receptive field      5" in out and "dead zones           2" in out

    @pytest.mark.parametrize("bad", ["[[3, 1", '{"k": [3], "d": [1, 2]}', "[[0, 1]]", '[["a", 1]]', "[]"])
    def test_malformed(self, bad, capsys):
        assert main(["analyze", "--stack", bad]) == 2
        assert capsys.readouterr().err.startswith("slicenet: error:")

    def test_parse_stack_direct(self):
        assert [s.k for s in parse_stack('{"k": [3, 5]}')] == [3, 5]
        with pytest.raises(UsageError):
            parse_stack('{"layers": [[3, 1]], "colour": 1}')


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "slicenet", "analyze", "--stack", "[[3, 1]]"], capture_output=True, text=True
    )
    assert proc.returncode == 0 and proc.stderr == ""
    bad = subprocess.run([sys.executable, "-m", "slicenet", "frobnicate"], capture_output=True, text=True)
    assert bad.returncode == 2
