import json
import subprocess
import sys

import numpy as np
import pytest

from gpfnet import autodiff as ad
from gpfnet.checkpoint import (
    Checkpoint,
    CheckpointError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from gpfnet.cli import main
from gpfnet.config import ConfigFileError, build_run_config, write_config_file
from gpfnet.data import load_dataset
from gpfnet.model import GpfModel, ModelConfig

SMALL = ["--img-dim", "12", "--txt-dim", "10", "--n-tokens", "2"]
TINY = [
    "--d-model", "16", "--fusion-layers", "1", "--fusion-heads", "2",
    "--encoder-layers", "1", "--encoder-heads", "2", "--iterations", "3",
]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["gen-synth", "--ids", "8", "--per-id", "4", "--out", str(path), *SMALL]) == 0
    return path


def train(tmp_path, data, name="m.gpfn", extra=()):
    out = tmp_path / name
    rc = main(["train", "--data", str(data), "--out", str(out), *TINY, *extra])
    return rc, out


# gen-synth ------------------------------------------------------------------

def test_gen_synth_counts(data):
    ds = load_dataset(data)
    assert ds.count == 32 and len(set(ds.labels.tolist())) == 8


def test_gen_synth_deterministic(tmp_path):
    for name in ("a.bin", "b.bin"):
        assert main(["gen-synth", "--seed", "4", "--out", str(tmp_path / name), *SMALL]) == 0
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


@pytest.mark.parametrize(
    "argv",
    [
        ["gen-synth", "--ids", "0", "--out", "x.jsonl"],
        ["gen-synth", "--noise", "-1", "--out", "x.jsonl"],
        ["train", "--iterations", "0"],
        ["train", "--mode", "both"],
        ["bogus"],
        [],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_unwritable_output_exits_1(tmp_path):
    assert main(["gen-synth", "--out", str(tmp_path / "nope" / "d.bin"), *SMALL]) == 1


# train ----------------------------------------------------------------------

def test_train_one_iteration(tmp_path, data):
    rc, out = train(tmp_path, data, extra=["--iterations", "1"])
    assert rc == 0
    lines = (tmp_path / "m.gpfn.loss.tsv").read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("1\t")
    assert load_checkpoint(out).step == 1


def test_train_deterministic_logs(tmp_path, data):
    for name in ("a", "b"):
        assert train(tmp_path, data, name=name)[0] == 0
    assert (tmp_path / "a.loss.tsv").read_bytes() == (tmp_path / "b.loss.tsv").read_bytes()
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_train_too_small_exits_1(tmp_path, data, capsys):
    rc, _ = train(tmp_path, data, extra=["--p-identities", "9", "--k-instances", "2", "--batch-size", "18"])
    assert rc == 1
    assert "need 9 identities" in capsys.readouterr().err


def test_train_missing_data_exits_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "m")]) == 1


def test_train_bad_pk_product_exits_1(tmp_path, data):
    rc, _ = train(tmp_path, data, extra=["--p-identities", "4", "--k-instances", "2", "--batch-size", "9"])
    assert rc == 1


# eval -----------------------------------------------------------------------

def test_eval_report_schema(tmp_path, data):
    _, ckpt = train(tmp_path, data)
    report = tmp_path / "r.json"
    assert main(["eval", "--checkpoint", str(ckpt), "--query", str(data), "--out", str(report)]) == 0
    d = json.loads(report.read_text())
    assert set(d) == {"mAP", "cmc", "num_queries", "num_skipped"}
    assert set(d["cmc"]) == {"1", "5", "10"}
    assert d["num_queries"] == 32
    assert all(0.0 <= v <= 1.0 for v in [d["mAP"], *d["cmc"].values()])


def test_eval_single_rank(tmp_path, data):
    _, ckpt = train(tmp_path, data)
    report = tmp_path / "r.json"
    main(["eval", "--checkpoint", str(ckpt), "--query", str(data), "--ks", "1", "--out", str(report)])
    assert list(json.loads(report.read_text())["cmc"]) == ["1"]


def test_eval_reports_deterministic(tmp_path, data):
    _, ckpt = train(tmp_path, data)
    for name in ("a.json", "b.json"):
        main(["eval", "--checkpoint", str(ckpt), "--query", str(data), "--out", str(tmp_path / name)])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_eval_dim_mismatch_exits_1(tmp_path, data, capsys):
    _, ckpt = train(tmp_path, data)
    other = tmp_path / "o.jsonl"
    main(["gen-synth", "--out", str(other), "--img-dim", "7", "--txt-dim", "10"])
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--query", str(other)]) == 1
    err = capsys.readouterr().err
    assert "img=7" in err and "img=12" in err


def test_eval_bad_ks_exits_2(tmp_path, data):
    _, ckpt = train(tmp_path, data)
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", str(ckpt), "--query", str(data), "--ks", "5,1"])
    assert exc.value.code == 2


def test_eval_corrupt_checkpoint_exits_1(tmp_path, data):
    bad = tmp_path / "bad.gpfn"
    bad.write_bytes(b"GPFN\x01\x00garbage")
    assert main(["eval", "--checkpoint", str(bad), "--query", str(data)]) == 1


# ablate ---------------------------------------------------------------------

def test_ablate_rows_and_composition(tmp_path, data):
    table_path = tmp_path / "t.json"
    assert main(["ablate", "--data", str(data), "--out", str(table_path), *TINY]) == 0
    table = json.loads(table_path.read_text())
    assert [r["mode"] for r in table["rows"]] == ["baseline", "text_only", "image_only", "full"]
    assert "baseline" in table["note"]
    _, ckpt = train(tmp_path, data)
    report = tmp_path / "r.json"
    main(["eval", "--checkpoint", str(ckpt), "--query", str(data), "--out", str(report)])
    standalone = json.loads(report.read_text())
    full = table["rows"][3]
    assert full["mAP"] == standalone["mAP"]
    for k, v in standalone["cmc"].items():
        assert full[f"Rank-{k}"] == v
    losses = (tmp_path / "m.gpfn.loss.tsv").read_text().splitlines()
    assert full["final_loss"] == float(losses[-1].split("\t")[1])


# gradcheck ------------------------------------------------------------------

GC = ["gradcheck", "--d-model", "8", "--layers", "1", "--max-coords", "6"]


def test_gradcheck_passes(tmp_path, capsys):
    out = tmp_path / "g.txt"
    assert main([*GC, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    names = [l.split()[0] for l in lines]
    cfg = ModelConfig(d_model=8, img_dim=8, txt_dim=6, fusion_layers=1, encoder_layers=1)
    assert names == [n for n, _ in GpfModel.init(cfg).named_parameters()]
    assert all(l.endswith("ok") for l in lines)


def test_gradcheck_detects_corrupt_backward(monkeypatch, capsys):
    def bad_sigmoid(x):
        y = 1.0 / (1.0 + np.exp(-x.data))
        return ad._make(y, (x,), lambda g: (g * y,), "sigmoid")  # missing (1 - y)

    monkeypatch.setattr(ad, "sigmoid", bad_sigmoid)
    assert main(GC) == 1
    assert "fusion.0.gate" in capsys.readouterr().err


# config ---------------------------------------------------------------------

def test_config_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nlr = 0.01\niterations = 7\nks = 1,3\n")
    cfg = build_run_config(path, iterations=9)
    assert (cfg.lr, cfg.iterations, cfg.ks, cfg.margin) == (0.01, 9, [1, 3], 0.3)
    assert build_run_config().lr == 3.5e-4


def test_config_file_round_trip(tmp_path):
    cfg = build_run_config(lr=0.02, ks=[1, 2], data="x.bin")
    write_config_file(cfg, tmp_path / "c.cfg")
    back = build_run_config(tmp_path / "c.cfg")
    assert (back.lr, back.ks, back.data) == (0.02, [1, 2], "x.bin")


@pytest.mark.parametrize("text", ["bogus = 1\n", "lr 0.1\n", "iterations = many\n", "ks = 3,1\n"])
def test_config_file_errors(tmp_path, text):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ConfigFileError):
        build_run_config(path)


def test_cli_config_file_used(tmp_path, data):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(f"data = {data}\niterations = 2\n")
    out = tmp_path / "m"
    assert main(["train", "--config", str(cfg), "--out", str(out), *TINY[:-2]]) == 0
    assert len((tmp_path / "m.loss.tsv").read_text().splitlines()) == 2
    assert main(["train", "--config", str(cfg), "--out", str(out), *TINY[:-2], "--iterations", "1"]) == 0
    assert len((tmp_path / "m.loss.tsv").read_text().splitlines()) == 1


def test_cli_bad_config_exits_2(tmp_path, data):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("nonsense = 1\n")
    with pytest.raises(SystemExit) as exc:
        main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "m")])
    assert exc.value.code == 2


# checkpoint -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(d_model=16, img_dim=12, txt_dim=10, fusion_layers=2, fusion_heads=4,
                      encoder_layers=2, encoder_heads=2, num_identities=5)
    model = GpfModel.init(cfg, 3)
    path = tmp_path / "m.gpfn"
    save_checkpoint(Checkpoint(model, 42, 3), path)
    ck = load_checkpoint(path)
    assert (ck.step, ck.seed, ck.model.config) == (42, 3, cfg)
    rng = np.random.default_rng(0)
    x, tok = rng.normal(size=(100, 12)), rng.normal(size=(100, 3, 10))
    a, b = model.forward(x, tok), ck.model.forward(x, tok)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert a.intermediate.tobytes() == b.intermediate.tobytes()
    save_checkpoint(ck, tmp_path / "again.gpfn")
    assert (tmp_path / "again.gpfn").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_damage(tmp_path):
    model = GpfModel.init(ModelConfig(d_model=4, img_dim=3, txt_dim=2, fusion_heads=2, encoder_heads=2), 0)
    raw = to_bytes(Checkpoint(model, 1, 0))
    for blob in (b"NOPE" + raw[4:], raw[:-8], raw + b"\0"):
        with pytest.raises(CheckpointError):
            from_bytes(blob)


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "gpfnet.cli", "gen-synth", "--ids", "0", "--out", str(tmp_path / "x")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
