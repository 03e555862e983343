"""Command-line interface: subcommands, determinism, exit codes, formats."""

import json

import pytest

from divemb.cli import main
from divemb.trainer import load_checkpoint

TINY = {
    "data": {"images": 16, "concepts": 8, "d_raw": 16, "noise_sigma": 0.3,
             "style_sigma": 0.15},
    "predictor": {"k": 2, "t": 2, "d": 12, "d_h": 12},
    "train": {"epochs": 2, "batch_images": 8, "val_fraction": 0.25},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def _run(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr().out


def test_datagen_deterministic(cfg_path, tmp_path, capsys):
    a = tmp_path / "a.divc"
    b = tmp_path / "b.divc"
    code, out_a = _run(capsys, "datagen", "--config", cfg_path, "--out", str(a))
    assert code == 0
    code, out_b = _run(capsys, "datagen", "--config", cfg_path, "--out", str(b))
    assert code == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(out_a)
    assert doc["images"] == 16 and doc["captions"] == 64
    assert doc["file_sha256"] == json.loads(out_b)["file_sha256"]


def test_train_eval_pipeline(cfg_path, tmp_path, capsys):
    corpus = tmp_path / "c.divc"
    ckpt = tmp_path / "m.divp"
    csv = tmp_path / "m.csv"
    assert _run(capsys, "datagen", "--config", cfg_path, "--out", str(corpus))[0] == 0

    code, out = _run(capsys, "train", "--config", cfg_path,
                     "--corpus", str(corpus), "--out", str(ckpt),
                     "--metrics", str(csv))
    assert code == 0
    doc = json.loads(out)
    assert not doc["aborted"]
    lines = csv.read_text().strip().splitlines()
    assert lines[0].startswith("epoch,l_tri,l_div,l_mmd")
    assert len(lines) == 1 + TINY["train"]["epochs"]

    # checkpoint echoes the full validated config
    _, echo, _ = load_checkpoint(ckpt)
    assert echo["predictor"]["k"] == 2

    code, report = _run(capsys, "eval", "--checkpoint", str(ckpt),
                        "--corpus", str(corpus))
    assert code == 0
    rep = json.loads(report)
    assert rep["config_digest"] == doc["config_digest"]
    assert 0.0 <= rep["rsum"] <= 600.0


def test_train_and_eval_byte_identical(cfg_path, tmp_path, capsys):
    outputs = []
    ckpts = []
    for tag in ("x", "y"):
        ckpt = tmp_path / f"{tag}.divp"
        code, out = _run(capsys, "train", "--config", cfg_path,
                         "--out", str(ckpt))
        assert code == 0
        doc = json.loads(out)
        doc.pop("checkpoint")      # the only run-specific field is the path
        outputs.append(doc)
        ckpts.append(ckpt.read_bytes())
    assert outputs[0] == outputs[1]
    assert ckpts[0] == ckpts[1]

    evals = []
    for _ in range(2):
        code, out = _run(capsys, "eval", "--checkpoint", str(tmp_path / "x.divp"))
        assert code == 0
        evals.append(out)
    assert evals[0] == evals[1]


def test_eval_slot_mask_and_ensemble(cfg_path, tmp_path, capsys):
    ckpt = tmp_path / "m.divp"
    assert _run(capsys, "train", "--config", cfg_path, "--out", str(ckpt))[0] == 0

    code, masked = _run(capsys, "eval", "--checkpoint", str(ckpt),
                        "--slot-mask", "1,0")
    assert code == 0
    assert "rsum" in json.loads(masked)

    code, ens = _run(capsys, "eval", "--checkpoint", str(ckpt),
                     "--ensemble", str(ckpt))
    assert code == 0
    code, plain = _run(capsys, "eval", "--checkpoint", str(ckpt))
    # self-ensembling averages identical scores: identical report
    assert json.loads(ens)["rsum"] == json.loads(plain)["rsum"]


def test_gradcheck_passes(capsys):
    code, out = _run(capsys, "gradcheck", "--pairs", "10")
    assert code == 0
    assert "FAIL" not in out


def test_bench_op_counts(capsys):
    code, out = _run(capsys, "bench", "--k", "4", "--dim", "1024",
                     "--pairs", "8", "--no-timing")
    assert code == 0
    doc = json.loads(out)
    kinds = doc["kinds"]
    assert kinds["sc"]["ops_per_pair"] > kinds["mil"]["ops_per_pair"]
    assert kinds["mil"]["ops_per_pair"] == 4 * 4 * 1024 + 4 * 4  # dots + max scan


def test_ablate_similarity_grid(cfg_path, tmp_path, capsys):
    out_csv = tmp_path / "ablate.csv"
    code, out = _run(capsys, "ablate", "--config", cfg_path,
                     "--grid", "similarity", "--only", "sc,mil",
                     "--out", str(out_csv))
    assert code == 0
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "grid,value,val_rsum"
    assert len(lines) == 3


def test_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": {}}))
    assert main(["datagen", "--config", str(bad),
                 "--out", str(tmp_path / "x")]) == 1
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.divp")]) == 3
    assert main(["train", "--config", str(tmp_path / "missing.json"),
                 "--out", str(tmp_path / "x")]) == 3
    capsys.readouterr()


def test_unknown_keys_rejected(tmp_path, capsys):
    doc = dict(TINY)
    doc["train"] = dict(TINY["train"], lr_warmup="nope")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    assert main(["datagen", "--config", str(p),
                 "--out", str(tmp_path / "x")]) == 1
    capsys.readouterr()
