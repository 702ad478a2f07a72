import json
from dataclasses import asdict

import pytest

from gramalign.cli import main, sidecar_path
from gramalign.config import TrainConfig
from gramalign.kgdata import SyntheticSpec

TINY = {"hidden_dim": 8, "epochs": 2, "batch_size": 32, "fusion.heads": 2, "fusion.ffn_dim": 8,
        "loss.topk": 4, "visual_dim": 6}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(asdict(SyntheticSpec(n=24, visual_dim=6, attr_vocab=12))))
    cfg = root / "cfg.json"
    TrainConfig.from_flat(TINY).to_json(cfg)
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data"), "--seed", "4"]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_synth_layout(workspace):
    names = {p.name for p in (workspace / "data").iterdir()}
    assert {"triples_1", "triples_2", "ent_ids_1", "ent_ids_2", "ill_ent_ids"} <= names


def test_train_then_eval(workspace, capsys):
    ckpt = workspace / "model.bin"
    code, out = run(capsys, "train", "--data", workspace / "data", "--config", workspace / "cfg.json",
                    "--out", ckpt)
    assert code == 0 and "final loss" in out.out
    assert json.loads(sidecar_path(ckpt).read_text())["variant"] == "full"
    code, out = run(capsys, "eval", "--data", workspace / "data", "--ckpt", ckpt, "--json")
    rep = json.loads(out.out)
    assert code == 0 and set(rep) == {"hits1", "hits10", "mrr", "ranks"}
    assert 0 < rep["mrr"] <= 1 and min(rep["ranks"]) >= 1
    code, out = run(capsys, "eval", "--data", workspace / "data", "--ckpt", ckpt)
    assert code == 0 and "Hits@1" in out.out


def test_train_is_reproducible(workspace, capsys):
    a, b = workspace / "a.bin", workspace / "b.bin"
    for path in (a, b):
        run(capsys, "train", "--data", workspace / "data", "--config", workspace / "cfg.json", "--out", path)
    assert a.read_bytes() == b.read_bytes()


def test_ablate_json(workspace, capsys):
    code, out = run(capsys, "ablate", "--variant", "full,no_gram", "--data", workspace / "data",
                    "--config", workspace / "cfg.json", "--seeds", "0,1", "--json")
    rep = json.loads(out.out)
    assert code == 0 and rep["seeds"] == [0, 1]
    assert set(rep["variants"]) == {"full", "no_gram"}
    runs = rep["variants"]["full"]["runs"]
    assert len(runs) == 2
    assert abs(rep["variants"]["full"]["mean"]["mrr"] - (runs[0]["mrr"] + runs[1]["mrr"]) / 2) < 1e-12


def test_sweep_json(workspace, capsys):
    code, out = run(capsys, "sweep", "--ratios", "0.1,0.3", "--data", workspace / "data",
                    "--config", workspace / "cfg.json", "--json")
    rows = json.loads(out.out)["sweep"]
    assert code == 0 and [r["ratio"] for r in rows] == [0.1, 0.3]


def test_errors_exit_nonzero(workspace, capsys):
    code, out = run(capsys, "eval", "--data", workspace / "missing", "--ckpt", workspace / "nope.bin")
    assert code == 2 and "error" in out.err
    code, out = run(capsys, "ablate", "--variant", "bogus", "--data", workspace / "data")
    assert code == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])
