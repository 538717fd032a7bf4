import hashlib
import json
import subprocess
import sys

import pytest

from rbg.cli import faithfulness_probe, run
from rbg.corpus import Question, read_jsonl, write_jsonl


def sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


def ok(*argv):
    code = run([str(a) for a in argv])
    assert code == 0, argv
    return code


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    ok("fixture", "--out", d / "data")
    c = d / "data" / "fixture_corpus.jsonl"
    ok("index", "--corpus", c, "--questions", d / "data" / "fixture_train.jsonl", "--questions",
       d / "data" / "fixture_valid.jsonl", "--model-config", _model_cfg(d), "--out", d / "dense.idx")
    ok("index", "--corpus", c, "--mode", "bm25", "--out", d / "bm25.json")
    for split in ("train", "valid", "extractive"):
        ok("retrieve", "--corpus", c, "--questions", d / "data" / f"fixture_{split}.jsonl", "--mode", "bm25",
           "--index", d / "bm25.json", "--k", 3, "--out", d / f"ret_{split}.jsonl")
    (d / "ret_all.jsonl").write_text((d / "ret_train.jsonl").read_text() + (d / "ret_valid.jsonl").read_text())
    return d


def _model_cfg(d):
    p = d / "model.json"
    p.write_text(json.dumps({"d_model": 32, "d_ff": 64, "enc_layers": 1, "dec_layers": 1, "reader_layers": 1}))
    return p


def test_usage_errors(capsys):
    assert run(["generate", "--bogus"]) == 2
    assert run(["nosuchcommand"]) == 2
    assert run(["evaluate", "--predictions", "x", "--gold", "y", "--out", "z", "--jobs", "0"]) == 2


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "rbg.cli", "index", "--unknown"], capture_output=True)
    assert proc.returncode == 2 and b"usage" in proc.stderr


def test_missing_file(tmp_path, capsys):
    (tmp_path / "g.jsonl").write_text(json.dumps({"id": "q", "question": "?", "answers": ["x"]}) + "\n")
    code = run(["evaluate", "--predictions", str(tmp_path / "nope.jsonl"), "--gold", str(tmp_path / "g.jsonl"),
                "--out", str(tmp_path / "r.json")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["path"].endswith("nope.jsonl")


def test_evaluate_identical_files(ws, capsys):
    gold = ws / "data" / "fixture_valid.jsonl"
    ok("evaluate", "--predictions", gold, "--gold", gold, "--out", ws / "self.json")
    report = json.loads((ws / "self.json").read_text())
    assert report["means"]["f1"] == 1.0
    assert (ws / "self.json.bins.png").stat().st_size > 0
    manifest = json.loads((ws / "self.json.manifest.json").read_text())
    assert manifest["command"] == "evaluate" and manifest["seed"] == 0
    assert manifest["inputs"][str(gold)] == sha(gold)
    assert str(ws / "self.json") in manifest["outputs"]
    assert {"started", "finished", "config"} <= set(manifest)


def test_index_outputs(ws):
    assert (ws / "dense.idx").read_bytes()[:8] == b"RBGDENSE"
    assert (ws / "dense.idx.model.pt").exists()
    assert json.loads((ws / "dense.idx.manifest.json").read_text())["config"]["mode"] == "dense"
    rows = read_jsonl(ws / "ret_valid.jsonl")
    assert all(r["mode"] == "bm25" and len(r["retrieved"]) <= 3 for r in rows)


def test_dense_retrieve_and_hash_check(ws, tmp_path):
    c = ws / "data" / "fixture_corpus.jsonl"
    q = ws / "data" / "fixture_valid.jsonl"
    ok("retrieve", "--corpus", c, "--questions", q, "--index", ws / "dense.idx", "--checkpoint",
       ws / "dense.idx.model.pt", "--k", 5, "--out", tmp_path / "d.jsonl")
    assert all(len(r["retrieved"]) == 5 for r in read_jsonl(tmp_path / "d.jsonl"))
    ok("index", "--corpus", c, "--seed", 1, "--out", tmp_path / "other.idx")
    assert run(["retrieve", "--corpus", str(c), "--questions", str(q), "--index", str(ws / "dense.idx"),
                "--checkpoint", str(tmp_path / "other.idx.model.pt"), "--out", str(tmp_path / "x.jsonl")]) == 1


def test_random_retrieve_seeded(ws, tmp_path):
    args = ["retrieve", "--corpus", ws / "data" / "fixture_corpus.jsonl", "--questions",
            ws / "data" / "fixture_valid.jsonl", "--mode", "random", "--k", 3]
    ok(*args, "--seed", 4, "--out", tmp_path / "a.jsonl")
    ok(*args, "--seed", 4, "--out", tmp_path / "b.jsonl")
    ok(*args, "--seed", 5, "--out", tmp_path / "c.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "c.jsonl").read_bytes()


@pytest.fixture(scope="module")
def trained(ws):
    c = ws / "data" / "fixture_corpus.jsonl"
    ok("pretrain-build", "--corpus", c, "--checkpoint", ws / "dense.idx.model.pt", "--n", 30, "--k", 3,
       "--out", ws / "rar.jsonl")
    ok("pretrain", "--corpus", c, "--checkpoint", ws / "dense.idx.model.pt", "--examples", ws / "rar.jsonl",
       "--steps", 10, "--out", ws / "pre.pt")
    ok("train", "--corpus", c, "--checkpoint", ws / "pre.pt", "--train", ws / "data" / "fixture_train.jsonl",
       "--valid", ws / "data" / "fixture_valid.jsonl", "--retrievals", ws / "ret_all.jsonl", "--k", 3,
       "--lr", 1e-3, "--steps", 20, "--eval-interval", 10, "--eval-max-target", 10, "--out", ws / "model.pt")
    return ws / "model.pt"


def test_pretrain_build_defaults(ws, tmp_path):
    ok("pretrain-build", "--corpus", ws / "data" / "fixture_corpus.jsonl", "--k", 5, "--n", 20, "--seed", 3,
       "--out", tmp_path / "r.jsonl")
    rows = read_jsonl(tmp_path / "r.jsonl")
    assert len(rows) == 20
    assert set(rows[0]) >= {"sentence", "pseudo_query", "retrieved", "mask_positions"}


def test_train_outputs(trained):
    ws = trained.parent
    log = read_jsonl(str(trained) + ".log.jsonl")
    assert [r["step"] for r in log] == list(range(1, 21))
    assert (ws / "model.pt.state.pt").exists() and (ws / "model.pt.losses.png").exists()
    assert (ws / "pre.pt.losses.json").exists()
    assert json.loads((ws / "model.pt.manifest.json").read_text())["config"]["max_steps"] == 20


def test_generate_deterministic_and_inputs_untouched(ws, trained, tmp_path):
    q = ws / "data" / "fixture_valid.jsonl"
    before = sha(q)
    args = ["generate", "--corpus", ws / "data" / "fixture_corpus.jsonl", "--checkpoint", trained, "--questions", q,
            "--retrievals", ws / "ret_valid.jsonl", "--k", 3, "--beam", 1, "--max-target", 20]
    ok(*args, "--out", tmp_path / "g1.jsonl")
    ok(*args, "--out", tmp_path / "g2.jsonl")
    assert (tmp_path / "g1.jsonl").read_bytes() == (tmp_path / "g2.jsonl").read_bytes()
    assert [r["id"] for r in read_jsonl(tmp_path / "g1.jsonl")] == [r["id"] for r in read_jsonl(q)]
    assert sha(q) == before


def test_generate_with_dense_retrieval(ws, trained, tmp_path):
    ok("generate", "--corpus", ws / "data" / "fixture_corpus.jsonl", "--checkpoint", trained, "--questions",
       ws / "data" / "fixture_valid.jsonl", "--k", 2, "--beam", 1, "--max-target", 5, "--out", tmp_path / "g.jsonl")
    assert len(read_jsonl(tmp_path / "g.jsonl")) == 10


def test_ablate_command(ws, trained, tmp_path):
    ok("ablate", "--corpus", ws / "data" / "fixture_corpus.jsonl", "--checkpoint", ws / "pre.pt",
       "--train", ws / "data" / "fixture_train.jsonl", "--valid", ws / "data" / "fixture_valid.jsonl",
       "--retrievals", ws / "ret_all.jsonl", "--k", 3, "--lr", 1e-3, "--steps", 4, "--eval-interval", 4,
       "--eval-max-target", 5, "--variants", "full,no_reader,no_pretrain", "--out", tmp_path / "abl.json")
    rows = json.loads((tmp_path / "abl.json").read_text())["rows"]
    assert [r["variant"] for r in rows] == ["full", "no_reader", "no_pretrain"]
    assert (tmp_path / "abl.json.png").exists()
    assert run(["ablate", "--variants", "bogus"]) == 2


def test_faithfulness_empty_generation(trained, monkeypatch):
    import rbg.cli as cli
    from rbg.model import RBGModel

    questions = [Question("b", "?", ("chile",)), Question("a", "?", ("peru",))]
    monkeypatch.setattr(cli, "predict", lambda *a, **k: {q.q_id: "" for q in questions})
    report = faithfulness_probe(RBGModel.load(trained), questions, {})
    assert report["recall"] == 0.0
    assert [r["id"] for r in report["rows"]] == ["b", "a"]
    with pytest.raises(cli.CliError, match="no gold short answer"):
        faithfulness_probe(RBGModel.load(trained), [Question("c", "?", ())], {})


def test_faithfulness_echo_checkpoint(ws, tmp_path):
    c = ws / "data" / "fixture_corpus.jsonl"
    docs = read_jsonl(c)
    echo = [{"id": "e" + d["id"], "question": f"Which country is {d['title']} in?",
             "answers": [d["text"].split(". ")[0] + "."], "provenance": [d["id"]]} for d in docs[:40]]
    write_jsonl(tmp_path / "echo.jsonl", echo)
    ok("retrieve", "--corpus", c, "--questions", tmp_path / "echo.jsonl", "--mode", "bm25", "--index",
       ws / "bm25.json", "--k", 3, "--out", tmp_path / "ret.jsonl")
    ok("index", "--corpus", c, "--out", tmp_path / "base.idx")
    ok("train", "--corpus", c, "--checkpoint", tmp_path / "base.idx.model.pt", "--train", tmp_path / "echo.jsonl",
       "--retrievals", tmp_path / "ret.jsonl", "--k", 3, "--lr", 1e-3, "--steps", 150, "--generator-warmup", 50,
       "--out", tmp_path / "echo.pt")
    ok("faithfulness", "--corpus", c, "--checkpoint", tmp_path / "echo.pt", "--questions",
       ws / "data" / "fixture_extractive.jsonl", "--retrievals", ws / "ret_extractive.jsonl", "--k", 3,
       "--out", tmp_path / "f.json")
    report = json.loads((tmp_path / "f.json").read_text())
    assert report["recall"] >= 0.8
    assert report["table"][0]["fixture_extractive"] == report["recall"]
    assert [r["id"] for r in report["rows"]] == [r["id"] for r in read_jsonl(ws / "data" / "fixture_extractive.jsonl")]
