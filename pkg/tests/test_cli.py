import json
import logging

import numpy as np
import pytest

from synemb import model as M
from synemb import trainer as T
from synemb.bpe import load_bpe
from synemb.cli import main
from synemb.evaluation import load_external_embeddings, write_embeddings
from synemb.synthgen import builtin_grammar, generate_eval_set


def write_conllu(path, sentences):
    blocks = []
    for s in sentences:
        lines = [f"# sent_id = {s.id}"]
        for i, (w, t) in enumerate(zip(s.text.split(), s.upos), 1):
            lines.append(f"{i}\t{w}\t{w}\t{t}\t_\t_\t0\tdep\t_\t_")
        blocks.append("\n".join(lines))
    path.write_text("\n\n".join(blocks) + "\n", encoding="utf-8")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = {k: str(d / v) for k, v in dict(
        en="en.tsv", es="es.tsv", fr="fr.tsv", bpe="joint.bpe", ckpt="model.ckpt", ft="ft.ckpt",
        evalset="eval.jsonl", emb="emb.tsv", nn="nn", conllu="ud.conllu", fd="fd", built="built.jsonl",
    ).items()}
    assert main(["generate", "--src", "en", "--tgt", "de", "--count", "200", "--seed", "1", "--out", p["en"]]) == 0
    assert main(["generate", "--src", "es", "--tgt", "de", "--count", "200", "--seed", "2", "--out", p["es"]]) == 0
    assert main(["generate", "--src", "fr", "--tgt", "de", "--count", "60", "--seed", "3", "--out", p["fr"]]) == 0
    assert main(["learn-bpe", "--input", p["en"], p["es"], p["fr"], "--vocab-size", "150", "--out", p["bpe"]]) == 0
    assert main(["train", "--pairs", p["en"], p["es"], "--bpe", p["bpe"], "--preset", "toy", "--max-steps", "15",
                 "--lr", "3e-3", "--log-every", "5", "--seed", "7", "--out", p["ckpt"]]) == 0
    assert main(["finetune", "--checkpoint", p["ckpt"], "--bpe", p["bpe"], "--pairs", p["fr"], "--budget", "40",
                 "--lr", "3e-3", "--out", p["ft"]]) == 0
    assert main(["generate-eval", "--lang", "en", "--groups", "3", "--per-group", "6", "--exclude", p["en"],
                 "--out", p["evalset"]]) == 0
    assert main(["embed", "--checkpoint", p["ckpt"], "--bpe", p["bpe"], "--sentences", p["evalset"],
                 "--out", p["emb"]]) == 0
    assert main(["eval-nn", "--checkpoint", p["ckpt"], "--bpe", p["bpe"], "--eval-set", p["evalset"],
                 "--k", "1", "--k", "5", "--out", p["nn"]]) == 0
    write_conllu(d / "ud.conllu", generate_eval_set(builtin_grammar(), "en", 3, 6, 5).sentences)
    assert main(["eval-fd", "--checkpoint", p["ckpt"], "--bpe", p["bpe"], "--conllu", p["conllu"], "--lang", "en",
                 "--out", p["fd"]]) == 0
    assert main(["build-eval-set", "--conllu", p["conllu"], "--lang", "en", "--sample-groups", "2",
                 "--out", p["built"]]) == 0
    p["dir"] = d
    return p


@pytest.mark.parametrize("artifact", ["en", "bpe", "ckpt", "ft", "evalset", "emb", "nn", "fd", "built"])
def test_manifest_replays_to_identical_artifacts(pipeline, artifact, capsys):
    manifest = pipeline[artifact] + ".manifest.json"
    data = json.loads(open(manifest, encoding="utf-8").read())
    assert {"command", "argv", "config", "inputs", "outputs", "seed", "wall_time_s", "tool_version"} <= set(data)
    before = {k: open(k, "rb").read() for k in data["outputs"]}
    assert main(["replay", manifest]) == 0
    assert "identical" in capsys.readouterr().out
    for k, v in before.items():
        assert open(k, "rb").read() == v


def test_embed_output_shape_and_determinism(pipeline, tmp_path):
    rows = load_external_embeddings(pipeline["emb"])
    n_sent = sum(1 for line in open(pipeline["evalset"], encoding="utf-8") if line.strip())
    assert len(rows) == n_sent == 18
    assert rows[0][1].shape == (32,)
    out = tmp_path / "again.tsv"
    assert main(["embed", "--checkpoint", pipeline["ckpt"], "--bpe", pipeline["bpe"], "--sentences",
                 pipeline["evalset"], "--out", str(out)]) == 0
    assert out.read_bytes() == open(pipeline["emb"], "rb").read()


def test_eval_nn_from_embeddings_matches_checkpoint(pipeline, tmp_path):
    out = tmp_path / "nn2"
    assert main(["eval-nn", "--embeddings", pipeline["emb"], "--eval-set", pipeline["evalset"], "--out", str(out)]) == 0
    assert (tmp_path / "nn2.json").read_text() == open(pipeline["nn"] + ".json").read()


def test_perfect_clusters_score_one(pipeline, tmp_path, capsys):
    ids = [json.loads(line)["id"] for line in open(pipeline["evalset"], encoding="utf-8")]
    groups = [json.loads(line)["group_id"] for line in open(pipeline["evalset"], encoding="utf-8")]
    rng = np.random.default_rng(0)
    X = np.eye(4)[groups] * 10 + rng.normal(0, 0.01, (len(ids), 4))
    emb = tmp_path / "perfect.tsv"
    write_embeddings(emb, ids, X)
    assert main(["eval-nn", "--embeddings", str(emb), "--eval-set", pipeline["evalset"], "--out", str(tmp_path / "r")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["languages"][0]["knn"] == {"1": 1.0, "5": 1.0}


def test_missing_input_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.tsv"
    assert main(["learn-bpe", "--input", str(missing), "--out", str(tmp_path / "x.bpe")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_conflicting_config_exits_2(pipeline, tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("lr = 0.01\nmax-steps = 1\n", encoding="utf-8")
    code = main(["train", "--pairs", pipeline["en"], "--bpe", pipeline["bpe"], "--config", str(cfg),
                 "--lr", "0.001", "--out", str(tmp_path / "m.ckpt")])
    err = capsys.readouterr().err
    assert code == 2 and "--lr" in err and "lr in" in err
    code = main(["finetune", "--checkpoint", pipeline["ckpt"], "--bpe", pipeline["bpe"], "--pairs", pipeline["fr"],
                 "--budget", "5", "--epochs", "1", "--max-steps", "3", "--out", str(tmp_path / "f.ckpt")])
    err = capsys.readouterr().err
    assert code == 2 and "--epochs" in err and "--max-steps" in err


def test_config_file_fills_flags(pipeline, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# toy run\npreset = toy\nmax-steps = 2\nlr = 0.003\n", encoding="utf-8")
    out = tmp_path / "m.ckpt"
    assert main(["train", "--pairs", pipeline["en"], "--bpe", pipeline["bpe"], "--config", str(cfg),
                 "--lr", "0.003", "--out", str(out)]) == 0
    assert T.load_checkpoint(out).step == 2


def test_train_zero_steps_writes_initial_params(pipeline, tmp_path):
    out = tmp_path / "init.ckpt"
    assert main(["train", "--pairs", pipeline["en"], pipeline["es"], "--bpe", pipeline["bpe"], "--preset", "toy",
                 "--max-steps", "0", "--seed", "3", "--out", str(out)]) == 0
    ck = T.load_checkpoint(out)
    ref = M.init_params(ck.config, 3)
    for name, p in ck.params.items():
        assert p.value.tobytes() == ref[name].value.tobytes()


def test_budget_zero_is_passthrough_and_oversize_budget_warns(pipeline, tmp_path, caplog):
    out = tmp_path / "zero.ckpt"
    assert main(["finetune", "--checkpoint", pipeline["ckpt"], "--bpe", pipeline["bpe"], "--pairs", pipeline["fr"],
                 "--budget", "0", "--out", str(out)]) == 0
    a, b = T.load_checkpoint(pipeline["ckpt"]), T.load_checkpoint(out)
    for name in a.params:
        if name != "lang_emb":
            assert a.params[name].value.tobytes() == b.params[name].value.tobytes()
    with caplog.at_level(logging.WARNING):
        assert main(["finetune", "--checkpoint", pipeline["ckpt"], "--bpe", pipeline["bpe"], "--pairs",
                     pipeline["fr"], "--budget", "100000", "--max-steps", "1", "--out", str(tmp_path / "b.ckpt")]) == 0
    assert "exceeds" in caplog.text


def test_eval_fd_degenerate_exits_2(pipeline, tmp_path, capsys):
    ids = [f"en-{k}-{j}" for k in range(3) for j in range(6)]
    emb = tmp_path / "same.tsv"
    write_embeddings(emb, ids, np.tile([0.3, -1.2, 2.0], (len(ids), 1)))
    code = main(["eval-fd", "--embeddings", str(emb), "--conllu", pipeline["conllu"], "--lang", "en"])
    assert code == 2
    assert "degenerate similarity matrix" in capsys.readouterr().err


def test_mismatched_embedding_ids_exit_2(pipeline, tmp_path, capsys):
    rows = load_external_embeddings(pipeline["emb"])
    emb = tmp_path / "bad.tsv"
    write_embeddings(emb, ["zz-0"] + [r[0] for r in rows[1:]], [r[1] for r in rows])
    code = main(["eval-nn", "--embeddings", str(emb), "--eval-set", pipeline["evalset"]])
    assert code == 2
    assert rows[0][0] in capsys.readouterr().err


def test_internal_fault_exits_1(pipeline, tmp_path, monkeypatch):
    from synemb import synthgen

    def boom(*a, **k):
        raise RuntimeError("boom")

    monkeypatch.setattr(synthgen, "generate_pairs", boom)
    assert main(["generate", "--src", "en", "--tgt", "de", "--count", "2", "--out", str(tmp_path / "x.tsv")]) == 1


def test_bpe_first_merge_from_fixture(tmp_path):
    src = tmp_path / "toy.tsv"
    words = ["low"] * 5 + ["lower"] * 2 + ["newest"] * 6 + ["widest"] * 3
    src.write_text("".join(f"en\tde\t{w}\tNOUN\n" for w in words), encoding="utf-8")
    out = tmp_path / "toy.bpe"
    assert main(["learn-bpe", "--input", str(src), "--vocab-size", "30", "--out", str(out)]) == 0
    assert load_bpe(out).merges[0] == ("e", "s")


def test_usage_errors_from_argparse(capsys):
    assert main(["train"]) == 2
    assert main(["--version"]) == 0
