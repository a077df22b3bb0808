"""The five subcommands, flag/config handling, and the exit-code contract."""

import json

import numpy as np
import pytest

from textkgc.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

from conftest import write_dataset


def toy_dataset(dirpath):
    people = [f"p{i}" for i in range(8)]
    cities = [f"c{i}" for i in range(4)]
    train = [(people[i], "lives_in", cities[i % 4]) for i in range(8)]
    train += [(people[i], "knows", people[(i + 1) % 8]) for i in range(6)]
    valid = [("p6", "knows", "p7")]
    test = [("p7", "knows", "p0"), ("p0", "lives_in", "c0")]
    entities = [
        (e, e.upper(), f"person number {e[1:]} living somewhere") for e in people
    ] + [(c, c.upper(), f"city number {c[1:]} with houses") for c in cities]
    relations = [
        ("lives_in", "resides in", "the place this person calls home"),
        ("knows", "is acquainted with", "a personal acquaintance"),
    ]
    return write_dataset(dirpath, train, valid, test, entities, relations)


def data_flags(dirpath):
    train, valid, test, entities, relations = toy_dataset(dirpath)
    return [
        "--train", train, "--valid", valid, "--test", test,
        "--entities", entities, "--relations", relations,
    ]


FAST_TRAIN = [
    "--buckets", "256", "--dim", "8", "--epochs", "2", "--batch-size", "4",
    "--threads", "1", "--seed", "11",
]


@pytest.fixture()
def trained(tmp_path):
    flags = data_flags(tmp_path)
    out = tmp_path / "model.tsv"
    code = main(["train", *flags, *FAST_TRAIN, "--out", str(out)])
    assert code == EXIT_OK
    return flags, out


# -- train -------------------------------------------------------------------


def test_train_writes_checkpoint_and_log(tmp_path, capsys):
    flags = data_flags(tmp_path)
    out = tmp_path / "model.tsv"
    code = main(["train", *flags, *FAST_TRAIN, "--out", str(out)])
    assert code == EXIT_OK
    assert out.exists()
    log = (tmp_path / "model.tsv.log").read_text().splitlines()
    # 28 augmented rows, batch 4 -> 7 steps per epoch, 2 epochs
    assert len(log) == 14
    assert log[0].startswith("step=0 loss=")
    assert "lr=0.0 " in log[0]
    out_text = capsys.readouterr().out
    assert "steps: 14" in out_text


def test_train_is_deterministic(tmp_path):
    flags = data_flags(tmp_path)
    a = tmp_path / "a.tsv"
    b = tmp_path / "b.tsv"
    assert main(["train", *flags, *FAST_TRAIN, "--out", str(a)]) == EXIT_OK
    assert main(["train", *flags, *FAST_TRAIN, "--out", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a.tsv.log").read_bytes() == (tmp_path / "b.tsv.log").read_bytes()


def test_train_load_report(tmp_path):
    flags = data_flags(tmp_path)
    report_path = tmp_path / "load.json"
    code = main([
        "train", *flags, *FAST_TRAIN,
        "--out", str(tmp_path / "m.tsv"), "--load-report", str(report_path),
    ])
    assert code == EXIT_OK
    report = json.loads(report_path.read_text())
    assert report["duplicates_removed"] == 0
    assert report["unknown_ids"] == 0
    # counts reflect the augmented graph: every row gains an inverse twin
    assert report["splits"] == {"train": 28, "valid": 2, "test": 4}


def test_train_rejects_pb_without_ib(tmp_path, capsys):
    flags = data_flags(tmp_path)
    code = main(["train", *flags, *FAST_TRAIN, "--negatives", "pb,sn"])
    assert code == EXIT_USAGE
    assert "pre-batch" in capsys.readouterr().err


def test_train_divergence_exits_numeric(tmp_path, capsys):
    flags = data_flags(tmp_path)
    code = main([
        "train", *flags, *FAST_TRAIN, "--lr", "1e100",
        "--out", str(tmp_path / "m.tsv"),
    ])
    assert code == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "non-finite" in err


def test_missing_required_flag(tmp_path, capsys):
    code = main(["train", "--train", "x.tsv"])
    assert code == EXIT_USAGE
    assert "required" in capsys.readouterr().err


def test_missing_data_file(tmp_path, capsys):
    flags = data_flags(tmp_path)
    flags[1] = str(tmp_path / "absent.tsv")
    code = main(["train", *flags, *FAST_TRAIN])
    assert code == EXIT_USAGE
    assert "error:" in capsys.readouterr().err


# -- evaluate ----------------------------------------------------------------


def test_evaluate_report_content(trained, tmp_path, capsys):
    flags, out = trained
    code = main(["evaluate", *flags, "--checkpoint", str(out), "--threads", "1"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert {"mrr", "hits1", "hits3", "hits10", "tail", "head",
            "by_category", "forward_passes", "reranked"} <= set(report)
    assert report["forward_passes"] == 12 + 4  # index build + 4 augmented test rows
    assert report["reranked"] is False


def test_evaluate_output_flag_and_rerank_zero_alpha(trained, tmp_path):
    flags, out = trained
    plain = tmp_path / "plain.json"
    zeroed = tmp_path / "zeroed.json"
    assert main(["evaluate", *flags, "--checkpoint", str(out), "--output", str(plain)]) == EXIT_OK
    assert main([
        "evaluate", *flags, "--checkpoint", str(out), "--output", str(zeroed),
        "--rerank", "--alpha", "0",
    ]) == EXIT_OK
    assert plain.read_bytes() == zeroed.read_bytes()


def test_evaluate_rerank_flips_flag(trained, tmp_path):
    flags, out = trained
    path = tmp_path / "boosted.json"
    assert main([
        "evaluate", *flags, "--checkpoint", str(out), "--output", str(path),
        "--rerank", "--alpha", "0.05", "--hops", "2",
    ]) == EXIT_OK
    assert json.loads(path.read_text())["reranked"] is True


def test_evaluate_valid_split(trained, tmp_path, capsys):
    flags, out = trained
    code = main(["evaluate", *flags, "--checkpoint", str(out), "--split", "valid"])
    assert code == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["forward_passes"] == 12 + 2


def test_evaluate_corrupt_checkpoint(trained, tmp_path, capsys):
    flags, _ = trained
    bad = tmp_path / "bad.tsv"
    bad.write_text("not a checkpoint\n")
    code = main(["evaluate", *flags, "--checkpoint", str(bad)])
    assert code == EXIT_USAGE
    assert "header" in capsys.readouterr().err


def test_evaluate_missing_checkpoint(trained, tmp_path, capsys):
    flags, _ = trained
    code = main(["evaluate", *flags, "--checkpoint", str(tmp_path / "nope.tsv")])
    assert code == EXIT_USAGE


def test_evaluate_precomputed_embeddings(trained, tmp_path, capsys):
    flags, out = trained
    vectors = tmp_path / "vectors.tsv"
    assert main(["export-embeddings", *flags, "--checkpoint", str(out),
                 "--out", str(vectors)]) == EXIT_OK
    direct = tmp_path / "direct.json"
    via_file = tmp_path / "via_file.json"
    assert main(["evaluate", *flags, "--checkpoint", str(out),
                 "--output", str(direct)]) == EXIT_OK
    assert main(["evaluate", *flags, "--checkpoint", str(out),
                 "--precomputed-embeddings", str(vectors),
                 "--output", str(via_file)]) == EXIT_OK
    a = json.loads(direct.read_text())
    b = json.loads(via_file.read_text())
    assert b.pop("forward_passes") == 4  # no index cost, only query encodings
    a.pop("forward_passes")
    assert a == b


def test_evaluate_precomputed_dim_mismatch(trained, tmp_path, capsys):
    flags, out = trained
    vectors = tmp_path / "vectors.tsv"
    ids = [f"p{i}" for i in range(8)] + [f"c{i}" for i in range(4)]
    with open(vectors, "w") as fh:
        for e in ids:
            fh.write(e + "\t1.0 0.0 0.0 0.0\n")  # dim 4, checkpoint dim 8
    code = main(["evaluate", *flags, "--checkpoint", str(out),
                 "--precomputed-embeddings", str(vectors)])
    assert code == EXIT_USAGE
    assert "dimension" in capsys.readouterr().err


# -- predict -----------------------------------------------------------------


def test_predict_prints_ranked_candidates(trained, capsys):
    flags, out = trained
    code = main(["predict", *flags, "--checkpoint", str(out),
                 "--head", "p0", "--relation", "lives_in", "--topk", "5"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    scores = []
    for pos, line in enumerate(lines, start=1):
        rank, entity_id, score, known = line.split("\t")
        assert int(rank) == pos
        assert known in ("true", "false")
        scores.append(float(score))
    assert scores == sorted(scores, reverse=True)
    known_flags = dict(
        line.split("\t")[1::2] for line in lines
    )
    assert known_flags.get("c0") == "true"  # (p0, lives_in, c0) is a known triple


def test_predict_head_direction(trained, capsys):
    flags, out = trained
    code = main(["predict", *flags, "--checkpoint", str(out),
                 "--head", "c0", "--relation", "lives_in",
                 "--direction", "head", "--topk", "3"])
    assert code == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3


def test_predict_argument_errors(trained, capsys):
    flags, out = trained
    assert main(["predict", *flags, "--checkpoint", str(out),
                 "--head", "p0", "--relation", "lives_in", "--topk", "0"]) == EXIT_USAGE
    assert "k must be >= 1" in capsys.readouterr().err
    assert main(["predict", *flags, "--checkpoint", str(out),
                 "--head", "ghost", "--relation", "lives_in"]) == EXIT_USAGE
    assert "ghost" in capsys.readouterr().err
    assert main(["predict", *flags, "--checkpoint", str(out),
                 "--head", "p0", "--relation", "made_up"]) == EXIT_USAGE


# -- export-embeddings -------------------------------------------------------


def test_export_embeddings_rows(trained, tmp_path):
    flags, out = trained
    path = tmp_path / "emb.tsv"
    assert main(["export-embeddings", *flags, "--checkpoint", str(out),
                 "--out", str(path)]) == EXIT_OK
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 12
    ids = [line.split("\t")[0] for line in lines]
    assert ids == sorted(ids)
    for line in lines:
        vec = np.array([float(v) for v in line.split("\t")[1].split()])
        assert abs(np.linalg.norm(vec) - 1.0) <= 1e-9
    again = tmp_path / "emb2.tsv"
    assert main(["export-embeddings", *flags, "--checkpoint", str(out),
                 "--out", str(again)]) == EXIT_OK
    assert path.read_bytes() == again.read_bytes()


# -- sweep -------------------------------------------------------------------


def test_sweep_negatives_axis(tmp_path, capsys):
    flags = data_flags(tmp_path)
    out_dir = tmp_path / "sweep"
    code = main([
        "sweep", *flags, *FAST_TRAIN, "--axis", "negatives-count",
        "--points", "2,5", "--out-dir", str(out_dir),
    ])
    assert code == EXIT_OK
    reports = sorted(p.name for p in out_dir.glob("*.json") if p.name != "summary.json")
    assert reports == ["negatives-count-2.json", "negatives-count-5.json"]
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["axis"] == "negatives-count"
    assert len(summary["rows"]) == 2
    table = capsys.readouterr().out
    assert "point" in table and "mrr" in table
    assert summary["rows"][0]["point"] in (2, "2")


def test_sweep_loss_axis_uses_default_points(tmp_path):
    flags = data_flags(tmp_path)
    out_dir = tmp_path / "losses"
    code = main(["sweep", *flags, *FAST_TRAIN, "--axis", "loss-kind",
                 "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    names = sorted(p.name for p in out_dir.glob("*.json"))
    assert names == [
        "loss-kind-infonce.json", "loss-kind-margin.json",
        "loss-kind-margin_tau.json", "summary.json",
    ]


def test_sweep_rejects_bad_point(tmp_path, capsys):
    flags = data_flags(tmp_path)
    code = main(["sweep", *flags, *FAST_TRAIN, "--axis", "batch-size",
                 "--points", "64,noodle", "--out-dir", str(tmp_path / "s")])
    assert code == EXIT_USAGE


# -- flags, config files, usage ----------------------------------------------


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "train" in capsys.readouterr().out
    assert main(["train", "--help"]) == EXIT_OK
    assert "--negatives" in capsys.readouterr().out


def test_unknown_flag_and_command(capsys):
    assert main(["train", "--bogus", "1"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE


def test_config_file_supplies_and_flags_override(tmp_path, capsys):
    flags = data_flags(tmp_path)
    config = tmp_path / "run.conf"
    config.write_text(
        "# toy run\n"
        "epochs = 1\n"
        "batch-size = 4\n"
        "buckets = 256\n"
        "dim = 8\n"
        "seed = 11\n"
    )
    out = tmp_path / "m.tsv"
    code = main(["train", *flags, "--config", str(config), "--out", str(out)])
    assert code == EXIT_OK
    assert len((tmp_path / "m.tsv.log").read_text().splitlines()) == 7

    out2 = tmp_path / "m2.tsv"
    code = main(["train", *flags, "--config", str(config), "--epochs", "2",
                 "--out", str(out2)])
    assert code == EXIT_OK
    assert len((tmp_path / "m2.tsv.log").read_text().splitlines()) == 14


def test_config_file_parse_error(tmp_path, capsys):
    flags = data_flags(tmp_path)
    config = tmp_path / "broken.conf"
    config.write_text("epochs 3\n")
    code = main(["train", *flags, "--config", str(config)])
    assert code == EXIT_USAGE
    assert "broken.conf" in capsys.readouterr().err


def test_config_file_bad_value(tmp_path, capsys):
    flags = data_flags(tmp_path)
    config = tmp_path / "bad.conf"
    config.write_text("epochs = many\n")
    code = main(["train", *flags, "--config", str(config)])
    assert code == EXIT_USAGE
