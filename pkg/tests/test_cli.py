import json

import numpy as np
import pytest

from hidrep.cli import main
from hidrep.models import load_model, save_model


@pytest.fixture
def files(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 5))
    y = np.where(X[:, 0] - X[:, 2] + 0.3 * rng.normal(size=60) > 0, 1, -1)
    for name, rows in (("train.svm", range(40)), ("test.svm", range(40, 60))):
        with open(tmp_path / name, "w") as fh:
            for r in rows:
                feats = " ".join(f"{j + 1}:{X[r, j]:.5f}" for j in range(5))
                fh.write(f"{y[r]} {feats}\n")
    U, V = rng.normal(size=(15, 2)), rng.normal(size=(20, 2))
    R = np.clip(np.round(3 + U @ V.T), 1, 5)
    mask = rng.random((15, 20)) < 0.5
    held = mask & (rng.random((15, 20)) < 0.15)
    for name, m in (("ratings.data", mask & ~held), ("heldout.data", held)):
        with open(tmp_path / name, "w") as fh:
            for u, i in zip(*np.nonzero(m)):
                fh.write(f"{u + 1}\t{i + 1}\t{int(R[u, i])}\t0\n")
    return tmp_path


def run(*args):
    return main([str(a) for a in args])


def _train_mf(files, *extra):
    assert run("train", "--family", "mf", "--data", files / "ratings.data", "--rating-range", 1, 5,
               "--k", 2, "--lr", 0.5, "--epochs", 20, "--out", files / "mf.json", *extra) == 0
    return files / "mf.json"


def test_train_lambda_n_convention(files):
    assert run("train", "--family", "l1", "--loss", "logistic", "--lambda-n", 10,
               "--data", files / "train.svm", "--out", files / "m.json") == 0
    model = load_model(files / "m.json")
    assert model.lam == pytest.approx(10 / 40)


def test_train_missing_dataset_is_usage_error(files, capsys):
    assert run("train", "--family", "l1", "--lambda", 0.1, "--out", files / "m.json") == 2
    assert run("train", "--family", "l1", "--lambda", 0.1, "--data", files / "nope.svm",
               "--out", files / "m.json") == 2
    assert "error" in capsys.readouterr().err


def test_train_model_round_trip(files):
    run("train", "--family", "l1", "--lambda-n", 2, "--data", files / "train.svm", "--out", files / "m.json")
    save_model(load_model(files / "m.json"), files / "again.json")
    assert (files / "m.json").read_bytes() == (files / "again.json").read_bytes()
    path = _train_mf(files, "--checkpoints", "every")
    save_model(load_model(path), files / "mf2.json")
    assert path.read_bytes() == (files / "mf2.json").read_bytes()


def test_train_nonconvergence_exit_code(files, capsys):
    assert run("train", "--family", "l1", "--lambda", 1e-3, "--data", files / "train.svm",
               "--max-iter", 2, "--tol", 1e-15, "--out", files / "m.json") == 1
    assert "converge" in capsys.readouterr().err


def test_config_file_and_overrides(files):
    cfg = files / "run.json"
    cfg.write_text(json.dumps({"family": "l1", "data": str(files / "train.svm"), "lambda_n": 10,
                               "out": str(files / "m.json")}))
    assert run("train", "--config", cfg, "--lambda-n", 4) == 0
    assert load_model(files / "m.json").lam == pytest.approx(4 / 40)
    cfg.write_text(json.dumps({"family": "l1", "epochz": 3}))
    assert run("train", "--config", cfg) == 2


def _explain_mf(files, capsys, *extra):
    code = run("explain", "--model", files / "mf.json", "--data", files / "ratings.data",
               "--rating-range", 1, 5, "--test-user", 7, "--test-item", 12, *extra)
    return code, capsys.readouterr().out


def test_explain_cf_top_six(files, capsys):
    _train_mf(files)
    code, out = _explain_mf(files, capsys, "--top", 6)
    lines = out.strip().splitlines()
    assert code == 0
    assert lines[0] == "side,train_user,train_item,observed_rating,global,local,importance"
    assert len(lines) == 7
    mags = [abs(float(l.split(",")[-1])) for l in lines[1:]]
    assert mags == sorted(mags, reverse=True)


def test_explain_top_zero_header_only(files, capsys):
    _train_mf(files)
    code, out = _explain_mf(files, capsys, "--top", 0)
    assert code == 0 and out.strip().splitlines() == ["side,train_user,train_item,observed_rating,global,local,importance"]


def test_explain_deterministic(files, capsys):
    _train_mf(files)
    a = _explain_mf(files, capsys, "--top", 20)[1]
    b = _explain_mf(files, capsys, "--top", 20)[1]
    assert a == b


def test_explain_l2_rejected_for_mf(files, capsys):
    _train_mf(files)
    code = run("explain", "--model", files / "mf.json", "--data", files / "ratings.data",
               "--test-user", 7, "--test-item", 12, "--method", "l2")
    assert code == 2
    assert "not applicable" in capsys.readouterr().err


def test_explain_l1_and_baseline_method_column(files, capsys):
    run("train", "--family", "l1", "--lambda-n", 2, "--data", files / "train.svm", "--out", files / "m.json")
    capsys.readouterr()
    out = files / "e.csv"
    assert run("explain", "--model", files / "m.json", "--data", files / "train.svm", "--test", files / "test.svm",
               "--test-index", 0, "--out", out) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "index,label,global,local,importance" and len(rows) == 41
    assert run("explain", "--model", files / "m.json", "--data", files / "train.svm", "--test", files / "test.svm",
               "--test-index", 0, "--method", "l2", "--top", 3, "--out", out) == 0
    rows = out.read_text().splitlines()
    assert rows[0].endswith(",method") and len(rows) == 4 and rows[1].endswith(",l2")


def test_evaluate_single_trial(files, capsys):
    out = files / "rep.json"
    assert run("evaluate", "--family", "l1", "--data", files / "train.svm", "--test", files / "test.svm",
               "--lambda-n", 2, "--method", "random", "--ks", "1,2", "--trials", 1, "--tests-per-trial", 1,
               "--out", out) == 0
    doc = json.loads(out.read_text())
    for rep in doc["reports"]:
        assert rep["ci95_half_width"] == 0.0 and len(rep["per_trial_auc"]) == 1
    assert capsys.readouterr().out.startswith("AUC-DEL+ ")


def test_evaluate_report_self_consistent(files, capsys):
    out = files / "rep.json"
    assert run("evaluate", "--family", "mf", "--data", files / "ratings.data", "--test", files / "heldout.data",
               "--rating-range", 1, 5, "--k", 2, "--lr", 0.5, "--epochs", 10, "--ks", "1,2",
               "--trials", 3, "--tests-per-trial", 2, "--threads", 2, "--out", out,
               "--curves", files / "curves.csv") == 0
    for rep in json.loads(out.read_text())["reports"]:
        assert rep["mean"] == pytest.approx(np.mean(rep["per_trial_auc"]))
    assert (files / "curves.csv").read_text().startswith("sign,test_point,k,delta")
    summary = capsys.readouterr().out.splitlines()
    assert summary[0].startswith("AUC-DEL+ ") and " ± " in summary[0]


def test_audit_rows_and_determinism(files):
    args = ["audit-negatives", "--data", files / "ratings.data", "--threshold", 4, "--fractions", "1,3,5",
            "--method", "random", "--epochs", 5]
    assert run(*args, "--out", files / "a.json") == 0
    assert run(*args, "--out", files / "b.json") == 0
    doc = json.loads((files / "a.json").read_text())
    assert len(doc["rows"]) == 3
    assert (files / "a.json").read_bytes() == (files / "b.json").read_bytes()


def test_normalize_factors_command(files, capsys):
    rng = np.random.default_rng(1)
    for name, rows in (("u.txt", 4), ("v.txt", 3)):
        M = rng.normal(size=(rows, 2))
        (files / name).write_text(f"{rows} 2\n" + "".join(" ".join(repr(float(x)) for x in r) + "\n" for r in M))
    assert run("normalize-factors", "--user-emb", files / "u.txt", "--item-emb", files / "v.txt",
               "--out-user", files / "nu.txt", "--out-item", files / "nv.txt") == 0
    assert capsys.readouterr().out.startswith("sigma ")
    from hidrep.datasets import load_embeddings

    a = load_embeddings(files / "u.txt", files / "v.txt")
    b = load_embeddings(files / "nu.txt", files / "nv.txt")
    np.testing.assert_allclose(b.user_mat @ b.item_mat.T, a.user_mat @ a.item_mat.T, atol=1e-12)


def test_datasets_info(files, capsys):
    assert run("datasets", "info", files / "ratings.data") == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["users"] <= 15 and stats["interactions"] > 0
    assert run("datasets", "info", files / "train.svm", "--format", "libsvm") == 0
    assert json.loads(capsys.readouterr().out)["samples"] == 40


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2
