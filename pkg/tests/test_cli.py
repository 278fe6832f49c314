import csv
import subprocess
import sys

import numpy as np
import pytest

from scclab import cli, datasets, net, train


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


GEN_ARGS = ["--classes", 3, "--per-class", 20, "--test-per-class", 10,
            "--dim", 6, "--spread", 0.4, "--noise", 0.3, "--seed", 1,
            "--verify-per-class", 8]
TRAIN_ARGS = ["--epochs", 4, "--warmup-epochs", 1, "--hidden-units", 16]


@pytest.fixture()
def gen_dir(tmp_path):
    out = tmp_path / "data"
    assert run_cli("generate", "--out", out, *GEN_ARGS) == 0
    return out


@pytest.fixture()
def s1_dir(gen_dir, tmp_path):
    out = tmp_path / "s1"
    assert run_cli("pretrain", "--data", gen_dir / "dataset.csv",
                   "--test", gen_dir / "test.csv", "--out", out, *TRAIN_ARGS) == 0
    return out


@pytest.fixture()
def art_dir(gen_dir, s1_dir, tmp_path):
    out = tmp_path / "art"
    assert run_cli("extract", "--data", gen_dir / "dataset.csv",
                   "--checkpoint", s1_dir / "checkpoint.txt", "--out", out) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_generate_writes_expected_files(gen_dir):
    assert sum(1 for _ in open(gen_dir / "dataset.csv")) == 61
    assert sum(1 for _ in open(gen_dir / "test.csv")) == 31
    assert sum(1 for _ in open(gen_dir / "verification.csv")) == 25
    assert (gen_dir / "manifest.txt").exists()


def test_generate_zero_noise_gives_all_correct_verification(tmp_path):
    out = tmp_path / "clean"
    assert run_cli("generate", "--out", out, "--classes", 3, "--per-class", 15,
                   "--dim", 6, "--noise", 0, "--verify-per-class", 5, "--seed", 2) == 0
    vs = datasets.load_verification(out / "verification.csv")
    assert np.all(vs.v == 1)


def test_generate_without_out_fails_with_diagnostic(capsys):
    assert run_cli("generate", "--classes", 3) == 1
    err = capsys.readouterr().err
    assert "error" in err and "--out" in err


def test_generate_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli("generate", "--out", a, *GEN_ARGS)
    run_cli("generate", "--out", b, *GEN_ARGS)
    assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()


def test_pretrain_writes_log_rows_and_is_deterministic(gen_dir, tmp_path):
    out1, out2 = tmp_path / "p1", tmp_path / "p2"
    for out in (out1, out2):
        assert run_cli("pretrain", "--data", gen_dir / "dataset.csv",
                       "--out", out, *TRAIN_ARGS) == 0
    rows = read_rows(out1 / "train_log.csv")
    assert rows[0] == ["epoch", "lr", "train_loss", "clean_test_acc"]
    assert len(rows) == 5  # header + epochs
    assert (out1 / "checkpoint.txt").read_bytes() == (out2 / "checkpoint.txt").read_bytes()


def test_pretrain_mixup_flag(gen_dir, tmp_path):
    out = tmp_path / "mix"
    assert run_cli("pretrain", "--data", gen_dir / "dataset.csv", "--out", out,
                   "--reg", "mixup", "--mixup-alpha", 0.2, *TRAIN_ARGS) == 0
    assert (out / "checkpoint.txt").exists()


def test_pretrain_ensemble_multi_model_checkpoint(gen_dir, tmp_path):
    out = tmp_path / "ens"
    assert run_cli("pretrain", "--data", gen_dir / "dataset.csv", "--out", out,
                   "--reg", "ensemble", "--ensemble-size", 3, *TRAIN_ARGS) == 0
    assert len(net.load_checkpoint(out / "checkpoint.txt")) == 3


def test_extract_scc_matches_self_labels(gen_dir, art_dir):
    ds = datasets.load_dataset(gen_dir / "dataset.csv")
    art = train.load_artifacts(art_dir, ds=ds)
    expect = art.self_labels[np.arange(len(ds)), ds.web_labels]
    assert np.array_equal(art.scc, expect)
    probs = net.forward(art.model, ds.features)
    assert np.array_equal(art.self_labels, probs)


def test_extract_bad_checkpoint_path_fails(gen_dir, tmp_path, capsys):
    assert run_cli("extract", "--data", gen_dir / "dataset.csv",
                   "--checkpoint", tmp_path / "nope.txt",
                   "--out", tmp_path / "x") == 1
    assert "error" in capsys.readouterr().err


def test_extract_gba_on_edgeless_graph_copies_files(tmp_path):
    # orthogonal hidden features: identity first layer on one-hot inputs
    dim = 8
    ds = datasets.SyntheticDataset(
        features=np.eye(dim), web_labels=np.arange(dim) % 2,
        true_labels=np.arange(dim) % 2, ids=np.arange(dim), num_classes=2,
    )
    datasets.save_dataset(ds, tmp_path / "dataset.csv")
    model = net.MlpModel(w1=np.eye(dim), b1=np.zeros(dim),
                         w2=np.random.default_rng(0).standard_normal((dim, 2)),
                         b2=np.zeros(2))
    net.save_checkpoint(model, tmp_path / "checkpoint.txt")
    out = tmp_path / "art"
    assert run_cli("extract", "--data", tmp_path / "dataset.csv",
                   "--checkpoint", tmp_path / "checkpoint.txt",
                   "--out", out, "--gba", "--k", 3) == 0
    assert (out / "self_labels.csv").read_bytes() == (out / "self_labels_gba.csv").read_bytes()
    assert (out / "scc.csv").read_bytes() == (out / "scc_gba.csv").read_bytes()


def test_extract_dump_graph(gen_dir, s1_dir, tmp_path):
    out = tmp_path / "artg"
    assert run_cli("extract", "--data", gen_dir / "dataset.csv",
                   "--checkpoint", s1_dir / "checkpoint.txt", "--out", out,
                   "--gba", "--k", 5, "--lambda", 0.5, "--dump-graph") == 0
    rows = read_rows(out / "graph_edges.csv")
    assert rows[0] == ["src", "dst", "weight"]
    assert len(rows) > 1


def test_finetune_constant_one_matches_all_ones_scc(gen_dir, art_dir, tmp_path):
    ones_art = tmp_path / "art_ones"
    ones_art.mkdir()
    for name in ("checkpoint.txt", "features.csv", "self_labels.csv"):
        (ones_art / name).write_bytes((art_dir / name).read_bytes())
    rows = read_rows(art_dir / "scc.csv")
    with open(ones_art / "scc.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(rows[0])
        for sid, _ in rows[1:]:
            writer.writerow([sid, "1"])

    out_const = tmp_path / "ft_const"
    out_ones = tmp_path / "ft_ones"
    common = ["--data", gen_dir / "dataset.csv", "--test", gen_dir / "test.csv",
              "--lr", 0.05, *TRAIN_ARGS]
    assert run_cli("finetune", "--artifacts", art_dir, "--out", out_const,
                   "--constant-c", 1.0, *common) == 0
    assert run_cli("finetune", "--artifacts", ones_art, "--out", out_ones, *common) == 0
    assert (out_const / "checkpoint.txt").read_bytes() == (out_ones / "checkpoint.txt").read_bytes()


def test_finetune_sweep_emits_eleven_rows(gen_dir, art_dir, tmp_path):
    out = tmp_path / "sweep"
    assert run_cli("finetune", "--data", gen_dir / "dataset.csv",
                   "--test", gen_dir / "test.csv", "--artifacts", art_dir,
                   "--out", out, "--sweep-c", *TRAIN_ARGS) == 0
    rows = read_rows(out / "constant_sweep.csv")
    assert rows[0] == ["c", "top1", "top5"]
    assert len(rows) == 12
    assert [r[0] for r in rows[1:]] == [f"{i / 10:.1f}" for i in range(11)]


def test_finetune_missing_artifacts_dir_fails(gen_dir, tmp_path, capsys):
    assert run_cli("finetune", "--data", gen_dir / "dataset.csv",
                   "--artifacts", tmp_path / "missing", "--out", tmp_path / "x",
                   *TRAIN_ARGS) == 1
    assert "error" in capsys.readouterr().err


def test_evaluate_perfect_confidence(tmp_path):
    verify = tmp_path / "verification.csv"
    datasets.save_verification(
        datasets.VerificationSet(ids=np.arange(6), v=np.array([1, 0, 1, 1, 0, 1])),
        verify,
    )
    scc_path = tmp_path / "scc.csv"
    with open(scc_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "c"])
        for i, v in enumerate([1, 0, 1, 1, 0, 1]):
            writer.writerow([i, v])
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--verification", verify, "--out", out,
                   "--provider", f"perfect={scc_path}") == 0
    rows = read_rows(out / "metrics_summary.csv")
    assert rows[0] == ["provider", "mse", "ece", "oce", "sav_top1"]
    assert len(rows) == 2
    assert [float(x) for x in rows[1][1:4]] == [0.0, 0.0, 0.0]


def test_evaluate_bins_flag_and_multiple_providers(gen_dir, art_dir, tmp_path):
    out = tmp_path / "eval"
    scc = art_dir / "scc.csv"
    assert run_cli("evaluate", "--verification", gen_dir / "verification.csv",
                   "--out", out, "--diagram-bins", 7,
                   "--provider", f"a={scc}", "--provider", f"b={scc}",
                   "--provider", f"c={scc}") == 0
    assert len(read_rows(out / "metrics_summary.csv")) == 4
    assert len(read_rows(out / "reliability_a.csv")) == 8  # header + 7 bins


def test_evaluate_rejects_provider_missing_ids(gen_dir, art_dir, tmp_path, capsys):
    partial = tmp_path / "partial.csv"
    rows = read_rows(art_dir / "scc.csv")
    with open(partial, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerows(rows[:3])  # header + 2 ids only
    assert run_cli("evaluate", "--verification", gen_dir / "verification.csv",
                   "--out", tmp_path / "e", "--provider", f"p={partial}") == 1
    assert "missing" in capsys.readouterr().err


def test_evaluate_with_sav(gen_dir, art_dir, tmp_path):
    out = tmp_path / "eval_sav"
    assert run_cli("evaluate", "--verification", gen_dir / "verification.csv",
                   "--out", out, "--provider", f"vanilla={art_dir / 'scc.csv'}",
                   "--sav", "--data", gen_dir / "dataset.csv",
                   "--test", gen_dir / "test.csv", "--artifacts", art_dir,
                   "--epochs", 3, "--warmup-epochs", 1) == 0
    rows = read_rows(out / "metrics_summary.csv")
    assert np.isfinite(float(rows[1][4]))


PIPE_ARGS = ["--classes", 3, "--per-class", 20, "--test-per-class", 10,
             "--dim", 6, "--spread", 0.4, "--noise", 0.3, "--seed", 3,
             "--verify-per-class", 8, "--pretrain-epochs", 4,
             "--finetune-epochs", 4, "--warmup-epochs", 1, "--hidden-units", 16]


def test_pipeline_end_to_end_and_determinism(tmp_path):
    a, b = tmp_path / "runA", tmp_path / "runB"
    assert run_cli("pipeline", "--out", a, *PIPE_ARGS) == 0
    assert run_cli("pipeline", "--out", b, *PIPE_ARGS) == 0
    summary_a = (a / "eval" / "metrics_summary.csv").read_bytes()
    summary_b = (b / "eval" / "metrics_summary.csv").read_bytes()
    assert summary_a == summary_b
    for sub in ("dataset/dataset.csv", "s1/checkpoint.txt", "artifacts/scc.csv",
                "s2/checkpoint.txt", "manifest.txt"):
        assert (a / sub).exists()


def test_pipeline_manifest_replay_reproduces_metrics(tmp_path):
    first = tmp_path / "first"
    assert run_cli("pipeline", "--out", first, *PIPE_ARGS) == 0
    replay = tmp_path / "replay"
    assert run_cli("pipeline", "--config", first / "manifest.txt", "--out", replay) == 0
    assert ((first / "eval" / "metrics_summary.csv").read_bytes()
            == (replay / "eval" / "metrics_summary.csv").read_bytes())


def test_pipeline_gba_flag_writes_suffixed_artifacts(tmp_path):
    out = tmp_path / "gba"
    assert run_cli("pipeline", "--out", out, "--gba", "--k", 5, *PIPE_ARGS) == 0
    assert (out / "artifacts" / "scc_gba.csv").exists()
    rows = read_rows(out / "eval" / "metrics_summary.csv")
    assert rows[1][0] == "vanilla_gba"


def test_interrupted_pipeline_leaves_no_manifest(tmp_path, capsys):
    out = tmp_path / "broken"
    args = [a if a != 0.3 else 1.5 for a in PIPE_ARGS]  # noise 1.5 -> invalid
    assert run_cli("pipeline", "--out", out, *args) == 1
    assert "error" in capsys.readouterr().err
    assert not (out / "manifest.txt").exists()
    assert not (out / "manifest.txt.tmp").exists()


def test_config_file_sets_flags_and_cli_overrides(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("classes = 3\nper_class = 12\ndim = 6\nnoise = 0.2\n"
                   "seed = 4\nverify_per_class = 5\ntest_per_class = 0\n")
    out = tmp_path / "from_cfg"
    assert run_cli("generate", "--config", cfg, "--out", out) == 0
    assert sum(1 for _ in open(out / "dataset.csv")) == 37
    out2 = tmp_path / "override"
    assert run_cli("generate", "--config", cfg, "--out", out2, "--per-class", 20) == 0
    assert sum(1 for _ in open(out2 / "dataset.csv")) == 61


def test_config_file_rejects_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not_a_real_key = 1\n")
    assert run_cli("generate", "--config", cfg, "--out", tmp_path / "x") == 1
    assert "unknown config key" in capsys.readouterr().err


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "scclab.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "scclab" in proc.stdout


def test_thread_cap_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv("SCC_LAB_THREADS", "1")
    out = tmp_path / "threads"
    assert run_cli("generate", "--out", out, "--classes", 2, "--per-class", 5,
                   "--dim", 4, "--noise", 0, "--verify-per-class", 2,
                   "--test-per-class", 0, "--seed", 1) == 0
    assert (out / "dataset.csv").exists()
