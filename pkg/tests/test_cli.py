import numpy as np
import pytest

from dmst.analysis import read_pgm
from dmst.checkpoint import load_checkpoint
from dmst.cli import (
    ABLATE_HEADER,
    EXIT_MISMATCH,
    EXIT_OK,
    EXIT_USAGE,
    PROFILE_HEADER,
    RATES_HEADER,
    main,
    resolve_seed,
)
from dmst.data import SyntheticDatasetSpec, generate_synthetic, save_token_dataset
from dmst.errors import InvalidInput
from dmst.train import METRICS_HEADER

CONFIG_TEXT = """
depth = 1
dim = 16
heads = 2
input_dim = 8
num_classes = 2
mlp_ratio = 2.0
data_classes = 2
data_ambient_dim = 8
data_subspace_dim = 2
data_tokens = 6
data_samples_per_class = 16
train_batch_size = 16
epochs = 2
"""


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("conf") / "run.conf"
    path.write_text(CONFIG_TEXT)
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--config", config_path, "--out", str(out), "--seed", "0"])
    assert code == EXIT_OK
    return out


# ---------------------------------------------------------------------------
# seed resolution
# ---------------------------------------------------------------------------


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("DMST_SEED", raising=False)
    assert resolve_seed(None) == 0
    assert resolve_seed(None, {"seed": 4}) == 4
    monkeypatch.setenv("DMST_SEED", "9")
    assert resolve_seed(None, {"seed": 4}) == 9  # env beats config
    assert resolve_seed(7, {"seed": 4}) == 7  # flag beats env
    monkeypatch.setenv("DMST_SEED", "abc")
    with pytest.raises(InvalidInput):
        resolve_seed(None)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def test_train_writes_metrics_and_checkpoint(run_dir, capsys):
    metrics = (run_dir / "metrics.csv").read_text()
    assert metrics.startswith(METRICS_HEADER + "\n")
    assert len(metrics.splitlines()) == 1 + 2 * 2  # two epochs, two splits
    config, params = load_checkpoint(str(run_dir / "checkpoint.dmst"))
    assert config.depth == 1
    assert config.input_dim == 8
    assert "embed.weight" in params


def test_train_is_deterministic_per_seed(tmp_path, config_path, monkeypatch):
    monkeypatch.delenv("DMST_SEED", raising=False)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", config_path, "--out", str(a), "--seed", "7"]) == EXIT_OK
    assert main(["train", "--config", config_path, "--out", str(b), "--seed", "7"]) == EXIT_OK
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.dmst").read_bytes() == (b / "checkpoint.dmst").read_bytes()


def test_dmst_seed_env_matches_flag(tmp_path, config_path, monkeypatch):
    monkeypatch.delenv("DMST_SEED", raising=False)
    flagged = tmp_path / "flagged"
    assert main(["train", "--config", config_path, "--out", str(flagged), "--seed", "7"]) == EXIT_OK
    monkeypatch.setenv("DMST_SEED", "7")
    from_env = tmp_path / "env"
    assert main(["train", "--config", config_path, "--out", str(from_env)]) == EXIT_OK
    assert (flagged / "metrics.csv").read_bytes() == (from_env / "metrics.csv").read_bytes()
    assert (flagged / "checkpoint.dmst").read_bytes() == (from_env / "checkpoint.dmst").read_bytes()


def test_train_epochs_flag_overrides_config(tmp_path, config_path, capsys):
    out = tmp_path / "zero"
    assert main(
        ["train", "--config", config_path, "--out", str(out), "--seed", "0", "--epochs", "0"]
    ) == EXIT_OK
    assert (out / "metrics.csv").read_text() == METRICS_HEADER + "\n"


def test_train_missing_config_exits_usage(tmp_path, capsys):
    missing = str(tmp_path / "nope.conf")
    code = main(["train", "--config", missing, "--out", str(tmp_path / "out")])
    assert code == EXIT_USAGE
    assert "nope.conf" in capsys.readouterr().err


def test_train_from_dataset_directory(tmp_path, config_path):
    spec = SyntheticDatasetSpec(
        num_classes=2, ambient_dim=8, subspace_dim=2, tokens_per_sample=6, samples_per_class=16
    )
    data_dir = tmp_path / "data"
    save_token_dataset(str(data_dir), "train", generate_synthetic(spec, 0, "train"))
    save_token_dataset(str(data_dir), "test", generate_synthetic(spec, 0, "test"))
    out = tmp_path / "out"
    code = main(
        ["train", "--config", config_path, "--data", str(data_dir), "--out", str(out), "--seed", "0"]
    )
    assert code == EXIT_OK


def test_train_incomplete_dataset_directory_exits_usage(tmp_path, config_path, capsys):
    spec = SyntheticDatasetSpec(num_classes=2, ambient_dim=8, samples_per_class=4)
    data_dir = tmp_path / "data"
    save_token_dataset(str(data_dir), "train", generate_synthetic(spec, 0, "train"))
    code = main(
        ["train", "--config", config_path, "--data", str(data_dir), "--out", str(tmp_path / "o")]
    )
    assert code == EXIT_USAGE
    assert "test.npz" in capsys.readouterr().err


def test_train_token_width_mismatch_exits_mismatch(tmp_path, config_path, capsys):
    spec = SyntheticDatasetSpec(
        num_classes=2, ambient_dim=5, subspace_dim=2, tokens_per_sample=6, samples_per_class=4
    )
    data_dir = tmp_path / "narrow"
    save_token_dataset(str(data_dir), "train", generate_synthetic(spec, 0, "train"))
    save_token_dataset(str(data_dir), "test", generate_synthetic(spec, 0, "test"))
    code = main(
        ["train", "--config", config_path, "--data", str(data_dir), "--out", str(tmp_path / "o")]
    )
    assert code == EXIT_MISMATCH
    assert "input_dim" in capsys.readouterr().err


def test_train_divergence_exits_mismatch(tmp_path, capsys):
    conf = tmp_path / "diverge.conf"
    conf.write_text(
        CONFIG_TEXT.replace("train_batch_size = 16", "train_batch_size = 8")
        + "train_lr = 1e6\ntrain_weight_decay = 0.9\n"
    )
    code = main(
        ["train", "--config", str(conf), "--out", str(tmp_path / "o"), "--seed", "0", "--epochs", "3"]
    )
    assert code == EXIT_MISMATCH
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def test_verify_gradients_suite_passes(tmp_path, capsys):
    report = str(tmp_path / "failures.json")
    code = main(["verify", "--suite", "gradients", "--seed", "0", "--report", report])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert "[PASS]" in out
    assert "[FAIL]" not in out
    assert "properties passed" in out.splitlines()[-1]
    assert not (tmp_path / "failures.json").exists()


def test_verify_unknown_suite_exits_usage():
    with pytest.raises(SystemExit) as err:
        main(["verify", "--suite", "bogus"])
    assert err.value.code == EXIT_USAGE


# ---------------------------------------------------------------------------
# rates
# ---------------------------------------------------------------------------


def test_rates_writes_csv(run_dir, tmp_path, capsys):
    csv = tmp_path / "rates.csv"
    code = main(
        ["rates", "--checkpoint", str(run_dir / "checkpoint.dmst"), "--samples", "4",
         "--csv", str(csv), "--seed", "0"]
    )
    assert code == EXIT_OK
    lines = csv.read_text().splitlines()
    assert lines[0] == RATES_HEADER
    assert len(lines) == 2  # depth 1 checkpoint
    layer, rate = lines[1].split(",")
    assert layer == "0"
    assert np.isfinite(float(rate))


def test_rates_rerun_is_byte_identical(run_dir, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    argv = ["rates", "--checkpoint", str(run_dir / "checkpoint.dmst"), "--samples", "4", "--seed", "0"]
    assert main(argv + ["--csv", str(a)]) == EXIT_OK
    assert main(argv + ["--csv", str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_rates_rejects_nonpositive_samples(run_dir, tmp_path, capsys):
    code = main(
        ["rates", "--checkpoint", str(run_dir / "checkpoint.dmst"), "--samples", "0",
         "--csv", str(tmp_path / "r.csv")]
    )
    assert code == EXIT_USAGE


def test_rates_rejects_garbage_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.dmst"
    bad.write_bytes(b"not a checkpoint")
    code = main(["rates", "--checkpoint", str(bad), "--csv", str(tmp_path / "r.csv")])
    assert code == EXIT_USAGE


def test_rates_data_width_mismatch_exits_mismatch(run_dir, tmp_path, capsys):
    spec = SyntheticDatasetSpec(num_classes=2, ambient_dim=5, subspace_dim=2, samples_per_class=4)
    data_dir = tmp_path / "narrow"
    save_token_dataset(str(data_dir), "test", generate_synthetic(spec, 0, "test"))
    code = main(
        ["rates", "--checkpoint", str(run_dir / "checkpoint.dmst"),
         "--data", str(data_dir / "test.npz"), "--csv", str(tmp_path / "r.csv")]
    )
    assert code == EXIT_MISMATCH


# ---------------------------------------------------------------------------
# membership
# ---------------------------------------------------------------------------


def test_membership_writes_maps(run_dir, tmp_path, capsys):
    sample = tmp_path / "sample.npy"
    np.save(sample, np.random.default_rng(0).normal(size=(6, 8)))
    out = tmp_path / "maps"
    code = main(
        ["membership", "--checkpoint", str(run_dir / "checkpoint.dmst"),
         "--input", str(sample), "--layer", "0", "--out", str(out)]
    )
    assert code == EXIT_OK
    image = read_pgm(str(out / "head_00.pgm"))
    assert image.shape == (2, 3)  # six patch tokens on a near-square grid
    assert (out / "head_01.pgm").exists()
    assert (out / "membership.json").exists()


def test_membership_layer_out_of_range_exits_usage(run_dir, tmp_path, capsys):
    sample = tmp_path / "sample.npy"
    np.save(sample, np.zeros((6, 8)))
    code = main(
        ["membership", "--checkpoint", str(run_dir / "checkpoint.dmst"),
         "--input", str(sample), "--layer", "5", "--out", str(tmp_path / "maps")]
    )
    assert code == EXIT_USAGE


def test_membership_npz_input_with_index(run_dir, tmp_path):
    spec = SyntheticDatasetSpec(
        num_classes=2, ambient_dim=8, subspace_dim=2, tokens_per_sample=6, samples_per_class=4
    )
    data_dir = tmp_path / "data"
    save_token_dataset(str(data_dir), "test", generate_synthetic(spec, 0, "test"))
    out = tmp_path / "maps"
    argv = ["membership", "--checkpoint", str(run_dir / "checkpoint.dmst"),
            "--input", str(data_dir / "test.npz"), "--layer", "0", "--out", str(out)]
    assert main(argv + ["--index", "3"]) == EXIT_OK
    assert main(argv + ["--index", "99"]) == EXIT_USAGE


def test_membership_rejects_unknown_input_kind(run_dir, tmp_path, capsys):
    bad = tmp_path / "sample.txt"
    bad.write_text("tokens")
    code = main(
        ["membership", "--checkpoint", str(run_dir / "checkpoint.dmst"),
         "--input", str(bad), "--layer", "0", "--out", str(tmp_path / "maps")]
    )
    assert code == EXIT_USAGE


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------


def test_profile_writes_csv(tmp_path, capsys):
    csv = tmp_path / "profile.csv"
    code = main(["profile", "--op", "dmsa", "--tokens", "64,128", "--csv", str(csv)])
    assert code == EXIT_OK
    lines = csv.read_text().splitlines()
    assert lines[0] == PROFILE_HEADER
    assert len(lines) == 3
    op, tokens, peak = lines[1].split(",")
    assert (op, tokens) == ("dmsa", "64")
    assert int(peak) > 0


def test_profile_rejects_bad_token_list(tmp_path, capsys):
    code = main(["profile", "--op", "dmsa", "--tokens", "64,abc", "--csv", str(tmp_path / "p.csv")])
    assert code == EXIT_USAGE


def test_profile_rejects_unknown_op(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["profile", "--op", "flash", "--tokens", "64", "--csv", str(tmp_path / "p.csv")])
    assert err.value.code == EXIT_USAGE


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def test_ablate_appends_schema_and_rows(tmp_path, config_path, capsys):
    results = tmp_path / "ablate.csv"
    base = ["ablate", "--config", config_path, "--results", str(results),
            "--seed", "0", "--epochs", "1"]
    assert main(base + ["--axis", "token", "--activation", "st"]) == EXIT_OK
    assert main(base + ["--axis", "head", "--activation", "sigmoid"]) == EXIT_OK
    lines = results.read_text().splitlines()
    assert lines[0] == ABLATE_HEADER
    assert len(lines) == 3
    first = lines[1].split(",")
    assert first[:4] == ["token", "st", "1", "0"]
    assert np.isfinite(float(first[4]))
    assert np.isfinite(float(first[5]))


def test_ablate_rejects_unknown_axis(tmp_path, config_path):
    with pytest.raises(SystemExit) as err:
        main(["ablate", "--axis", "channel", "--activation", "st",
              "--config", config_path, "--results", str(tmp_path / "r.csv")])
    assert err.value.code == EXIT_USAGE
