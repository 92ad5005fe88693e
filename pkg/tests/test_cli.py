import csv

import pytest

from posedrl.cli import main
from posedrl.config import RunConfig, dump_config, load_config
from posedrl.errors import ConfigError
from posedrl.pose_graph import LANDMARK_NAMES

TINY_CONFIG = """
# tiny network on small phantoms so that every command finishes in seconds
net.preset = tiny
phantom.dims = 32,32,32
train.batch_size = 3
train.warmup = 10
train.total_learner_steps = 12
train.target_sync_period = 5
train.replay_capacity = 100
train.episode_steps = 8
train.augment_scale = false
eval.repeats = 2
eval.max_steps = 20
checkpoint_every = 4
train.log_every = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(TINY_CONFIG + f"data.train = {root / 'train' / 'manifest.csv'}\n"
                   f"data.eval = {root / 'test' / 'manifest.csv'}\n")
    assert main(["gen-data", "--config", str(cfg), "--count", "3", "--seed", "1", "--out", str(root / "train")]) == 0
    assert main(["gen-data", "--config", str(cfg), "--count", "2", "--seed", "2", "--out", str(root / "test")]) == 0
    return root, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ config

def test_precedence_defaults_file_flags(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("train.lr = 0.002\n")
    assert load_config().train.lr == 3e-4
    assert load_config(path).train.lr == 0.002
    assert load_config(path, ["train.lr=0.005"]).train.lr == 0.005
    assert load_config(None, ["train.lr=0.005"]).train.lr == 0.005


def test_every_field_has_a_default_and_round_trips(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "all.cfg"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_config_values_are_typed(tmp_path):
    cfg = load_config(None, ["phantom.dims=40,40,32", "phantom.figure_scale=none", "train.augment_flip=no",
                             "reward.beta=5", "seed=7"])
    assert cfg.phantom.dims == (40, 40, 32) and cfg.phantom.figure_scale is None
    assert cfg.train.augment_flip is False and cfg.reward.beta == 5.0
    assert cfg.seed == 7 and cfg.train.seed == 7


@pytest.mark.parametrize("bad", ["train.lr=fast", "train.nothing=1", "bogus.lr=1", "no_equals_sign",
                                 "phantom.dims=1,2", "train.lr=-1", "reward.beta=-2", "train.augment_flip=maybe"])
def test_bad_settings_raise_config_error(bad):
    with pytest.raises(ConfigError):
        load_config(None, [bad])


def test_comments_and_blank_lines_ignored(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("\n# a comment\ntrain.gamma = 0.5  # trailing\n\n")
    assert load_config(path).train.gamma == 0.5


# ---------------------------------------------------------------- gen-data

def test_gen_data_writes_volumes_and_manifest(workspace):
    root, _ = workspace
    rows = read_csv(root / "train" / "manifest.csv")
    assert len(rows) == 3 and [r["index"] for r in rows] == ["0", "1", "2"]
    assert all((root / "train" / r["path"]).exists() for r in rows)
    assert len({r["seed"] for r in rows}) == 3


def test_gen_data_is_reproducible(workspace, tmp_path):
    root, cfg = workspace
    assert main(["gen-data", "--config", str(cfg), "--count", "3", "--seed", "1", "--out", str(tmp_path)]) == 0
    for r in read_csv(tmp_path / "manifest.csv"):
        assert (tmp_path / r["path"]).read_bytes() == (root / "train" / r["path"]).read_bytes()


def test_gen_data_zero_count(tmp_path):
    assert main(["gen-data", "--count", "0", "--out", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "manifest.csv") == []


# ------------------------------------------------------------------- train

def test_deterministic_training_is_reproducible(workspace, tmp_path):
    _, cfg = workspace
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "final.lsc").read_bytes() == (tmp_path / "b" / "final.lsc").read_bytes()
    assert (tmp_path / "a" / "checkpoint_0000004.lsc").exists()
    assert len((tmp_path / "a" / "metrics.jsonl").read_text().splitlines()) == 3


def test_interrupted_training_resumes_exactly(workspace, tmp_path):
    _, cfg = workspace
    assert main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / "full")]) == 0
    assert main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / "cut"),
                 "--stop-at", "8"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "cut"),
                 "--resume", str(tmp_path / "cut" / "checkpoint_0000008.lsc")]) == 0
    assert (tmp_path / "cut" / "final.lsc").read_bytes() == (tmp_path / "full" / "final.lsc").read_bytes()


def test_train_without_manifest_is_a_config_error(tmp_path):
    assert main(["train", "--set", f"data.train={tmp_path / 'missing.csv'}", "--out", str(tmp_path)]) == 2


def test_train_on_corrupt_volume_is_a_format_error(workspace, tmp_path):
    root, cfg = workspace
    (tmp_path / "vol_00000.lsv").write_bytes(b"LSV0garbage")
    (tmp_path / "manifest.csv").write_text("index,seed,path\n0,1,vol_00000.lsv\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "manifest.csv"),
                 "--out", str(tmp_path / "o")]) == 3


def test_unknown_command_is_a_config_error():
    assert main(["frobnicate"]) == 2


# -------------------------------------------------------------------- eval

def test_eval_oracle_hook(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert main(["eval", "--config", str(cfg), "--oracle", "--threshold-mm", "0", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "eval.csv")
    assert [r["landmark"] for r in rows[:15]] == list(LANDMARK_NAMES)
    assert all(float(r["pck"]) == 100.0 for r in rows)
    report = capsys.readouterr().out
    assert "over 2 volumes x 2 repeats" in report


def test_eval_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    assert main(["train", "--config", str(cfg), "--deterministic", "--out", str(tmp_path / "run")]) == 0
    ck = str(tmp_path / "run" / "final.lsc")
    assert main(["eval", "--config", str(cfg), "--checkpoint", ck, "--repeats", "1",
                 "--out", str(tmp_path / "ev")]) == 0
    rows = read_csv(tmp_path / "ev" / "eval.csv")
    assert len(rows) == 17 and all(0 <= float(r["pck"]) <= 100 for r in rows)
    # the configured network differs from the one in the checkpoint
    assert main(["eval", "--config", str(cfg), "--set", "net.preset=desk", "--checkpoint", ck]) == 3
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope.lsc")]) == 4


# -------------------------------------------------------------- beta sweep

def test_beta_sweep_summary(workspace, tmp_path):
    _, cfg = workspace
    out = tmp_path / "sweep"
    assert main(["beta-sweep", "--config", str(cfg), "--set", "train.total_learner_steps=3",
                 "--set", "eval.repeats=1", "--betas", "0,2", "--seeds", "0", "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert [(r["beta"], r["seed"]) for r in rows] == [("0", "0"), ("2", "0")]
    assert (out / "beta_2" / "seed_0" / "final.lsc").exists()
    assert main(["beta-sweep", "--config", str(cfg), "--betas", "0,x", "--out", str(out)]) == 2


# ------------------------------------------------------------------- trace

def test_trace_files(workspace, tmp_path):
    root, cfg = workspace
    vol = str(root / "test" / "vol_00000.lsv")
    for name in ("a", "b"):
        assert main(["trace", "--config", str(cfg), "--volume", vol, "--oracle", "--max-steps", "30",
                     "--out", str(tmp_path / name)]) == 0
    agent_files = sorted((tmp_path / "a" / "agents").iterdir())
    assert len(agent_files) == 15
    for f in agent_files:
        rows = [tuple(int(r[c]) for c in "xyz") for r in read_csv(f)]
        assert 1 <= len(rows) <= 31
        assert all(max(abs(p - q) for p, q in zip(r0, r1)) <= 1 for r0, r1 in zip(rows, rows[1:]))
        assert f.read_bytes() == (tmp_path / "b" / "agents" / f.name).read_bytes()
    proj = read_csv(tmp_path / "a" / "projection.csv")
    assert set(proj[0]) == {"landmark", "step", "x", "z"}
    assert {r["landmark"] for r in proj} == set(LANDMARK_NAMES)
    assert len(read_csv(tmp_path / "a" / "final.csv")) == 15


def test_trace_missing_volume_is_a_runtime_error(tmp_path):
    assert main(["trace", "--volume", str(tmp_path / "none.lsv"), "--oracle", "--out", str(tmp_path)]) == 4
