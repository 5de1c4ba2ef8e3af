import csv
import fcntl
import json

import numpy as np
import pytest

from qrmia import cli, config, diffusion, pipeline


def tiny_config(workspace, **overrides):
    raw = {
        "dataset": {"kind": "mix", "n": 24, "dims": [1, 4, 4], "seed": 1, "split_seed": 2},
        "diffusion": {"T": 10, "width": 8, "depth": 1, "emb_width": 4, "log_every": 5,
                      "train": {"steps": 20, "batch_size": 8}},
        "attack": {"trunk_params": [300], "m": 3, "train": {"steps": 10, "batch_size": 16}},
        "eval": {"seeds": [0, 1], "m_values": [1, 3], "repetitions": 2, "histogram_bins": 5},
        "paths": {"workspace": str(workspace)},
    }
    for section, values in overrides.items():
        raw[section] = {**raw.get(section, {}), **values}
    return raw


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_config(tmp_path / "ws")))
    return path


def write(tmp_path, raw, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_default_config_round_trips(capsys):
    assert cli.main(["default-config"]) == 0
    raw = json.loads(capsys.readouterr().out)
    assert config.from_dict(raw) == config.RunConfig()


def test_defaults_validate():
    cfg = config.RunConfig()
    config.validate(cfg)
    assert cfg.score_t == 25 and len(cfg.alphas()) == 55


@pytest.mark.parametrize("raw", [
    {"dataset": {"nn": 3}},
    {"bogus": {}},
    {"attack": {"train": {"learning_rate": 0.1}}},
    {"dataset": {"n": 2}},
    {"dataset": {"kind": "faces"}},
    {"diffusion": {"beta_start": 0.5, "beta_end": 0.1}},
    {"attack": {"score_t": 50}},
    {"attack": {"decision_alpha": 0.123}},
    {"eval": {"repetitions": 1}},
    {"attack": {"train": {"momentum": 1.5}}},
    {"dataset": {"n": "many"}},
])
def test_invalid_configs_rejected(raw):
    with pytest.raises(config.ConfigError):
        config.from_dict(raw)


def test_invalid_config_exit_code(tmp_path, capsys):
    path = write(tmp_path, {"dataset": {"typo": 1}})
    assert cli.main(["gen-data", "--config", str(path)]) == 1
    assert "typo" in capsys.readouterr().err
    assert not (tmp_path / "workspace").exists()


def test_unreadable_config_exit_code(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["gen-data", "--config", str(tmp_path / "bad.json")]) == 1


def test_section_hash_ignores_other_sections():
    a = config.RunConfig()
    b = config.from_dict({"eval": {"seeds": [9]}})
    assert pipeline.stage_hash(a, "models") == pipeline.stage_hash(b, "models")
    assert pipeline.stage_hash(a, "reports") != pipeline.stage_hash(b, "reports")


def test_gen_data_cache_hit_and_new_seed(tmp_path, cfg_path, capsys):
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    assert "(computed)" in capsys.readouterr().out
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    assert "(cache hit)" in capsys.readouterr().out
    other = write(tmp_path, tiny_config(tmp_path / "ws", dataset={"seed": 5}), "other.json")
    assert cli.main(["gen-data", "--config", str(other)]) == 0
    assert len(list((tmp_path / "ws" / "data").iterdir())) == 2


def test_workspace_override_creates_directory(tmp_path, cfg_path):
    target = tmp_path / "deep" / "ws2"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--workspace", str(target)]) == 0
    assert (target / "data").is_dir()


def test_missing_upstream_is_validation_error(cfg_path, capsys):
    assert cli.main(["train-dm", "--config", str(cfg_path)]) == 1
    assert "run the producing command first" in capsys.readouterr().err


def test_stale_artifact_refused_unless_forced(cfg_path, tmp_path):
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 0
    (meta_path,) = (tmp_path / "ws" / "data").glob("*/meta.json")
    meta = json.loads(meta_path.read_text())
    meta["config_hash"] = "0" * 16
    meta_path.write_text(json.dumps(meta))
    assert cli.main(["gen-data", "--config", str(cfg_path)]) == 1
    assert cli.main(["gen-data", "--config", str(cfg_path), "--force"]) == 0


def test_divergent_training_is_compute_error(tmp_path, capsys):
    train = {"lr": 1e8, "steps": 50, "batch_size": 8, "clip_norm": None}
    raw = tiny_config(tmp_path / "ws", diffusion={"train": train})
    path = write(tmp_path, raw)
    assert cli.main(["gen-data", "--config", str(path)]) == 0
    with np.errstate(all="ignore"):
        assert cli.main(["train-dm", "--config", str(path)]) == 2
    assert "compute error" in capsys.readouterr().err
    assert not list((tmp_path / "ws" / "models").glob("*/meta.json"))


def test_busy_workspace_refused(cfg_path, tmp_path):
    root = tmp_path / "ws"
    root.mkdir()
    with open(root / ".lock", "w") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        assert cli.main(["gen-data", "--config", str(cfg_path)]) == 1


def test_zero_step_training_saves_initialisation(tmp_path):
    raw = tiny_config(tmp_path / "ws", diffusion={"train": {"steps": 0, "batch_size": 8}})
    path = write(tmp_path, raw)
    assert cli.main(["gen-data", "--config", str(path)]) == 0
    assert cli.main(["train-dm", "--config", str(path)]) == 0
    cfg = config.load(path)
    model = pipeline.load_model(cfg, pipeline.Workspace(cfg.paths.workspace))
    d = cfg.diffusion
    init = diffusion.DiffusionModel.create(diffusion.make_schedule(d.T, d.beta_start, d.beta_end), 16,
                                           d.width, d.depth, d.emb_width, d.init_seed)
    assert np.array_equal(model.eps_net.flat_params(), init.eps_net.flat_params())


def test_score_subsets_accumulate(cfg_path, capsys):
    for verb in ("gen-data", "train-dm"):
        assert cli.main([verb, "--config", str(cfg_path)]) == 0
    assert cli.main(["score", "--config", str(cfg_path), "--subset", "members"]) == 0
    assert cli.main(["score", "--config", str(cfg_path), "--subset", "members"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].endswith("(cache hit)")
    assert cli.main(["score", "--config", str(cfg_path)]) == 0
    cfg = config.load(cfg_path)
    ws = pipeline.Workspace(cfg.paths.workspace)
    assert {r.label for r in pipeline.load_scores(cfg, ws, "members")} == {1}
    assert len(pipeline.load_scores(cfg, ws, "holdout")) == 6


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("full")
    path = write(root, tiny_config(root / "ws"))
    assert cli.main(["run", "--config", str(path)]) == 0
    assert cli.main(["bench-prep", "--config", str(path)]) == 0
    cfg = config.load(path)
    return cfg, pipeline.Workspace(cfg.paths.workspace), path


def test_decisions_cover_members_and_holdout(full_run):
    cfg, ws, _ = full_run
    rows = read_csv(ws.dir("attackers", pipeline.stage_hash(cfg, "attackers")) / "decisions.csv")
    assert rows[0] == ["id", "label", "score", "alpha", "votes", "m", "verdict"]
    sp = pipeline.load_split(cfg, ws)
    assert len(rows) - 1 == len(sp.members) + len(sp.holdout)
    for r in rows[1:]:
        assert (r[6] == "IN") == (2 * int(r[4]) >= int(r[5]))


def test_attack_bundle_manifest(full_run):
    cfg, ws, _ = full_run
    manifest = json.loads((ws.dir("attackers", pipeline.stage_hash(cfg, "attackers")) / "bag" /
                           "manifest.json").read_text())
    assert manifest["m"] == 3 and manifest["score_transform"] == "log" and len(manifest["alphas"]) == 55


def test_report_contents(full_run):
    cfg, ws, _ = full_run
    out = ws.dir("reports", pipeline.stage_hash(cfg, "reports"))
    rows = read_csv(out / "tpr_at_fpr.csv")
    attacks = {r[0] for r in rows[1:]}
    fprs = {float(r[1]) for r in rows[1:]}
    assert {"bag", "single", "marginal"} <= attacks and {0.01, 0.001} <= fprs
    summary = json.loads((out / "evaluate.json").read_text())
    assert summary["schema_version"] == pipeline.SCHEMA_VERSION
    for name in ("roc_bag.csv", "calibration.csv", "histograms.csv", "roc.svg", "tpr_at_fpr_mean.csv"):
        assert (out / name).exists()
        if name.endswith(".csv"):
            assert read_csv(out / name)[0]


def test_ablation_row_count(full_run):
    cfg, ws, _ = full_run
    out = ws.dir("reports", pipeline.stage_hash(cfg, "reports")) / "ablation"
    rows = read_csv(out / "bagging_sweep.csv")
    expected = len(cfg.attack.trunk_params) * len(cfg.eval.m_values) * len(cfg.eval.fpr_targets)
    assert len(rows) - 1 == expected
    variances = [float(r[2]) for r in read_csv(out / "variance_summary.csv")[1:]]
    assert all(0 <= v <= 0.25 for v in variances)


def test_bench_table(full_run):
    cfg, ws, _ = full_run
    out = ws.root / "bench" / pipeline.stage_hash(cfg, "attackers")
    rows = read_csv(out / "timing.csv")
    assert [r[0] for r in rows[1:]] == ["scoring", "learning"]
    assert all(float(r[1]) > 0 for r in rows[1:])
    assert json.loads((out / "bench.json").read_text())["learning_over_diffusion"] > 0


def test_rerun_is_all_cache_hits(full_run, capsys):
    _, _, path = full_run
    assert cli.main(["run", "--config", str(path)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(line.endswith("(cache hit)") for line in lines)
