import csv
import json

import pytest

from maesn import cli, meta


def small_config(tmp_path, method="maesn", **kw):
    cfg = {
        "method": method, "family": "point_nav", "output_dir": str(tmp_path / "run"), "seeds": [0],
        "n_train_tasks": 3, "n_validation_tasks": 2, "meta_iters": 2, "task_batch_size": 2,
        "episodes_pre": 3, "episodes_post": 3, "horizon": 6, "metatest_iters": 2, "metatest_episodes": 3,
        "trajectory_episodes": 4, "dispersion_episodes": 5,
        "method_options": {"hidden_sizes": [8]},
    }
    cfg.update(kw)
    return cfg


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_scratch_smoke_run(tmp_path, capsys):
    cfg = small_config(tmp_path, "scratch", n_train_tasks=1, n_validation_tasks=1, task_batch_size=1,
                       meta_iters=2)
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 0
    run = tmp_path / "run"
    metrics = list((run / "seed_0" / "scratch").glob("*/metrics.csv"))
    assert len(metrics) == 1
    assert len(rows(metrics[0])) == 2
    assert all(r["mode"] == "sparse" for r in rows(metrics[0]))


def test_rerun_is_byte_identical_across_worker_counts(tmp_path, monkeypatch):
    cfg = small_config(tmp_path)
    p = write_config(tmp_path, cfg)
    assert cli.main(["run", str(p)]) == 0
    first = (tmp_path / "run" / "seed_0" / "train" / "metrics.csv").read_bytes()
    monkeypatch.setenv(cli.WORKERS_ENV, "3")
    assert cli.main(["verify", str(tmp_path / "run")]) == 0
    assert cli.main(["run", str(p)]) == 0
    assert (tmp_path / "run" / "seed_0" / "train" / "metrics.csv").read_bytes() == first


def test_verify_reports_tampered_file(tmp_path, capsys):
    cfg = small_config(tmp_path, meta_iters=1)
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 0
    m = tmp_path / "run" / "seed_0" / "train" / "metrics.csv"
    m.write_text(m.read_text().replace("dense", "dense ", 1))
    assert cli.main(["verify", str(tmp_path / "run")]) == 2
    assert "metrics.csv" in capsys.readouterr().err


def test_run_artifacts_and_modes(tmp_path):
    cfg = small_config(tmp_path, n_validation_tasks=3, metatest_iters=4, seeds=[0, 1])
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    for s in (0, 1):
        sd = out / f"seed_{s}"
        assert all(r["mode"] == "dense" for r in rows(sd / "train" / "metrics.csv"))
        traces = sorted((sd / "metatest").glob("*.csv"))
        assert len(traces) == 3
        for t in traces:
            assert all(r["mode"] == "sparse" for r in rows(t))
        curve = rows(sd / "adaptation_curve.csv")
        assert len(curve) == 5 and all(r["n"] == "3" and r["stderr_over"] == "tasks" for r in curve)
        assert len(rows(sd / "latents.csv")) == 6
    top = rows(out / "adaptation_curve.csv")
    assert len(top) == 5 and top[0]["stderr_over"] == "seeds" and top[0]["n"] == "2"
    assert json.loads((out / "config.json").read_text())["seeds"] == [0, 1]


def test_curve_aggregates_twenty_tasks(tmp_path):
    cfg = small_config(tmp_path, n_train_tasks=20, n_validation_tasks=20, task_batch_size=20, meta_iters=1,
                       metatest_iters=3, horizon=4)
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    curve = rows(out / "adaptation_curve.csv")
    assert [int(r["iteration"]) for r in curve] == [0, 1, 2, 3]
    assert all(r["n"] == "20" for r in curve)


def test_export_plotdata_schema(tmp_path):
    cfg = small_config(tmp_path, meta_iters=2, checkpoint_every=1)
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    assert cli.main(["export-plotdata", str(out)]) == 0
    pd = out / "plotdata"
    curve = rows(pd / "adaptation_curves.csv")
    assert list(curve[0]) == ["iteration", "mean", "stderr", "method"] and curve[0]["method"] == "maesn"
    traj = rows(pd / "trajectories.csv")
    assert list(traj[0]) == ["episode", "t", "x", "y"]
    assert len(traj) == 4 * (6 + 1)
    ell = rows(pd / "ellipses.csv")
    assert len(ell) == 2 * 2
    assert list(ell[0]) == ["task_id", "mu_0", "mu_1", "sigma_0", "sigma_1", "tag"]
    assert sorted(r["tag"] for r in ell) == ["post", "post", "pre", "pre"]
    disp = rows(pd / "dispersion.csv")
    for ck in ("ckpt_0", "ckpt_1", "ckpt_2"):
        assert sorted(r["kind"] for r in disp if r["checkpoint"] == ck) == ["fixed", "sampled"]


def test_export_names_missing_file(tmp_path, capsys):
    cfg = small_config(tmp_path, meta_iters=1)
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    (out / "seed_0" / "latents.csv").unlink()
    assert cli.main(["export-plotdata", str(out)]) == 2
    assert "latents.csv" in capsys.readouterr().err


def test_metatest_subcommand(tmp_path):
    cfg = small_config(tmp_path, meta_iters=1)
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    ckpt = out / "seed_0" / "train" / "ckpt_1"
    dest = tmp_path / "mt"
    code = cli.main(["metatest", str(ckpt), str(out / "tasks_validation.json"), "--iters", "2",
                     "--episodes", "3", "--out", str(dest)])
    assert code == 0
    assert len(rows(dest / "adaptation_curve.csv")) == 3
    assert len(list(dest.glob("point_nav-validation-*.csv"))) == 2


@pytest.mark.parametrize("method", ["maml", "latent_only", "maml_bias_only"])
def test_other_methods_run(tmp_path, method):
    cfg = small_config(tmp_path, method, meta_iters=1)
    out = cli.run_experiment(cli.ExperimentConfig.from_dict(cfg))
    assert len(rows(out / "adaptation_curve.csv")) == 3
    assert cli.main(["export-plotdata", str(out)]) == 0


@pytest.mark.parametrize("change, field", [
    ({"seeds": []}, "seeds"),
    ({"seeds": [1, 1]}, "seeds"),
    ({"n_validation_tasks": 0}, "n_validation_tasks"),
    ({"method": "ppo"}, "method"),
    ({"family": "ant"}, "family"),
    ({"colour": "red"}, "colour"),
    ({"meta_iters": 2.5}, "meta_iters"),
    ({"task_batch_size": 9}, "task_batch_size"),
    ({"method_options": {"latent_grad": "magic"}}, "method_options"),
    ({"method_options": {"learning_rate": 1}}, "method_options.learning_rate"),
    ({"outer_options": {"optimizer": "adam"}}, "outer_options"),
    ({"outer_options": {"workers": 2}}, "outer_options.workers"),
])
def test_invalid_config_names_field(tmp_path, capsys, change, field):
    cfg = small_config(tmp_path, **change)
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 1
    assert f"field {field!r}" in capsys.readouterr().err


def test_missing_required_field(tmp_path, capsys):
    cfg = small_config(tmp_path)
    del cfg["seeds"]
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 1
    assert "'seeds'" in capsys.readouterr().err


def test_uncreatable_output_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = small_config(tmp_path, output_dir=str(blocker / "sub"))
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 1
    assert "'output_dir'" in capsys.readouterr().err


def test_bad_worker_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.WORKERS_ENV, "zero")
    assert cli.main(["run", str(write_config(tmp_path, small_config(tmp_path)))]) == 1
    assert cli.WORKERS_ENV in capsys.readouterr().err


def test_mid_run_failure_writes_error_manifest(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise FloatingPointError("synthetic failure")

    monkeypatch.setattr(cli, "metatest_adapt", boom)
    cfg = small_config(tmp_path, meta_iters=1)
    assert cli.main(["run", str(write_config(tmp_path, cfg))]) == 2
    run = tmp_path / "run"
    err = json.loads((run / "error.json").read_text())
    assert err["stage"] == "metatest" and err["seed"] == 0 and "synthetic" in err["message"]
    assert (run / "seed_0" / "train" / "metrics.csv").exists()
    assert meta.load_checkpoint(err["last_checkpoint"]).state.iteration == 1


def test_mode_mixing_detected(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("iteration,mode\n0,dense\n1,sparse\n")
    with pytest.raises(RuntimeError, match="row 1"):
        cli.check_modes(p, "dense")
