import dataclasses
import filecmp

import numpy as np
import pytest

from beamlora import analysis, cli, persist
from beamlora.config import OUT_ROOT_ENV, BeamSpec, ConfigError, LoggingSpec, ModelSpec, RunConfig, load, loads
from beamlora.runner import load_run, run, save_run
from beamlora.tasks import OptimConfig, TaskConfig, build_model, evaluate, gen_teacher_student
from test_beam import brute_force_K

SHORT = RunConfig(optim=OptimConfig(steps=120), beam=BeamSpec(0.95, 16, 80))


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, mode="static_p", task=TaskConfig(dims=[16, 24, 8], sigmas=[2.0, 1.0]),
                        model=ModelSpec(r=4, scale=2.5), logging=LoggingSpec(importance_every=10))
        assert loads(cfg.dumps()) == cfg
        assert loads(loads(cfg.dumps()).dumps()) == cfg

    def test_defaults_fill_missing(self):
        assert loads("schema_version: 1\nseed: 4\n") == RunConfig(seed=4)

    def test_file(self, tmp_path):
        RunConfig(seed=2).save(tmp_path / "c.yaml")
        assert load(tmp_path / "c.yaml").seed == 2

    @pytest.mark.parametrize("text,line,fragment", [
        ("schema_version: 1\nseed: 0\noptim:\n  lr: fast\n", 4, "optim.lr"),
        ("schema_version: 1\nmodel:\n  rank: 3\n", 3, "unknown key"),
        ("schema_version: 1\nsede: 3\n", 2, "unknown key"),
        ("seed: 0\n", 1, "schema_version"),
        ("schema_version: 7\n", 1, "schema_version"),
        ("schema_version: 1\nmode: greedy\n", 2, "mode"),
        ("schema_version: 1\nbeam:\n  p_init: 1.5\n", 2, "p_init"),
        ("schema_version: 1\ntask:\n  sigmas: [1.0, 2.0]\n", 2, "non-increasing"),
        ("schema_version: 1\ntask: [1, 2\n", 3, "invalid YAML"),
    ])
    def test_line_precise_errors(self, text, line, fragment):
        with pytest.raises(ConfigError) as err:
            loads(text, source="cfg.yaml")
        assert err.value.line == line
        assert fragment in str(err.value) and f"cfg.yaml:{line}:" in str(err.value)

    def test_out_root_override(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
        assert RunConfig(out="a/b").out_dir() == tmp_path / "a" / "b"
        assert RunConfig(out="/abs").out_dir().as_posix() == "/abs"
        monkeypatch.delenv(OUT_ROOT_ENV)
        assert RunConfig(out="a").out_dir().as_posix() == "a"


class TestArtifacts:
    def test_metrics_schema(self, tmp_path):
        res = run(SHORT)
        save_run(res, tmp_path)
        m = persist.read_metrics(tmp_path / "metrics.csv")
        assert m["step"] == list(range(1, 121))
        assert all(np.isfinite(m["eval_loss"]))
        assert m["eval_loss"] == res.record.eval_loss

    def test_events_per_adapter_on_schedule(self, tmp_path):
        save_run(run(SHORT), tmp_path)
        events = persist.read_events(tmp_path / "events.jsonl")
        assert [e["step"] for e in events] == [16, 32, 48, 64, 80]
        assert all(e["step"] % 16 == 0 and e["step"] <= 80 for e in events)

    def test_checkpoint_round_trip(self, tmp_path):
        res = run(SHORT)
        save_run(res, tmp_path)
        cfg, task, model = load_run(tmp_path / "checkpoint.npz")
        assert cfg == SHORT
        assert evaluate(model, task) == res.record.final_eval
        _, state, _ = persist.load_checkpoint(tmp_path / "checkpoint.npz")
        live = res.record.meta["state"]
        assert state.step == live.step == 120
        for tid in live.M:
            assert state.M[tid].tobytes() == live.M[tid].tobytes()
            assert state.V[tid].tobytes() == live.V[tid].tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        np.savez(tmp_path / "x.npz", a=np.zeros(2))
        with pytest.raises(ValueError):
            persist.load_checkpoint(tmp_path / "x.npz")


class TestCli:
    def test_train_default_config(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path))
        assert cli.main(["train", "--seed", "1", "--out", "run"]) == 0
        out = tmp_path / "run"
        assert len(persist.read_metrics(out / "metrics.csv")["step"]) == RunConfig().optim.steps
        events = persist.read_events(out / "events.jsonl")
        assert len([e for e in events if e["adapter"] == "layer0"]) == 5
        for name in ("config.yaml", "checkpoint.npz", "summary.json"):
            assert (out / name).exists()
        assert load(out / "config.yaml").seed == 1

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        SHORT.save(cfg)
        for d in ("a", "b"):
            assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
        assert filecmp.cmp(tmp_path / "a" / "metrics.csv", tmp_path / "b" / "metrics.csv", shallow=False)
        assert filecmp.cmp(tmp_path / "a" / "events.jsonl", tmp_path / "b" / "events.jsonl", shallow=False)

    def test_schema_violation_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("schema_version: 1\nmodel:\n  r: eight\n")
        assert cli.main(["train", "--config", str(cfg)]) == cli.EXIT_CONFIG
        assert f"{cfg}:3:" in capsys.readouterr().err

    def test_divergence_writes_partial_record(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        dataclasses.replace(SHORT, optim=OptimConfig(lr=1e300, steps=120)).save(cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            code = cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r"), "--mode", "lora"])
        assert code == cli.EXIT_DIVERGED
        assert '"status": "diverged"' in (tmp_path / "r" / "summary.json").read_text()
        assert len(persist.read_metrics(tmp_path / "r" / "metrics.csv")["step"]) < 120

    def test_prune_sweep_and_profile(self, tmp_path, capsys):
        run_dir = tmp_path / "r"
        assert cli.main(["train", "--out", str(run_dir), "--importance-every", "20"]) == 0
        csv_path = tmp_path / "sweep.csv"
        assert cli.main(["prune-sweep", str(run_dir / "checkpoint.npz"), "--direction", "both", "--out", str(csv_path)]) == 0
        assert len(csv_path.read_text().splitlines()) == 1 + 2 * 11
        assert cli.main(["profile", str(run_dir), "--out", str(tmp_path / "p")]) == 0
        assert (tmp_path / "p" / "importance_trajectories.csv").exists()

    def test_profile_without_logging(self, tmp_path, capsys):
        assert cli.main(["train", "--out", str(tmp_path / "r")]) == 0
        assert cli.main(["profile", str(tmp_path / "r")]) == cli.EXIT_INPUT
        assert "importance_every" in capsys.readouterr().err

    def test_sweep_command(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        SHORT.save(cfg)
        code = cli.main(["sweep", "--config", str(cfg), "--axis", "ablation", "--values", "beamlora", "random_select",
                         "--seeds", "2", "--out", str(tmp_path / "s")])
        assert code == 0
        assert len((tmp_path / "s" / "sweep.csv").read_text().splitlines()) == 3


@pytest.fixture(scope="module")
def trained():
    res = run(RunConfig(mode="lora", seed=0, logging=LoggingSpec(eval_every=600)))
    return res.model, res.task


class TestPruneSweep:
    def test_endpoints(self, trained):
        model, task = trained
        rows = analysis.prune_sweep(model, task)
        assert [r["fraction"] for r in rows] == [0.0, *analysis.DECILES]
        assert rows[0]["loss"] == evaluate(model, task)
        bare = model.copy()
        for ad in bare.layers:
            ad.B.data[:] = 0.0
        assert rows[-1]["loss"] == pytest.approx(evaluate(bare, task), rel=1e-12)

    def test_side_effect_free(self, trained):
        model, task = trained
        before = evaluate(model, task)
        arrays = [ad.B.data.tobytes() + ad.A.data.tobytes() for ad in model.layers]
        analysis.prune_sweep(model, task, direction="most")
        assert evaluate(model, task) == before
        assert [ad.B.data.tobytes() + ad.A.data.tobytes() for ad in model.layers] == arrays

    def test_least_hurts_less_than_most(self, trained):
        model, task = trained
        lo = analysis.prune_sweep(model, task, (0.3,), direction="least")
        hi = analysis.prune_sweep(model, task, (0.3,), direction="most")
        assert lo[1]["loss"] - lo[0]["loss"] < hi[1]["loss"] - hi[0]["loss"]

    def test_pruned_ranks_ties(self):
        assert analysis.pruned_ranks(np.array([1.0, 0.0, 0.0, 2.0]), 2) == [1, 2]
        assert analysis.pruned_ranks(np.array([1.0, 3.0, 3.0, 2.0]), 2, "most") == [1, 2]

    @pytest.mark.parametrize("f,r,n", [(0.3, 8, 2), (0.5, 8, 4), (0.25, 2, 1), (1.0, 5, 5), (0.0, 4, 0)])
    def test_fraction_counts(self, f, r, n):
        assert analysis.n_pruned(f, r) == n


class TestProfile:
    def test_fresh_adapter_zero_deciles(self):
        task = gen_teacher_student(TaskConfig(), 0)
        tables = analysis.importance_profile(build_model(task, 8, 0))
        assert len(tables["spatial"]) == 10
        assert all(row["value"] == 0.0 for row in tables["spatial"])

    def test_step_zero_score_trajectory_uniform(self):
        res = run(dataclasses.replace(SHORT, logging=LoggingSpec(importance_every=40)))
        rows = analysis.importance_profile(res.record, "score")["temporal"]
        start = [row["value"] for row in rows if row["step"] == 0]
        np.testing.assert_array_equal(start, [1 / 8] * 8)
        assert {row["step"] for row in rows} == {0, 40, 80, 120}

    def test_missing_logging(self):
        with pytest.raises(analysis.ProfileError, match="importance_every"):
            analysis.importance_profile(run(SHORT).record)

    def test_deciles_of_known_vector(self):
        np.testing.assert_allclose(analysis.importance_deciles(np.arange(11.0)), np.arange(1.0, 11.0))

    def test_frobenius_variance_grows_early(self):
        # LoRA at a small constant lr: rank importance spreads out over the first half
        base = RunConfig(mode="lora", optim=OptimConfig(lr=1e-3, lr_schedule="constant"),
                         logging=LoggingSpec(importance_every=30, eval_every=600))
        ok = 0
        for seed in range(10):
            res = run(dataclasses.replace(base, seed=seed))
            v = [x for step, x in analysis.importance_variance(res.record) if step <= base.optim.steps // 2]
            ok += all(b >= a for a, b in zip(v, v[1:]))
        assert ok >= 7


class TestSweep:
    def test_failures_recorded_and_sweep_continues(self, monkeypatch):
        real = analysis.run

        def flaky(cfg):
            if cfg.seed == 1 and cfg.mode == "beamlora":
                raise RuntimeError("boom")
            return real(cfg)

        monkeypatch.setattr(analysis, "run", flaky)
        rows = analysis.sweep(SHORT, "delta_t", [8, 16], seeds=range(3))
        assert [r["value"] for r in rows] == [8, 16]
        for r in rows:
            assert r["n"] == 2 and r["failed"] == 1
            assert r["failures"][0]["seed"] == 1 and "boom" in r["failures"][0]["error"]

    def test_p_init_axis_first_K_non_increasing(self):
        rows = analysis.sweep(dataclasses.replace(RunConfig(), logging=LoggingSpec(eval_every=600)),
                              "p_init", [0.93, 0.95, 0.97, 0.99], seeds=range(3))
        ks = [r["first_K_mean"] for r in rows]
        assert all(b <= a for a, b in zip(ks, ks[1:]))

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            analysis.sweep(SHORT, "lr", [0.1])


def test_logged_K_matches_enumeration():
    for p_init in (0.93, 0.97):
        res = run(dataclasses.replace(RunConfig(), beam=BeamSpec(p_init, 80, 400), logging=LoggingSpec(eval_every=600)))
        for ev in res.record.events:
            assert ev.K == brute_force_K(ev.scores, ev.p)
            assert len(ev.I_p) == len(ev.I_e) == len(ev.pairs) == ev.K
