import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import auto_backend
from refineloop.agents import AgentRole, AutoResponder, ScriptedBackend
from refineloop.errors import ApplyFailure
from refineloop.execution import (
    ContainerExecutor,
    Effect,
    ExecutionOutcome,
    ExecutorResult,
    ScriptedExecutor,
    SimulatedExecutor,
    Status,
    apply_blueprint,
    load_effect_table,
    parse_metrics_file,
    run_iteration_execution,
    validate_code,
)
from refineloop.ideation import Blueprint, ModificationStep, PlanStatus, Proposal, RankedDecision
from refineloop.snapshots import CodebaseSnapshot, SnapshotStore

X, V = AgentRole.CODE_EXPERT, AgentRole.CODE_VALIDATOR
BASE = CodebaseSnapshot({"model.py": "x = 1\n", "train.py": "fit()\n", "util.py": "pass\n"})


def approved(*steps):
    decision = RankedDecision(["P1"], "P1", "", {"P1": Proposal("P1", ["a"], "add graph attention")})
    return Blueprint(decision, list(steps), validation=PlanStatus.APPROVED, known_files=BASE.files)


BP = approved(ModificationStep("model.py", "add graph attention"), ModificationStep("train.py", "longer schedule"))
FAIL = {"verdict": "fail", "findings": [{"path": "model.py", "description": "undefined name"}]}


def files(**content):
    return {"files": [{"path": p.replace("_", "."), "content": c} for p, c in content.items()]}


def test_apply_changes_exactly_the_target_files():
    backend = ScriptedBackend({(X, 0): files(model_py="y = 2\n", train_py="fit(epochs=5)\n")})
    snap = apply_blueprint(BASE, BP, backend)
    assert snap.diff_paths(BASE) == {"model.py", "train.py"}
    assert snap.lineage == ("add graph attention", "longer schedule")
    assert BASE.files["model.py"] == "x = 1\n"


def test_apply_new_file():
    bp = approved(ModificationStep("attn.py", "new layer", new_file=True))
    snap = apply_blueprint(BASE, bp, ScriptedBackend({(X, 0): files(attn_py="class A: pass\n")}))
    assert "attn.py" in snap.files and snap.diff_paths(BASE) == {"attn.py"}


def test_apply_unparseable_raises():
    with pytest.raises(ApplyFailure):
        apply_blueprint(BASE, BP, ScriptedBackend({(X, 0): "garbage", (X, 1): "more garbage"}))


def test_apply_requires_approval():
    bp = Blueprint(BP.decision, BP.modification_steps)
    with pytest.raises(ValueError):
        apply_blueprint(BASE, bp, auto_backend())


def test_validate_pass():
    v = validate_code(BASE, BP, ScriptedBackend({(V, 0): {"verdict": "pass"}}))
    assert v.passed and v.rebuttal_round == 0


def test_validate_fail_rebut_concede():
    backend = ScriptedBackend({(V, 0): FAIL, (X, 0): {"rebut": True, "arguments": "name is imported"},
                               (V, 1): {"verdict": "pass"}})
    v = validate_code(BASE, BP, backend)
    assert v.passed and v.rebuttal_round == 1


def test_validate_fail_rebuttal_rejected():
    backend = ScriptedBackend({(V, 0): FAIL, (X, 0): {"rebut": True, "arguments": "fine"}, (V, 1): FAIL})
    v = validate_code(BASE, BP, backend)
    assert not v.passed and v.rebuttal_round == 1
    v = validate_code(BASE, BP, ScriptedBackend({(V, 0): FAIL, (X, 0): {"rebut": False}}))
    assert not v.passed and v.rebuttal_round == 1 and v.findings[0].path == "model.py"


def test_executor_fails_three_times_then_succeeds():
    ex = ScriptedExecutor([ExecutorResult(False, {}, "oom")] * 3 + [ExecutorResult(True, {"ARI": 0.6})])
    out = run_iteration_execution(BASE, BP, ex, auto_backend(), "ARI")
    assert out.status is Status.SUCCESS and out.execution_attempts == 4 and out.validation_attempts == 1
    assert out.metrics == {"ARI": 0.6}


def test_validator_failing_ten_times():
    script = {(V, i): FAIL for i in range(10)}
    backend = ScriptedBackend(script, AutoResponder(0))
    ex = ScriptedExecutor([ExecutorResult(True, {"ARI": 0.6})])
    out = run_iteration_execution(BASE, BP, ex, backend, "ARI")
    assert (out.status, out.validation_attempts, out.execution_attempts) == (Status.FAILURE, 10, 0)
    assert ex.calls == 0


def test_missing_objective_metric_is_failure():
    ex = ScriptedExecutor([ExecutorResult(True, {"NMI": 0.4})])
    out = run_iteration_execution(BASE, BP, ex, auto_backend(), "ARI", max_retries=3)
    assert out.status is Status.FAILURE and out.execution_attempts == 3


def test_skip_validation_and_snapshot_store(tmp_path):
    store = SnapshotStore(tmp_path)
    ex = ScriptedExecutor([ExecutorResult(True, {"ARI": 0.6})])
    out = run_iteration_execution(BASE, BP, ex, auto_backend(), "ARI", skip_validation=True, snapshots=store)
    assert out.validation_attempts == 0
    assert SnapshotStore(tmp_path).get(out.snapshot_id).snapshot_id == out.snapshot_id


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 15), st.integers(0, 15), st.integers(1, 10))
def test_retry_bounds(v_fail, e_fail, max_retries):
    script = {(V, i): FAIL for i in range(v_fail)}
    backend = ScriptedBackend(script, AutoResponder(0))
    ex = ScriptedExecutor([ExecutorResult(False)] * e_fail + [ExecutorResult(True, {"ARI": 0.7})])
    base_id = BASE.snapshot_id
    out = run_iteration_execution(BASE, BP, ex, backend, "ARI", max_retries=max_retries)
    assert out.validation_attempts <= max_retries and out.execution_attempts <= max_retries
    assert out.succeeded == (v_fail < max_retries and e_fail < max_retries)
    assert out.succeeded <= ("ARI" in out.metrics)
    assert BASE.snapshot_id == base_id == BASE.compute_id()


def test_simulated_additive_effect():
    sim = SimulatedExecutor({"ARI": 0.50}, [Effect("graph attention", "ARI", 0.05)])
    snap = BASE.derive({"model.py": "y"}, 0, ["Add Graph Attention encoder"])
    res = sim.execute(snap)
    assert res.success and res.metrics["ARI"] == pytest.approx(0.55, abs=1e-12)
    assert sim.execute(BASE).metrics == {"ARI": 0.50}


def test_simulated_is_deterministic_and_seeded():
    snap = BASE.derive({"model.py": "y"}, 0, ["graph attention"])
    eff = [Effect("graph attention", "ARI", 0.05)]
    a = SimulatedExecutor({"ARI": 0.5}, eff, noise_scale=0.01, seed=3, failure_probability=0.3)
    b = SimulatedExecutor({"ARI": 0.5}, eff, noise_scale=0.01, seed=3, failure_probability=0.3)
    for attempt in range(1, 6):
        assert a.execute(snap, attempt) == b.execute(snap, attempt)
    ex1 = run_iteration_execution(BASE, BP, a, auto_backend(), "ARI")
    ex2 = run_iteration_execution(BASE, BP, b, auto_backend(), "ARI")
    assert ex1 == ex2


def test_effect_table_and_outcome_round_trip(tmp_path):
    path = tmp_path / "effects.yaml"
    path.write_text("- {keyword: attention, metric: ARI, effect: 0.05}\n- {keyword: dropout, metric: ARI, effect: -0.01}\n")
    assert load_effect_table(path) == [Effect("attention", "ARI", 0.05), Effect("dropout", "ARI", -0.01)]
    out = ExecutionOutcome(Status.SUCCESS, {"ARI": 0.6}, "log", 1, 2, "abc")
    assert ExecutionOutcome.from_dict(out.to_dict()) == out
    with pytest.raises(ValueError):
        ExecutionOutcome(Status.FAILURE, validation_attempts=11)


def test_parse_metrics_file():
    assert parse_metrics_file("# run\nARI\t0.61\n\nNMI\t0.7\n") == {"ARI": 0.61, "NMI": 0.7}
    with pytest.raises(ValueError):
        parse_metrics_file("ARI 0.61\n")
    with pytest.raises(ValueError):
        parse_metrics_file("ARI\tnan\n")


def test_container_argv_mounts_read_only(tmp_path):
    ex = ContainerExecutor("img:1", "python {workdir}/train.py --out {outdir}")
    argv = ex.build_argv(tmp_path / "src", tmp_path / "out")
    assert argv[:3] == ["docker", "run", "--rm"]
    assert f"{tmp_path / 'src'}:/workspace:ro" in argv and f"{tmp_path / 'out'}:/output:rw" in argv
    assert argv[-1] == "python /workspace/train.py --out /output"
    assert "--network" in argv


def test_container_missing_runtime_is_failure():
    ex = ContainerExecutor("img", "true", runtime="/nonexistent/runtime")
    res = ex.execute(BASE)
    assert not res.success and "unavailable" in res.logs
