from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from nardistill.errors import ConfigError, InvalidArgument, StateError
from nardistill.harness import (
    BenchReport,
    MethodRecord,
    bench_latency,
    call_counts,
    confidence_stats,
    config_hash,
    evaluate,
    file_sha256,
    load_config,
    load_model,
    parse_mode,
    reference_lengths,
    relative_gap,
    run_experiment,
    save_model,
    solve,
    solve_lengths,
    student_traces,
    validate_report,
)
from nardistill.oracle import held_karp_tsp
from nardistill.problem import generate, make_dataset, stack_instances, tour_length

# confidence ----------------------------------------------------------------


def test_confidence_one_hot():
    traces = [np.eye(5)[[1, 3, 2]], np.eye(5)[[4]]]
    out = confidence_stats(traces)
    assert out["fraction_confident"] == 1.0 and out["min_prob"] == 1.0
    assert out["steps"] == 4 and sum(out["histogram"]) == 4 and len(out["histogram"]) == 20


def test_confidence_uniform_over_fifty():
    out = confidence_stats([np.full((10, 50), 1 / 50)], threshold=0.75)
    assert out["fraction_confident"] == 0.0
    assert out["min_prob"] == pytest.approx(0.02)


def test_confidence_hand_count():
    out = confidence_stats([np.array([0.9, 0.9, 0.9, 0.5])])
    assert out["fraction_confident"] == 0.75 and out["min_prob"] == 0.5
    assert out["histogram"][18] == 3 and out["histogram"][10] == 1


def test_confidence_empty():
    with pytest.raises(InvalidArgument):
        confidence_stats([])


def test_student_traces_are_greedy_distributions(tiny_models):
    _, student = tiny_models["TSP"]
    data = make_dataset("TSP", 10, 4, 0)
    traces = student_traces(student, data)
    # chosen-action probabilities; the last TSP step has a single candidate
    assert len(traces) == 4 and traces[0].shape == (10,)
    assert all(t[-1] == 1.0 and np.all((t > 0) & (t <= 1)) for t in traces)
    stats = confidence_stats(traces)
    assert 0 < stats["min_prob"] <= 1 and stats["steps"] == 40


# gaps ----------------------------------------------------------------------


@pytest.mark.parametrize("s,t", [(3.1, 3.0), (2.9, 3.0), (4.0, 3.0), (1.0, 1.0)])
def test_learning_gap_antisymmetry(s, t):
    g = relative_gap(s, t)
    assert relative_gap(t, s) == pytest.approx(-g / (1 + g), abs=1e-9)


def test_relative_gap_rejects_nonpositive_reference():
    with pytest.raises(InvalidArgument):
        relative_gap(1.0, 0.0)


def test_held_karp_tours_have_zero_oracle_gap():
    data = make_dataset("TSP", 8, 10, 3)
    ref, label = reference_lengths(data)
    assert label == "oracle"
    hk = np.array([tour_length(d, held_karp_tsp(d).tour) for d in data])
    assert 100 * float(np.mean(hk / ref - 1)) == pytest.approx(0.0, abs=1e-12)


def test_reference_labels():
    assert reference_lengths(make_dataset("TSP", 17, 2, 0))[1] == "proxy"
    assert reference_lengths(make_dataset("CVRP", 8, 2, 0))[1] == "oracle"
    assert reference_lengths(make_dataset("CVRP", 9, 2, 0))[1] == "proxy"


# modes ---------------------------------------------------------------------


def test_parse_mode():
    assert parse_mode("greedy") == ("greedy", None)
    assert parse_mode("sample") == ("sample", 128)
    assert parse_mode("beam:4") == ("beam", 4)
    for bad in ("beam:0", "sample:x", "topk", "greedy:3"):
        with pytest.raises(InvalidArgument):
            parse_mode(bad)


@pytest.mark.parametrize("kind", ["TSP", "CVRP"])
@pytest.mark.parametrize("mode", ["greedy", "sample:8", "beam:4", "multistart"])
def test_solve_produces_valid_tours(tiny_models, kind, mode):
    teacher, student = tiny_models[kind]
    data = make_dataset(kind, 10, 6, 50)
    for model in (teacher, student):
        if mode == "multistart" and model is student:
            with pytest.raises(InvalidArgument):
                solve(model, stack_instances(data), mode)
            continue
        lens = solve_lengths(model, data, mode, seed=1)  # validates every tour
        assert lens.shape == (6,) and np.all(lens > 0)


def test_sampling_not_worse_than_single_draw(tiny_models):
    teacher, student = tiny_models["TSP"]
    data = make_dataset("TSP", 10, 20, 60)
    for model in (teacher, student):
        assert np.all(solve_lengths(model, data, "sample:32", 3) <= solve_lengths(model, data, "sample:1", 3) + 1e-12)


# evaluate ------------------------------------------------------------------


def test_evaluate_teacher_against_itself(tiny_models):
    teacher, student = tiny_models["TSP"]
    data = make_dataset("TSP", 10, 30, 77)
    rep = evaluate({"teacher": teacher, "student": student}, data, ["greedy", "sample:4"], seed=1, timings=False)
    assert rep.record("teacher", "greedy").gap_vs_teacher == 0.0
    assert rep.record("teacher", "sample:4").gap_vs_teacher == 0.0
    s = rep.record("student", "greedy")
    t = rep.record("teacher", "greedy")
    assert s.gap_vs_teacher == pytest.approx(100 * (s.mean_length / t.mean_length - 1), abs=1e-9)
    assert rep.environment["reference"] == "oracle"
    assert all(r.gap_vs_oracle >= -1e-9 for r in rep.records)
    assert set(rep.extra["ci95_mean_length"]) == {"teacher|greedy", "student|greedy", "teacher|sample:4",
                                                  "student|sample:4"}
    validate_report(rep.to_dict())


def test_evaluate_reproducible(tiny_models):
    teacher, student = tiny_models["CVRP"]
    models = {"teacher": teacher, "student": student}
    a = evaluate(models, make_dataset("CVRP", 10, 10, 5), ["greedy", "sample:4"], seed=2, timings=False)
    b = evaluate(models, make_dataset("CVRP", 10, 10, 5), ["greedy", "sample:4"], seed=2, timings=False)
    assert a.to_json(timings=False) == b.to_json(timings=False)


def test_evaluate_records_timings(tiny_models):
    teacher, _ = tiny_models["TSP"]
    rep = evaluate({"teacher": teacher}, make_dataset("TSP", 10, 4, 0), ["greedy"], repetitions=5)
    r = rep.records[0]
    assert r.time_single_s > 0 and r.time_batch_total_s > 0
    assert "time_single_s" not in rep.to_dict(timings=False)["records"][0]


def test_evaluate_mismatch_errors(tiny_models):
    teacher, _ = tiny_models["TSP"]
    with pytest.raises(ConfigError):
        evaluate({"teacher": teacher}, make_dataset("CVRP", 10, 3, 0), ["greedy"])
    with pytest.raises(ConfigError):
        evaluate({"teacher": teacher}, make_dataset("TSP", 10, 2, 0) + make_dataset("TSP", 9, 2, 0), ["greedy"])


# latency -------------------------------------------------------------------


def test_bench_latency_and_call_counts(tiny_models):
    teacher, student = tiny_models["TSP"]
    rep = bench_latency(teacher, student, [6, 12], batch=8, repetitions=5)
    rows = rep.extra["latency"]
    assert [r["n"] for r in rows] == [6, 12]
    for r in rows:
        assert r["teacher_calls"] == r["n"] and r["student_calls"] == 1
        assert r["ratio_batch"] == pytest.approx(r["teacher_batch_s"] / r["student_batch_s"])
        assert r["ratio_single"] == pytest.approx(r["teacher_single_s"] / r["student_single_s"])
    validate_report(rep.to_dict())


def test_cvrp_call_count_follows_tour_length(tiny_models):
    teacher, student = tiny_models["CVRP"]
    one = stack_instances([generate("CVRP", 10, 3)])
    counts = call_counts(teacher, student, one)
    assert counts["student_calls"] == 1
    assert counts["teacher_calls"] == solve(teacher, one, "greedy").shape[1]


def test_call_count_violation_detected(tiny_models):
    teacher, student = tiny_models["TSP"]

    class Chatty(type(student)):
        def decode(self, H, query_rows=None):
            super().decode(H, query_rows)
            return super().decode(H, query_rows)

    chatty = Chatty(student.cfg)
    chatty.load_state_dict(student.state_dict())
    with pytest.raises(StateError):
        call_counts(teacher, chatty, stack_instances([generate("TSP", 5, 0)]))


# checkpoints and reports ---------------------------------------------------


def test_model_checkpoint_round_trip(tiny_models, tmp_path):
    teacher, student = tiny_models["CVRP"]
    for name, model in (("t", teacher), ("s", student)):
        digest = save_model(tmp_path / f"{name}.ckpt", model, {"note": 1})
        assert digest == file_sha256(tmp_path / f"{name}.ckpt")
        back = load_model(tmp_path / f"{name}.ckpt")
        assert type(back) is type(model)
        for (ka, a), (kb, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert ka == kb and torch.equal(a, b)


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_validate_report_rejects_bad_layouts():
    good = BenchReport([MethodRecord("m", "greedy", 1.0, 0.5, None, None, None, 3)], {"seed": 0, "config_hash": ""})
    validate_report(good.to_dict())
    d = good.to_dict()
    del d["records"][0]["mean_length"]
    with pytest.raises(ConfigError, match="mean_length"):
        validate_report(d)
    d = good.to_dict()
    d["records"][0]["gap_vs_oracle"] = float("nan")
    with pytest.raises(ConfigError):
        validate_report(d)
    with pytest.raises(ConfigError, match="environment"):
        validate_report({"records": []})


# config --------------------------------------------------------------------

BASE = {"kind": "TSP", "n": 6, "seed": 0, "teacher": {"epochs": 1}, "distill": {"epochs": 1}}


def test_config_defaults_filled():
    cfg = load_config(BASE)
    assert cfg["teacher"]["batch_size"] == 64 and cfg["distill"]["T1"] == 0.1
    assert cfg["bench"]["sizes"] == [6] and cfg["evaluate"]["count"] == 1000


@pytest.mark.parametrize("path,mutate", [
    ("n", lambda c: c.pop("n")),
    ("teacher.epochs", lambda c: c["teacher"].pop("epochs")),
    ("distill", lambda c: c.pop("distill")),
    ("teacher.lr", lambda c: c["teacher"].__setitem__("lr", "fast")),
    ("model.width", lambda c: c.__setitem__("model", {"width": 3})),
    ("evaluate.modes", lambda c: c.__setitem__("evaluate", {"modes": ["topk"]})),
    ("teacher_checkpoint", lambda c: c.__setitem__("pipeline", ["distill"])),
])
def test_config_errors_name_the_field(path, mutate):
    cfg = json.loads(json.dumps(BASE))
    mutate(cfg)
    with pytest.raises(ConfigError) as exc:
        load_config(cfg)
    assert exc.value.path == path
    assert path in str(exc.value)


def test_config_file_errors(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)


def _tiny_run_config():
    return {
        "kind": "TSP", "n": 6, "seed": 3,
        "model": {"d_h": 16, "heads": 2, "layers": 1, "ff_dim": 32},
        "teacher": {"epochs": 1, "batches_per_epoch": 4, "batch_size": 16, "lr": 1e-3, "eval_size": 16},
        "distill": {"epochs": 1, "batches_per_epoch": 4, "batch_size": 16, "lr": 1e-3, "probe_size": 16},
        "evaluate": {"count": 20, "modes": ["greedy", "sample:4"], "repetitions": 5},
        "bench": {"batch": 8, "repetitions": 5},
    }


def test_run_experiment_is_byte_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(_tiny_run_config(), a)
    run_experiment(_tiny_run_config(), b)
    assert (a / "summary.json").read_bytes() == (b / "summary.json").read_bytes()
    assert (a / "teacher.ckpt").read_bytes() == (b / "teacher.ckpt").read_bytes()
    for name in ("evaluate.csv", "evaluate.json", "bench.csv", "latency.csv", "teacher_log.csv", "distill_log.csv"):
        assert (a / name).exists()
    validate_report(json.loads((a / "evaluate.json").read_text()))


def test_run_experiment_from_teacher_checkpoint(tmp_path):
    run_experiment(dict(_tiny_run_config(), pipeline=["train-teacher"]), tmp_path / "t")
    cfg = dict(_tiny_run_config(), pipeline=["distill", "evaluate"],
               teacher_checkpoint=str(tmp_path / "t" / "teacher.ckpt"))
    summary = run_experiment(cfg, tmp_path / "d")
    assert summary["teacher"]["checkpoint_sha256"] == file_sha256(tmp_path / "t" / "teacher.ckpt")
    assert summary["evaluate"]["records"][0]["method"] == "teacher"
