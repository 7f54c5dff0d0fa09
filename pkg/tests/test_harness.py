import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddelavg.errors import ConfigError, ParseError, UnsupportedMetricError
from feddelavg.harness import (ExperimentSpec, PartitionSpec, accuracy, alpha_sweep, apply_overrides,
                               delay_comparison, first_hit, generate_synthetic, load_idx, load_spec_file,
                               partition, prepare, run_experiment, suite_cases, write_idx)
from feddelavg.ml_core import (CrossEntropy, Dataset, FederatedProblem, SquaredError, compute_reference_optimum,
                               estimate_constants)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def small_spec(**extra):
    d = {"sim": {"N": 3, "tau": 4, "delta": 2, "alpha": 0.5, "eta": 0.05, "K": 6, "seed": 1},
         "partition": {"skew": 1.0},
         "data": {"source": "synthetic", "classes": 3, "dim": 5, "separation": 3.0, "count": 150,
                  "test_count": 60, "seed": 2}}
    d.update(extra)
    return ExperimentSpec.from_dict(d)


# -- synthetic data ------------------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = generate_synthetic(4, 6, 2.0, 103, seed=5)
    b = generate_synthetic(4, 6, 2.0, 103, seed=5)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    counts = np.bincount(a.y, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert not np.array_equal(a.X, generate_synthetic(4, 6, 2.0, 103, seed=6).X)


def test_synthetic_mean_separation():
    ds = generate_synthetic(3, 8, 5.0, 30000, seed=1)
    means = np.array([ds.X[ds.y == c].mean(axis=0) for c in range(3)])
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.linalg.norm(means[i] - means[j]) == pytest.approx(5.0, abs=0.1)


def _train_accuracy(train, test, steps=3000):
    problem = FederatedProblem(CrossEntropy(), (train,))
    eta = 1.0 / problem.smoothness_upper_bound()
    ref = compute_reference_optimum(problem, problem.init_params(), eta, steps)
    return accuracy(problem.loss, ref.params, test)


def test_zero_separation_is_chance_level():
    train = generate_synthetic(4, 2, 0.0, 4000, seed=0)
    test = generate_synthetic(4, 2, 0.0, 4000, seed=1)
    assert _train_accuracy(train, test, 500) == pytest.approx(0.25, abs=0.05)


def test_large_separation_is_linearly_separable():
    train = generate_synthetic(3, 5, 8.0, 600, seed=0)
    assert _train_accuracy(train, train) >= 0.99


@pytest.mark.parametrize("args", [(1, 4, 1.0, 10), (3, 1, 1.0, 10), (3, 4, 1.0, 2), (3, 4, -1.0, 10)])
def test_synthetic_rejects_bad_dimensions(args):
    with pytest.raises(ConfigError):
        generate_synthetic(*args)


# -- partitioning --------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(n=st.integers(10, 200), N=st.integers(1, 9), skew=st.floats(0.0, 1.0), seed=st.integers(0, 10))
def test_partition_conserves_points(n, N, skew, seed):
    rng = np.random.default_rng(seed)
    X = np.arange(n, dtype=float)[:, None] * np.ones((1, 2))
    ds = Dataset(X, rng.integers(0, 4, n), 4)
    parts, rho = partition(ds, PartitionSpec(N, skew, seed))
    got = np.sort(np.concatenate([p.X[:, 0] for p in parts]))
    assert np.array_equal(got, np.arange(n, dtype=float))
    assert [len(p) for p in parts] == PartitionSpec(N).resolve_sizes(n)
    assert rho.sum() == pytest.approx(1.0, abs=1e-15)


def test_partition_single_device_and_equal_weights():
    ds = generate_synthetic(3, 4, 1.0, 60, seed=0)
    parts, rho = partition(ds, PartitionSpec(1, 0.0, 3))
    assert len(parts) == 1 and rho.tolist() == [1.0] and len(parts[0]) == 60
    _, rho = partition(ds, PartitionSpec(4, 0.5, 3))
    assert rho.tolist() == [0.25] * 4


def test_full_skew_gives_nearly_pure_devices():
    ds = generate_synthetic(2, 4, 1.0, 200, seed=0)
    parts, _ = partition(ds, PartitionSpec(2, 1.0, 0))
    assert [set(p.y.tolist()) for p in parts] == [{0}, {1}]


def test_sizes_validation():
    ds = generate_synthetic(2, 4, 1.0, 20, seed=0)
    parts, rho = partition(ds, PartitionSpec(2, 0.0, 0, (5, 15)))
    assert [len(p) for p in parts] == [5, 15] and rho.tolist() == [0.25, 0.75]
    for sizes in ((5, 5), (20, 0), (5, 5, 10)):
        with pytest.raises(ConfigError):
            partition(ds, PartitionSpec(2, 0.0, 0, sizes))
    with pytest.raises(ConfigError):
        PartitionSpec(2, 1.5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_skew_increases_dissimilarity(seed):
    ds = generate_synthetic(2, 4, 2.0, 400, seed=seed)
    probes = np.random.default_rng(seed).standard_normal((40, 2, 4))
    deltas = []
    for skew in (0.0, 1.0):
        parts, rho = partition(ds, PartitionSpec(2, skew, seed))
        c = estimate_constants(FederatedProblem(CrossEntropy(), tuple(parts), rho), probes, 0.1, seed=seed)
        deltas.append(c.delta)
    assert deltas[1] > deltas[0]


# -- accuracy ------------------------------------------------------------------------

def test_accuracy_examples():
    X = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]])
    toy = Dataset(X, np.array([0, 0, 1, 1]), 2)
    assert accuracy(CrossEntropy(), np.eye(2), toy) == 1.0
    assert accuracy(CrossEntropy(), np.zeros((2, 2)), toy) == 0.5
    assert accuracy(CrossEntropy(), -np.eye(2), toy) == 0.0
    with pytest.raises(UnsupportedMetricError):
        accuracy(SquaredError(), np.zeros(2), Dataset(X, np.zeros(4)))


def test_first_hit():
    from feddelavg.harness import MetricsRecord
    recs = [MetricsRecord(k, a, 0.0) for k, a in enumerate([0.1, 0.5, 0.79, 0.8, 0.7])]
    assert first_hit(recs, 0.8) == 3
    assert first_hit(recs, 0.9) is None
    assert first_hit(recs, 0.0) == 0


# -- IDX files -----------------------------------------------------------------------

def _fixture(tmp_path):
    # two 2x2 images per class, pixels chosen to show the row-major flattening
    pixels = bytes([0, 51, 102, 255, 255, 0, 0, 0, 1, 2, 3, 4, 10, 20, 30, 40])
    images = struct.pack(">IIII", 0x00000803, 4, 2, 2) + pixels
    labels = struct.pack(">II", 0x00000801, 4) + bytes([3, 1, 4, 1])
    (tmp_path / "img").write_bytes(images)
    (tmp_path / "lab").write_bytes(labels)
    return tmp_path / "img", tmp_path / "lab", images, labels


def test_idx_fixture(tmp_path):
    img, lab, _, _ = _fixture(tmp_path)
    ds = load_idx(img, lab)
    assert len(ds) == 4 and ds.dim == 4
    assert ds.y.tolist() == [3, 1, 4, 1]
    assert ds.X[0].tolist() == [0.0, 0.2, 0.4, 1.0]
    assert ds.X[3].tolist() == pytest.approx([10 / 255, 20 / 255, 30 / 255, 40 / 255], rel=1e-15)
    sub = load_idx(img, lab, subset=2, seed=4)
    assert len(sub) == 2 and set(map(tuple, sub.X)) <= set(map(tuple, ds.X))


def test_idx_writer_round_trip(tmp_path):
    img, lab, images, labels = _fixture(tmp_path)
    arr = np.frombuffer(images[16:], dtype=np.uint8).reshape(4, 2, 2)
    assert write_idx(tmp_path / "img2", arr).read_bytes() == images
    assert write_idx(tmp_path / "lab2", np.array([3, 1, 4, 1])).read_bytes() == labels


def test_idx_errors_name_offsets(tmp_path):
    img, lab, images, labels = _fixture(tmp_path)
    bad = tmp_path / "bad"
    bad.write_bytes(struct.pack(">I", 0x00000801) + images[4:])
    with pytest.raises(ParseError) as exc:
        load_idx(bad, lab)
    assert exc.value.offset == 0 and "magic" in str(exc.value)
    bad.write_bytes(images[:-3])
    with pytest.raises(ParseError) as exc:
        load_idx(bad, lab)
    assert exc.value.offset == len(images) - 3 and "truncated" in str(exc.value)
    bad.write_bytes(images + b"\x00")
    with pytest.raises(ParseError) as exc:
        load_idx(bad, lab)
    assert exc.value.offset == len(images)
    bad.write_bytes(struct.pack(">II", 0x00000801, 3) + bytes([3, 1, 4]))
    with pytest.raises(ParseError, match="4 images but 3 labels"):
        load_idx(img, bad)
    with pytest.raises(ConfigError):
        load_idx(img, lab, subset=5)


# -- specs and overrides -------------------------------------------------------------

def test_spec_round_trip_and_unknown_keys():
    spec = small_spec(alpha_grid=[0.5, 1.0])
    again = ExperimentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.to_dict() == spec.to_dict()
    with pytest.raises(ConfigError) as exc:
        ExperimentSpec.from_dict({**spec.to_dict(), "bogus": 1})
    assert "bogus" in str(exc.value)
    d = spec.to_dict()
    d["sim"]["K"] = "ten"
    with pytest.raises(ConfigError) as exc:
        ExperimentSpec.from_dict(d)
    assert exc.value.path == "sim.K"


def test_apply_overrides():
    d = {"sim": {"alpha": 0.2, "delta": 9}}
    out = apply_overrides(d, ["sim.alpha=1.0", "sim.delta=0", "data.source=synthetic", "probes.max_points=null"])
    assert out == {"sim": {"alpha": 1.0, "delta": 0}, "data": {"source": "synthetic"},
                   "probes": {"max_points": None}}
    assert d["sim"]["alpha"] == 0.2
    for bad in ("sim.alpha", "=3", "sim.alpha.x=1"):
        with pytest.raises(ConfigError):
            apply_overrides(d, [bad])


def test_load_spec_file_errors(tmp_path):
    with pytest.raises(ConfigError) as exc:
        load_spec_file(tmp_path / "missing.json")
    assert exc.value.path == "--config"
    p = tmp_path / "bad.json"
    p.write_text('{"sim": ')
    with pytest.raises(ParseError):
        load_spec_file(p)


# -- runs and sweeps -----------------------------------------------------------------

def test_metrics_are_deterministic():
    a = run_experiment(small_spec())
    b = run_experiment(small_spec())
    strip = lambda ms: [(m.k, m.test_accuracy, m.global_loss) for m in ms]  # noqa: E731
    assert strip(a.metrics) == strip(b.metrics)
    assert len(a.metrics) == 7 and all(0.0 <= m.test_accuracy <= 1.0 for m in a.metrics)
    assert a.config_hash == b.config_hash and a.partition_hash == b.partition_hash


def test_single_point_alpha_sweep_equals_single_run():
    spec = small_spec(alpha_grid=[0.5])
    sweep = alpha_sweep(spec)
    single = run_experiment(spec)
    (run,) = sweep.runs
    assert np.array_equal(run.result.trajectory.history, single.trajectory.history)
    assert run.result.config_hash == single.config_hash


def test_alpha_sweep_isolation_and_rows():
    spec = small_spec(alpha_grid=[0.2, 0.6, 1.0], target_accuracy=0.5)
    sweep = alpha_sweep(spec)
    assert [r[1] for r in sweep.rows] == [0.2, 0.6, 1.0]
    assert len({r.result.partition_hash for r in sweep.runs}) == 1
    assert all(np.array_equal(r.result.trajectory.globals_[0], sweep.runs[0].result.trajectory.globals_[0])
               for r in sweep.runs)
    parallel = alpha_sweep(spec, jobs=2)
    assert parallel.rows == sweep.rows


def test_sweep_records_failures_with_alpha():
    spec = small_spec(alpha_grid=[0.5, 1.0], data={"source": "regression", "dim": 3, "count": 90, "test_count": 0},
                      loss="squared_error").with_sim(eta=5.0, K=100)
    sweep = alpha_sweep(spec)
    assert sweep.failed
    for run, row in zip(sweep.runs, sweep.rows):
        if not run.ok:
            assert f"alpha={run.alpha}" in row[5] and "NumericalError" in row[5] and row[3] is None


def test_delay_comparison_layout():
    spec = small_spec(delta_grid=[0, 4], tuned_alpha=0.3, target_fraction=0.9)
    res = delay_comparison(spec)
    assert [r[0] for r in res.rows] == ["benchmark", "tuned delta=0", "fedavg delta=0", "tuned delta=4",
                                        "fedavg delta=4"]
    assert res.rows[0][5] == 0.0
    with pytest.raises(ConfigError):
        delay_comparison(small_spec(delta_grid=[], tuned_alpha=0.3))
    with pytest.raises(ConfigError):
        delay_comparison(small_spec(delta_grid=[9], tuned_alpha=0.3))


def test_delayed_setup_improves_accuracy():
    spec = ExperimentSpec.from_dict(load_spec_file(CONFIGS / "delayed_setup.json"))
    res = run_experiment(spec, prepare(spec))
    assert res.metrics[-1].test_accuracy >= res.metrics[0].test_accuracy
    assert res.metrics[-1].test_accuracy > 0.9


def test_suite_cases_cover_axes():
    cases = suite_cases(20, 0)
    assert {c.N for c in cases} == {2, 5, 10}
    assert {c.tau for c in cases} == {5, 10}
    assert {c.alpha for c in cases} == {0.2, 0.5, 1.0}
    assert {c.loss for c in cases} == {"cross_entropy", "squared_error"}
    assert any(c.delta == 0 for c in cases) and any(c.delta == c.tau for c in cases)
    assert all(0 <= c.delta <= c.tau for c in cases)
    assert suite_cases(20, 0) == cases
