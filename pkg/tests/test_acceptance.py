"""Acceptance checks, one per criterion.

Each check returns ``(passed, detail)``.  Under pytest every check prints a
``PASS``/``FAIL`` line with its runtime and fails the test when the check or
its time budget fails.  Run this file directly to print the lines only.
"""

import contextlib
import csv
import io
import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import central_difference, relative_error  # noqa: E402

from feddgsim import model as M  # noqa: E402
from feddgsim import objectives as O  # noqa: E402
from feddgsim.aggregation import aggregate_fedavg, aggregate_fedgma, project_simplex  # noqa: E402
from feddgsim.cli import main as cli_main  # noqa: E402
from feddgsim.config import ExperimentConfig, SweepSpec  # noqa: E402
from feddgsim.dataspace import DomainDataset  # noqa: E402
from feddgsim.fedsim import (  # noqa: E402
    ClientState,
    RoundPlan,
    ServerState,
    best_selection,
    build_clients,
    build_federation,
    difficulty_report,
    run_experiment,
    run_round,
)
from feddgsim.partition import (  # noqa: E402
    brute_force_optimal_variance,
    check_constraints,
    materialize,
    partition_heterogeneous,
    sample_variance,
)

SLACK = 0.02
SEEDS = range(5)


# --- partition ---------------------------------------------------------------


def example_one():
    plan = partition_heterogeneous([10, 20, 30, 40, 100], 2, 0.0)
    per_client = plan.counts.T.tolist()
    variance = sample_variance(plan.client_totals)
    ok = per_client == [[10, 20, 30, 40, 0], [0, 0, 0, 0, 100]] and variance == 0.0
    return ok, f"per-client counts={per_client} variance={variance}"


def constraint_suite():
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(200):
        D, C = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        sizes = rng.integers(1, 501, D).tolist()
        for lam in (0.0, 0.1, 0.5, 1.0):
            rep = check_constraints(partition_heterogeneous(sizes, C, lam, seed=0), sizes)
            failures += (not rep.c2_holds) + (lam == 0.0 and not rep.c1_holds)
    return failures == 0, f"200 instances x 4 lambdas, {failures} violations"


def lambda_zero_optimality():
    rng = np.random.default_rng(7)
    instances = [([100, 52], 4)]
    for _ in range(300):
        D = int(rng.integers(1, 5))
        C = int(rng.integers(D + 1, 7))
        instances.append((rng.integers(1, 501, D).tolist(), C))
    bad = []
    for sizes, C in instances:
        got = sample_variance(partition_heterogeneous(sizes, C, 0.0).client_totals)
        best = brute_force_optimal_variance(sizes, C)
        if not math.isclose(got, best, rel_tol=1e-12, abs_tol=1e-9):
            bad.append((sizes, C, got, best))
    detail = f"{len(instances) - len(bad)}/{len(instances)} optimal"
    if bad:
        sizes, C, got, best = bad[0]
        detail += f"; e.g. sizes={sizes} C={C}: {got:.4f} vs optimum {best:.4f}"
    return not bad, detail


# --- training engine ---------------------------------------------------------


def one_step_equivalence():
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(20):
        D = int(rng.integers(1, 5))
        sizes = rng.integers(5, 40, D).tolist()
        C = int(rng.integers(1, 12))
        lam = float(rng.choice([0.0, 0.1, 0.5, 1.0, rng.random()]))
        arch = ("linear", "logistic", "mlp")[i % 3]
        K = 1 if arch == "linear" else int(rng.integers(2, 5))
        spec = M.ModelSpec(arch, 3, K, hidden=4)
        doms = np.repeat(np.arange(D), sizes)
        X = rng.normal(size=(doms.size, 3))
        y = rng.normal(size=doms.size) if K == 1 else rng.integers(0, K, doms.size)
        data = DomainDataset(X, y, doms)
        assign = materialize(partition_heterogeneous(sizes, C, lam, seed=i), data)
        clients = build_clients(data, assign, tuple(range(D)), M.make_optimizer("sgd", 0.1), O.PenaltyConfig(), 0)
        theta = M.init_params(spec, i)
        server = ServerState(theta.copy())
        run_round(server, clients, RoundPlan(1, None, i), spec, O.PenaltyConfig("fedavg"))
        central = theta - 0.1 * M.loss_and_grad(spec, theta, X, y)[1]
        worst = max(worst, float(np.max(np.abs(server.params - central))))
    return worst <= 1e-9, f"max distance {worst:.2e} over 20 configs"


def gradient_checks():
    from test_model import SPECS, _labels
    from test_objectives import GRAD_CONFIGS, GRAD_SPECS, _ctx

    worst, checked = 0.0, 0
    rng = np.random.default_rng(3)
    for spec in SPECS:
        for _ in range(20):
            theta, X = rng.normal(size=M.layout_for(spec).size), rng.normal(size=(7, spec.p))
            y = _labels(spec, 7, rng)
            _, g = M.loss_and_grad(spec, theta, X, y)
            fd = central_difference(lambda t: M.loss_and_grad(spec, t, X, y)[0], theta)
            worst, checked = max(worst, relative_error(g, fd)), checked + 1
    groups = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])
    for spec in GRAD_SPECS:
        for cfg in GRAD_CONFIGS:
            if cfg.method == "fedsr" and spec.K == 1:
                continue  # groups by class; regression targets have none
            for _ in range(20):
                theta, theta_g = rng.normal(size=(2, M.layout_for(spec).size))
                X = rng.normal(size=(9, spec.p))
                y = _labels(spec, 9, rng)
                _, g = O.objective_and_grad(spec, theta, X, y, groups, cfg, _ctx(theta_g))
                fd = central_difference(
                    lambda t: O.objective_and_grad(spec, t, X, y, groups, cfg, _ctx(theta_g))[0], theta
                )
                worst, checked = max(worst, relative_error(g, fd)), checked + 1
    return worst <= 1e-4, f"{checked} points, worst relative error {worst:.1e}"


def simplex_suite():
    from test_aggregation import simplex_qp_oracle

    rng = np.random.default_rng(0)
    proj_err = 0.0
    for _ in range(100):
        v = rng.normal(scale=2.0, size=int(rng.integers(1, 6)))
        proj_err = max(proj_err, float(np.max(np.abs(project_simplex(v) - simplex_qp_oracle(v)))))

    def on_simplex(w):
        return w.min() >= 0 and abs(w.sum() - 1) <= 1e-9

    cfg = _engine_config(method={"method": "afl", "beta-lr": 0.05})
    fed = build_federation(cfg)
    beta_ok = True
    for _ in range(100):
        run_round(fed.server, fed.clients, fed.round_plan, fed.spec, cfg.method)
        beta_ok &= on_simplex(fed.server.beta)
    cfg = _engine_config(method={"method": "groupdro", "group-lr": 0.5})
    fed = build_federation(cfg)
    q_ok = True
    for _ in range(100):
        run_round(fed.server, fed.clients, fed.round_plan, fed.spec, cfg.method)
        q_ok &= all(on_simplex(c.dro.q) for c in fed.clients)
    ok = proj_err <= 1e-6 and beta_ok and q_ok
    return ok, f"projection error {proj_err:.1e}, AFL beta ok={beta_ok}, GroupDRO q ok={q_ok}"


def reduction_identities():
    rng = np.random.default_rng(5)
    theta = rng.normal(size=6)
    deltas = [rng.normal(size=6) for _ in range(4)]
    w = [2, 3, 1, 4]
    gma = aggregate_fedgma(theta, deltas, w, 0.0)
    avg = aggregate_fedavg([theta + d for d in deltas], w)
    gma_ok = np.max(np.abs(gma - avg)) <= 1e-12

    spec = M.ModelSpec("mlp", 3, 2, hidden=4)
    init = M.init_params(spec, 0)

    def clients(control):
        r = np.random.default_rng(1)
        out = []
        for c in range(3):
            X, y = r.normal(size=(10, 3)), r.integers(0, 2, 10)
            extra = {"control": np.zeros(init.size)} if control else {}
            out.append(ClientState(c, X, y, np.zeros(10, int), M.make_optimizer("sgd", 0.1), **extra))
        return out

    s1 = ServerState(init.copy(), control=np.zeros(init.size))
    s2 = ServerState(init.copy())
    run_round(s1, clients(True), RoundPlan(2, 4, 0), spec, O.PenaltyConfig("scaffold"))
    run_round(s2, clients(False), RoundPlan(2, 4, 0), spec, O.PenaltyConfig("fedavg"))
    scaffold_ok = bool(np.array_equal(s1.params, s2.params))

    X, y, g = rng.normal(size=(12, 3)), rng.integers(0, 2, 12), np.full(12, 1)
    theta = M.init_params(spec, 2)
    ref = O.objective_and_grad(spec, theta, X, y, g, O.PenaltyConfig("erm"))
    collapsed = []
    for method in ("irm", "coral", "mmd", "groupdro"):
        ctx = O.ObjectiveContext(single_domain=True, dro=O.DroWeights.uniform(2, 0.5))
        got = O.objective_and_grad(spec, theta, X, y, g, O.PenaltyConfig(method, penalty_weight=3.0), ctx)
        if got[0] == ref[0] and np.array_equal(got[1], ref[1]):
            collapsed.append(method)
    ok = gma_ok and scaffold_ok and len(collapsed) == 4
    return ok, f"fedgma={gma_ok} scaffold={scaffold_ok} collapse to ERM: {','.join(collapsed)}"


# --- trends ------------------------------------------------------------------


def _engine_config(**over):
    base = {
        "data": {"synthetic": {"kind": "mean-shift", "magnitudes": 1.0, "domains": 5, "classes": 3, "n_per_domain": 60, "features": 4}},
        "split": {"train_domains": [0, 1, 2], "heldout_validation_domains": [3], "test_domains": [4]},
        "partition": {"lambda": 0.5, "clients": 4},
        "model": {"arch": "mlp", "hidden": 6},
        "optimizer": {"kind": "adam", "lr": 0.01},
        "rounds": 0,
        "batch_size": 16,
    }
    base.update(over)
    return ExperimentConfig.from_dict(base)


def trend_config(method="fedavg", lam=0.1, clients=20, seed=0):
    """Four mean-shifted training domains, one held-out validation domain
    and one test domain; a short, budget-limited training schedule."""
    return ExperimentConfig.from_dict(
        {
            "data": {
                "synthetic": {
                    "kind": "mean-shift",
                    "magnitudes": 1.0,
                    "domains": 6,
                    "classes": 5,
                    "n_per_domain": 300,
                    "features": 10,
                    "class_separation": 2.0,
                }
            },
            "split": {"train_domains": [0, 1, 2, 3], "heldout_validation_domains": [4], "test_domains": [5]},
            "partition": {"lambda": lam, "clients": clients},
            "model": {"arch": "mlp", "hidden": 16},
            "method": method,
            "optimizer": {"kind": "adam", "lr": 0.005},
            "rounds": 10,
            "local_epochs": 1,
            "batch_size": 32,
            "seed": seed,
        }
    )


def selected_dg_accuracy(method, lam, clients):
    """Seed-averaged DG-test accuracy of the round chosen on the held-out domain."""
    vals = []
    for s in SEEDS:
        cfg = trend_config(method, lam, clients, s)
        vals.append(best_selection([run_experiment(cfg)], cfg)["dg_test"])
    return float(np.mean(vals))


def non_increasing(values):
    return all(b <= a + SLACK for a, b in zip(values, values[1:]))


def lambda_trend():
    acc = [selected_dg_accuracy("fedavg", lam, 20) for lam in (0.0, 0.1, 1.0)]
    ok = acc[0] <= acc[1] + SLACK and acc[1] <= acc[2] + SLACK
    return ok, "lambda 0/0.1/1: " + ", ".join(f"{a:.3f}" for a in acc)


def client_trend():
    parts, ok = [], True
    for method in ("fedavg", "fedsr"):
        acc = [selected_dg_accuracy(method, 0.1, C) for C in (1, 10, 50)]
        ok &= non_increasing(acc)
        parts.append(f"{method} C=1/10/50: " + ", ".join(f"{a:.3f}" for a in acc))
    return ok, "; ".join(parts)


def communication_harness():
    base = trend_config(clients=10).to_dict()
    base.update(rounds=50, local_epochs=1, batch_size=64)
    base["data"]["synthetic"]["n_per_domain"] = 100
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "config.json").write_text(json.dumps(base))
        (tmp / "sweep.json").write_text(json.dumps(SweepSpec("communication", (5, 10, 50)).to_dict()))
        with contextlib.redirect_stdout(io.StringIO()):
            code = cli_main(
                ["sweep", "--config", str(tmp / "config.json"), "--sweep", str(tmp / "sweep.json"), "--out", str(tmp / "out")]
            )
        if code != 0:
            return False, f"sweep exited {code}"
        with open(tmp / "out" / "summary.csv", newline="") as fh:
            summary = list(csv.DictReader(fh))
        epochs = [int(r["local_epochs"]) for r in summary]
        curves = {}
        for r in summary:
            with open(tmp / "out" / f"communication_{r['value']}" / "metrics.csv", newline="") as fh:
                rows = list(csv.DictReader(fh))
            curves[int(r["value"])] = [
                float(x["value"]) for x in rows if x["split"] == "dg_test" and x["metric"] == "accuracy"
            ]
    shape_ok = all(len(curves[R]) == R + 1 for R in curves)
    finals = {R: round(c[-1], 3) for R, c in curves.items()}
    return epochs == [10, 5, 1] and shape_ok, f"E={epochs}; final DG-test accuracy by R: {finals}"


# --- metrics and determinism -------------------------------------------------


def _difficulty_config(shift, seed, clients=1):
    return ExperimentConfig.from_dict(
        {
            "data": {
                "synthetic": {
                    "kind": "mean-shift",
                    "magnitudes": shift,
                    "domains": 5,
                    "classes": 5,
                    "n_per_domain": 500,
                    "features": 10,
                    "class_separation": 2.0,
                }
            },
            "split": {"train_domains": [0, 1, 2, 3], "test_domains": [4]},
            "partition": {"lambda": 1.0, "clients": clients},
            "model": {"arch": "mlp", "hidden": 16},
            "method": "erm",
            "optimizer": {"kind": "adam", "lr": 0.01},
            "rounds": 5,
            "local_epochs": 2,
            "batch_size": 32,
            "seed": seed,
        }
    )


def difficulty_metrics():
    rfl = difficulty_report(_difficulty_config(1.0, 0), lambdas=(1.0, 0.0)).r_fl
    rfl_ok = all(v == 1.0 for v in rfl.values())
    no_shift = [difficulty_report(_difficulty_config(0.0, s), lambdas=()).r_dg for s in SEEDS]
    mean = float(np.mean(no_shift))
    golden = difficulty_report(_difficulty_config(3.0, 0), lambdas=()).r_dg
    ok = rfl_ok and abs(mean - 1.0) <= 0.05 and golden < 0.9
    return ok, f"R_FL(C=1)={sorted(rfl.values())}; R_DG no shift mean {mean:.3f}; shifted golden {golden:.3f}"


def determinism():
    cfg = trend_config(method="scaffold", clients=5).to_dict()
    cfg["runs"] = 2
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "c.json").write_text(json.dumps(cfg))
        for name, jobs in (("a", "1"), ("b", "4")):
            with contextlib.redirect_stdout(io.StringIO()):
                cli_main(["run", "--config", str(tmp / "c.json"), "--out", str(tmp / name), "--jobs", jobs])
        a, b = (tmp / "a" / "metrics.csv").read_bytes(), (tmp / "b" / "metrics.csv").read_bytes()
    return a == b and len(a) > 0, f"{len(a)} bytes, identical={a == b}"


CRITERIA = [
    ("partition example one", 1, example_one),
    ("constraint suite", 10, constraint_suite),
    ("lambda=0 variance is optimal", 30, lambda_zero_optimality),
    ("one-step FedAvg equals centralized", 10, one_step_equivalence),
    ("gradient checks", 30, gradient_checks),
    ("simplex suite", 10, simplex_suite),
    ("reduction identities", 10, reduction_identities),
    ("lambda trend", 300, lambda_trend),
    ("client-count trend", 300, client_trend),
    ("communication harness", 300, communication_harness),
    ("difficulty metrics", 180, difficulty_metrics),
    ("determinism", 60, determinism),
]


def _run(name, budget, fn):
    start = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - start
    in_time = elapsed < budget
    status = "PASS" if ok and in_time else "FAIL"
    line = f"{status}  {name}: {detail} [{elapsed:.1f}s / {budget}s]"
    return ok, in_time, line


@pytest.mark.parametrize("name, budget, fn", CRITERIA, ids=[c[0].replace(" ", "-") for c in CRITERIA])
def test_criterion(name, budget, fn, capsys):
    ok, in_time, line = _run(name, budget, fn)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line
    assert in_time, line


if __name__ == "__main__":
    results = [_run(*c) for c in CRITERIA]
    for _, _, line in results:
        print(line)
    sys.exit(0 if all(ok and t for ok, t, _ in results) else 1)
