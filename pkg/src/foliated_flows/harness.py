"""Experiment orchestration: dispatch, deterministic replica fan-out, artifacts.

``run`` executes one declarative config and returns a RunReport whose numeric
payload is reproducible to the bit for a fixed seed, serial or threaded
(replica results are collected by index and reduced in a fixed order).
Wall-clock time lives in its own field so reports stay comparable.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .averaging import (
    AveragedField,
    averaging_error,
    default_rate_bound,
    fit_rate_exponent,
    measured_lipschitz,
    solve_averaged_ode,
)
from .config import ExperimentConfig
from .drivers import StreamKey, sample_jump_driver
from .flows import (
    CYLINDER_JUMP_RATE,
    Trajectory,
    check_leaf_invariance,
    cylinder_trajectory,
    evolve_coalescing_circle,
    max_defect_over_series,
    n_point_motion,
    torus_trajectory,
)
from .geometry import CylPoint, TorusPoint, leaf_defect, make_model
from .kernels import (
    build_cylinder_kernel,
    check_compatibility,
    check_diagonal_preserving,
    check_foliated,
    defect_record,
    LeafGrid,
    product_kernel_flow,
    write_kernel_json,
)
from .parallel import map_indexed, thread_count_from_env

REPORT_SCHEMA = "foliated-flows/run-report-v1"


def _fmt(x: float) -> str:
    """Round-trip-safe CSV number format (17 significant digits)."""
    return format(float(x), ".17g")


@dataclass
class RunReport:
    experiment: str
    config: dict
    results: dict
    replicas: int
    wall_clock_seconds: float
    schema: str = REPORT_SCHEMA

    def payload(self) -> dict:
        """Everything except timing; this is the determinism contract."""
        return {
            "schema": self.schema,
            "experiment": self.experiment,
            "config": self.config,
            "replicas": self.replicas,
            "results": self.results,
        }

    def to_json(self) -> str:
        body = self.payload()
        body["wall_clock_seconds"] = self.wall_clock_seconds
        return json.dumps(body, sort_keys=True, indent=1)


def _simulate_starts(cfg: ExperimentConfig):
    if cfg.model.name == "torus-winding":
        raw = cfg.simulate.starts or ({"a": 0.2, "b": 0.7},)
        return [TorusPoint.from_coords(s.get("a", 0.0), s.get("b", 0.0)) for s in raw]
    raw = cfg.simulate.starts or ({"theta": 0.0, "r": 1.0, "z": 0.0},)
    return [
        CylPoint.from_angle(s.get("theta", 0.0), s.get("r", 1.0), s.get("z", 0.0)) for s in raw
    ]


def _write_trajectory_csv(path: Path, traj_rows: list[tuple], columns: tuple[str, ...]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(("time", "point_id") + columns + ("class_id", "leaf_defect")) + "\n")
        for row in traj_rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _run_simulate(cfg: ExperimentConfig, threads: int, out: Path | None) -> dict:
    model_params = {}
    if cfg.model.name == "torus-winding" and cfg.model.v is not None:
        model_params["v"] = cfg.model.v
    if cfg.model.name == "coalescing-circle":
        model_params["sigma"] = cfg.model.sigma
    model = make_model(cfg.model.name, **model_params)
    starts = _simulate_starts(cfg)
    sim = cfg.simulate
    base = StreamKey(cfg.seed)

    def one(i: int):
        key = base.replica(i)
        if cfg.model.name == "coalescing-circle":
            series = evolve_coalescing_circle(starts, key, sim.horizon, sim.dt, sigma=cfg.model.sigma)
            return series, max_defect_over_series(series, starts)
        if sim.eps > 0.0 and cfg.model.name == "rotation-jump-cylinder":
            driver = sample_jump_driver(key, sim.horizon, sim.dt, rate=CYLINDER_JUMP_RATE)
            trajs = [
                cylinder_trajectory(p, driver, perturbation=cfg.perturbation, eps=sim.eps)
                for p in starts
            ]
            worst = max(check_leaf_invariance(tr) for tr in trajs)
            return trajs, worst
        series = n_point_motion(model, starts, key, sim.horizon, sim.dt)
        return series, max_defect_over_series(series, starts)

    rows = map_indexed(one, sim.replicas, threads)
    defects = np.array([r[1] for r in rows])

    if out is not None:
        first = rows[0][0]
        csv_rows = []
        if isinstance(first, list):  # perturbed per-point trajectories
            columns = first[0].columns
            for pid, tr in enumerate(first):
                for k, tk in enumerate(tr.times):
                    d = leaf_defect(tr.model, tr.start, tr.point_at(k))
                    csv_rows.append((float(tk), pid) + tuple(tr.states[k]) + (pid, d))
        else:
            columns = first.columns
            for pid in range(first.states.shape[1]):
                tr = Trajectory(
                    model=first.model,
                    start=starts[pid],
                    times=first.times,
                    states=first.states[:, pid, :],
                    columns=first.columns,
                )
                for k, tk in enumerate(first.times):
                    d = leaf_defect(first.model, starts[pid], tr.point_at(k))
                    csv_rows.append(
                        (float(tk), pid)
                        + tuple(first.states[k, pid])
                        + (int(first.class_ids[k, pid]), d)
                    )
        _write_trajectory_csv(out / "trajectory.csv", csv_rows, columns)

    return {
        "max_leaf_defect": float(np.max(defects)),
        "per_replica_defects": [float(d) for d in defects],
        "horizon": sim.horizon,
        "dt": sim.dt,
        "eps": sim.eps,
    }


def _run_kernel_check(cfg: ExperimentConfig, out: Path | None) -> dict:
    kc = cfg.kernel_check
    grid = LeafGrid(m=kc.m, leaves=kc.leaves)
    records = []
    kernels = {}
    for t in kc.times:
        k1 = build_cylinder_kernel(grid, t)
        kernels[t] = k1
        records.append(defect_record("row-sums", t, float(np.max(np.abs(k1.matrix.sum(axis=1) - 1.0)))))
        records.append(defect_record("foliated-off-leaf-mass", t, check_foliated(k1)))
        k2 = product_kernel_flow(k1)
        records.append(defect_record("compatibility", t, check_compatibility(k2, k1)))
        records.append(defect_record("diagonal-preserving", t, check_diagonal_preserving(k2, k1)))
        if out is not None:
            write_kernel_json(k1, out / f"kernel_t{t:.6f}.json")
    for i, s in enumerate(kc.times):
        for t in kc.times[i:]:
            total = s + t
            step = 2.0 * math.pi / kc.m
            if abs(total / step - round(total / step)) > 1e-9:
                continue
            composed = kernels[s].compose(kernels[t])
            direct = build_cylinder_kernel(grid, total)
            records.append(
                defect_record(
                    "semigroup-composition",
                    total,
                    float(np.max(np.abs(composed.matrix - direct.matrix))),
                )
            )
    if out is not None:
        with open(out / "kernel_defects.json", "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=1)
    return {
        "m": kc.m,
        "leaves": [list(l) for l in kc.leaves],
        "records": records,
        "max_defect": max(r["defect"] for r in records),
    }


def _run_averaging(cfg: ExperimentConfig, threads: int, fit: bool) -> dict:
    av = cfg.averaging
    base = StreamKey(cfg.seed)
    start = CylPoint.from_angle(*av.start)
    rb = default_rate_bound(cfg.perturbation, cfg.region, c1=cfg.bounds.c1, c2=cfg.bounds.c2)
    model = make_model("rotation-jump-cylinder")

    per_eps = []
    decomp_rows = []
    n_violations = 0
    for eps in av.eps_grid:
        res = averaging_error(
            model,
            cfg.perturbation,
            eps,
            av.t,
            av.p,
            av.replicas,
            base,
            measure=av.measure,
            dt=av.dt,
            ode_step=av.ode_step,
            region=cfg.region,
            f_choice=av.f_choice,
            start=start,
            rate_bound=rb,
            threads=threads,
            keep_decompositions=True,
        )
        n_violations += len(res.violations)
        per_eps.append(
            {
                "eps": eps,
                "error": res.estimate,
                "std_error": res.std_error,
                "bound_G": res.bound_g,
                "n_exited": res.n_exited,
                "max_triangle_slack": res.max_triangle_slack,
                "max_a4_ratio": res.max_a4_ratio,
                "v_final": [float(x) for x in res.v_final],
            }
        )
        if res.decomp_rows is not None and res.decomp_rows.size:
            eps_col = np.full((res.decomp_rows.shape[0], 1), eps)
            decomp_rows.append(np.hstack((eps_col, res.decomp_rows)))

    results: dict = {
        "t": av.t,
        "p": av.p,
        "f_choice": av.f_choice,
        "eps_grid": list(av.eps_grid),
        "errors": [row["error"] for row in per_eps],
        "std_errors": [row["std_error"] for row in per_eps],
        "G_values": [row["bound_G"] for row in per_eps],
        "per_eps": per_eps,
        "pathwise_bound_violations": n_violations,
        "decompositions": [
            [float(v) for v in row] for block in decomp_rows for row in block
        ],
    }
    if fit:
        pairs = [(row["eps"], row["error"]) for row in per_eps]
        try:
            fit_res = fit_rate_exponent(pairs)
            results["slope"] = fit_res.slope
            results["intercept"] = fit_res.intercept
            results["r_squared"] = fit_res.r_squared
            results["flags"] = [fit_res.flag] + (["zero-errors"] if fit_res.n_zero else [])
        except ValueError as exc:
            results["slope"] = None
            results["flags"] = [f"fit-failed: {exc}"]
        ode = solve_averaged_ode(
            cfg.perturbation,
            av.measure,
            np.array([start.r, start.z]),
            av.t,
            av.ode_step,
            cfg.region,
            base,
        )
        leaves = [tuple(v) for v in ode.values[:: max(1, len(ode.values) // 16)]]
        results["averaged_field_lipschitz_measured"] = measured_lipschitz(
            AveragedField(cfg.perturbation, av.measure, base), leaves
        )
        results["gronwall_C"] = rb.gronwall_c
    return results


def _run_coalesce(cfg: ExperimentConfig, threads: int) -> dict:
    co = cfg.coalesce
    base = StreamKey(cfg.seed)
    starts = [CylPoint.from_angle(*s) for s in co.starts]
    n = len(starts)
    pairs = [(i, j) for j in range(n) for i in range(j)]
    same_leaf = {pq: starts[pq[0]].leaf == starts[pq[1]].leaf for pq in pairs}

    def one(i: int):
        series = evolve_coalescing_circle(
            starts, base.replica(i), co.horizon, co.dt, sigma=cfg.model.sigma
        )
        return {pq: series.hit_times.get(pq) for pq in pairs}

    rows = map_indexed(one, co.replicas, threads)

    hit_matrix = {pq: np.array([np.inf if r[pq] is None else r[pq] for r in rows]) for pq in pairs}
    curve_times = np.linspace(0.0, co.horizon, co.curve_points)
    same_pairs = [pq for pq in pairs if same_leaf[pq]]
    if same_pairs:
        hits = np.stack([hit_matrix[pq] for pq in same_pairs])
        fraction = [float(np.mean(hits <= tt)) for tt in curve_times]
    else:
        fraction = [0.0 for _ in curve_times]

    per_pair = {}
    cross_total = 0
    for pq in pairs:
        n_hit = int(np.sum(np.isfinite(hit_matrix[pq])))
        per_pair[f"{pq[0]}-{pq[1]}"] = {
            "same_leaf": same_leaf[pq],
            "coalesced": n_hit,
            "fraction": n_hit / co.replicas,
        }
        if not same_leaf[pq]:
            cross_total += n_hit
    return {
        "horizon": co.horizon,
        "dt": co.dt,
        "sigma": cfg.model.sigma,
        "pairs": per_pair,
        "cross_leaf_coalescences": cross_total,
        "curve_times": [float(t) for t in curve_times],
        "fraction_coalesced": fraction,
    }


def run(cfg: ExperimentConfig, threads: int | None = None, write_artifacts: bool = True) -> RunReport:
    """Execute one experiment config; returns the in-memory report.

    Artifacts (report.json, CSV series, kernel dumps) are written under the
    config's output directory unless write_artifacts is False.
    """
    if threads is None:
        threads = thread_count_from_env()
    out: Path | None = None
    if write_artifacts:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    kind = cfg.experiment
    if kind == "simulate":
        results = _run_simulate(cfg, threads, out)
        replicas = cfg.simulate.replicas
    elif kind == "kernel-check":
        results = _run_kernel_check(cfg, out)
        replicas = 0
    elif kind == "average":
        results = _run_averaging(cfg, threads, fit=False)
        replicas = cfg.averaging.replicas
    elif kind == "rates":
        results = _run_averaging(cfg, threads, fit=True)
        replicas = cfg.averaging.replicas
    elif kind == "coalesce":
        results = _run_coalesce(cfg, threads)
        replicas = cfg.coalesce.replicas
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    elapsed = time.perf_counter() - t0

    report = RunReport(
        experiment=kind,
        config=cfg.to_dict(),
        results=results,
        replicas=replicas,
        wall_clock_seconds=elapsed,
    )
    if out is not None:
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        if kind == "rates":
            write_rate_report(report, out / "rate_report.json")
        emit_plotdata(report, out)
    return report


def write_rate_report(report: RunReport, path) -> None:
    """Rate report with the fixed wire schema consumed by downstream tooling."""
    res = report.results
    body = {
        "model": report.config["model"]["name"],
        "K": report.config["perturbation"],
        "p": res["p"],
        "eps_grid": res["eps_grid"],
        "errors": res["errors"],
        "std_errors": res["std_errors"],
        "G_values": res["G_values"],
        "slope": res.get("slope"),
        "r2": res.get("r_squared"),
        "flags": res.get("flags", []),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(body, fh, sort_keys=True, indent=1)


def emit_plotdata(report: RunReport, target) -> list[Path]:
    """Write tidy CSV series for the report into the target directory."""
    target = Path(target)
    target.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    res = report.results

    def write_csv(name: str, header: list[str], rows: list[tuple]) -> None:
        path = target / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")
        written.append(path)
        if not rows:
            warnings.warn(f"empty report series: {name} has headers only")

    if report.experiment in ("average", "rates"):
        order = np.argsort(res.get("eps_grid", []))
        rows = [
            (float(res["eps_grid"][i]), float(res["errors"][i]))
            for i in order
        ]
        write_csv("rates_error.csv", ["eps", "error"], rows)
        rows_g = [
            (
                float(res["eps_grid"][i]),
                float(res["errors"][i]),
                float(res["std_errors"][i]),
                float(res["G_values"][i]),
            )
            for i in order
        ]
        write_csv("rates_bounds.csv", ["eps", "error", "std_error", "G"], rows_g)
        decomp = res.get("decompositions", [])
        write_csv(
            "decomposition.csv",
            ["eps", "replica", "component", "a1", "a2", "a3", "a4", "delta"],
            [tuple(row) for row in decomp],
        )
    elif report.experiment == "coalesce":
        rows = list(zip(res["curve_times"], res["fraction_coalesced"]))
        write_csv("coalescence_fraction.csv", ["time", "fraction_coalesced"], rows)
    elif report.experiment == "kernel-check":
        rows = [(r["check"], float(r["t"]), float(r["defect"])) for r in res["records"]]
        write_csv("kernel_defects.csv", ["check", "t", "defect"], rows)
    elif report.experiment == "simulate":
        rows = [(i, float(d)) for i, d in enumerate(res["per_replica_defects"])]
        write_csv("leaf_defects.csv", ["replica", "max_leaf_defect"], rows)
    return written
