"""Experiment pipeline: mode wiring, metrics, and run serialization.

A run advances the sliding window one batch of nodes at a time.  After each
optimization the batch estimates are recorded (causal estimates: what the
vehicle would have reported at that moment), the spoofing detector takes one
trial, and authentication events fire on their fixed epoch grid.  Modes:

- odometry-only: dead-reckon by composing odometry from the initial fix.
- naive-fgo: sliding-window fusion of GPS and odometry, no detector.
- sr-fgo: naive-fgo plus chi-squared detection, mitigation, and
  authentication handling.

Run outputs are plain CSV/JSON; every float is written with repr precision
so records round-trip losslessly and repeated runs are byte-identical.
Wall-clock timing goes to a separate timing.json, which is the only
non-deterministic output.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import factors as fmod
from .chimera import AuthEvent, AuthSchedule, next_auth_time, on_authentication
from .detector import DetectorConfig, DetectorState, decide, mitigate, threshold
from .detector import test_statistic as window_statistic
from .factors import AnchorFactor, GpsFactor, OdometryFactor
from .liegroup import (Pose, compose, quaternion_to_rotation,
                       rotation_to_quaternion)
from .simkit import EPOCH_S, MeasurementStream, Scenario, build_measurements
from .solver import SolverParams, WindowGraph

MODES = ("odometry-only", "naive-fgo", "sr-fgo")

WINDOW_SIZE_DEFAULT = 100
WINDOW_SHIFT_DEFAULT = 10


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario
    mode: str
    window_size: int = WINDOW_SIZE_DEFAULT
    window_shift: int = WINDOW_SHIFT_DEFAULT
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    solver: Optional[SolverParams] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.window_shift <= self.window_size:
            raise ValueError(
                f"need 1 <= shift <= window size, got shift={self.window_shift} "
                f"N={self.window_size}")

    @property
    def auth_schedule(self) -> AuthSchedule:
        return AuthSchedule(int(round(EPOCH_S / self.scenario.dt)))


@dataclass
class RunRecord:
    """Everything a run produced, in serialization-ready arrays."""

    mode: str
    seed: int
    dt: float
    times_s: np.ndarray
    est_translations: np.ndarray
    est_quaternions: np.ndarray
    errors: np.ndarray
    detections: list
    auth_events: list
    smoothed_times_s: np.ndarray
    smoothed_translations: np.ndarray
    smoothed_quaternions: np.ndarray
    summary: dict
    timing: dict

    def __eq__(self, other) -> bool:
        # Equality covers the deterministic data products; the wall-clock
        # timing dict is excluded so repeated runs compare equal.
        if not isinstance(other, RunRecord):
            return NotImplemented
        scalar = (self.mode == other.mode and self.seed == other.seed
                  and self.dt == other.dt)
        arrays = all(np.array_equal(getattr(self, name), getattr(other, name))
                     for name in ("times_s", "est_translations", "est_quaternions",
                                  "errors", "smoothed_times_s",
                                  "smoothed_translations", "smoothed_quaternions"))
        return (scalar and arrays and self.detections == other.detections
                and self.auth_events == other.auth_events
                and self.summary == other.summary)

    def estimated_poses(self) -> list[Pose]:
        return [Pose(quaternion_to_rotation(q), t)
                for q, t in zip(self.est_quaternions, self.est_translations)]


def l2_errors(est, ref) -> np.ndarray:
    """Per-step Euclidean position error between aligned trajectories."""
    est_t = _translations(est)
    ref_t = _translations(ref)
    if est_t.shape != ref_t.shape:
        raise ValueError(f"length mismatch: {est_t.shape} vs {ref_t.shape}")
    return np.linalg.norm(ref_t - est_t, axis=1)


def _translations(seq) -> np.ndarray:
    if isinstance(seq, np.ndarray):
        return seq
    return np.array([p.translation for p in seq])


def summarize(series) -> tuple[float, float]:
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty error series")
    return float(arr.mean()), float(arr.max())


def epoch_false_alarm_probability(alpha: float, trials: int) -> float:
    """Probability of at least one false alarm over independent trials."""
    return 1.0 - (1.0 - alpha) ** trials


class DetectionStats(NamedTuple):
    per_trial_fa_rate: float
    per_run_fa_rate: float
    mean_time_to_detect: Optional[float]


def detection_stats(records) -> DetectionStats:
    """False-alarm rates over nominal records, detection delay over spoofed.

    False alarms count raw threshold crossings (q > tau) so the rate keeps
    its per-trial meaning; the latched decision column additionally marks
    everything after the first crossing as spoof-detected.
    """
    nominal_trials = 0
    nominal_crossings = 0
    nominal_runs = 0
    runs_with_crossing = 0
    delays = []
    for record in records:
        crossings = [row for row in record.detections if row["q"] > row["tau"]]
        if record.summary["spoofed"]:
            t_start = record.summary["spoof_t_start_s"]
            post = [row["time_s"] for row in crossings if row["time_s"] >= t_start]
            if post:
                delays.append(post[0] - t_start)
        else:
            nominal_runs += 1
            nominal_trials += len(record.detections)
            nominal_crossings += len(crossings)
            runs_with_crossing += bool(crossings)
    per_trial = nominal_crossings / nominal_trials if nominal_trials else 0.0
    per_run = runs_with_crossing / nominal_runs if nominal_runs else 0.0
    ttd = float(np.mean(delays)) if delays else None
    return DetectionStats(per_trial, per_run, ttd)


def _attack_active(scenario: Scenario, t: float) -> bool:
    spoof = scenario.spoof
    return spoof is not None and spoof.ramp_rate > 0.0 and t > spoof.t_start


def _gps_factors_at(step: int, stream: MeasurementStream, sigma: float):
    sats, ranges = stream.gps_epochs[step]
    # A noiseless scenario (sigma 0) still needs a finite factor weight;
    # unit sigma turns the GPS terms into plain least squares.
    weight_sigma = sigma if sigma > 0.0 else 1.0
    return [GpsFactor(step, sat, float(rho), weight_sigma)
            for sat, rho in zip(sats, ranges)]


def _batch_ends(n_steps: int, shift: int):
    ends = list(range(shift, n_steps + 1, shift))
    if not ends or ends[-1] != n_steps:
        ends.append(n_steps)
    return ends


def run(cfg, mode: str = None) -> RunRecord:
    """Execute one simulation run and return its record."""
    if not isinstance(cfg, RunConfig):
        cfg = RunConfig(scenario=cfg, mode=mode)
    scenario = cfg.scenario
    stream = build_measurements(scenario)
    truth = scenario.truth
    n_steps = scenario.steps
    dt = scenario.dt
    sched = cfg.auth_schedule
    solver_params = cfg.solver

    est: list = [None] * (n_steps + 1)
    est[0] = truth[0]  # authenticated initial fix
    detections: list = []
    auth_rows: list = []
    failsafe = False
    opt_seconds: list = []
    iteration_counts: list = []
    iteration_seconds: list = []
    smoothed: list = [(0, truth[0])]

    def log_auth(step: int, outcome: str, action: str) -> None:
        auth_rows.append({"time_s": step * dt, "outcome": outcome, "action": action})

    def auth_outcome(step: int) -> str:
        return "failed" if _attack_active(scenario, step * dt) else "authentic"

    if cfg.mode == "odometry-only":
        for k in range(1, n_steps + 1):
            est[k] = compose(est[k - 1], stream.odometry[k - 1])
        for step in range(0, n_steps + 1, sched.epoch_length_steps):
            log_auth(step, auth_outcome(step), "none")
        tail = max(0, n_steps + 1 - cfg.window_size)
        smoothed = list(enumerate(est))[tail:]
    else:
        det_state = DetectorState()
        trust_until = -1
        # Same unit-weight fallback as GPS: a noiseless run still needs a
        # finite information matrix on the odometry chain.
        odo_sigmas = tuple(s if s > 0.0 else 1.0 for s in scenario.sigma_icp)
        odo_info = fmod.default_odometry_information(odo_sigmas)
        sr_mode = cfg.mode == "sr-fgo"

        initial_factors = [AnchorFactor(0, truth[0], fmod.anchor_information())]
        if 0 in stream.gps_epochs:
            initial_factors += _gps_factors_at(0, stream, scenario.sigma_gps)
        graph = WindowGraph([(0, truth[0])], initial_factors, cfg.window_size)

        if sr_mode:
            result = on_authentication(AuthEvent(0, "authentic"), det_state,
                                       graph, sched)
            trust_until = result.trust_until
            log_auth(0, "authentic", result.action)
        else:
            log_auth(0, auth_outcome(0), "none")

        prev_end = 0
        for k_end in _batch_ends(n_steps, cfg.window_shift):
            batch = list(range(prev_end + 1, k_end + 1))
            prev_end = k_end
            new_factors = []
            for i in batch:
                new_factors.append(OdometryFactor(i - 1, i, stream.odometry[i - 1],
                                                  odo_info))
                if i in stream.gps_epochs and not det_state.gps_excluded:
                    new_factors += _gps_factors_at(i, stream, scenario.sigma_gps)

            overflow = len(graph.nodes) + len(batch) - cfg.window_size
            if overflow > 0:
                graph = graph.slide(batch, new_factors, overflow)
            else:
                graph = graph.append(batch, new_factors)

            started = time.perf_counter()
            report = graph.optimize(solver_params)
            opt_seconds.append(time.perf_counter() - started)
            iteration_counts.append(report.iterations)
            iteration_seconds.append(report.iteration_seconds)
            for i in batch:
                est[i] = graph.estimate_of(i)

            # The monitor runs in both graph modes so naive runs still log
            # an unmitigated trial sequence; only sr mode acts on a latch.
            stat = window_statistic(graph)
            if stat is not None:
                q, n = stat
                tau = threshold(cfg.detector, n)
                was_latched = det_state.spoofed_flag
                decision = decide(q, tau, det_state, time_index=k_end,
                                  monitoring=k_end > trust_until)
                detections.append({"time_s": k_end * dt, "q": q, "tau": tau,
                                   "n": n, "decision": decision})
                if sr_mode and det_state.spoofed_flag and not was_latched:
                    graph = mitigate(graph, det_state, solver_params)
                    for i in batch:
                        est[i] = graph.estimate_of(i)

            if k_end % sched.epoch_length_steps == 0:
                outcome = auth_outcome(k_end)
                if sr_mode:
                    result = on_authentication(AuthEvent(k_end, outcome),
                                               det_state, graph, sched)
                    graph = result.graph
                    log_auth(k_end, outcome, result.action)
                    failsafe = failsafe or result.failsafe
                    if outcome == "authentic":
                        trust_until = result.trust_until
                    else:
                        for i in batch:
                            est[i] = graph.estimate_of(i)
                else:
                    log_auth(k_end, outcome, "none")

        smoothed = [(step, graph.estimate_of(step)) for step in graph.times()]

    errors = l2_errors(est, list(truth))
    mean_error, max_error = summarize(errors)
    crossings = sum(1 for row in detections if row["q"] > row["tau"])
    latched_rows = [row for row in detections if row["decision"] == "spoof-detected"]
    summary = {
        "mode": cfg.mode,
        "seed": scenario.seed,
        "dt": dt,
        "steps": n_steps,
        "window_size": cfg.window_size,
        "window_shift": cfg.window_shift,
        "alpha": cfg.detector.alpha,
        "spoofed": scenario.spoof is not None and scenario.spoof.ramp_rate > 0.0,
        "spoof_t_start_s": scenario.spoof.t_start if scenario.spoof else None,
        "spoof_ramp_rate_mps": scenario.spoof.ramp_rate if scenario.spoof else None,
        "mean_error_m": mean_error,
        "max_error_m": max_error,
        "detector_trials": len(detections),
        "detector_crossings": crossings,
        "first_detection_time_s": latched_rows[0]["time_s"] if latched_rows else None,
        "failsafe": failsafe,
        "windows_optimized": len(opt_seconds),
        "mean_solver_iterations": (float(np.mean(iteration_counts))
                                   if iteration_counts else 0.0),
    }
    total_iterations = int(np.sum(iteration_counts)) if iteration_counts else 0
    timing = {
        "windows_optimized": len(opt_seconds),
        "mean_window_optimize_s": (float(np.mean(opt_seconds))
                                   if opt_seconds else 0.0),
        "total_optimize_s": float(np.sum(opt_seconds)) if opt_seconds else 0.0,
        # Mean time per accepted solver iteration, measured inside the
        # iteration loop so per-call setup does not pollute the scaling.
        "mean_iteration_s": (float(np.sum(iteration_seconds)) / total_iterations
                             if total_iterations else 0.0),
    }

    times_s = np.arange(n_steps + 1) * dt
    est_translations = np.array([p.translation for p in est])
    est_quaternions = np.array([rotation_to_quaternion(p.rotation) for p in est])
    smoothed_steps = np.array([s for s, _ in smoothed])
    return RunRecord(
        mode=cfg.mode,
        seed=scenario.seed,
        dt=dt,
        times_s=times_s,
        est_translations=est_translations,
        est_quaternions=est_quaternions,
        errors=errors,
        detections=detections,
        auth_events=auth_rows,
        smoothed_times_s=smoothed_steps * dt,
        smoothed_translations=np.array([p.translation for _, p in smoothed]),
        smoothed_quaternions=np.array([rotation_to_quaternion(p.rotation)
                                       for _, p in smoothed]),
        summary=summary,
        timing=timing,
    )


def summarize_runs(records, mode: str = None, base_seed: int = None) -> dict:
    """Aggregate per-run summaries (order-independent: sorted by seed)."""
    records = sorted(records, key=lambda r: r.seed)
    means = [r.summary["mean_error_m"] for r in records]
    maxes = [r.summary["max_error_m"] for r in records]
    trials = sum(r.summary["detector_trials"] for r in records)
    crossings = sum(r.summary["detector_crossings"] for r in records)

    def stats(values):
        if not values:
            return {"mean": None, "std": None, "per_run": []}
        return {"mean": float(np.mean(values)), "std": float(np.std(values)),
                "per_run": [float(v) for v in values]}

    return {
        "mode": mode,
        "base_seed": base_seed,
        "runs": len(records),
        "mean_error_m": stats(means),
        "max_error_m": stats(maxes),
        "detector_trials": trials,
        "detector_crossings": crossings,
        "runs_with_crossing": sum(1 for r in records
                                  if r.summary["detector_crossings"] > 0),
        "failsafe_runs": sum(1 for r in records if r.summary["failsafe"]),
        "first_detection_times_s": [r.summary["first_detection_time_s"]
                                    for r in records],
    }


# ---------------------------------------------------------------------------
# Serialization.  All floats are written with repr() so parsing returns the
# exact same values; only timing.json varies between identical runs.

def _fmt(value) -> str:
    return repr(float(value))


def _pose_csv_lines(times_s, translations, quaternions):
    lines = ["t,x,y,z,qx,qy,qz,qw"]
    for t, p, q in zip(times_s, translations, quaternions):
        lines.append(",".join(_fmt(v) for v in (t, p[0], p[1], p[2],
                                                q[0], q[1], q[2], q[3])))
    return lines


def write_run(record: RunRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    (out / "trajectory.csv").write_text("\n".join(_pose_csv_lines(
        record.times_s, record.est_translations, record.est_quaternions)) + "\n")
    (out / "smoothed.csv").write_text("\n".join(_pose_csv_lines(
        record.smoothed_times_s, record.smoothed_translations,
        record.smoothed_quaternions)) + "\n")

    err_lines = ["time_s,l2_error_m"]
    err_lines += [f"{_fmt(t)},{_fmt(e)}"
                  for t, e in zip(record.times_s, record.errors)]
    (out / "errors.csv").write_text("\n".join(err_lines) + "\n")

    det_lines = ["time_s,q,tau,n,decision"]
    det_lines += [f"{_fmt(r['time_s'])},{_fmt(r['q'])},{_fmt(r['tau'])},"
                  f"{r['n']},{r['decision']}" for r in record.detections]
    (out / "detections.csv").write_text("\n".join(det_lines) + "\n")

    auth_lines = ["time_s,outcome,action"]
    auth_lines += [f"{_fmt(r['time_s'])},{r['outcome']},{r['action']}"
                   for r in record.auth_events]
    (out / "auth.csv").write_text("\n".join(auth_lines) + "\n")

    (out / "summary.json").write_text(
        json.dumps(record.summary, indent=2, sort_keys=True) + "\n")
    (out / "timing.json").write_text(
        json.dumps(record.timing, indent=2, sort_keys=True) + "\n")
    return out


def _read_csv(path: Path):
    lines = path.read_text().strip().split("\n")
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def read_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    summary = json.loads((run_dir / "summary.json").read_text())
    timing = json.loads((run_dir / "timing.json").read_text())

    _, traj_rows = _read_csv(run_dir / "trajectory.csv")
    times = np.array([float(r[0]) for r in traj_rows])
    trans = np.array([[float(v) for v in r[1:4]] for r in traj_rows])
    quats = np.array([[float(v) for v in r[4:8]] for r in traj_rows])

    _, smooth_rows = _read_csv(run_dir / "smoothed.csv")
    s_times = np.array([float(r[0]) for r in smooth_rows])
    s_trans = np.array([[float(v) for v in r[1:4]] for r in smooth_rows])
    s_quats = np.array([[float(v) for v in r[4:8]] for r in smooth_rows])

    _, err_rows = _read_csv(run_dir / "errors.csv")
    errors = np.array([float(r[1]) for r in err_rows])

    _, det_rows = _read_csv(run_dir / "detections.csv")
    detections = [{"time_s": float(r[0]), "q": float(r[1]), "tau": float(r[2]),
                   "n": int(r[3]), "decision": r[4]} for r in det_rows]

    _, auth_csv_rows = _read_csv(run_dir / "auth.csv")
    auth_events = [{"time_s": float(r[0]), "outcome": r[1], "action": r[2]}
                   for r in auth_csv_rows]

    return RunRecord(
        mode=summary["mode"], seed=summary["seed"], dt=summary["dt"],
        times_s=times, est_translations=trans, est_quaternions=quats,
        errors=errors, detections=detections, auth_events=auth_events,
        smoothed_times_s=s_times, smoothed_translations=s_trans,
        smoothed_quaternions=s_quats, summary=summary, timing=timing)
