"""Sliding-window factor graph and its damped Gauss-Newton optimizer.

The window holds the most recent nodes at odometry cadence, one odometry
factor per consecutive pair, GPS pseudorange factors on the nodes that carry
a GPS epoch, and a single anchor prior on the oldest node.  The normal
equations H delta = -b are therefore block-tridiagonal in 6x6 blocks; we
assemble the blocks vectorized across factors and solve with a banded
Cholesky factorization.  Levenberg-Marquardt damping wraps the Gauss-Newton
step: lambda starts at damping_init, divides by 10 on an accepted step and
multiplies by 10 on a rejected one, so accepted objectives never increase.

Estimates update by right perturbation x <- x * exp(delta).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from srfgo import factors as fmod
from srfgo import liegroup
from srfgo.factors import AnchorFactor, GpsFactor, OdometryFactor
from srfgo.liegroup import Pose

# Damping escalated past this is hopeless; report failure instead of looping.
DAMPING_MAX = 1e8


@dataclass
class SolverParams:
    max_iterations: int = 50
    relative_decrease_tol: float = 1e-6
    step_norm_tol: float = 1e-8
    damping_init: float = 1e-6

    def __post_init__(self) -> None:
        if (self.max_iterations <= 0 or self.relative_decrease_tol <= 0
                or self.step_norm_tol <= 0 or self.damping_init <= 0):
            raise ValueError("all solver parameters must be positive")


@dataclass(eq=False)
class SolveReport:
    final_objective: float
    iterations: int
    converged: bool
    status: str
    residuals: dict
    objective_history: tuple
    step_norm: float
    damping_final: float
    # Wall time spent inside iteration bodies (linearize, solve, retry loop),
    # excluding the per-call setup around the loop.
    iteration_seconds: float = 0.0


class WindowGraph:
    """Single-owner mutable window of (global time index, Pose) nodes."""

    def __init__(self, nodes: Sequence[tuple[int, Pose]], factors: Sequence,
                 window_capacity: int):
        if window_capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self.nodes = [(int(i), p) for i, p in nodes]
        self.factors = list(factors)
        self.window_capacity = int(window_capacity)
        self._validate()

    # -- structure ---------------------------------------------------------

    def _validate(self) -> None:
        if not self.nodes:
            raise ValueError("window must hold at least one node")
        if len(self.nodes) > self.window_capacity:
            raise ValueError(
                f"{len(self.nodes)} nodes exceed capacity {self.window_capacity}")
        idx = [i for i, _ in self.nodes]
        if any(b - a != 1 for a, b in zip(idx, idx[1:])):
            raise ValueError("node time indices must be consecutive and increasing")
        members = set(idx)
        odo_pairs = set()
        for f in self.factors:
            if isinstance(f, GpsFactor):
                refs = (f.node_index,)
            elif isinstance(f, OdometryFactor):
                refs = (f.from_index, f.to_index)
                if (f.from_index, f.to_index) in odo_pairs:
                    raise ValueError(
                        f"duplicate odometry factor {f.from_index}->{f.to_index}")
                odo_pairs.add((f.from_index, f.to_index))
            elif isinstance(f, AnchorFactor):
                refs = (f.node_index,)
            else:
                raise TypeError(f"unknown factor type {type(f).__name__}")
            for r in refs:
                if r not in members:
                    raise ValueError(f"factor references node {r} outside the window")
        for a, b in zip(idx, idx[1:]):
            if (a, b) not in odo_pairs:
                raise ValueError(f"nodes {a},{b} not linked by an odometry factor")

    def times(self) -> list[int]:
        return [i for i, _ in self.nodes]

    def estimates(self) -> dict[int, Pose]:
        return dict(self.nodes)

    def estimate_of(self, time_index: int) -> Pose:
        return self.nodes[time_index - self.nodes[0][0]][1]

    def gps_factors(self) -> list[GpsFactor]:
        return [f for f in self.factors if isinstance(f, GpsFactor)]

    # -- stacked views -----------------------------------------------------

    def _stack_states(self) -> tuple[np.ndarray, np.ndarray]:
        rot = np.stack([p.rotation for _, p in self.nodes])
        t = np.stack([p.translation for _, p in self.nodes])
        return rot, t

    def _write_states(self, rot: np.ndarray, t: np.ndarray) -> None:
        base = self.nodes[0][0]
        self.nodes = [(base + k, Pose(rot[k], t[k])) for k in range(len(self.nodes))]

    def _compile(self) -> dict:
        """Factor arrays keyed for vectorized evaluation."""
        row_of = {i: k for k, (i, _) in enumerate(self.nodes)}
        gps_rows, gps_sat, gps_meas, gps_w = [], [], [], []
        odo_rows, odo_rot, odo_t, odo_info = [], [], [], []
        anc_rows, anc_rot, anc_t, anc_info = [], [], [], []
        for f in self.factors:
            if isinstance(f, GpsFactor):
                gps_rows.append(row_of[f.node_index])
                gps_sat.append(f.sat_position)
                gps_meas.append(f.measured_range)
                gps_w.append(1.0 / f.sigma ** 2)
            elif isinstance(f, OdometryFactor):
                odo_rows.append(row_of[f.from_index])
                odo_rot.append(f.measured_transform.rotation)
                odo_t.append(f.measured_transform.translation)
                odo_info.append(f.information)
            else:
                anc_rows.append(row_of[f.node_index])
                anc_rot.append(f.prior_pose.rotation)
                anc_t.append(f.prior_pose.translation)
                anc_info.append(f.information)
        return {
            "gps_rows": np.array(gps_rows, dtype=int),
            "gps_sat": np.array(gps_sat, dtype=float).reshape(-1, 3),
            "gps_meas": np.array(gps_meas, dtype=float),
            "gps_w": np.array(gps_w, dtype=float),
            "odo_rows": np.array(odo_rows, dtype=int),
            "odo_rot": np.array(odo_rot, dtype=float).reshape(-1, 3, 3),
            "odo_t": np.array(odo_t, dtype=float).reshape(-1, 3),
            "odo_info": np.array(odo_info, dtype=float).reshape(-1, 6, 6),
            "anc_rows": np.array(anc_rows, dtype=int),
            "anc_rot": np.array(anc_rot, dtype=float).reshape(-1, 3, 3),
            "anc_t": np.array(anc_t, dtype=float).reshape(-1, 3),
            "anc_info": np.array(anc_info, dtype=float).reshape(-1, 6, 6),
        }

    # -- residual evaluation ----------------------------------------------

    @staticmethod
    def _residuals(comp: dict, rot: np.ndarray, t: np.ndarray) -> dict:
        out = {}
        rows = comp["gps_rows"]
        diff = t[rows] - comp["gps_sat"]
        ranges = np.linalg.norm(diff, axis=-1)
        if ranges.size and np.min(ranges) < fmod.COINCIDENT_EPSILON:
            raise fmod.DegenerateGeometryError("receiver coincides with a satellite")
        out["gps"] = comp["gps_meas"] - ranges
        out["gps_ranges"] = ranges
        out["gps_diff"] = diff

        orow = comp["odo_rows"]
        rot_i, t_i = rot[orow], t[orow]
        rot_j, t_j = rot[orow + 1], t[orow + 1]
        # Body-frame relative prediction x_i^-1 x_j.
        rot_pred = np.swapaxes(rot_i, -1, -2) @ rot_j
        t_pred = (np.swapaxes(rot_i, -1, -2) @ (t_j - t_i)[..., None])[..., 0]
        rot_m = np.swapaxes(rot_pred, -1, -2) @ comp["odo_rot"]
        t_m = (np.swapaxes(rot_pred, -1, -2) @ (comp["odo_t"] - t_pred)[..., None])[..., 0]
        out["odometry"] = (liegroup.se3_log_arrays(rot_m, t_m)
                           if orow.size else np.zeros((0, 6)))
        out["odo_rot_pred"] = rot_pred
        out["odo_t_pred"] = t_pred

        arow = comp["anc_rows"]
        rot_x, t_x = rot[arow], t[arow]
        rot_e = np.swapaxes(rot_x, -1, -2) @ comp["anc_rot"]
        t_e = (np.swapaxes(rot_x, -1, -2) @ (comp["anc_t"] - t_x)[..., None])[..., 0]
        out["anchor"] = (liegroup.se3_log_arrays(rot_e, t_e)
                         if arow.size else np.zeros((0, 6)))
        return out

    @staticmethod
    def _objective_of(comp: dict, res: dict) -> float:
        total = float(np.dot(comp["gps_w"], res["gps"] ** 2))
        if res["odometry"].size:
            total += float(np.einsum("ni,nij,nj->", res["odometry"],
                                     comp["odo_info"], res["odometry"]))
        if res["anchor"].size:
            total += float(np.einsum("ni,nij,nj->", res["anchor"],
                                     comp["anc_info"], res["anchor"]))
        return total

    def objective(self) -> float:
        """Sum of information-normalized squared residuals over all factors."""
        comp = self._compile()
        rot, t = self._stack_states()
        return self._objective_of(comp, self._residuals(comp, rot, t))

    def gps_residuals(self) -> tuple[np.ndarray, np.ndarray]:
        """(residuals, sigmas) for the GPS factors at current estimates."""
        comp = self._compile()
        rot, t = self._stack_states()
        res = self._residuals(comp, rot, t)
        sigmas = 1.0 / np.sqrt(comp["gps_w"]) if comp["gps_w"].size else np.zeros(0)
        return res["gps"], sigmas

    # -- normal equations --------------------------------------------------

    def _linearize(self, comp: dict, rot: np.ndarray, t: np.ndarray,
                   res: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = len(self.nodes)
        diag = np.zeros((n, 6, 6))
        upper = np.zeros((max(n - 1, 0), 6, 6))
        grad = np.zeros((n, 6))

        rows = comp["gps_rows"]
        if rows.size:
            los = res["gps_diff"] / res["gps_ranges"][..., None]
            # d e / d rho = -(los^T R); rotational block identically zero.
            jt = -np.einsum("ni,nij->nj", los, rot[rows])
            w = comp["gps_w"]
            blocks = w[:, None, None] * jt[:, :, None] * jt[:, None, :]
            np.add.at(diag, (rows, slice(3, None), slice(3, None)), blocks)
            np.add.at(grad, (rows, slice(3, None)), (w * res["gps"])[:, None] * jt)

        orow = comp["odo_rows"]
        if orow.size:
            e = res["odometry"]
            # J_j = -Jl^-1(e); the from-node slot folds through Ad(pred^-1),
            # so J_i = -J_j Ad(pred^-1).
            rot_pi = np.swapaxes(res["odo_rot_pred"], -1, -2)
            t_pi = -(rot_pi @ res["odo_t_pred"][..., None])[..., 0]
            ad = liegroup.adjoint_arrays(rot_pi, t_pi)
            jl = liegroup.se3_left_jacobian_inv(e)
            j_i = jl @ ad
            info_ji = comp["odo_info"] @ j_i
            info_jl = comp["odo_info"] @ jl
            # One odometry factor per pair: rows are unique, plain scatter adds.
            diag[orow] += np.swapaxes(j_i, -1, -2) @ info_ji
            diag[orow + 1] += np.swapaxes(jl, -1, -2) @ info_jl
            upper[orow] += -np.swapaxes(j_i, -1, -2) @ info_jl
            g = np.einsum("nij,njk,nk->ni", np.swapaxes(j_i, -1, -2),
                          comp["odo_info"], e)
            g_j = np.einsum("nij,njk,nk->ni", np.swapaxes(jl, -1, -2),
                            comp["odo_info"], e)
            grad[orow] += g
            grad[orow + 1] -= g_j

        arow = comp["anc_rows"]
        if arow.size:
            e = res["anchor"]
            jac = -liegroup.se3_left_jacobian_inv(e)
            w_blk = np.swapaxes(jac, -1, -2) @ comp["anc_info"] @ jac
            g = np.einsum("nij,njk,nk->ni", np.swapaxes(jac, -1, -2),
                          comp["anc_info"], e)
            np.add.at(diag, arow, w_blk)
            np.add.at(grad, arow, g)
        return diag, upper, grad

    @staticmethod
    def _solve_banded(diag: np.ndarray, upper: np.ndarray, rhs: np.ndarray,
                      damping: float) -> np.ndarray:
        n = diag.shape[0]
        dim = 6 * n
        h = np.zeros((dim, dim))
        hv = h.reshape(n, 6, n, 6)
        idx = np.arange(n)
        d = diag.copy()
        d[:, range(6), range(6)] += damping
        hv[idx, :, idx, :] = d
        if n > 1:
            hv[idx[:-1], :, idx[1:], :] = upper
        bw = min(11, dim - 1)
        ab = np.zeros((bw + 1, dim))
        for k in range(bw + 1):
            ab[bw - k, k:] = np.diagonal(h, offset=k)
        delta = scipy.linalg.solveh_banded(ab, rhs, lower=False)
        return delta

    def optimize(self, params: SolverParams | None = None) -> SolveReport:
        """Damped Gauss-Newton to convergence; mutates node estimates."""
        params = params or SolverParams()
        comp = self._compile()
        rot, t = self._stack_states()
        res = self._residuals(comp, rot, t)
        obj = self._objective_of(comp, res)
        history = [obj]
        damping = params.damping_init
        status = "max-iterations"
        converged = False
        step_norm = np.inf
        iterations = 0
        iter_seconds = 0.0

        for iterations in range(1, params.max_iterations + 1):
            iter_started = time.perf_counter()
            diag, upper, grad = self._linearize(comp, rot, t, res)
            accepted = False
            while True:
                try:
                    delta = self._solve_banded(diag, upper, -grad.reshape(-1), damping)
                except np.linalg.LinAlgError:
                    damping *= 10.0
                    if damping > DAMPING_MAX:
                        status = "cholesky-failure"
                        break
                    continue
                step = delta.reshape(-1, 6)
                rot_s, t_s = liegroup.se3_exp_arrays(step)
                rot_new, t_new = liegroup.compose_arrays(rot, t, rot_s, t_s)
                res_new = self._residuals(comp, rot_new, t_new)
                obj_new = self._objective_of(comp, res_new)
                if obj_new <= obj:
                    accepted = True
                    damping = max(damping / 10.0, 1e-12)
                    break
                damping *= 10.0
                if damping > DAMPING_MAX:
                    status = "stalled"
                    break
            iter_seconds += time.perf_counter() - iter_started
            if not accepted:
                iterations -= 1
                break
            decrease = obj - obj_new
            rot, t, res, obj = rot_new, t_new, res_new, obj_new
            history.append(obj)
            step_norm = float(np.linalg.norm(delta))
            if step_norm < params.step_norm_tol:
                status = "step-norm"
                converged = True
                break
            if decrease <= params.relative_decrease_tol * max(obj, 1e-300):
                status = "relative-decrease"
                converged = True
                break

        self._write_states(rot, t)
        snapshot = {"gps": res["gps"].copy(), "odometry": res["odometry"].copy(),
                    "anchor": res["anchor"].copy()}
        return SolveReport(final_objective=obj, iterations=iterations,
                           converged=converged, status=status, residuals=snapshot,
                           objective_history=tuple(history), step_norm=step_norm,
                           damping_final=damping, iteration_seconds=iter_seconds)

    # -- window maintenance ------------------------------------------------

    def _append_nodes(self, nodes: list[tuple[int, Pose]], factors: list,
                      new_nodes: Sequence[int], new_factors: Sequence) -> None:
        """Dead-reckon initial estimates for new nodes from incoming odometry."""
        odo_by_to = {f.to_index: f for f in new_factors if isinstance(f, OdometryFactor)}
        est = dict(nodes)
        for idx in new_nodes:
            idx = int(idx)
            f = odo_by_to.get(idx)
            if f is None:
                raise ValueError(f"no incoming odometry factor for new node {idx}")
            prev = est.get(f.from_index)
            if prev is None:
                raise ValueError(f"odometry for node {idx} starts outside the window")
            est[idx] = liegroup.compose(prev, f.measured_transform)
            nodes.append((idx, est[idx]))
        factors.extend(new_factors)

    def append(self, new_nodes: Sequence[int], new_factors: Sequence) -> "WindowGraph":
        """Grow the window (no eviction); used while the window fills."""
        nodes = list(self.nodes)
        factors = list(self.factors)
        self._append_nodes(nodes, factors, new_nodes, new_factors)
        return WindowGraph(nodes, factors, self.window_capacity)

    def slide(self, new_nodes: Sequence[int], new_factors: Sequence,
              shift: int) -> "WindowGraph":
        """Evict the oldest `shift` nodes, append new ones, re-anchor."""
        if shift < 1:
            raise ValueError("shift must be >= 1")
        if shift >= len(self.nodes):
            raise ValueError(
                f"shift {shift} would underflow a {len(self.nodes)}-node window")
        kept = self.nodes[shift:]
        evicted = {i for i, _ in self.nodes[:shift]}
        kept_set = {i for i, _ in kept}

        def survives(f) -> bool:
            if isinstance(f, GpsFactor):
                return f.node_index in kept_set
            if isinstance(f, OdometryFactor):
                return f.from_index in kept_set and f.to_index in kept_set
            return False  # anchor is re-attached below

        factors = [f for f in self.factors if survives(f)]
        oldest_idx, oldest_pose = kept[0]
        factors.append(AnchorFactor(oldest_idx, oldest_pose, fmod.anchor_information()))
        nodes = list(kept)
        self._append_nodes(nodes, factors, new_nodes, new_factors)
        del evicted
        return WindowGraph(nodes, factors, self.window_capacity)

    def strip_gps(self) -> "WindowGraph":
        """Same window with every GPS factor removed."""
        factors = [f for f in self.factors if not isinstance(f, GpsFactor)]
        return WindowGraph(list(self.nodes), factors, self.window_capacity)
