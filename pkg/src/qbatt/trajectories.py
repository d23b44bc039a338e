"""Stochastic (homodyne) unraveling of the feedback master equation.

Single steps follow the Ito stochastic master equation

    d rho = sum_j { K_j(s_j rho + rho s_j^dag) dt + K_j^2 rho dt / (2 eta Gamma)
                    + sqrt(eta Gamma) dw_j (H[s_j] + K_j / (eta Gamma)) rho } + L rho dt

with ``K_j rho = -i[F_j, rho]`` and ``H[o] rho = o rho + rho o^dag - Tr[rho (o + o^dag)] rho``.
Increments are real Gaussians with variance
``dt``; one independent stream per site.

Time conventions: the single-step functions take the physical step ``dt``
and increments ``dw ~ N(0, dt)``. ``run_ensemble`` takes ``t_final`` and
``dt`` in units of ``1/Gamma`` like :func:`qbatt.dynamics.evolve`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import FeedbackGenerator, check_density_matrix, make_generator
from .operators import ChainSpec, ControlSpec, ValidationError, build_pauli

log = logging.getLogger(__name__)

STEP_POSITIVITY_TOL = 1e-4
MAX_HALVINGS = 4
NOISE_CHUNK = 1024  # steps per noise draw; keeps the pair count even
SCHEMES = ("kraus-rk4", "kraus", "euler")
QUADRATURE_NODES = 3  # Gauss-Hermite nodes per site for the conditional mean


class NoiseProcess:
    """Reproducible Wiener increments for one trajectory.

    Uniforms come from a Philox counter-based generator keyed by ``seed``;
    normals are made with the Box-Muller transform
    ``z = sqrt(-2 ln u1) * (cos 2 pi u2, sin 2 pi u2)`` using ``1 - u`` for
    ``u1`` so the logarithm stays finite. Increment ``k`` of site ``j`` is
    normal number ``k * n_sites + j`` of the stream, scaled by ``sqrt(dt)``.
    A second stream keyed by ``(seed, 1)`` feeds Brownian-bridge refinements
    of rejected steps.
    """

    def __init__(self, seed: int, dt: float, n_sites: int):
        if dt <= 0:
            raise ValidationError("dt must be positive")
        self.seed = int(seed)
        self.dt = float(dt)
        self.n_sites = int(n_sites)
        self._main = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))
        self._aux = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.seed, 1])))

    @staticmethod
    def _box_muller(gen: np.random.Generator, count: int) -> np.ndarray:
        pairs = (count + 1) // 2
        u = gen.random(2 * pairs)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2 * math.pi * u2)
        z[1::2] = r * np.sin(2 * math.pi * u2)
        return z[:count]

    def standard_normals(self, n_steps: int) -> np.ndarray:
        """Next ``n_steps`` rows of standard normals, shape ``(n_steps, n_sites)``.

        Callers must request an even number of values per call (other than
        the last) for the stream to be independent of chunking.
        """
        return self._box_muller(self._main, n_steps * self.n_sites).reshape(n_steps, self.n_sites)

    def increments(self, n_steps: int) -> np.ndarray:
        return math.sqrt(self.dt) * self.standard_normals(n_steps)

    def bridge_normals(self, count: int) -> np.ndarray:
        return self._box_muller(self._aux, count)


def homodyne_current(rho: np.ndarray, site: int, ctrl: ControlSpec, dw: float,
                     dt: float) -> float:
    """Measured current ``<sigma_x> + (dw/dt) / sqrt(eta Gamma)`` of ``site``."""
    n = int(round(math.log2(rho.shape[0])))
    sx = build_pauli(site, "x", n)
    mean = float(np.real(np.trace(rho @ sx)))
    return mean + (dw / dt) / math.sqrt(ctrl.eta * ctrl.decay_rate)


def _expect(A, rho):
    # Tr[A rho] over a batch (M, d, d)
    M = rho.shape[0]
    return np.real(rho.reshape(M, -1) @ np.ascontiguousarray(A.T).ravel())


def _dag_b(X):
    return np.conj(np.swapaxes(X, -1, -2))


def _clean(rho):
    rho = 0.5 * (rho + _dag_b(rho))
    tr = np.real(np.trace(rho, axis1=-2, axis2=-1))
    return rho / tr[:, None, None]


class _Stepper:
    """Batched single steps on states of shape ``(M, d, d)``.

    All schemes use the effective form of the Ito equation: the noise enters
    as ``sum_j H[c_j] rho dw_j`` with ``c_j = sqrt(eta Gamma) s_j - i F_j / sqrt(eta Gamma)``.

    ``euler`` is plain Euler-Maruyama. ``kraus`` folds
    measurement and feedback into the effective jump operators
    ``c_j = sqrt(eta Gamma) s_j - i F_j / sqrt(eta Gamma)`` (the conditional
    equation is the ordinary homodyne one for ``c_j`` and the Hamiltonian
    ``H_B + sum_j (F_j s_j + s_j^dag F_j) / 2``) and applies the order-one
    Kraus map

        rho -> K rho K^dag + sum (unmonitored jumps) dt,
        K = 1 - (i H' + R/2) dt + sum_j c_j dy_j
              + ((sum_j c_j dy_j)^2 - sum_j c_j^2 dt) / 2,
        dy_j = <c_j + c_j^dag> dt + dw_j,

    then renormalizes. It matches the Ito equation to first order in ``dt``,
    keeps every step completely positive and leaves exact dark states of
    the ``c_j`` untouched.

    ``kraus-rk4`` (the ensemble default) adds to the Kraus step the
    deterministic O(dt^2) shift that makes its conditional mean over the
    noise equal one RK4 step of the master equation. The mean over the noise
    is taken by Gauss-Hermite quadrature with three nodes per site. The
    shift is applied only where it provably keeps the state positive (the
    smallest eigenvalue exceeds the shift's norm); nearly pure states, where
    it is skipped, are the ones the plain Kraus step already handles well.
    The ensemble mean then follows the master equation without the O(dt)
    drift of a first-order scheme.
    """

    def __init__(self, gen: FeedbackGenerator, scheme: str = "kraus-rk4"):
        if scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme {scheme!r}")
        self.gen = gen
        self.scheme = scheme
        self.d = gen.dim
        ctrl = gen.ctrl
        self.eg = ctrl.eta * ctrl.decay_rate
        self.sqrt_eg = math.sqrt(self.eg)
        self.s = np.array(gen.lowering)
        self.sd = _dag_b(self.s)
        self.sx = self.s + self.sd
        self.F = np.array(gen.feedback)
        self.unmonitored = gen.down_rate - self.eg
        if self.unmonitored < -1e-12:
            raise ValidationError("monitored rate exceeds the decay rate")
        self.unmonitored = max(self.unmonitored, 0.0)

        self.c = self.sqrt_eg * self.s - 1j * self.F / self.sqrt_eg
        cd = _dag_b(self.c)
        H_eff = gen.H + 0.5 * sum(F @ s + sd @ F for F, s, sd in zip(self.F, self.s, self.sd))
        R = sum(a @ b for a, b in zip(cd, self.c))
        R = R + self.unmonitored * sum(sd @ s for s, sd in zip(self.s, self.sd))
        if gen.up_rate:
            R = R + gen.up_rate * sum(s @ sd for s, sd in zip(self.s, self.sd))
        self.A = -(1j * H_eff + 0.5 * R)
        self.c_sq = sum(c @ c for c in self.c)
        x, w = np.polynomial.hermite_e.hermegauss(QUADRATURE_NODES)
        w = w / w.sum()
        n = len(self.s)
        grids = np.meshgrid(*([x] * n), indexing="ij")
        wgrid = np.ones([QUADRATURE_NODES] * n)
        for k in range(n):
            shape = [1] * n
            shape[k] = QUADRATURE_NODES
            wgrid = wgrid * w.reshape(shape)
        self._quad = (np.stack([g.ravel() for g in grids], axis=1), wgrid.ravel())
        # row-major vec: vec(A rho B) = (A kron B^T) vec(rho)
        jumps = np.zeros((self.d**2, self.d**2), dtype=complex)
        for s_, sd in zip(self.s, self.sd):
            if self.unmonitored:
                jumps += self.unmonitored * np.kron(s_, sd.T)
            if gen.up_rate:
                jumps += gen.up_rate * np.kron(sd, s_.T)
        self._jumps_T = jumps.T.copy() if jumps.any() else None
        self._propagators = {}
        self._sx_cols = np.stack([x.T.ravel() for x in self.sx], axis=1)

    def currents_mean(self, rho):
        # <sigma_x^j> for every state and site, shape (M, n_sites)
        M = rho.shape[0]
        return np.real(rho.reshape(M, -1) @ self._sx_cols)

    def step(self, rho, dW, dt):
        if self.scheme == "euler":
            return self._euler(rho, dW, dt)
        if self.scheme == "kraus-rk4":
            return self._kraus_rk4(rho, dW, dt)
        return self._kraus(rho, dW, dt)

    def _rk4_drift(self, rho, dt):
        # one RK4 step of a linear equation is the degree-4 Taylor polynomial of exp(L dt)
        P = self._propagators.get(dt)
        if P is None:
            d = self.d
            # the generator is column-stacked; permute to row-major
            perm = np.arange(d * d).reshape(d, d).T.ravel()
            Ldt = self.gen.liouvillian()[np.ix_(perm, perm)] * dt
            P = np.eye(d * d, dtype=complex)
            term = np.eye(d * d, dtype=complex)
            for k in range(1, 5):
                term = term @ Ldt / k
                P = P + term
            P = P.T.copy()
            self._propagators[dt] = P
        M = rho.shape[0]
        return (rho.reshape(M, -1) @ P).reshape(rho.shape)

    def _kraus_mean(self, rho, dt):
        # E over dW of the Kraus step, by tensor-product Gauss-Hermite quadrature
        M = rho.shape[0]
        nodes, weights = self._quad
        Q = len(weights)
        rep = np.repeat(rho, Q, axis=0)
        dW = np.tile(math.sqrt(dt) * nodes, (M, 1))
        out = self._kraus(rep, dW, dt).reshape(M, Q, self.d, self.d)
        return np.einsum("q,mqab->mab", weights, out)

    def _kraus_rk4(self, rho, dW, dt):
        out = self._kraus(rho, dW, dt)
        corr = self._rk4_drift(rho, dt) - self._kraus_mean(rho, dt)
        corr = 0.5 * (corr + _dag_b(corr))
        # Weyl: lambda_min(out + corr) >= lambda_min(out) - ||corr||, so this cannot break positivity
        # the Frobenius norm bounds the spectral norm
        safe = self.min_eigs(out) >= np.linalg.norm(corr, axis=(1, 2))
        out[safe] += corr[safe]
        return out

    def _euler(self, rho, dW, dt):
        out = rho + dt * self.gen.rhs(rho)
        x = self.currents_mean(rho)
        for j in range(len(self.s)):
            s, sd, F = self.s[j], self.sd[j], self.F[j]
            h_term = s @ rho + rho @ sd - x[:, j, None, None] * rho
            k_term = -1j * (F @ rho - rho @ F)
            w = dW[:, j, None, None]
            out = out + w * (self.sqrt_eg * h_term + k_term / self.sqrt_eg)
        return _clean(out)

    def _kraus(self, rho, dW, dt):
        gen = self.gen
        # <c + c^dag> = sqrt(eta Gamma) <sigma_x>, F being Hermitian
        dy = self.sqrt_eg * self.currents_mean(rho) * dt + dW
        L = np.einsum("mj,jab->mab", dy, self.c)
        K = np.eye(self.d) + dt * (self.A - 0.5 * self.c_sq) + L + 0.5 * (L @ L)
        out = K @ rho @ _dag_b(K)
        if self._jumps_T is not None:
            M = rho.shape[0]
            out = out + dt * (rho.reshape(M, -1) @ self._jumps_T).reshape(rho.shape)
        return _clean(out)

    def min_eigs(self, rho):
        return np.linalg.eigvalsh(rho)[:, 0]


def _single_step(gen, rho, dw, dt, scheme):
    stepper = _Stepper(gen, scheme)
    dW = np.atleast_1d(np.asarray(dw, dtype=float)).reshape(1, -1)
    if dW.shape[1] != len(gen.lowering):
        raise ValidationError(f"need one increment per site, got {dW.shape[1]}")
    return stepper.step(np.asarray(rho, dtype=complex)[None], dW, dt)[0]


def sme_step(rho: np.ndarray, chain: ChainSpec, ctrl: ControlSpec, dw, dt: float,
             scheme: str = "euler") -> np.ndarray:
    """One step of the zero-temperature conditional state.

    ``dw`` holds one increment per site. The default is an Euler-Maruyama
    step. ``scheme="kraus"`` (completely positive map) and
    ``scheme="kraus-rk4"`` (its mean-corrected form, the default of
    :func:`run_ensemble`) are also available. The output is Hermitian with unit trace.
    """
    return _single_step(FeedbackGenerator(chain, ctrl), rho, dw, dt, scheme)


def thermal_sme_step(rho: np.ndarray, chain: ChainSpec, ctrl: ControlSpec, dw,
                     dt: float, scheme: str = "euler") -> np.ndarray:
    """As :func:`sme_step`, with the uncollected light going to a thermal reservoir."""
    return _single_step(FeedbackGenerator(chain, ctrl, thermal=True), rho, dw, dt, scheme)


@dataclass
class TrajectoryRecord:
    seed: int
    times: np.ndarray  # Gamma t
    stored_energy: np.ndarray
    failed: bool = False
    rejected_steps: int = 0
    homodyne: Optional[np.ndarray] = None  # (n_times, n_sites), optional


@dataclass
class EnsembleResult:
    times: np.ndarray
    trajectories: list
    mean: np.ndarray
    std: np.ndarray
    stderr: np.ndarray
    n_failed: int
    final_states: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_used(self) -> int:
        return len(self.trajectories) - self.n_failed


def _refine(stepper: _Stepper, rho, dw, dt, noise: NoiseProcess, depth: int):
    """Redo one step as two half steps with a Brownian bridge split of ``dw``.

    Returns ``(state, ok)``.
    """
    if depth > MAX_HALVINGS:
        return rho, False
    z = noise.bridge_normals(dw.shape[-1])
    dw_a = 0.5 * dw + 0.5 * math.sqrt(dt) * z
    dw_b = dw - dw_a
    half = 0.5 * dt
    for part in (dw_a, dw_b):
        cand = stepper.step(rho[None], part[None], half)
        if stepper.min_eigs(cand)[0] < -STEP_POSITIVITY_TOL:
            cand, ok = _refine(stepper, rho, part, half, noise, depth + 1)
            if not ok:
                return rho, False
            rho = cand
        else:
            rho = cand[0]
    return rho, True


def run_ensemble(rho0: np.ndarray, chain: ChainSpec, ctrl: ControlSpec, t_final: float,
                 dt: float = 1e-3, n_traj: int = 200, base_seed: int = 0,
                 record_every: Optional[int] = None, n_records: int = 201,
                 scheme: str = "kraus-rk4",
                 noise_override: Optional[Callable[[int, int], np.ndarray]] = None,
                 keep_homodyne: bool = False) -> EnsembleResult:
    """Simulate ``n_traj`` conditioned trajectories and their mean stored energy.

    Trajectory ``i`` uses seed ``base_seed + i``. ``t_final`` and ``dt`` are
    in units of ``1/Gamma``. A step whose smallest eigenvalue drops below
    ``-1e-4`` is redone as two half steps (Brownian bridge), recursively up
    to four halvings; a trajectory that still fails is flagged, frozen and
    left out of the statistics.

    ``noise_override(traj_index, n_steps)`` may supply the *standard normal*
    draws of shape ``(n_steps, n_sites)`` (test hook).
    """
    if n_traj < 1:
        raise ValidationError("n_traj must be >= 1")
    check_density_matrix(rho0)
    gen = make_generator(chain, ctrl)
    G = ctrl.decay_rate
    h = dt / G
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or not math.isclose(n_steps * dt, t_final, rel_tol=1e-9):
        raise ValidationError(f"t_final={t_final} is not a positive multiple of dt={dt}")
    if record_every is None:
        record_every = max(1, n_steps // max(1, n_records - 1))
    n = chain.n_sites
    stepper = _Stepper(gen, scheme)
    H = gen.H
    e0 = float(np.real(np.trace(H @ rho0)))

    seeds = [base_seed + i for i in range(n_traj)]
    noises = [NoiseProcess(s, h, n) for s in seeds]
    rho = np.broadcast_to(rho0.astype(complex), (n_traj,) + rho0.shape).copy()
    failed = np.zeros(n_traj, dtype=bool)
    rejected = np.zeros(n_traj, dtype=int)

    rec_steps = [0]
    energies = [_expect(H, rho) - e0]
    currents = [] if keep_homodyne else None
    buffer = None
    buf_pos = NOISE_CHUNK
    for step in range(1, n_steps + 1):
        if buf_pos == NOISE_CHUNK:
            if noise_override is not None:
                start = step - 1
                buffer = np.stack([noise_override(i, n_steps)[start:start + NOISE_CHUNK]
                                   for i in range(n_traj)])
            else:
                buffer = np.stack([nz.standard_normals(NOISE_CHUNK) for nz in noises])
            buf_pos = 0
        dW = math.sqrt(h) * buffer[:, buf_pos, :]
        buf_pos += 1
        if keep_homodyne:
            currents.append(stepper.currents_mean(rho) + (dW / h) / stepper.sqrt_eg)
        new = stepper.step(rho, dW, h)
        lam = stepper.min_eigs(new)
        bad = np.nonzero((lam < -STEP_POSITIVITY_TOL) & ~failed)[0]
        for i in bad:
            rejected[i] += 1
            state, ok = _refine(stepper, rho[i], dW[i], h, noises[i], 1)
            if ok:
                new[i] = state
            else:
                log.warning("trajectory seed %d failed positivity at step %d", seeds[i], step)
                failed[i] = True
        new[failed] = rho[failed]
        rho = new
        if step % record_every == 0 or step == n_steps:
            rec_steps.append(step)
            energies.append(_expect(H, rho) - e0)

    times = np.array(rec_steps) * dt
    E = np.array(energies).T  # (n_traj, n_times)
    hom = np.array(currents) if keep_homodyne else None
    trajs = [TrajectoryRecord(seed=seeds[i], times=times, stored_energy=E[i],
                              failed=bool(failed[i]), rejected_steps=int(rejected[i]),
                              homodyne=None if hom is None else hom[:, i, :])
             for i in range(n_traj)]
    good = E[~failed]
    m = good.shape[0]
    # fixed index order keeps the reduction reproducible
    mean = good.sum(axis=0) / m if m else np.full(times.shape, math.nan)
    std = good.std(axis=0, ddof=1) if m > 1 else np.zeros_like(times)
    stderr = std / math.sqrt(m) if m else np.full(times.shape, math.nan)
    return EnsembleResult(times=times, trajectories=trajs, mean=mean, std=std,
                          stderr=stderr, n_failed=int(failed.sum()), final_states=rho)
