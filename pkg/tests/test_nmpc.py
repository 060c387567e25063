"""Closed-loop scheme tests.

Covers: scheme coincidence at M=1, the zero-noise fixed point on a
consistent reference, Riccati and re-opt oracles for the corrections,
clamping and fallback paths, failure handling, and trace bookkeeping.
"""

import contextlib
import dataclasses

import numpy as np
import pytest

from carnmpc.dynamics import KinematicCarModel, LinearModel
from carnmpc.nlp import MaxIterations
from carnmpc.nmpc import (
    ACTION_FALLBACK,
    ACTION_REOPT,
    ACTION_REUSE,
    ACTION_SENS_UPDATE,
    ACTION_SOLVE,
    ACTIONS,
    SCHEMES,
    ClosedLoopError,
    SchemeConfig,
    make_controller,
    run_scheme,
)

H = 0.3


@pytest.fixture(scope="module")
def oval():
    from carnmpc.reference import synth_track

    return synth_track("oval", duration=36.0, h=H, speed=15.0, radius=40.0)


class IndexedNoise:
    """Uniform draws indexed by step number so schemes share realizations."""

    def __init__(self, seed, n_comp, comps=None, amp=0.05, n_steps=600):
        rng = np.random.default_rng(seed)
        self.draws = rng.uniform(-amp, amp, size=(n_steps, n_comp))
        self.comps = None if comps is None else list(comps)

    def measure(self, k, x):
        out = np.array(x, dtype=float)
        if self.comps is None:
            out += self.draws[k]
        else:
            out[self.comps] += self.draws[k, : len(self.comps)]
        return out


class ZeroRef:
    """All-zero reference on a unit grid for linear stub plants."""

    def __init__(self, n, h, nx, nu):
        self.h = h
        self.states = np.zeros((n, nx))
        self.controls = np.zeros((n, nu))
        self.n_samples = n


@contextlib.contextmanager
def controller(cfg, ref, model=None, V=None, W=None):
    ctl = make_controller(cfg, ref, model, V, W)
    try:
        yield ctl
    finally:
        ctl.close()


def riccati_first_gain(A, B, V, W, n):
    """First-control gain K with u* = -K x for an n-stage sum of
    x'Vx + u'Wu (state cost on stages 0..n-1, no terminal cost)."""
    P = np.zeros_like(V)
    K = np.zeros((B.shape[1], A.shape[0]))
    for _ in range(n):
        K = np.linalg.solve(W + B.T @ P @ B, B.T @ P @ A)
        P = V + A.T @ P @ A - A.T @ P @ B @ K
    return K


def cfg_for(scheme, M=3, **kw):
    return SchemeConfig(scheme, N=11, M=1 if scheme == "classic" else M, **kw)


# -- scheme coincidence ------------------------------------------------------


def test_m1_zero_noise_coincidence(oval):
    x0 = oval.states[0] + np.array([0.0, 0.5, 0.0, 0.0, 0.0])
    traces = [
        run_scheme(SchemeConfig(s, N=11, M=1), None, None, oval, 14.7, x0=x0) for s in SCHEMES
    ]
    for tr in traces[1:]:
        assert np.abs(tr.controls - traces[0].controls).max() <= 1e-9
        assert np.abs(tr.states - traces[0].states).max() <= 1e-9


def test_m1_shared_noise_coincidence(oval):
    x0 = oval.states[0] + np.array([0.0, 0.5, 0.0, 0.0, 0.0])
    traces = [
        run_scheme(SchemeConfig(s, N=11, M=1), None, IndexedNoise(42, 3, comps=(0, 1, 3)), oval, 14.7, x0=x0)
        for s in SCHEMES
    ]
    for tr in traces[1:]:
        assert np.abs(tr.controls - traces[0].controls).max() <= 1e-9
        assert np.abs(tr.states - traces[0].states).max() <= 1e-9


def test_noise_displaces_the_plant(oval):
    class Kick:
        def measure(self, k, x):
            out = np.array(x, dtype=float)
            if k == 3:
                out[1] += 0.4
            return out

    kicked = run_scheme(cfg_for("classic"), None, Kick(), oval, 2.1)
    clean = run_scheme(cfg_for("classic"), None, None, oval, 2.1)
    # the disturbance enters the state: step 3 starts 0.4 m off and the
    # offset persists into step 4 (one step of steering cannot remove it)
    assert abs(kicked.states[3, 1] - clean.states[3, 1] - 0.4) <= 1e-12
    assert abs(kicked.states[4, 1] - clean.states[4, 1]) > 0.1


# -- zero-noise fixed point --------------------------------------------------


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_noise_on_reference(oval, scheme):
    tr = run_scheme(cfg_for(scheme), None, None, oval, 29.7)
    n = tr.steps
    assert n == 99
    assert np.abs(tr.controls - oval.controls[:n]).max() <= 1e-6
    assert np.abs(tr.states - oval.states[: n + 1]).max() <= 1e-6
    err = tr.states[:n, [0, 1, 3]] - oval.states[:n, [0, 1, 3]]
    assert float(np.sqrt(tr.h * np.sum(err**2))) <= 1e-6

    if scheme == "classic":
        assert tr.full_solves == n and tr.reuses == 0
    else:
        assert tr.full_solves == 33
        # plan states are re-rolled through the model, so the noise-free
        # plant retraces them exactly and nothing triggers inside a shift
        assert max(r.deviation_norm for r in tr.records) == 0.0
        if scheme == "multistep-reopt":
            assert tr.reopt_solves == 0 and tr.reuses == 66
        if scheme == "multistep-sens":
            assert tr.sens_updates == 66 and tr.fallbacks == 0


def test_sens_zero_deviation_reproduces_plan(oval):
    tr_ms = run_scheme(cfg_for("multistep"), None, None, oval, 29.7)
    tr_se = run_scheme(cfg_for("multistep-sens"), None, None, oval, 29.7)
    # zero deviation makes every correction exactly zero
    assert np.abs(tr_ms.controls - tr_se.controls).max() <= 1e-12


# -- linear-quadratic oracles ------------------------------------------------

A_LQ = np.array([[1.0, 0.1], [0.0, 1.0]])
B_LQ = np.array([[0.005], [0.1]])
V_LQ = np.diag([1.0, 0.1])
W_LQ = np.array([[0.01]])


def test_classic_equals_riccati_feedback():
    model = LinearModel(A_LQ, B_LQ)
    ref = ZeroRef(40, 1.0, 2, 1)
    N = 6
    tr = run_scheme(
        SchemeConfig("classic", N=N, M=1), model, None, ref, 20.0,
        x0=np.array([0.7, -0.4]), V=V_LQ, W=W_LQ,
    )
    K = riccati_first_gain(A_LQ, B_LQ, V_LQ, W_LQ, N)
    expected = -(tr.states[:-1] @ K.T)
    assert np.abs(tr.controls - expected).max() <= 1e-6


def test_lq_sens_update_equals_reopt():
    # quadratic problem: the optimal control is linear in the state, so the
    # first-order correction is exact and matches re-optimization
    model = LinearModel(A_LQ, B_LQ)
    ref = ZeroRef(60, 1.0, 2, 1)
    kw = dict(x0=np.array([0.7, -0.4]), V=V_LQ, W=W_LQ)
    noise = IndexedNoise(5, 2, amp=0.05)
    tr_r = run_scheme(SchemeConfig("multistep-reopt", N=6, M=3), model, noise, ref, 30.0, **kw)
    tr_s = run_scheme(SchemeConfig("multistep-sens", N=6, M=3), model, noise, ref, 30.0, **kw)
    assert np.abs(tr_r.controls - tr_s.controls).max() <= 1e-8
    assert tr_s.sens_updates == 20 and tr_s.fallbacks == 0
    assert tr_r.reopt_solves == 20


# -- correction quality against the re-opt oracle ----------------------------


def test_sens_correction_error_is_second_order(oval):
    x0 = oval.states[0] + np.array([0.0, 0.8, 0.0, 0.0, 0.0])
    diffs = []
    for eps in (0.08, 0.04, 0.02, 0.01):
        with controller(cfg_for("multistep-sens"), oval) as cs, controller(
            cfg_for("multistep-reopt"), oval
        ) as cr:
            cs.step(0, x0)
            cr.step(0, x0)
            assert np.abs(cs.anchor.states[1] - cr.latest.states[1]).max() <= 1e-9
            x1 = cs.anchor.states[1] + np.array([0.0, eps, 0.0, 0.0, 0.0])
            u_s, rec_s = cs.step(1, x1)
            u_r, rec_r = cr.step(1, x1)
            assert rec_s.action == ACTION_SENS_UPDATE
            assert rec_r.action == ACTION_REOPT
            diffs.append(float(np.linalg.norm(u_s - u_r)))
    for big, small in zip(diffs, diffs[1:]):
        assert big / small >= 3.5, diffs


def test_sens_update_clamps_to_control_bounds(oval):
    cfg = cfg_for("multistep-sens", sens_fallback_threshold=50.0)
    x0 = oval.states[0] + np.array([0.0, 0.8, 0.0, 0.0, 0.0])
    with controller(cfg, oval) as cs:
        cs.step(0, x0)
        anchor = cs.anchor
        # large enough that the linear extrapolation crosses the u1 bound; the
        # pinned u2 row is exactly zero, so it can never leave its bound
        delta = np.array([0.0, 8.0, 0.0, 0.0, 0.0])
        u, rec = cs.step(1, anchor.states[1] + delta)
        assert rec.action == ACTION_SENS_UPDATE
        raw = anchor.controls[1] + anchor.gains.gains[0] @ delta
        lo, hi = anchor.sol.ocp.control_lower, anchor.sol.ocp.control_upper
        assert np.any((raw < lo) | (raw > hi)), "deviation too small to saturate"
        assert np.all(u >= lo - 1e-12) and np.all(u <= hi + 1e-12)
        assert np.allclose(u, np.clip(raw, lo, hi), atol=1e-12)


def test_sens_falls_back_past_threshold(oval):
    with controller(cfg_for("multistep-sens"), oval) as cs:
        cs.step(0, oval.states[0])
        anchor = cs.anchor
        x1 = anchor.states[1] + np.array([0.0, 1.0, 0.0, 0.0, 0.0])  # dev 1.0 > 0.5
        u, rec = cs.step(1, x1)
        assert rec.action == ACTION_FALLBACK
        assert rec.kkt_residual <= 1e-8  # fell back to a real shrinking-horizon solve
        # the shift now follows the re-solved plan; on it, nothing re-triggers
        u2, rec2 = cs.step(2, cs.latest.states[1])
        assert rec2.action == ACTION_REUSE
        assert np.abs(u2 - cs.latest.controls[1]).max() == 0.0


def test_reopt_every_step_when_deviation_gate_off(oval):
    cfg = SchemeConfig("multistep-reopt", N=11, M=3, reopt_on_deviation_only=False)
    tr = run_scheme(cfg, None, None, oval, 14.7)
    assert tr.full_solves == 17 and tr.reopt_solves == 32 and tr.reuses == 0


# -- failure handling ---------------------------------------------------------


def test_fatal_failure_attaches_partial_trace(oval, monkeypatch):
    import carnmpc.nmpc as nmpc_mod

    def always_fail(*a, **kw):
        raise MaxIterations("stub: no convergence")

    monkeypatch.setattr(nmpc_mod, "solve_ocp", always_fail)
    with pytest.raises(ClosedLoopError) as ei:
        run_scheme(cfg_for("classic"), None, None, oval, 14.7)
    trace = ei.value.trace
    assert trace is not None and trace.steps == 0
    assert trace.states.shape == (1, 5)


def test_transient_failure_holds_previous_control(oval):
    import carnmpc.nmpc as nmpc_mod

    real = nmpc_mod.solve_ocp
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 3:
            raise MaxIterations("stub: transient")
        return real(*a, **kw)

    try:
        nmpc_mod.solve_ocp = flaky
        tr = run_scheme(cfg_for("classic"), None, None, oval, 2.1)
    finally:
        nmpc_mod.solve_ocp = real
    assert tr.steps == 7
    rec = tr.records[2]
    assert rec.action == ACTION_FALLBACK and np.isnan(rec.kkt_residual)
    assert np.abs(rec.applied_control - tr.controls[1]).max() == 0.0
    assert tr.full_solves == 6


# -- bookkeeping ---------------------------------------------------------------


def test_noisy_action_accounting(oval):
    noise = IndexedNoise(11, 3, comps=(0, 1, 3))
    x0 = oval.states[0] + np.array([0.0, 2.0, 0.0, 0.0, 0.0])
    counts = {}
    for scheme in SCHEMES:
        tr = run_scheme(cfg_for(scheme), None, noise, oval, 29.7, x0=x0)
        assert tr.steps == 99
        assert [r.k for r in tr.records] == list(range(99))
        assert all(r.action in ACTIONS for r in tr.records)
        solved = [r for r in tr.records if not np.isnan(r.kkt_residual)]
        assert all(r.kkt_residual <= 1e-8 for r in solved)
        counts[scheme] = tr

    assert counts["classic"].full_solves == 99 and counts["classic"].reuses == 0
    assert counts["multistep"].full_solves == 33 and counts["multistep"].reuses == 66
    tr = counts["multistep-reopt"]
    assert tr.full_solves == 33 and tr.reopt_solves == 66  # noise always trips the gate
    tr = counts["multistep-sens"]
    assert tr.full_solves == 33
    assert tr.sens_updates >= 55
    assert tr.sens_updates + tr.fallbacks + tr.reopt_solves + tr.reuses == 66


def test_trace_is_immutable(oval):
    tr = run_scheme(cfg_for("multistep"), None, None, oval, 2.1)
    for arr in (tr.states, tr.controls):
        assert not arr.flags.writeable
    assert isinstance(tr.records, tuple)
    with pytest.raises(dataclasses.FrozenInstanceError):
        tr.h = 0.1


# -- validation ----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="unknown scheme"):
        SchemeConfig("fancy")
    with pytest.raises(ValueError, match="M must be 1"):
        SchemeConfig("classic", M=2)
    with pytest.raises(ValueError, match="outside"):
        SchemeConfig("multistep", N=11, M=12)
    with pytest.raises(ValueError, match="outside"):
        SchemeConfig("multistep", M=0)
    with pytest.raises(ValueError, match="positive"):
        SchemeConfig("multistep-sens", M=3, sens_fallback_threshold=0.0)


def test_run_scheme_rejects_off_grid_horizon(oval):
    with pytest.raises(ValueError, match="multiple"):
        run_scheme(cfg_for("classic"), None, None, oval, 1.0)
    with pytest.raises(ValueError, match="multiple"):
        run_scheme(cfg_for("classic"), None, None, oval, 0.0)
