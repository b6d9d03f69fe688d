"""Flows and generating functions against closed-form oracles."""
from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equimorse.config import rotation, standard_symplectic, symplectic_residual
from equimorse.errors import (
    ConfigurationError,
    DomainError,
    StiffnessError,
    ValidationError,
)
from equimorse.hamflow import (
    FlowMap,
    GeneratingFunction,
    HamiltonianGerm,
    adapted_N,
    check_gen1,
    eval_S,
    hessian_S_at_zero,
    integrate_flow,
    linearized_path,
    steps_graph_positive,
    substep_jacobians_at_zero,
    zero_jacobian_path,
)

J2 = standard_symplectic(1)


def hyperbolic_germ():
    return HamiltonianGerm.make(1, [(math.log(2.0), (1, 1))])


def quartic_germ(sign=-1.0):
    # sign * |z|^4 / 4; the flow rotates each circle |z| = r by angle sign * r^2 t
    s = sign / 4.0
    return HamiltonianGerm.make(1, [(s, (4, 0)), (2 * s, (2, 2)), (s, (0, 4))])


def cos_germ(c=0.1 * math.pi):
    return HamiltonianGerm.make(1, [(c, (2, 0), "cos", 1), (c, (0, 2), "cos", 1)])


def test_flow_rotation_catalog_orientation():
    g = HamiltonianGerm.rotation(0.3)
    phi, dphi = integrate_flow(g, 0.0, 1.0, [0.1, 0.0])
    assert np.allclose(dphi, rotation(0.6 * math.pi), atol=1e-9)
    assert np.allclose(phi, rotation(0.6 * math.pi) @ [0.1, 0.0], atol=1e-10)


def test_flow_positive_quadratic_rotates_clockwise():
    g = HamiltonianGerm.make(1, [(0.3 * math.pi, (2, 0)), (0.3 * math.pi, (0, 2))])
    _, dphi = integrate_flow(g, 0.0, 1.0, [0.1, 0.0])
    assert np.allclose(dphi, rotation(-0.6 * math.pi), atol=1e-9)


def test_flow_zero_germ_is_identity():
    g = HamiltonianGerm.zero(1)
    phi, dphi = integrate_flow(g, 0.0, 1.0, [0.2, -0.1])
    assert np.array_equal(phi, [0.2, -0.1])
    assert np.array_equal(dphi, np.eye(2))


def test_flow_quartic_origin_and_offset():
    g = quartic_germ()
    phi, dphi = integrate_flow(g, 0.0, 1.0, [0.0, 0.0])
    assert np.allclose(phi, 0.0, atol=1e-12)
    assert np.allclose(dphi, np.eye(2), atol=1e-10)
    # closed form at z = (r, 0): phi = R(r^2 t) z, dphi = R(theta) (I + J0 z (2z)^T t)
    z = np.array([0.2, 0.0])
    theta = 0.04
    phi, dphi = integrate_flow(g, 0.0, 1.0, z)
    assert np.allclose(phi, rotation(theta) @ z, atol=1e-10)
    expected = rotation(theta) @ (np.eye(2) + J2 @ np.outer(z, 2 * z))
    assert np.allclose(dphi, expected, atol=1e-9)


def test_flow_hyperbolic():
    g = hyperbolic_germ()
    phi, dphi = integrate_flow(g, 0.0, 1.0, [0.1, 0.2])
    assert np.allclose(phi, [0.2, 0.1], atol=1e-10)
    assert np.allclose(dphi, np.diag([2.0, 0.5]), atol=1e-9)


def test_flow_time_dependent_oracle():
    # H = c cos(2 pi t) |z|^2 integrates to the rotation by -c sin(2 pi t) / pi
    Phi = zero_jacobian_path(cos_germ(), 1.0)
    for t in (0.25, 0.4, 1.0):
        assert np.allclose(Phi(t), rotation(-0.1 * math.sin(2 * math.pi * t)), atol=1e-9)
    g = HamiltonianGerm.make(1, [(0.1 * math.pi, (2, 0), "sin", 1),
                                 (0.1 * math.pi, (0, 2), "sin", 1)])
    _, dphi = integrate_flow(g, 0.0, 0.5, [0.0, 0.0])
    assert np.allclose(dphi, rotation(-0.2), atol=1e-9)


def test_flow_composition():
    for g in (quartic_germ(), cos_germ()):
        z = np.array([0.15, 0.1])
        mid, _ = integrate_flow(g, 0.0, 0.25, z)
        end_two, _ = integrate_flow(g, 0.25, 0.6, mid)
        end_one, _ = integrate_flow(g, 0.0, 0.6, z)
        assert np.allclose(end_two, end_one, atol=1e-8)


def test_flow_backwards_inverts():
    g = quartic_germ()
    z = np.array([0.1, -0.2])
    fwd, _ = integrate_flow(g, 0.0, 1.0, z)
    back, _ = integrate_flow(g, 1.0, 0.0, fwd)
    assert np.allclose(back, z, atol=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.2, 0.2), st.floats(-0.2, 0.2))
def test_flow_symplecticity(zx, zy):
    for g in (quartic_germ(), cos_germ(), hyperbolic_germ()):
        _, dphi = integrate_flow(g, 0.0, 1.0, [zx, zy])
        assert symplectic_residual(dphi) < 1e-7


def test_trust_region_errors():
    with pytest.raises(DomainError):
        integrate_flow(hyperbolic_germ(), 0.0, 1.0, [0.6, 0.0])
    with pytest.raises(DomainError):
        integrate_flow(hyperbolic_germ(), 0.0, 2.0, [0.45, 0.0])


def test_stiffness_error_on_blowup():
    g = HamiltonianGerm.make(1, [(1.0, (2, 1))])  # xdot = x^2 blows up at t = 1/x0
    with pytest.raises(StiffnessError):
        integrate_flow(g, 0.0, 20.0, [0.1, 0.0], radius=np.inf)


def test_germ_validation():
    with pytest.raises(ConfigurationError):
        HamiltonianGerm.make(1, [(1.0, (1, 0))])
    with pytest.raises(ConfigurationError):
        HamiltonianGerm.make(1, [(1.0, (2, 0, 0))])
    with pytest.raises(ConfigurationError):
        HamiltonianGerm.make(1, [(1.0, (2, 0), "tan")])


def test_germ_json_round_trip():
    for g in (HamiltonianGerm.rotation(0.3), cos_germ(), HamiltonianGerm.zero(1)):
        assert HamiltonianGerm.from_json(g.to_json()) == g
    with pytest.raises(ConfigurationError):
        HamiltonianGerm.from_json({"n": 1})


def test_check_gen1_examples():
    assert check_gen1(FlowMap(HamiltonianGerm.zero(1), 0.0, 1.0))
    assert check_gen1(FlowMap(HamiltonianGerm.rotation(0.3), 0.0, 1.0))
    assert not check_gen1(FlowMap(HamiltonianGerm.rotation(0.25), 0.0, 1.0))


def test_adapted_N_examples():
    assert adapted_N(HamiltonianGerm.rotation(0.3), 1)
    assert adapted_N(HamiltonianGerm.zero(1), 1)
    assert not adapted_N(HamiltonianGerm.rotation(3.0), 1)


def test_steps_graph_positive_quarter_turn_rule():
    rot03, rot07 = HamiltonianGerm.rotation(0.3), HamiltonianGerm.rotation(0.7)
    assert not steps_graph_positive(rot03, 1)
    assert steps_graph_positive(rot03, 2)
    assert steps_graph_positive(rot03, 3)
    assert not steps_graph_positive(rot07, 1)
    assert not steps_graph_positive(rot07, 2)
    assert steps_graph_positive(rot07, 3)
    assert steps_graph_positive(HamiltonianGerm.zero(1), 1)
    assert steps_graph_positive(hyperbolic_germ(), 1)
    assert steps_graph_positive(quartic_germ(), 1)


def test_hessian_S_rotation_closed_form():
    gf = GeneratingFunction(FlowMap(HamiltonianGerm.rotation(0.3), 0.0, 1.0))
    c, s = math.cos(0.6 * math.pi), math.sin(0.6 * math.pi)
    expected = np.array([[-s, 1 - c], [1 - c, -s]]) / c
    H = hessian_S_at_zero(gf)
    assert np.allclose(H, expected, atol=1e-9)
    assert np.allclose(gf.hessian_at([0.0], [0.0]), expected, atol=1e-9)


def test_hessian_S_lemma_identity_hyperbolic():
    gf = GeneratingFunction(FlowMap(hyperbolic_germ(), 0.0, 1.0))
    M = gf.psi.jacobian_at_zero
    H = hessian_S_at_zero(gf)
    dT = np.zeros((2, 2))
    dT[0, 0] = 1.0
    dT[1, :] = M[1, :]
    assert np.abs((M - np.eye(2)) - (-J2) @ H @ dT).max() < 1e-10
    assert np.allclose(gf.hessian_at([0.0], [0.0]), H, atol=1e-9)


def test_hessian_S_identity_and_kernel_dims():
    for germ, expected_dim in ((HamiltonianGerm.zero(1), 2), (quartic_germ(), 2),
                               (HamiltonianGerm.rotation(0.3), 0), (hyperbolic_germ(), 0)):
        gf = GeneratingFunction(FlowMap(germ, 0.0, 1.0))
        H = hessian_S_at_zero(gf)
        M = gf.psi.jacobian_at_zero
        sv_h = np.linalg.svdvals(H)
        sv_m = np.linalg.svdvals(M - np.eye(2))
        assert int(np.sum(sv_h < 1e-8)) == int(np.sum(sv_m < 1e-8)) == expected_dim


def test_gen1_violation_rejected_at_construction():
    with pytest.raises(ValidationError):
        GeneratingFunction(FlowMap(HamiltonianGerm.rotation(0.25), 0.0, 1.0))


def test_eval_S_zero_germ():
    gf = GeneratingFunction(FlowMap(HamiltonianGerm.zero(1), 0.0, 1.0))
    S, g1, g2 = eval_S(gf, [0.2], [-0.1])
    assert S == 0.0
    assert np.allclose(g1, 0.0) and np.allclose(g2, 0.0)


def test_eval_S_quadratic_form_matches_hessian():
    gf = GeneratingFunction(FlowMap(HamiltonianGerm.rotation(0.3), 0.0, 1.0))
    H = hessian_S_at_zero(gf)
    # the fiber point y = (Y - x sin) / cos must stay inside the trust region
    for x, Y in ((0.2, 0.1), (-0.1, -0.05), (0.15, 0.12)):
        S, g1, g2 = eval_S(gf, [x], [Y])
        w = np.array([x, Y])
        assert abs(S - 0.5 * w @ H @ w) < 1e-8
        assert np.allclose(np.concatenate([g1, g2]), H @ w, atol=1e-8)


@settings(max_examples=8, deadline=None)
@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_gen2_round_trip_quartic(x, Y):
    gf = GeneratingFunction(FlowMap(quartic_germ(), 0.0, 1.0))
    g1, g2 = gf.gradient([x], [Y])
    y = Y + g1
    X = x + g2
    phi, _ = integrate_flow(quartic_germ(), 0.0, 1.0, np.concatenate([[x], y]))
    assert np.allclose(phi, np.concatenate([X, [Y]]), atol=1e-8)


def test_eval_S_path_independence():
    gf = GeneratingFunction(FlowMap(quartic_germ(), 0.0, 1.0))
    x, Y = 0.2, 0.1
    S, _, _ = eval_S(gf, [x], [Y])
    nodes, weights = np.polynomial.legendre.leggauss(32)
    s_vals = 0.5 * (nodes + 1.0)
    leg1 = 0.5 * sum(w * (gf.gradient([s * x], [0.0])[0] @ [x]) for w, s in zip(weights, s_vals))
    leg2 = 0.5 * sum(w * (gf.gradient([x], [s * Y])[1] @ [Y]) for w, s in zip(weights, s_vals))
    assert abs(S - (leg1 + leg2)) < 1e-8


def test_substep_jacobians():
    g = HamiltonianGerm.rotation(0.3)
    steps = substep_jacobians_at_zero(g, 5)
    assert len(steps) == 5
    for M in steps:
        assert np.allclose(M, rotation(0.12 * math.pi), atol=1e-9)


def test_linearized_path_feeds_index():
    from equimorse.spindex import cz_index

    assert cz_index(linearized_path(HamiltonianGerm.rotation(0.3))) == 1
    path = linearized_path(HamiltonianGerm.rotation(0.3), periods=4)
    assert path.periods == 4 and path.germ is not None
    assert cz_index(path) == 3
