"""Tests for the uncertain-system model layer."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etmpc.errors import (BadBlockStructure, DimensionMismatch,
                          NotPositiveDefinite, ParseError, SchemaError,
                          UnboundedConstraintSet)
from etmpc.model import (BlockProjector, CostWeights, LftSystem, ModelBundle,
                         delta_in_set, delta_in_set_blockwise,
                         disturbance_in_set, load_model, load_model_bundle,
                         save_model, validate_system)


def two_state_system(**overrides):
    """Small fully-featured system: 2 states, 1 input, 2 scalar blocks."""
    fields = dict(
        A=np.array([[1.0, 0.3], [-0.2, 0.9]]),
        B=np.array([[0.0], [0.3]]),
        B_p=np.array([[0.1, 0.0], [0.0, 0.1]]),
        B_w=np.array([[0.05], [0.05]]),
        C_q=np.array([[1.0, 0.0], [0.0, 1.0]]),
        D_u=np.zeros((2, 1)),
        D_w=np.zeros((2, 1)),
        block_sizes=(1, 1),
        P_Delta=np.eye(2),
        P_w=np.eye(1),
        F=np.vstack([np.eye(2), -np.eye(2), np.zeros((2, 2))]) / 2.0,
        G=np.vstack([np.zeros((4, 1)), [[0.5], [-0.5]]]),
    )
    fields.update(overrides)
    return LftSystem(**fields)


def test_valid_system_passes():
    vs = validate_system(two_state_system())
    assert vs.n_x == 2 and vs.n_u == 1 and vs.n_delta == 2 and vs.n_w == 1
    assert vs.projector.ranges == ((0, 1), (1, 2))
    assert np.allclose(vs.L_delta @ vs.L_delta.T, vs.P_Delta)
    assert np.allclose(vs.L_w @ vs.L_w.T, vs.P_w)


def test_validated_arrays_are_write_protected():
    vs = validate_system(two_state_system())
    with pytest.raises(ValueError):
        vs.A[0, 0] = 5.0
    with pytest.raises(ValueError):
        vs.L_delta[0, 0] = 5.0


def test_dimension_mismatch_names_the_pair():
    bad = two_state_system(D_u=np.zeros((2, 2)))  # n_u is 1 per B
    with pytest.raises(DimensionMismatch) as e:
        validate_system(bad)
    assert "D_u" in str(e.value)


def test_indefinite_bound_matrix_rejected():
    bad = two_state_system(P_Delta=np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite) as e:
        validate_system(bad)
    assert "P_Delta" in str(e.value)


def test_asymmetric_bound_matrix_rejected_beyond_tolerance():
    bad = two_state_system(P_Delta=np.array([[1.0, 0.1], [0.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite) as e:
        validate_system(bad)
    assert "symmetric" in str(e.value)


def test_tiny_asymmetry_is_symmetrized():
    P = np.array([[1.0, 1e-13], [0.0, 1.0]])
    vs = validate_system(two_state_system(P_Delta=P))
    assert np.array_equal(vs.P_Delta, vs.P_Delta.T)


def test_unbounded_polytope_rejected():
    # constraints touch only the state, leaving the input free
    bad = two_state_system(F=np.vstack([np.eye(2), -np.eye(2)]),
                           G=np.zeros((4, 1)))
    with pytest.raises(UnboundedConstraintSet):
        validate_system(bad)


def test_nonpositive_block_size_rejected():
    bad = two_state_system(block_sizes=(2, 0))
    with pytest.raises(BadBlockStructure):
        validate_system(bad)


def test_degenerate_channels_validate():
    sys = two_state_system(
        B_p=np.zeros((2, 0)), C_q=np.zeros((0, 2)), D_u=np.zeros((0, 1)),
        D_w=np.zeros((0, 0)), block_sizes=(), P_Delta=np.zeros((0, 0)),
        B_w=np.zeros((2, 0)), P_w=np.zeros((0, 0)))
    vs = validate_system(sys)
    assert vs.n_delta == 0 and vs.n_w == 0
    assert delta_in_set(vs, np.zeros((0, 0)))
    assert disturbance_in_set(vs, np.zeros(0))


def test_block_projector_partition():
    proj = BlockProjector.from_block_sizes((2, 1, 3))
    assert proj.ranges == ((0, 2), (2, 3), (3, 6))
    M = np.arange(36.0).reshape(6, 6)
    blocks = proj.blocks_of(M)
    assert [b.shape for b in blocks] == [(2, 2), (1, 1), (3, 3)]
    assert np.array_equal(blocks[1], [[M[2, 2]]])


def test_cost_weights_validation():
    w = CostWeights(np.eye(2), np.eye(1)).validated(2, 1)
    assert np.array_equal(w.Q_x, np.eye(2))
    with pytest.raises(NotPositiveDefinite):
        CostWeights(np.diag([1.0, -1.0]), np.eye(1)).validated(2, 1)
    with pytest.raises(DimensionMismatch):
        CostWeights(np.eye(3), np.eye(1)).validated(2, 1)


def test_disturbance_membership():
    vs = validate_system(two_state_system(P_w=np.array([[4.0]])))
    assert disturbance_in_set(vs, [0.5])
    assert not disturbance_in_set(vs, [0.51])


def test_offblock_entries_fail_blockwise_test():
    vs = validate_system(two_state_system())
    D = np.array([[0.5, 0.4], [0.0, 0.5]])
    assert not delta_in_set_blockwise(vs, D)


# --- sampled equivalence of the two membership tests ----------------------


def _member_case(seed: int):
    """Random system with block-conformal bound matrix plus a candidate

    perturbation near the membership boundary."""
    r = np.random.default_rng(seed)
    sizes = tuple(int(s) for s in r.integers(1, 3, size=int(r.integers(1, 4))))
    nd = sum(sizes)
    Pblocks = []
    for s in sizes:
        Mh = r.normal(size=(s, s))
        Pblocks.append(Mh @ Mh.T + 0.5 * np.eye(s))
    P = np.zeros((nd, nd))
    lo = 0
    for Pb in Pblocks:
        s = Pb.shape[0]
        P[lo:lo + s, lo:lo + s] = Pb
        lo += s
    D = np.zeros((nd, nd))
    lo = 0
    for s in sizes:
        D[lo:lo + s, lo:lo + s] = r.normal(size=(s, s))
        lo += s
    # rescale so the largest block generalized singular value is near 1
    M = D.T @ P @ D
    top = float(np.linalg.eigvalsh(M)[-1])
    if top > 0.0:
        D *= float(r.uniform(0.8, 1.2)) / np.sqrt(top)
    sys = two_state_system(
        B_p=np.zeros((2, nd)), C_q=np.zeros((nd, 2)), D_u=np.zeros((nd, 1)),
        D_w=np.zeros((nd, 1)), block_sizes=sizes, P_Delta=P)
    return validate_system(sys), D


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_membership_tests_agree_for_block_diagonal(seed):
    vs, D = _member_case(seed)
    m_full = delta_in_set(vs, D)
    m_block = delta_in_set_blockwise(vs, D)
    # skip candidates sitting exactly on the boundary within test noise
    nd = vs.n_delta
    M = D.T @ vs.P_Delta @ D - np.eye(nd)
    if abs(float(np.linalg.eigvalsh(M)[-1])) < 1e-9:
        return
    assert m_full == m_block


# --- persistence ----------------------------------------------------------


def roundtrip(tmp_path, bundle):
    path = tmp_path / "model.json"
    save_model(bundle, path)
    return path, load_model_bundle(path)


def test_save_load_roundtrip_bit_exact(tmp_path):
    r = np.random.default_rng(5)
    sys = two_state_system(
        A=r.normal(size=(2, 2)) * np.pi,
        name="roundtrip", sampling_time=0.3)
    bundle = ModelBundle(sys, CostWeights(np.eye(2) * (1 / 3), np.eye(1)))
    path, back = roundtrip(tmp_path, bundle)
    for key in ("A", "B", "B_p", "B_w", "C_q", "D_u", "D_w",
                "P_Delta", "P_w", "F", "G"):
        assert np.array_equal(getattr(back.system, key), getattr(sys, key)), key
    assert back.system.block_sizes == sys.block_sizes
    assert back.system.name == "roundtrip"
    assert back.system.sampling_time == 0.3
    assert np.array_equal(back.weights.Q_x, np.eye(2) * (1 / 3))
    assert np.array_equal(load_model(path).A, sys.A)


def test_missing_field_names_it(tmp_path):
    bundle = ModelBundle(two_state_system(), CostWeights(np.eye(2), np.eye(1)))
    path = tmp_path / "model.json"
    save_model(bundle, path)
    doc = json.loads(path.read_text())
    del doc["P_w"]
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as e:
        load_model_bundle(path)
    assert e.value.field == "P_w"


def test_unknown_field_rejected(tmp_path):
    bundle = ModelBundle(two_state_system(), CostWeights(np.eye(2), np.eye(1)))
    path = tmp_path / "model.json"
    save_model(bundle, path)
    doc = json.loads(path.read_text())
    doc["extra"] = 1
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as e:
        load_model_bundle(path)
    assert e.value.field == "extra"


def test_wrong_format_tag_rejected(tmp_path):
    bundle = ModelBundle(two_state_system(), CostWeights(np.eye(2), np.eye(1)))
    path = tmp_path / "model.json"
    save_model(bundle, path)
    doc = json.loads(path.read_text())
    doc["format"] = "etmpc-model/999"
    path.write_text(json.dumps(doc))
    with pytest.raises(SchemaError) as e:
        load_model_bundle(path)
    assert e.value.field == "format"


def test_parse_error_carries_location(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"format": "etmpc-model/1",\n  "A": [[1, ]]\n}')
    with pytest.raises(ParseError) as e:
        load_model_bundle(path)
    assert ":2:" in e.value.location


def test_loaded_degenerate_channels(tmp_path):
    sys = two_state_system(
        B_p=np.zeros((2, 0)), C_q=np.zeros((0, 2)), D_u=np.zeros((0, 1)),
        D_w=np.zeros((0, 0)), block_sizes=(), P_Delta=np.zeros((0, 0)),
        B_w=np.zeros((2, 0)), P_w=np.zeros((0, 0)))
    bundle = ModelBundle(sys, CostWeights(np.eye(2), np.eye(1)))
    _, back = roundtrip(tmp_path, bundle)
    assert back.system.n_delta == 0 and back.system.n_w == 0
