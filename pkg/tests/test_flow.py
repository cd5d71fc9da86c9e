import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resflow.errors import InvalidConfig, NonFiniteState
from resflow.flow import apply_flow, export_frames, flow_forward, flow_trajectories, refine_steps, write_velocity_csv
from resflow.geometry import PointCloud, load_pointcloud
from resflow.network import RELU, BlockParams, NetParams, lipschitz_constant, xavier_init


def constant_block(m=1, v=(1.0, 0.0, 0.0)):
    """Block whose field is v everywhere: W1 = 0, b1 = 1, W2 = I, W3[:, 0] = v."""
    W3 = np.zeros((3, m))
    W3[:, 0] = v
    return BlockParams(np.zeros((m, 3)), np.ones(m), np.eye(m), np.zeros(m), W3)


def test_zero_params_identity(rng):
    X = rng.normal(size=(30, 3))
    fr = flow_forward(PointCloud(X), NetParams.zeros(4, 6))
    for l in range(5):
        assert np.array_equal(fr.states[l], X)
    assert np.array_equal(apply_flow(X, NetParams.zeros(3, 2)), X)


def test_constant_field_one_block():
    p = NetParams((constant_block(),), RELU)
    X = np.array([[0.0, 0, 0], [1, 2, 3]])
    fr = flow_forward(X, p)
    np.testing.assert_array_equal(fr.endpoint, X + [1, 0, 0])
    np.testing.assert_array_equal(apply_flow(np.array([5.0, 5, 5]), p), [6, 5, 5])


def test_constant_field_two_blocks():
    p = NetParams((constant_block(), constant_block()), RELU)
    fr = flow_forward(np.zeros((1, 3)), p)
    np.testing.assert_array_equal(fr.states[1], [[0.5, 0, 0]])
    np.testing.assert_array_equal(fr.endpoint, [[1, 0, 0]])


def test_state_recurrence_exact(rng):
    p = xavier_init(5, 7, 3)
    fr = flow_forward(PointCloud(rng.normal(size=(20, 3))), p)
    assert fr.states.shape == (6, 20, 3) and fr.velocities.shape == (5, 20, 3)
    for l in range(5):
        assert np.array_equal(fr.states[l + 1], fr.states[l] + fr.dt * fr.velocities[l])
    assert len(fr.shapes) == 6


def test_probe_path_is_bit_identical(rng):
    p = xavier_init(4, 9, 1)
    X = rng.normal(size=(15, 3))
    assert np.array_equal(apply_flow(X, p), flow_forward(PointCloud(X), p).endpoint)
    assert np.array_equal(flow_trajectories(X, p)[-1], apply_flow(X, p))


def test_refine_steps():
    p = xavier_init(2, 4, 0)
    assert refine_steps(p, 1) is p
    q = refine_steps(p, 3)
    assert q.L == 6 and q.dt == pytest.approx(1 / 6)
    assert q.blocks[0] is p.blocks[0] and q.blocks[3] is p.blocks[1]
    with pytest.raises(InvalidConfig):
        refine_steps(p, 0)
    z = refine_steps(NetParams.zeros(2, 3), 4)
    X = np.eye(3)
    assert np.array_equal(apply_flow(X, z), X)


@pytest.mark.parametrize("factor", [1, 2, 3, 4, 7])
def test_refine_constant_field(factor):
    p = NetParams((constant_block(2, (0.3, -0.2, 0.1)),) * 2, RELU)
    X = np.array([[0.1, 0.2, 0.3], [-1, 0, 1.0]])
    np.testing.assert_allclose(apply_flow(X, refine_steps(p, factor)), X + [0.3, -0.2, 0.1], atol=1e-12)


def test_non_finite_raises():
    th = BlockParams(np.zeros((1, 3)), [1e200], [[1e200]], [0.0], [[1e200], [0], [0]])
    with pytest.raises(NonFiniteState):
        flow_forward(np.zeros((1, 3)), NetParams((th,), RELU))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["relu", "leaky_relu", "tanh"]))
def test_discrete_bilipschitz_upper_bound(seed, act_name):
    from resflow.network import ActivationKind
    r = np.random.default_rng(seed)
    p = xavier_init(4, 6, seed, ActivationKind(act_name))
    # scale weights up so the bound is not trivially loose
    p = p.replace_blocks([BlockParams(b.W1 * 2, r.normal(size=6), b.W2 * 2, r.normal(size=6), b.W3 * 2)
                          for b in p.blocks])
    C = lipschitz_constant(p)
    X, Y = r.normal(size=(300, 3)), r.normal(size=(300, 3))
    tx, ty = flow_trajectories(X, p), flow_trajectories(Y, p)
    d0 = np.linalg.norm(X - Y, axis=1)
    for l in range(1, p.L + 1):
        ratio = np.linalg.norm(tx[l] - ty[l], axis=1) / d0
        assert np.all(ratio <= np.exp(l * p.dt * C) * (1 + 1e-12))


def test_export_frames_and_velocity_csv(tmp_path, rng):
    p = xavier_init(2, 3, 0)
    X = rng.normal(size=(4, 3))
    fr = flow_forward(PointCloud(X, faces=[[0, 1, 2]]), p)
    paths = export_frames(fr.shapes, tmp_path / "frames")
    assert [p.rsplit("/", 1)[1] for p in paths] == ["frame_000.obj", "frame_001.obj", "frame_002.obj"]
    assert np.array_equal(load_pointcloud(paths[-1]).points, fr.endpoint)
    write_velocity_csv(fr, tmp_path / "v.csv")
    rows = (tmp_path / "v.csv").read_text().splitlines()
    assert rows[0] == "point,block_1,block_2" and len(rows) == 5
    assert float(rows[1].split(",")[2]) == pytest.approx(np.linalg.norm(fr.velocities[1][0]))
