import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvox import ovoxel as O


def box(origin, size, n=8, color="red"):
    return O.make_primitive(O.Primitive("box", origin=origin, size=size, color=color), n)


def test_small_box_count():
    assert len(box((0, 0, 0), (2, 2, 2))) == 8


def test_sphere_matches_exhaustive_scan():
    prim = O.Primitive("sphere", center=(8.0, 8.0, 8.0), radius=5.0)
    count = 0
    for x in range(16):
        for y in range(16):
            for z in range(16):
                d2 = (x + 0.5 - 8) ** 2 + (y + 0.5 - 8) ** 2 + (z + 0.5 - 8) ** 2
                count += d2 <= 25.0
    assert len(O.make_primitive(prim, 16)) == count


def test_box_past_grid_is_bounds_error():
    with pytest.raises(O.BoundsError):
        box((1, 0, 0), (8, 2, 2))


def test_canonical_order_and_duplicates():
    a = O.OVoxelAsset(4, [[1, 0, 0], [0, 0, 1], [0, 0, 0]], np.zeros((3, 8)), np.zeros((3, 4)))
    assert a.coords.tolist() == [[0, 0, 0], [1, 0, 0], [0, 0, 1]]
    with pytest.raises(O.VoxelError):
        O.OVoxelAsset(4, [[0, 0, 0], [0, 0, 0]], np.zeros((2, 8)), np.zeros((2, 4)))


def test_identity_translate():
    a = box((1, 2, 3), (3, 2, 2))
    b = O.apply_edit(a, O.EditOp("translate", offset=(0, 0, 0)))
    assert a == b and a.to_bytes() == b.to_bytes()


def test_rotate_z_matches_per_voxel_map(rng):
    n = 8
    coords = np.unique(rng.integers(0, n, size=(20, 3)), axis=0)
    a = O.OVoxelAsset(n, coords, rng.normal(size=(len(coords), 8)), rng.normal(size=(len(coords), 4)))
    b = O.apply_edit(a, O.EditOp("rotate90", axis="z", turns=1))
    want = {(n - 1 - y, x, z) for x, y, z in a.coord_set()}
    assert b.coord_set() == want
    # features travel with their voxel
    feat = {tuple(c): f for c, f in zip(a.coords.tolist(), a.f_shape)}
    for c, f in zip(b.coords.tolist(), b.f_shape):
        x2, y2, z2 = c
        assert np.array_equal(feat[(y2, n - 1 - x2, z2)], f)


def test_difference_with_self_is_empty():
    a = box((0, 0, 0), (3, 3, 3))
    with pytest.raises(O.EmptyAssetError):
        O.difference(a, a)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_boolean_set_identities(s1, s2):
    a = O.make_trajectory(s1, 1, 8).initial
    b = O.make_trajectory(s2, 1, 8).initial
    u = O.union(a, b)
    assert u.coord_set() == a.coord_set() | b.coord_set()
    assert O.union(a, a) == a
    if a.coord_set() & b.coord_set():
        assert O.intersection(a, b).coord_set() == a.coord_set() & b.coord_set()
    if a.coord_set() - b.coord_set():
        assert O.difference(a, b).coord_set() == a.coord_set() - b.coord_set()


def test_instruction_round_trip():
    ops = [
        O.EditOp("translate", offset=(-2, 0, 3)),
        O.EditOp("rotate90", axis="x", turns=3),
        O.EditOp("scale_axis", axis="y", factor=2),
        O.EditOp("frame_step", offset=(0, 1, 0), stride=2),
        O.EditOp("difference", other=O.Primitive("box", origin=(1, 2, 3), size=(2, 2, 1), color="blue")),
    ]
    for op in ops:
        assert O.parse_instruction(op.instruction()) == op
    with pytest.raises(O.VoxelError):
        O.parse_instruction("make it nicer")


def test_trajectory_smoke_and_determinism(tmp_path):
    t = O.make_trajectory(0, 1)
    assert len(t.turns) == 1 and len(t.turns[0].asset) > 0
    a = O.make_trajectory(7, 3, 8)
    b = O.make_trajectory(7, 3, 8)
    assert [s.to_bytes() for s in a.states()] == [s.to_bytes() for s in b.states()]
    assert [x.instruction for x in a.turns] == [x.instruction for x in b.turns]
    a.save(tmp_path / "t.traj")
    back = O.Trajectory.load(tmp_path / "t.traj")
    assert back.caption == a.caption and all(x == y for x, y in zip(back.states(), a.states()))


def test_bad_turn_count():
    with pytest.raises(ValueError):
        O.make_trajectory(0, 0)


def test_replay_oracle_on_1000_trajectories():
    for seed in range(1000):
        traj = O.make_trajectory(seed, 1 + seed % 5, 8)
        got = O.replay(traj)
        assert all(x == y for x, y in zip(got, traj.states())), seed


def test_semantic_replay():
    traj = O.make_semantic_trajectory(3, 2, 8)
    assert all(x == y for x, y in zip(O.replay(traj), traj.states()))
    assert traj.turns[0].asset.coord_set() == traj.initial.coord_set()


def test_render_full_cube_and_single_voxel():
    n = 4
    full = O.OVoxelAsset(n, np.argwhere(np.ones((n, n, n))), np.zeros((n**3, 8)), np.zeros((n**3, 4)))
    img = O.render_image(full)
    assert np.all(img == img[0, 0]) and img[0, 0] == 1.0
    one = O.OVoxelAsset(n, [[1, 2, 3]], np.zeros((1, 8)), np.zeros((1, 4)))
    assert np.count_nonzero(O.render_image(one)) == 1


@pytest.mark.parametrize("axis", "xyz")
def test_render_matches_ray_march(axis):
    a = O.make_trajectory(11, 1, 8).initial
    occ = a.occupancy()
    k = "xyz".index(axis)
    n = a.grid_n
    want = np.zeros((n, n), dtype=np.float32)
    for u in range(n):
        for v in range(n):
            for d in range(n):
                idx = [u, v]
                idx.insert(k, d)
                if occ[tuple(idx)]:
                    want[u, v] = np.float32(1.0 - d / n)
                    break
    assert np.array_equal(O.render_image(a, axis), want)


def test_ovx_round_trip_and_corruption():
    a = O.make_trajectory(5, 1, 16).initial
    raw = a.to_bytes()
    assert O.OVoxelAsset.from_bytes(raw).to_bytes() == raw
    with pytest.raises(O.VoxelError):
        O.OVoxelAsset.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(O.VoxelError):
        O.OVoxelAsset.from_bytes(raw[:-3])


def test_iou():
    a = box((0, 0, 0), (2, 2, 2))
    b = box((1, 0, 0), (2, 2, 2))
    assert O.iou(a, a) == 1.0
    assert O.iou(a, b) == pytest.approx(4 / 12)


def test_templates_restrict_instructions():
    tmpl = ("translate by (2,0,0)", "rotate z by 90")
    for seed in range(30):
        traj = O.make_trajectory(seed, 2, 8, templates=tmpl)
        assert all(t.instruction in tmpl for t in traj.turns)
        assert all(x == y for x, y in zip(O.replay(traj), traj.states()))
