import collections

import numpy as np
import pytest

from meshcontact import autodiff as ad
from meshcontact import mesh
from meshcontact.errors import ConfigError, ContractError, ShapeError


@pytest.fixture(scope="module")
def template():
    return mesh.build_template(mesh.MeshConfig(), rng_seed=7)


def bfs_reachable(n, edges):
    adj = collections.defaultdict(list)
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = {0}
    queue = collections.deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


def floyd_warshall(n, edges, lengths):
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (u, v), w in zip(edges, lengths):
        d[u, v] = min(d[u, v], w)
        d[v, u] = min(d[v, u], w)
    for k in range(n):
        d = np.minimum(d, d[:, k : k + 1] + d[k : k + 1, :])
    return d


class TestBuildTemplate:
    def test_desk_extents(self, template):
        assert template.v_full == 386
        assert template.v_coarse == 98
        assert template.n_joints == 8

    def test_deterministic(self, template):
        again = mesh.build_template(mesh.MeshConfig(), rng_seed=7)
        assert np.array_equal(template.rest_vertices, again.rest_vertices)
        assert np.array_equal(template.faces, again.faces)
        assert np.array_equal(template.upsample_matrix, again.upsample_matrix)
        assert np.array_equal(template.edge_lengths, again.edge_lengths)

    def test_row_sums(self, template):
        assert np.abs(template.upsample_matrix.sum(axis=1) - 1.0).max() <= 1e-9
        assert np.abs(template.joint_regressor.sum(axis=1) - 1.0).max() <= 1e-9

    def test_connected_by_bfs_oracle(self, template):
        assert bfs_reachable(template.v_full, template.edges)

    def test_no_degenerate_faces(self, template):
        v = template.rest_vertices
        f = template.faces
        areas = 0.5 * np.linalg.norm(
            np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
        )
        assert areas.min() > 1e-6

    def test_face_indices_in_range(self, template):
        assert template.faces.min() >= 0
        assert template.faces.max() < template.v_full

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            mesh.build_template(mesh.MeshConfig(joints=1), rng_seed=0)
        with pytest.raises(ConfigError):
            mesh.build_template(mesh.MeshConfig(v_full=387), rng_seed=0)
        with pytest.raises(ConfigError):
            mesh.build_template(mesh.MeshConfig(v_coarse=386), rng_seed=0)


class TestUpsample:
    def test_constant_point_preserved(self, template):
        coarse = np.full((template.v_coarse, 3), 3.25)
        full = mesh.upsample(ad.Tensor(coarse), template)
        assert np.abs(full.data - 3.25).max() <= 1e-12

    def test_rest_pose_reconstruction_within_recorded_residual(self, template):
        full = mesh.upsample(ad.Tensor(template.coarse_rest_vertices), template)
        err = np.abs(full.data - template.rest_vertices).max()
        assert err <= template.upsample_residual + 1e-12

    def test_linearity(self, template):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(template.v_coarse, 3))
        b = rng.normal(size=(template.v_coarse, 3))
        lhs = mesh.upsample(ad.Tensor(a + b), template).data
        rhs = mesh.upsample(ad.Tensor(a), template).data + mesh.upsample(ad.Tensor(b), template).data
        assert np.abs(lhs - rhs).max() <= 1e-12

    def test_shape_mismatch(self, template):
        with pytest.raises(ShapeError):
            mesh.upsample(ad.Tensor(np.zeros((5, 3))), template)

    def test_gradient_is_transposed_matrix(self, template):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(template.v_full, 3))
        with ad.tape_scope():
            coarse = ad.Tensor(
                rng.normal(size=(template.v_coarse, 3)), requires_grad=True, name="c"
            )
            loss = ad.sum_(ad.mul(mesh.upsample(coarse, template), ad.Tensor(w)))
            grads = ad.backward(loss)
        assert np.allclose(grads["c"].data, template.upsample_matrix.T @ w, atol=1e-12)


class TestRegressJoints:
    def test_constant_point(self, template):
        verts = np.full((template.v_full, 3), -2.0)
        joints = mesh.regress_joints(ad.Tensor(verts), template)
        assert np.abs(joints.data + 2.0).max() <= 1e-12

    def test_translation_equivariance(self, template):
        rng = np.random.default_rng(2)
        verts = rng.normal(size=(template.v_full, 3))
        t = np.array([1.0, -2.0, 0.5])
        j0 = mesh.regress_joints(ad.Tensor(verts), template).data
        j1 = mesh.regress_joints(ad.Tensor(verts + t), template).data
        assert np.abs(j1 - (j0 + t)).max() <= 1e-12

    def test_rest_pose_matches_centroid_oracle(self, template):
        joints = mesh.regress_joints(ad.Tensor(template.rest_vertices), template).data
        for j in range(template.n_joints):
            members = template.segment_ids == j
            centroid = template.rest_vertices[members].mean(axis=0)
            assert np.abs(joints[j] - centroid).max() <= 1e-9


class TestGeodesics:
    def test_all_sources_zero(self, template):
        d = mesh.geodesic_distances(template, range(template.v_full))
        assert np.array_equal(d.data, np.zeros(template.v_full))

    def test_path_graph(self):
        tiny = _path_template(3)
        d = mesh.geodesic_distances(tiny, [0])
        assert np.array_equal(d.data, [0.0, 1.0, 2.0])

    def test_empty_sources(self, template):
        with pytest.raises(ContractError):
            mesh.geodesic_distances(template, [])

    def test_matches_floyd_warshall_exactly(self, template):
        rng = np.random.default_rng(3)
        all_pairs = floyd_warshall(template.v_full, template.edges, template.edge_lengths)
        for _ in range(3):
            sources = rng.choice(template.v_full, size=5, replace=False)
            d = mesh.geodesic_distances(template, sources).data
            expected = all_pairs[sources].min(axis=0)
            assert np.array_equal(d, expected)

    def test_edge_triangle_inequality(self, template):
        d = mesh.geodesic_distances(template, [0]).data
        for (u, v), w in zip(template.edges, template.edge_lengths):
            assert abs(d[u] - d[v]) <= w + 1e-9


class TestPose:
    def test_zero_pose_is_rest(self, template):
        posed = mesh.pose_vertices(template, np.zeros(12))
        assert np.array_equal(posed, template.rest_vertices)

    def test_rigid_per_segment(self, template):
        pose = np.zeros(12)
        pose[3] = 0.7
        posed = mesh.pose_vertices(template, pose)
        for j in range(template.n_joints):
            members = template.segment_ids == j
            rest = template.rest_vertices[members]
            bent = posed[members]
            d_rest = np.linalg.norm(rest[0] - rest[-1])
            d_bent = np.linalg.norm(bent[0] - bent[-1])
            assert abs(d_rest - d_bent) <= 1e-9


class TestCoarseAdjacency:
    def test_rows_sum_to_one(self, template):
        a = mesh.coarse_adjacency(template)
        assert np.abs(a.sum(axis=1) - 1.0).max() <= 1e-9

    def test_support_symmetric(self, template):
        a = mesh.coarse_adjacency(template)
        assert np.array_equal(a > 0, (a > 0).T)


class TestSerialization:
    def test_round_trip_bit_exact(self, template, tmp_path):
        path = tmp_path / "body.mesh"
        mesh.write_template(template, path)
        back = mesh.read_template(path)
        assert np.array_equal(back.rest_vertices, template.rest_vertices)
        assert np.array_equal(back.faces, template.faces)
        assert np.array_equal(back.coarse_rest_vertices, template.coarse_rest_vertices)
        assert np.array_equal(back.upsample_matrix, template.upsample_matrix)
        assert np.array_equal(back.joint_regressor, template.joint_regressor)
        assert np.array_equal(back.edges, template.edges)
        assert np.array_equal(back.edge_lengths, template.edge_lengths)
        assert np.array_equal(back.segment_ids, template.segment_ids)
        assert back.upsample_residual == template.upsample_residual
        assert back.config == template.config

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.mesh"
        path.write_bytes(b"NOTMESH0" + b"\x00" * 64)
        with pytest.raises(Exception, match="magic"):
            mesh.read_template(path)


def _path_template(n):
    """Minimal template stub: an n-vertex path with unit 1 cm edges."""
    verts = np.stack([np.arange(n, dtype=float), np.zeros(n), np.zeros(n)], axis=1)
    edges = np.asarray([(i, i + 1) for i in range(n - 1)], dtype=np.int32)
    return mesh.MeshTemplate(
        config=mesh.MeshConfig(),
        seed=0,
        rest_vertices=verts,
        faces=np.zeros((0, 3), dtype=np.int32),
        coarse_rest_vertices=verts[:1],
        coarse_faces=np.zeros((0, 3), dtype=np.int32),
        upsample_matrix=np.ones((n, 1)),
        joint_regressor=np.ones((2, n)) / n,
        edges=edges,
        edge_lengths=np.ones(n - 1),
        segment_ids=np.zeros(n, dtype=np.int32),
        rest_pivots=np.zeros((2, 3)),
        upsample_residual=0.0,
    )
