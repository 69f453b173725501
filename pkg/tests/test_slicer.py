import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from coopt.fields import Mode, NetworkSpec, init_networks
from coopt.losses import ManufacturingLimits
from coopt.slicer import (AnalyticSource, TripleSource, alignment_over_layers, export_layers, extract_layers,
                          iso_fidelity, iso_schedule, layer_statistics, sampling_grid)

LO, HI = (0.0, 0.0, 0.0), (40.0, 40.0, 40.0)
CENTER = (20.0, 20.0, 20.0)


def mesh_curvature(v, radius, count=300, seed=0):
    """Mean and Gaussian curvature from local quadric fits to the mesh vertices.

    The frame at each probe vertex comes from a PCA of its neighbourhood, so
    nothing here uses the field or its derivatives.
    """
    tree = cKDTree(v)
    idx = np.random.default_rng(seed).choice(len(v), size=min(count, len(v)), replace=False)
    K_M, K_G = [], []
    for i in idx:
        nb = v[tree.query_ball_point(v[i], radius)] - v[i]
        _, _, Vt = np.linalg.svd(nb - nb.mean(0), full_matrices=False)
        x, y, z = nb @ Vt[0], nb @ Vt[1], nb @ Vt[2]
        A = np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x)])
        a, b, c, d, e, _ = np.linalg.lstsq(A, z, rcond=None)[0]
        w = 1 + d * d + e * e
        K_G.append((4 * a * c - b * b) / w**2)
        K_M.append(abs((1 + e * e) * a - d * e * b + (1 + d * d) * c) / w**1.5)
    return float(np.mean(K_M)), float(np.mean(K_G))


@pytest.fixture(scope="module")
def sphere_layers():
    src = AnalyticSource.sphere(CENTER, 6.0, 16.0)
    return extract_layers(src, LO, HI, resolution=128, spacing=2.5)


def test_sphere_layers_have_unit_over_r_curvature(sphere_layers):
    layers, schedule, h = sphere_layers
    assert len(layers) >= 3
    for layer in layers:
        r = layer.isovalue
        # geometry of the extracted mesh, independent of the field derivatives
        K_M, K_G = mesh_curvature(layer.vertices, radius=4 * h)
        assert K_M == pytest.approx(1 / r, rel=0.02)
        assert K_G == pytest.approx(1 / r**2, rel=0.04)
        # per-vertex attributes come from the exact field
        d = np.linalg.norm(layer.vertices - CENTER, axis=1)
        np.testing.assert_allclose(np.abs(layer.K_max), 1 / d, rtol=1e-6)
        np.testing.assert_allclose(layer.thickness, 2.5, rtol=1e-12)
        assert layer.flags["non_manifold_edges"] == 0


def test_sphere_layers_are_iso_faithful(sphere_layers):
    layers, _, h = sphere_layers
    assert max(iso_fidelity(l, h) for l in layers) <= 1.0


def test_layer_count_is_resolution_independent():
    src = AnalyticSource.sphere(CENTER, 6.0, 16.0)
    counts = [len(extract_layers(src, LO, HI, resolution=r, spacing=2.5)[0]) for r in (48, 96, 128)]
    assert len(set(counts)) == 1


def test_plane_field_has_zero_curvature_and_flat_layers():
    n = np.array([0.0, 0.3, 1.0])
    src = AnalyticSource.plane(n, origin=(0, 0, 0))
    layers, schedule, h = extract_layers(src, LO, HI, resolution=64, spacing=4.0)
    assert len(layers) == len(schedule.isovalues) > 3
    nhat = n / np.linalg.norm(n)
    for l in layers:
        assert np.all(l.K_max == 0) and np.all(l.K_f == 0)
        dev = np.degrees(np.arccos(np.clip(np.abs(l.vertex_normals() @ nhat), 0, 1)))
        assert dev.max() < 1e-3
    stats = layer_statistics(layers, ManufacturingLimits())
    assert stats.curvature_violation == 0.0 and stats.path_violation == 0.0


def test_tangent_fibers_lie_in_layers(sphere_layers):
    mean, _ = alignment_over_layers(sphere_layers[0])
    assert mean < 1.0


def test_trimming_drops_void_faces():
    src = AnalyticSource.plane((0, 0, 1.0), H=lambda x: (x[:, 0] < 20.0).astype(float))
    layers, _, _ = extract_layers(src, LO, HI, resolution=40, spacing=5.0)
    for l in layers:
        assert l.vertices[:, 0].max() <= 20.0 + 1e-9
        assert np.all(l.H >= 0.5)


def test_iso_schedule_centres_values_in_range():
    s = iso_schedule(np.array([0.0, 10.0]), 2.0)
    np.testing.assert_allclose(s.isovalues, [1, 3, 5, 7, 9])
    assert s.expected_count == 5
    with pytest.raises(ValueError):
        iso_schedule(np.array([0.0, 1.0]), 0.0)


def test_sampling_grid_has_cubic_cells():
    axes, h = sampling_grid((0, 0, 0), (135, 45, 45), 128)
    assert h == pytest.approx(135 / 128)
    assert [len(a) for a in axes] == [129, 44, 44]


def test_planar_triple_slices_into_planes():
    spec = NetworkSpec(lo=(0, 0, 0), hi=(30, 10, 10))
    t = init_networks(spec, Mode.PLANAR, 0)
    layers, _, _ = extract_layers(TripleSource(t), spec.lo, spec.hi, resolution=60, spacing=1.0)
    assert len(layers) == 10
    for l in layers:
        np.testing.assert_allclose(l.vertices[:, 2], l.vertices[0, 2], atol=1e-9)


def test_export_writes_meshes_attributes_and_manifest(tmp_path, sphere_layers):
    layers, schedule, _ = sphere_layers
    stats = layer_statistics(layers, ManufacturingLimits())
    manifest = export_layers(tmp_path, layers, schedule, stats, {"resolution": 128})
    on_disk = json.loads((tmp_path / "layers.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    for name in on_disk["files"]:
        assert (tmp_path / name).exists()
    first = on_disk["layers"][0]
    lines = (tmp_path / first["obj"]).read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == first["vertices"]
    assert sum(l.startswith("f ") for l in lines) == first["faces"]
    csv = np.loadtxt(tmp_path / first["attributes"], delimiter=",", skiprows=1)
    assert csv.shape == (first["vertices"], 10)
    hist = (tmp_path / "histograms.csv").read_text().splitlines()
    assert hist[0] == "quantity,bin_lo,bin_hi,count"
    assert sum(int(r.split(",")[-1]) for r in hist[1:] if r.startswith("thickness")) == stats.count
