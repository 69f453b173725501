"""Slice an analytic spherical deposition field and compare mesh curvature with 1/r."""
import numpy as np

from coopt.slicer import AnalyticSource, extract_layers, iso_fidelity

center = np.array([20.0, 20.0, 20.0])
layers, schedule, h = extract_layers(AnalyticSource.sphere(center, 6.0, 16.0), (0, 0, 0), (40, 40, 40),
                                     resolution=128, spacing=2.5)
for layer in layers:
    r = np.linalg.norm(layer.vertices - center, axis=1)
    print(f"isovalue {layer.isovalue:5.2f}: {layer.n_vertices:6d} vertices, radius {r.mean():.4f} +- {r.std():.1e}, "
          f"|K_max| {np.abs(layer.K_max).mean():.4f} (1/r = {1 / layer.isovalue:.4f}), "
          f"fidelity {iso_fidelity(layer, h):.3f}")
