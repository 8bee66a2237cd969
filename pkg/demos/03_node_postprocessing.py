"""Removing implausibly distant lymph-node detections from a predicted mask.

A phantom has a primary tumor and four node spheres at 40, 80, 120 and 200 mm.
The 200 mm sphere plays a false positive. Filtering at 150 mm removes it and the
node Dice against the ground truth goes up; the primary is untouched.
Run: python demos/03_node_postprocessing.py
"""
import numpy as np

from hncrfs.synth import Sphere, generate_volume_phantom
from hncrfs.volume import GTVN, GTVP, dice, filter_distant_nodes, node_statistics

primary = Sphere((20.0, 20.0, 20.0), 10.0)
distances = (40.0, 80.0, 120.0, 200.0)
grid = dict(dims=(12, 12, 60), spacing=(4.0, 4.0, 4.0))

predicted, _, _ = generate_volume_phantom(primary, [Sphere((20.0, 20.0, 20.0 + d), 6.0) for d in distances], **grid)
truth, _, _ = generate_volume_phantom(primary, [Sphere((20.0, 20.0, 20.0 + d), 6.0) for d in distances[:-1]], **grid)

stats = node_statistics(predicted)
print(f"predicted mask: {stats.gtvn_count} node components at "
      + ", ".join(f"{d:.1f}" for d in sorted(stats.gtvn_distances_mm)) + " mm")

filtered, report = filter_distant_nodes(predicted, d_max=150.0)
print(f"removed {len(report.removed)} component(s) at "
      + ", ".join(f"{d:.1f} mm" for _, d in report.removed) + f"; kept {len(report.kept)}")

print(f"node Dice:    {dice(predicted, truth, GTVN):.3f} -> {dice(filtered, truth, GTVN):.3f}")
print(f"primary Dice: {dice(predicted, truth, GTVP):.3f} -> {dice(filtered, truth, GTVP):.3f}")
print("primary voxels unchanged:", bool(np.array_equal(predicted.labels == GTVP, filtered.labels == GTVP)))

again, second = filter_distant_nodes(filtered, d_max=150.0)
print("second pass removes nothing:", second.removed == [] and bool(np.array_equal(again.labels, filtered.labels)))
