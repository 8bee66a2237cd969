"""Shared phantom and file builders for the test modules."""
import struct

import numpy as np

from hncrfs.synth import Sphere, generate_volume_phantom

PLANTED_DISTANCES = (40.0, 80.0, 120.0, 200.0)


def four_node_phantom(spurious_only=False, seed=0):
    """GTVp at (20, 20, 20) mm with GTVn spheres straight up z at the planted distances.

    Spacing 4 mm. With ``spurious_only`` the 200 mm node is left out, giving
    the planted ground truth for the predicted mask.
    """
    distances = PLANTED_DISTANCES[:-1] if spurious_only else PLANTED_DISTANCES
    nodes = [Sphere((20.0, 20.0, 20.0 + d), 6.0) for d in distances]
    return generate_volume_phantom(Sphere((20.0, 20.0, 20.0), 10.0), nodes, dims=(12, 12, 60),
                                   spacing=(4.0, 4.0, 4.0), noise_sd=1.0, seed=seed)


# the full NIfTI-1 header, field by field
NIFTI1_LAYOUT = "i10s18sihcc8h3f4h8f3fhcc4f2i80s24s2h6f12f16s4s"


def byte_swapped_copy(src, dst, voxel_dtype):
    """Rewrite a little-endian file as big-endian, field by field."""
    raw = src.read_bytes()
    fields = struct.unpack("<" + NIFTI1_LAYOUT, raw[:348])
    header = struct.pack(">" + NIFTI1_LAYOUT, *fields)
    voxels = np.frombuffer(raw[352:], dtype=np.dtype(voxel_dtype).newbyteorder("<"))
    dst.write_bytes(header + raw[348:352] + voxels.astype(np.dtype(voxel_dtype).newbyteorder(">")).tobytes())
