"""Stub converter from Replica-style scene exports to the p2v manifest format.

Replica distributes photo-realistic indoor reconstructions as a binary
quad mesh (`mesh_semantic.ply`) plus `info_semantic.json`, which maps
faces to object instances and instances to semantic classes. The dataset
cannot be redistributed, so this script only sketches the conversion;
the target layout is documented in docs/dataset-format.md and is easy to
produce with any mesh library:

    out/<scene>/manifest.json            one instance entry per object
    out/<scene>/points/<instance>.p2vc   sampled points, or a mesh.ply
                                         with per-face instance ids

What a full implementation does per scene:
  1. read the quad mesh and split each quad along its 0-2 diagonal,
  2. group triangles by object id via the face-to-instance table,
  3. drop instances whose class is unlabeled (id < 0),
  4. write one manifest entry per instance with its class name as label,
     either referencing the shared mesh or pre-sampled points
     (`p2v.geometry.sample_surface` + `p2v.ingest.write_points_file`).

TODO(convert-replica): implement the binary PLY quad-mesh reader; the
rest of the pipeline (sampling, centering, splits) is `p2v ingest`.
"""

import argparse
import sys
from pathlib import Path


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--replica", required=True, help="Replica root directory")
    parser.add_argument("--out", required=True, help="output dataset directory")
    args = parser.parse_args()

    root = Path(args.replica)
    scenes = sorted(p.parent for p in root.glob("*/habitat/info_semantic.json"))
    if not scenes:
        print(f"no Replica scenes found under {root}", file=sys.stderr)
        return 2
    print(f"found {len(scenes)} scene(s); conversion is not implemented yet:")
    for scene in scenes:
        print(f"  {scene}")
    print("see the module docstring for the conversion recipe", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
