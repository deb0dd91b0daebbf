"""Camera-based vs point-based scene extent on the three synthetic scenes.

The clustered-camera scene is the pathological one: cameras sit within a few
centimetres of each other while the points spread over metres, so the
camera-derived extent collapses and every clone/split and size decision that
depends on it is off by the printed ratio.

Run: python demos/extent_audit.py
"""

from splatlab.harness import extent_report
from splatlab.scene_io import SYNTHETIC_KINDS, synthetic_scene


def main():
    for kind in SYNTHETIC_KINDS:
        dataset, _ = synthetic_scene(kind, seed=0)
        print(f"== {kind} ({len(dataset.cameras)} cameras, {len(dataset.sfm_points)} points)")
        print(extent_report(dataset).to_text())


if __name__ == "__main__":
    main()
