"""Accumulate displacement over a drifting sequence and follow the ROI corners.

    python3 demos/track_sequence.py
"""
import numpy as np

from speckle_lab import DisplacementField, Roi, SpeckleParams, infer_sequence, render_reference
from speckle_lab.deform import make_sequence
from speckle_lab.dic import DicPredictor


def main():
    ref = render_reference(SpeckleParams(seed=8), 160, 160)
    shape = (160, 160)
    # steady drift of (0.25, -0.15) px per frame
    fields = [DisplacementField(np.full(shape, 0.25 * k), np.full(shape, -0.15 * k))
              for k in range(1, 6)]
    frames = make_sequence(ref, fields)
    res = infer_sequence(DicPredictor(), frames, Roi.from_box(40, 40, 80, 80))
    for k, roi in enumerate(res.rois):
        shift = roi.corners.mean(axis=0) - res.rois[0].corners.mean(axis=0)
        print(f"frame {k}: mean corner shift ({shift[0]:+.3f}, {shift[1]:+.3f}) px, "
              f"true ({0.25 * k:+.3f}, {0.0 - 0.15 * k:+.3f})")


if __name__ == "__main__":
    main()
