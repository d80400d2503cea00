"""Geometric core of a pupil-based gaze tracker.

Modules: ``conic`` (ellipse fitting and point-to-ellipse distance), ``efe``
(segmentation losses with an ellipse-shape regulariser), ``coordtrans``
(calibration warp), ``gvnet`` (sliding-window gaze regressor), ``synth``
(synthetic eye generator), ``io`` (file formats) and ``cli``.
"""

__version__ = "0.1.0"
