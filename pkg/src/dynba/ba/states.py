from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..classifier import LandmarkLabel
from ..geometry import Rotation

BIAS_BOUND = 1.0


@dataclass
class FrameState:
    """Per-frame estimate: position, velocity, orientation and IMU biases (world frame)."""
    frame_id: int
    timestamp: float
    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    R: Rotation = field(default_factory=Rotation)
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ba: np.ndarray = field(default_factory=lambda: np.zeros(3))
    bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).copy()
        self.v = np.asarray(self.v, dtype=float).copy()
        self.ba = np.asarray(self.ba, dtype=float).copy()
        self.bg = np.asarray(self.bg, dtype=float).copy()
        if not isinstance(self.R, Rotation):
            self.R = Rotation.from_matrix(self.R)

    def copy(self) -> "FrameState":
        return FrameState(self.frame_id, self.timestamp, self.p, self.R, self.v, self.ba, self.bg)

    def retract(self, dx) -> "FrameState":
        """``self ⊞ dx`` with ``dx = [δp, δθ, δv, δb_a, δb_g]``."""
        return FrameState(self.frame_id, self.timestamp, self.p + dx[0:3], self.R * Rotation.exp(dx[3:6]),
                          self.v + dx[6:9], self.ba + dx[9:12], self.bg + dx[12:15])

    def biases_sane(self) -> bool:
        return bool(np.all(np.abs(self.ba) <= BIAS_BOUND) and np.all(np.abs(self.bg) <= BIAS_BOUND))


@dataclass
class LandmarkState:
    """Anchored inverse-depth landmark with its observations inside the window.

    ``obs`` holds normalized image points and ``pix`` the raw pixels, both
    keyed by frame id; the anchor is the earliest observing frame.
    """
    landmark_id: int
    obs: dict = field(default_factory=dict)
    pix: dict = field(default_factory=dict)
    anchor: int | None = None
    inv_depth: float | None = None
    label: LandmarkLabel = LandmarkLabel.STATIC
    sigma_r: dict = field(default_factory=dict)
    first_seen: int | None = None
    world: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.inv_depth is not None and self.inv_depth > 0

    def frames(self) -> list[int]:
        return sorted(self.obs)

    def add_observation(self, frame_id: int, xy, uv):
        self.obs[frame_id] = np.asarray(xy, dtype=float)
        self.pix[frame_id] = np.asarray(uv, dtype=float)
        if self.anchor is None or frame_id < self.anchor:
            self.anchor = frame_id
        if self.first_seen is None:
            self.first_seen = frame_id

    def remove_observation(self, frame_id: int):
        self.obs.pop(frame_id, None)
        self.pix.pop(frame_id, None)
        self.sigma_r.pop(frame_id, None)
