"""Local road map in the curvilinear (s, y) frame.

The centreline heading is piecewise cubic in arc length. Each segment also
carries cubic left/right lateral limits. Heading coefficients are ascending
in the segment-local variable ``u = s - s_start``; boundary coefficients are
descending (``numpy.polyval`` order) in the same local variable.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)


class OutOfMapError(ValueError):
    """Abscissa outside the mapped range."""


class ProjectionError(ValueError):
    """No centreline point satisfies the orthogonality condition."""


class FitError(ValueError):
    """Degenerate polyline handed to the fitter."""


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class CentrelineSegment:
    s_start: float
    s_end: float
    theta: tuple  # c0..c3, ascending
    X0: float
    Y0: float
    left: tuple = (0.0, 0.0, 0.0, 3.5)  # descending
    right: tuple = (0.0, 0.0, 0.0, -3.5)

    def __post_init__(self):
        if not self.s_start < self.s_end:
            raise ValueError("segment must have positive length")

    @property
    def length(self) -> float:
        return self.s_end - self.s_start

    def heading(self, s):
        u = np.asarray(s, dtype=float) - self.s_start
        c0, c1, c2, c3 = self.theta
        return c0 + u * (c1 + u * (c2 + u * c3))

    def curvature(self, s):
        u = np.asarray(s, dtype=float) - self.s_start
        _, c1, c2, c3 = self.theta
        return c1 + u * (2.0 * c2 + u * 3.0 * c3)

    def boundaries(self, s):
        u = np.asarray(s, dtype=float) - self.s_start
        return np.polyval(self.left, u), np.polyval(self.right, u)

    def boundary_slopes(self, s):
        u = np.asarray(s, dtype=float) - self.s_start
        return np.polyval(np.polyder(self.left), u), np.polyval(np.polyder(self.right), u)

    def global_boundary_coefficients(self):
        """Boundary cubics re-expressed in absolute ``s`` (descending powers)."""
        shift = np.poly1d([1.0, -self.s_start])
        left = np.poly1d(self.left)(shift).coeffs
        right = np.poly1d(self.right)(shift).coeffs
        return np.pad(left, (4 - len(left), 0)), np.pad(right, (4 - len(right), 0))

    def position(self, s):
        """Centreline point at ``s`` by Gauss-Legendre quadrature from the anchor."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        half = 0.5 * (s - self.s_start)
        sigma = self.s_start + half[:, None] * (1.0 + _GL_NODES[None, :])
        th = self.heading(sigma)
        X = self.X0 + half * (np.cos(th) @ _GL_WEIGHTS)
        Y = self.Y0 + half * (np.sin(th) @ _GL_WEIGHTS)
        return X, Y


class RoadMap:
    """Immutable ordered collection of contiguous centreline segments."""

    def __init__(self, segments):
        segments = tuple(segments)
        if not segments:
            raise ValueError("road map needs at least one segment")
        for a, b in zip(segments, segments[1:]):
            if abs(a.s_end - b.s_start) > 1e-9:
                raise ValueError("segments must be contiguous in s")
            if abs(a.heading(a.s_end) - b.heading(b.s_start)) > 1e-6:
                raise ValueError("centreline heading discontinuous between segments")
        self.segments = segments
        self._starts = np.array([seg.s_start for seg in segments])
        self._theta = np.array([seg.theta for seg in segments], dtype=float)
        self._left = np.array([seg.left for seg in segments], dtype=float)
        self._right = np.array([seg.right for seg in segments], dtype=float)

    @property
    def s_min(self) -> float:
        return self.segments[0].s_start

    @property
    def s_max(self) -> float:
        return self.segments[-1].s_end

    @property
    def length(self) -> float:
        return self.s_max - self.s_min

    @classmethod
    def straight(cls, length: float, left: float = 3.5, right: float = -3.5,
                 X0: float = 0.0, Y0: float = 0.0, heading: float = 0.0):
        seg = CentrelineSegment(0.0, float(length), (heading, 0.0, 0.0, 0.0), X0, Y0,
                                (0.0, 0.0, 0.0, left), (0.0, 0.0, 0.0, right))
        return cls([seg])

    def _locate(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < self.s_min - 1e-9) or np.any(s > self.s_max + 1e-9):
            raise OutOfMapError(f"abscissa outside [{self.s_min}, {self.s_max}]")
        idx = np.clip(np.searchsorted(self._starts, s, side="right") - 1,
                      0, len(self.segments) - 1)
        return idx, s - self._starts[idx]

    def heading_at(self, s):
        idx, u = self._locate(s)
        c = np.moveaxis(self._theta[idx], -1, 0)
        return c[0] + u * (c[1] + u * (c[2] + u * c[3]))

    def curvature_at(self, s):
        idx, u = self._locate(s)
        c = np.moveaxis(self._theta[idx], -1, 0)
        return c[1] + u * (2.0 * c[2] + u * 3.0 * c[3])

    def boundaries_at(self, s):
        """Return ``(y_left, y_right)`` at ``s``."""
        idx, u = self._locate(s)
        kl, kr = np.moveaxis(self._left[idx], -1, 0), np.moveaxis(self._right[idx], -1, 0)
        yl = ((kl[0] * u + kl[1]) * u + kl[2]) * u + kl[3]
        yr = ((kr[0] * u + kr[1]) * u + kr[2]) * u + kr[3]
        return yl, yr

    def boundary_slopes_at(self, s):
        idx, u = self._locate(s)
        kl, kr = np.moveaxis(self._left[idx], -1, 0), np.moveaxis(self._right[idx], -1, 0)
        return ((3.0 * kl[0] * u + 2.0 * kl[1]) * u + kl[2],
                (3.0 * kr[0] * u + 2.0 * kr[1]) * u + kr[2])

    def centreline(self, s):
        """Global centreline point(s) ``(X, Y)`` at ``s``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        idx, _ = self._locate(s)
        X = np.empty_like(s)
        Y = np.empty_like(s)
        for i in np.unique(idx):
            mask = idx == i
            X[mask], Y[mask] = self.segments[i].position(s[mask])
        return X, Y

    def curvilinear_to_global(self, s, y, xi):
        """Map ``(s, y, xi)`` to global ``(X, Y, psi)``."""
        scalar = np.ndim(s) == 0
        Xc, Yc = self.centreline(s)
        th = self.heading_at(np.atleast_1d(s))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        X = Xc - y * np.sin(th)
        Y = Yc + y * np.cos(th)
        psi = th + np.atleast_1d(xi)
        if scalar:
            return float(X[0]), float(Y[0]), float(psi[0])
        return X, Y, psi

    def global_to_curvilinear(self, X, Y, psi, s_guess: float | None = None):
        """Project a global pose onto the centreline; returns ``(s, y, xi)``."""
        if s_guess is None:
            grid = np.linspace(self.s_min, self.s_max,
                               max(2, int(math.ceil(self.length / 0.5)) + 1))
            gx, gy = self.centreline(grid)
            s = float(grid[np.argmin((gx - X) ** 2 + (gy - Y) ** 2)])
        else:
            s = float(np.clip(s_guess, self.s_min, self.s_max))
        for _ in range(50):
            cx, cy = self.centreline(s)
            th = float(self.heading_at(s))
            kappa = float(self.curvature_at(s))
            dx, dy = X - cx[0], Y - cy[0]
            along = dx * math.cos(th) + dy * math.sin(th)
            lateral = -dx * math.sin(th) + dy * math.cos(th)
            denom = 1.0 - kappa * lateral
            if abs(denom) < 1e-6:
                raise ProjectionError("pose at the centre of curvature")
            step = along / denom
            s_new = min(max(s + step, self.s_min), self.s_max)
            if abs(s_new - s) < 1e-12:
                s = s_new
                break
            s = s_new
        cx, cy = self.centreline(s)
        th = float(self.heading_at(s))
        dx, dy = X - cx[0], Y - cy[0]
        along = dx * math.cos(th) + dy * math.sin(th)
        if abs(along) > 1e-7:
            raise ProjectionError("projection onto centreline failed")
        y = -dx * math.sin(th) + dy * math.cos(th)
        return s, y, float(wrap_angle(psi - th))

    def to_dict(self) -> dict:
        return {"segments": [
            {"s_start": seg.s_start, "s_end": seg.s_end, "theta": list(seg.theta),
             "X0": seg.X0, "Y0": seg.Y0, "left": list(seg.left), "right": list(seg.right)}
            for seg in self.segments]}


def _cubic_fit_fixed_start(u, values, start):
    """Least-squares cubic in ``u`` with the constant term pinned to ``start``."""
    design = np.column_stack([u, u**2, u**3])
    coef, *_ = np.linalg.lstsq(design, values - start, rcond=None)
    return np.concatenate([[start], coef])


def fit_from_polyline(points, width_left, width_right, segment_length: float = 25.0,
                      overlap: float = 5.0) -> RoadMap:
    """Fit a road map to a sampled centreline polyline.

    ``width_left``/``width_right`` are the lateral distances to the left and
    right edges (positive numbers), scalars or one value per point. The heading
    of each segment is fitted by least squares over the segment plus
    ``overlap`` metres of the next one, with the start angle pinned to the end
    angle of the previous segment so the heading stays continuous.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 8:
        raise FitError("need at least 8 (X, Y) points")
    chords = np.diff(pts, axis=0)
    lengths = np.hypot(chords[:, 0], chords[:, 1])
    if np.any(lengths < 1e-9):
        raise FitError("duplicate consecutive points")
    s_pts = np.concatenate([[0.0], np.cumsum(lengths)])
    s_mid = 0.5 * (s_pts[:-1] + s_pts[1:])
    angles = np.unwrap(np.arctan2(chords[:, 1], chords[:, 0]))
    if np.any(np.abs(np.diff(angles)) > 0.5 * np.pi):
        raise FitError("angle unwrap failed: polyline turns too sharply between samples")
    wl = np.broadcast_to(np.asarray(width_left, dtype=float), s_pts.shape)
    wr = np.broadcast_to(np.asarray(width_right, dtype=float), s_pts.shape)

    total = s_pts[-1]
    n_seg = max(1, int(round(total / segment_length)))
    edges = np.linspace(0.0, total, n_seg + 1)

    # start angle by linear extrapolation of the first chord angles
    if len(s_mid) > 1:
        slope = (angles[1] - angles[0]) / (s_mid[1] - s_mid[0])
        theta_start = angles[0] - slope * s_mid[0]
    else:
        theta_start = angles[0]

    segments = []
    X0, Y0 = pts[0]
    residual_theta = 0.0
    residual_width = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        window = (s_mid >= a - 1e-9) & (s_mid <= b + overlap)
        if window.sum() < 3:
            raise FitError("too few samples in a fitting window")
        u = s_mid[window] - a
        theta = _cubic_fit_fixed_start(u, angles[window], theta_start)
        in_seg = (s_mid >= a - 1e-9) & (s_mid <= b + 1e-9)
        fitted = np.polynomial.polynomial.polyval(s_mid[in_seg] - a, theta)
        residual_theta = max(residual_theta, float(np.max(np.abs(fitted - angles[in_seg]))))

        pwin = (s_pts >= a - 1e-9) & (s_pts <= b + 1e-9)
        up = s_pts[pwin] - a
        deg = min(3, int(pwin.sum()) - 1)
        left = np.polyfit(up, wl[pwin], deg)
        right = np.polyfit(up, -wr[pwin], deg)
        residual_width = max(residual_width,
                             float(np.max(np.abs(np.polyval(left, up) - wl[pwin]))),
                             float(np.max(np.abs(np.polyval(right, up) + wr[pwin]))))
        left = np.pad(left, (4 - len(left), 0))
        right = np.pad(right, (4 - len(right), 0))
        seg = CentrelineSegment(float(a), float(b), tuple(float(c) for c in theta),
                                float(X0), float(Y0), tuple(left.tolist()), tuple(right.tolist()))
        segments.append(seg)
        Xe, Ye = seg.position(b)
        X0, Y0 = Xe[0], Ye[0]
        theta_start = float(seg.heading(b))
    road = RoadMap(segments)
    road.fit_residual_theta = residual_theta
    road.fit_residual_width = residual_width
    return road


def road_from_dict(doc: dict) -> RoadMap:
    """Build a map from the road file layout (explicit segments, polyline or straight)."""
    if "segments" in doc:
        segs = [CentrelineSegment(float(d["s_start"]), float(d["s_end"]),
                                  tuple(float(c) for c in d["theta"]),
                                  float(d.get("X0", 0.0)), float(d.get("Y0", 0.0)),
                                  tuple(float(c) for c in d.get("left", (0, 0, 0, 3.5))),
                                  tuple(float(c) for c in d.get("right", (0, 0, 0, -3.5))))
                for d in doc["segments"]]
        return RoadMap(segs)
    if "polyline" in doc:
        return fit_from_polyline(doc["polyline"], doc["width_left"], doc["width_right"],
                                 doc.get("segment_length", 25.0), doc.get("overlap", 5.0))
    if "straight" in doc:
        d = doc["straight"]
        return RoadMap.straight(d["length"], d.get("left", 3.5), d.get("right", -3.5))
    raise ValueError("road description needs 'segments', 'polyline' or 'straight'")


def load_road(path) -> RoadMap:
    return road_from_dict(json.loads(Path(path).read_text()))
