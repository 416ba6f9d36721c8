"""Geometric pseudo-labels for the slices between expert annotations.

``propagate_aipl`` copies the nearest annotated plane. ``propagate_cipl``
follows each vessel: connected components on annotated slices are chained
into tracks, their centroids are linearly interpolated into a centerline and
the nearest annotated mask is translated onto that centerline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import BACKGROUND, LUMEN, LabelVolume

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEFAULT_MATCH_RADIUS = 10.0


@dataclass
class TrackEntry:
    z: int
    mask: np.ndarray          # (H, W) bool, component footprint
    labels: np.ndarray        # (H, W) uint8, classes inside the footprint, 0 elsewhere
    centroid: tuple[float, float]


@dataclass
class SliceTrack:
    track_id: int
    entries: list[TrackEntry] = field(default_factory=list)

    @property
    def slices(self) -> list[int]:
        return [e.z for e in self.entries]

    def entry(self, z: int) -> TrackEntry:
        for e in self.entries:
            if e.z == z:
                return e
        raise KeyError(z)


@dataclass
class Centerline:
    track_id: int
    z: np.ndarray             # consecutive slice indices
    points: np.ndarray        # (len(z), 2) interpolated (cy, cx)

    def at(self, z: int) -> np.ndarray:
        i = int(z - self.z[0])
        if not 0 <= i < len(self.z):
            raise KeyError(z)
        return self.points[i]


def slice_components(plane: np.ndarray) -> list[TrackEntry]:
    """8-connected components of the merged (lumen or wall) foreground."""
    fg = plane != BACKGROUND
    lab, n = ndimage.label(fg, structure=EIGHT_CONNECTED)
    comps = []
    for k in range(1, n + 1):
        mask = lab == k
        ys, xs = np.nonzero(mask)
        comps.append(TrackEntry(z=-1, mask=mask, labels=np.where(mask, plane, 0).astype(np.uint8),
                                centroid=(float(ys.mean()), float(xs.mean()))))
    return comps


def build_tracks(sparse: LabelVolume, match_radius: float = DEFAULT_MATCH_RADIUS) -> list[SliceTrack]:
    """Chain components across consecutive annotated slices.

    A component joins the track whose most recent centroid (on the previous
    annotated slice) is nearest, if within ``match_radius``; matching is
    greedy over all pairs in increasing distance. Unmatched components start
    new tracks; tracks without a match on a slice end there.
    """
    if not sparse.annotated_slices:
        raise ValueError("label volume has no annotated slices")
    tracks: list[SliceTrack] = []
    active: list[SliceTrack] = []
    for z in sparse.annotated_slices:
        comps = slice_components(sparse.data[z])
        for c in comps:
            c.z = z
        pairs = []
        for ci, c in enumerate(comps):
            for ti, t in enumerate(active):
                d = float(np.hypot(*np.subtract(c.centroid, t.entries[-1].centroid)))
                if d <= match_radius:
                    pairs.append((d, t.track_id, ci, ti))
        pairs.sort()
        used_c, used_t = set(), set()
        next_active = []
        for _, _, ci, ti in pairs:
            if ci in used_c or ti in used_t:
                continue
            used_c.add(ci)
            used_t.add(ti)
            active[ti].entries.append(comps[ci])
            next_active.append(active[ti])
        for ci, c in enumerate(comps):
            if ci not in used_c:
                t = SliceTrack(track_id=len(tracks), entries=[c])
                tracks.append(t)
                next_active.append(t)
        active = sorted(next_active, key=lambda t: t.track_id)
    return tracks


def interpolate_centerline(track: SliceTrack) -> Centerline:
    if not track.entries:
        raise ValueError(f"track {track.track_id} is empty")
    zs = np.array(track.slices, dtype=float)
    cents = np.array([e.centroid for e in track.entries], dtype=float)
    z = np.arange(track.entries[0].z, track.entries[-1].z + 1)
    pts = np.stack([np.interp(z, zs, cents[:, 0]), np.interp(z, zs, cents[:, 1])], axis=1)
    return Centerline(track.track_id, z, pts)


def round_half_up(v) -> np.ndarray:
    return np.floor(np.asarray(v, dtype=float) + 0.5).astype(int)


def shift_plane(plane: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx), filling with zeros and clipping at the border."""
    out = np.zeros_like(plane)
    h, w = plane.shape
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[dst_y, dst_x] = plane[src_y, src_x]
    return out


def paste(dst: np.ndarray, labels: np.ndarray) -> None:
    """Overlay class labels; lumen wins over wall, anything wins over background."""
    lumen = labels == LUMEN
    other = (labels != BACKGROUND) & ~lumen & (dst == BACKGROUND)
    dst[other] = labels[other]
    dst[lumen] = LUMEN


def nearest_source(z: int, z0: int, z1: int) -> int:
    return z0 if z - z0 <= z1 - z else z1


def propagate_cipl(sparse: LabelVolume, match_radius: float = DEFAULT_MATCH_RADIUS) -> LabelVolume:
    if not sparse.annotated_slices:
        raise ValueError("label volume has no annotated slices")
    tracks = build_tracks(sparse, match_radius)
    expert = set(sparse.annotated_slices)
    out = np.zeros_like(sparse.data)
    for z in sparse.annotated_slices:
        out[z] = sparse.data[z]
    labelled = set(expert)
    for track in tracks:
        line = interpolate_centerline(track)
        for a, b in zip(track.entries, track.entries[1:]):
            for z in range(a.z + 1, b.z):
                if z in expert:
                    continue
                src = a if nearest_source(z, a.z, b.z) == a.z else b
                dy, dx = round_half_up(line.at(z) - np.asarray(src.centroid))
                paste(out[z], shift_plane(src.labels, int(dy), int(dx)))
                labelled.add(z)
    return LabelVolume(out, sparse.spacing, tuple(sorted(labelled)))


def propagate_aipl(sparse: LabelVolume) -> LabelVolume:
    ann = sparse.annotated_slices
    if not ann:
        raise ValueError("label volume has no annotated slices")
    out = np.zeros_like(sparse.data)
    for z in ann:
        out[z] = sparse.data[z]
    for z0, z1 in zip(ann, ann[1:]):
        for z in range(z0 + 1, z1):
            out[z] = sparse.data[nearest_source(z, z0, z1)]
    return LabelVolume(out, sparse.spacing, tuple(range(ann[0], ann[-1] + 1)))


def propagate(sparse: LabelVolume, method: str, match_radius: float = DEFAULT_MATCH_RADIUS) -> LabelVolume:
    if method == "aipl":
        return propagate_aipl(sparse)
    if method == "cipl":
        return propagate_cipl(sparse, match_radius)
    raise ValueError(f"unknown interpolation method {method!r}")
