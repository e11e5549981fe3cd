"""2D-3D correspondences between camera observations and mapped features.

Association uses simulator feature ids (standing in for descriptor
matching), optionally corrupted by injected false matches, followed by a
per-feature Mahalanobis test on the C-SKF innovation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2

from . import filter as flt
from .errors import BehindCamera
from .geom import MapTransform4DoF, mapped_feature_jacobians, quat_to_rot, rot_z

GATE_PROB = 0.95
MIN_CORRESPONDENCES = 13
MIN_POSELESS = 7


@dataclass(frozen=True)
class Correspondence:
    obs_index: int              # row in the frame's observation arrays
    feature_id: int             # matched mapped feature
    submap: int
    injected: bool = False      # deliberately wrong association


@dataclass
class CorrespondenceSet:
    items: list = field(default_factory=list)
    pipeline_mode: str = "pose_assisted"

    def __len__(self):
        return len(self.items)

    def obs_indices(self):
        return [c.obs_index for c in self.items]


def device_in_map(state, tau):
    """Device position and global-to-IMU rotation expressed in a map frame."""
    Rz = rot_z(tau[0])
    p_m = Rz.T @ (state.p - tau[1:4])
    C_m = quat_to_rot(state.q) @ Rz
    return p_m, C_m


def candidate_images_pose_assisted(p_map, C_map, submap, max_dist=3.0, max_angle_deg=45.0,
                                   covis_fraction=0.2):
    """Mapping poses near the current pose, plus co-visible neighbours.

    ``p_map``/``C_map`` give the device position and map-to-device
    rotation in the sub-map's frame.
    """
    P = submap.pose_p
    if len(P) == 0:
        return set()
    d = np.linalg.norm(P - p_map, axis=1)
    axis = C_map.T[:, 2]
    axes = np.array([quat_to_rot(q).T[:, 2] for q in submap.pose_q])
    ang = np.degrees(np.arccos(np.clip(axes @ axis, -1.0, 1.0)))
    near = set(np.flatnonzero((d <= max_dist) & (ang <= max_angle_deg)).tolist())
    if not near:
        return near
    feats = _pose_features(submap)
    out = set(near)
    for j in range(submap.n_poses):
        if j in near:
            continue
        fj = feats[j]
        for i in near:
            fi = feats[i]
            thr = covis_fraction * min(len(fi), len(fj))
            if thr > 0 and len(fi & fj) >= thr:
                out.add(j)
                break
    return out


def _pose_features(submap):
    cache = getattr(submap, "_pose_feature_cache", None)
    if cache is None:
        cache = [set() for _ in range(submap.n_poses)]
        for i, j in zip(submap.obs_pose, submap.obs_feat):
            cache[int(i)].add(int(submap.feature_ids[j]))
        object.__setattr__(submap, "_pose_feature_cache", cache)
    return cache


def candidate_features(submap, poses):
    feats = _pose_features(submap)
    out = set()
    for i in poses:
        out |= feats[i]
    return out


def predict_pixels(cam, state, tau, submap, feature_ids):
    """Projected pixel of each mapped feature (NaN when behind the camera)."""
    idx = np.array([submap.feature_index(f) for f in feature_ids], dtype=np.int64)
    if len(idx) == 0:
        return np.zeros((0, 2))
    m = submap.feature_positions()[idx]
    g = tau[1:4] + m @ rot_z(tau[0]).T
    y = (g - state.p) @ quat_to_rot(state.q).T
    out = np.full((len(idx), 2), np.nan)
    ok = y[:, 2] > 1e-4
    out[ok, 0] = cam.fx * y[ok, 0] / y[ok, 2] + cam.cx
    out[ok, 1] = cam.fy * y[ok, 1] / y[ok, 2] + cam.cy
    return out


def match_features(frame, sid, candidate_ids, predicted=None, search_radius=30.0, inject_rate=0.0, rng=None,
                   mode="pose_assisted"):
    """Id-oracle association within ``search_radius`` pixels of the
    prediction, with optional injected false matches.

    ``predicted`` maps candidate id -> predicted pixel; ``None`` (pose-less
    mode) skips the radius test.
    """
    cand = set(int(c) for c in candidate_ids)
    items = []
    cand_list = sorted(cand)
    used = set()
    for k, (fid, uv) in enumerate(zip(frame.ids, frame.uv)):
        fid = int(fid)
        if fid not in cand:
            continue
        if predicted is not None:
            pr = predicted.get(fid)
            if pr is None or not np.all(np.isfinite(pr)) or np.linalg.norm(uv - pr) > search_radius:
                continue
        match, injected = fid, False
        if inject_rate > 0 and rng is not None and rng.random() < inject_rate and len(cand_list) > 1:
            others = [c for c in cand_list if c != fid and c not in used]
            if predicted is not None:
                near = [c for c in others if c in predicted and np.all(np.isfinite(predicted[c]))
                        and np.linalg.norm(uv - predicted[c]) <= search_radius]
                others = near or others
            if others:
                match, injected = int(others[rng.integers(len(others))]), True
        if match in used:
            continue
        used.add(match)
        items.append(Correspondence(k, match, sid, injected))
    return CorrespondenceSet(items, mode)


def build_map_batch(cam, state, submap, sid, frame, corr: CorrespondenceSet, sigma, tau=None):
    """Stacked residual and Jacobians of the correspondences.

    ``tau`` overrides the state's transform estimate (used at initialization,
    when the transform is not yet part of the state). Returns
    ``(MeasurementBatch, H_tau, kept_items)``; ``H_R`` covers the current
    device state only, ``H_tau`` the transform columns.
    """
    d = state.dim
    tau = state.transforms[sid] if tau is None else tau
    T = MapTransform4DoF(float(tau[0]), np.asarray(tau[1:4]))
    rows_R, rows_tau, rows_M, res, kept = [], [], [], [], []
    for c in corr.items:
        j = submap.feature_index(c.feature_id)
        if j < 0:
            continue
        a = submap.anchor[j]
        try:
            z_hat, HR, HM = mapped_feature_jacobians(cam, state.q, state.p, T, submap.pose_q[a], submap.pose_p[a],
                                                     submap.f_anchor[j])
        except BehindCamera:
            continue
        hr = np.zeros((2, d))
        hr[:, 0:6] = HR[:, 0:6]
        hm = np.zeros((2, submap.dim))
        o = submap.pose_offset(a)
        hm[:, o:o + 6] = HM[:, 0:6]
        o = submap.feature_offset(j)
        hm[:, o:o + 3] = HM[:, 6:9]
        rows_R.append(hr)
        rows_tau.append(HR[:, 6:10])
        rows_M.append(hm)
        res.append(frame.uv[c.obs_index] - z_hat)
        kept.append(c)
    if not kept:
        return None, None, []
    H_R = np.vstack(rows_R)
    H_tau = np.vstack(rows_tau)
    if sid in state.transforms:
        o = state.tau_offset(sid)
        H_R[:, o:o + 4] = H_tau
    batch = flt.MeasurementBatch(np.concatenate(res), H_R, sigma, np.vstack(rows_M), sid)
    return batch, H_tau, kept


def mahalanobis_per_feature(belief, batch: flt.MeasurementBatch, treat_map_exact=False, J=None):
    """Per-feature ``r^T S_f^-1 r`` (2 d.o.f. each) and the ``J`` rows used."""
    if treat_map_exact:
        P = flt._device_P(belief)
        H = batch.H_R
        S_blocks = [H[2 * i:2 * i + 2] @ P @ H[2 * i:2 * i + 2].T + batch.sigma ** 2 * np.eye(2)
                    for i in range(len(batch.r) // 2)]
        J = None
    elif isinstance(belief, flt.DenseJointBelief):
        d = belief.device_dim
        sl = belief.map_slice(batch.submap)
        Hf = np.hstack([batch.H_R, batch.H_M])
        idx = np.r_[np.arange(d), np.arange(sl.start, sl.stop)]
        Psub = belief.P[np.ix_(idx, idx)]
        S_full = Hf @ Psub @ Hf.T + batch.sigma ** 2 * np.eye(len(batch.r))
        S_blocks = [S_full[2 * i:2 * i + 2, 2 * i:2 * i + 2] for i in range(len(batch.r) // 2)]
    else:
        _, S_full, J, _ = flt.map_innovation(belief, batch, J)
        S_blocks = [S_full[2 * i:2 * i + 2, 2 * i:2 * i + 2] for i in range(len(batch.r) // 2)]
    d2 = np.empty(len(S_blocks))
    for i, S in enumerate(S_blocks):
        r = batch.r[2 * i:2 * i + 2]
        d2[i] = r @ np.linalg.solve(S, r)
    return d2, J


def gate(batch: flt.MeasurementBatch, items, belief, treat_map_exact=False, prob=GATE_PROB,
         min_count=MIN_CORRESPONDENCES, J=None):
    """Per-feature chi-square test; returns ``(batch, items, J, d2)`` of the
    survivors, or ``(None, [], None, d2)`` if fewer than ``min_count`` remain.

    Read-only on ``belief``.
    """
    d2, J = mahalanobis_per_feature(belief, batch, treat_map_exact, J)
    keep = d2 <= chi2.ppf(prob, 2)
    if keep.sum() < min_count:
        return None, [], None, d2
    rows = np.repeat(keep, 2)
    out = flt.MeasurementBatch(batch.r[rows], batch.H_R[rows], batch.sigma,
                               None if batch.H_M is None else batch.H_M[rows], batch.submap)
    return out, [c for c, k in zip(items, keep) if k], (None if J is None else J[rows]), d2
