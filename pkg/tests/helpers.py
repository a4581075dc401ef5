"""Small constructors shared by the test modules."""
import numpy as np

from fmcw_odom.measurement import doppler_rows
from fmcw_odom.pointcloud import LidarFrame


def make_frame(points, doppler=None, timestamps=None, beam_row=None, frame_index=0,
               start=0.0, end=0.1):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = points.shape[0]
    if timestamps is None:
        timestamps = np.linspace(start, end, n, endpoint=False) if n else np.zeros(0)
    if doppler is None:
        doppler = np.zeros(n)
    if beam_row is None:
        beam_row = np.zeros(n, dtype=int)
    return LidarFrame(frame_index, start, end, np.asarray(timestamps, dtype=float), points,
                      np.asarray(doppler, dtype=float), np.asarray(beam_row))


def frame_from_twist(points, twist, extrinsics, **kw):
    """Noiseless returns of static points seen under a constant twist."""
    points = np.asarray(points, dtype=float)
    return make_frame(points, doppler_rows(points, extrinsics) @ np.asarray(twist, dtype=float), **kw)


def kitti_reference(est_poses, gt_poses, lengths=tuple(range(100, 900, 100))):
    """Straightforward loop form of the relative error metric (poses already paired).

    Returns ``{length: (trans_pct, rot_deg_per_100m)}`` and the pooled means.
    """
    from scipy.spatial.transform import Rotation

    n = len(gt_poses)
    dist = [0.0]
    for k in range(1, n):
        dist.append(dist[-1] + float(np.linalg.norm(gt_poses[k][:3, 3] - gt_poses[k - 1][:3, 3])))
    per, all_t, all_r = {}, [], []
    for length in lengths:
        ts, rs = [], []
        for i in range(n):
            j = next((j for j in range(i, n) if dist[j] - dist[i] > length), None)
            if j is None:
                continue
            g = np.linalg.inv(gt_poses[i]) @ gt_poses[j]
            e = np.linalg.inv(est_poses[i]) @ est_poses[j]
            err = np.linalg.inv(g) @ e
            ts.append(np.linalg.norm(err[:3, 3]) / length)
            rs.append(Rotation.from_matrix(err[:3, :3]).magnitude() / length)
        if ts:
            per[length] = (100 * np.mean(ts), 100 * np.degrees(np.mean(rs)))
            all_t += ts
            all_r += rs
    return per, (100 * np.mean(all_t), 100 * np.degrees(np.mean(all_r)))
