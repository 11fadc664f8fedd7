"""3D Gaussian splatting: projection, screen-space covariance, and depth-sorted
alpha-blended rasterization, plus a straight-line brute-force oracle renderer.

World units are level-N voxel units. The camera convention is pinhole with
x-right / y-down / z-forward; rotation rows are the camera axes in world
coordinates and translation maps world points into camera space.

The fast rasterizer restricts each splat to its screen-space bounding box (the
region where alpha can reach 1/255) and stops blending once transmittance
falls below 1e-4; both renderers skip fragments with alpha < 1/255 and clamp
alpha at 0.999 so transmittance gradients never vanish entirely.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, RangeError

ALPHA_MAX = 0.999
ALPHA_MIN = 1.0 / 255.0
TERM_THRESHOLD = 1e-4
# alpha >= 1/255 requires the Mahalanobis form <= 2 ln 255 (opacity <= 1)
_QMAX = 2.0 * math.log(255.0)


@dataclass
class Camera:
    rotation: np.ndarray  # (3,3), rows = camera axes in world coords
    translation: np.ndarray  # (3,), world -> camera offset
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-10):
            raise RangeError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0:
            raise RangeError("focal lengths and near plane must be positive")


def look_at(eye, target, width: int, height: int, fov_deg: float = 50.0,
            up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at `eye` looking at `target`, y-down image plane."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    return Camera(rot, -rot @ eye, f, f, width / 2.0, height / 2.0, width, height)


@dataclass
class GaussianSet:
    """Renderable splats: means/scales/colors (n,3), quats (n,4), opacities (n,)."""

    means: torch.Tensor
    scales: torch.Tensor
    quats: torch.Tensor
    opacities: torch.Tensor
    colors: torch.Tensor

    def __len__(self):
        return self.means.shape[0]

    def detach(self) -> "GaussianSet":
        return GaussianSet(*(t.detach() for t in
                             (self.means, self.scales, self.quats, self.opacities, self.colors)))

    def numpy(self) -> dict:
        return {k: getattr(self, k).detach().numpy().astype(np.float64)
                for k in ("means", "scales", "quats", "opacities", "colors")}


def save_gaussians(g: GaussianSet, path):
    """Binary dump: u32 count then 14 float32 per Gaussian."""
    arr = torch.cat([g.means, g.scales, g.quats, g.opacities[:, None], g.colors], dim=1)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(g)))
        fh.write(arr.detach().to(torch.float32).numpy().astype("<f4").tobytes())


def load_gaussians(path, dtype=torch.float32) -> GaussianSet:
    with open(path, "rb") as fh:
        (count,) = struct.unpack("<I", fh.read(4))
        arr = np.frombuffer(fh.read(count * 14 * 4), dtype="<f4").reshape(count, 14)
    t = torch.from_numpy(arr.copy()).to(dtype)
    return GaussianSet(t[:, 0:3], t[:, 3:6], t[:, 6:10], t[:, 10], t[:, 11:14])


def quat_to_rot(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from unit quaternions (w, x, y, z); batched (n,4)->(n,3,3)."""
    single = q.dim() == 1
    q = q.reshape(-1, 4)
    w, x, y, z = q.unbind(dim=1)
    rot = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=1).reshape(-1, 3, 3)
    return rot[0] if single else rot


def covariance(scales: torch.Tensor, quats: torch.Tensor) -> torch.Tensor:
    """World covariance R^T diag(s^2) R; symmetric PSD with eigenvalues s^2."""
    single = scales.dim() == 1
    scales = scales.reshape(-1, 3)
    rot = quat_to_rot(quats.reshape(-1, 4))
    cov = rot.transpose(1, 2) @ (scales[:, :, None] ** 2 * rot)
    return cov[0] if single else cov


def project(means: torch.Tensor, cam: Camera):
    """Pinhole projection of world means.

    Returns (uv, depth, J, in_front): J is the (n,2,3) Jacobian of the
    screen map at the camera-space mean; points with depth <= near are
    flagged culled, not errors.
    """
    single = means.dim() == 1
    means = means.reshape(-1, 3)
    dtype = means.dtype
    rot = torch.as_tensor(cam.rotation, dtype=dtype)
    tr = torch.as_tensor(cam.translation, dtype=dtype)
    xc = means @ rot.T + tr
    x, y, z = xc.unbind(dim=1)
    zs = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    zero = torch.zeros_like(z)
    jac = torch.stack([
        cam.fx / zs, zero, -cam.fx * x / zs ** 2,
        zero, cam.fy / zs, -cam.fy * y / zs ** 2,
    ], dim=1).reshape(-1, 2, 3)
    uv = torch.stack([u, v], dim=1)
    in_front = z > cam.near
    if single:
        return uv[0], z[0], jac[0], bool(in_front[0])
    return uv, z, jac, in_front


def screen_cov(cov_world: torch.Tensor, cam: Camera, jac: torch.Tensor) -> torch.Tensor:
    """2x2 screen covariance J R_c Sigma R_c^T J^T with an anti-aliasing floor:
    0.3 is added to the diagonal when the smaller eigenvalue is below 0.3."""
    single = cov_world.dim() == 2
    cov_world = cov_world.reshape(-1, 3, 3)
    jac = jac.reshape(-1, 2, 3)
    rot = torch.as_tensor(cam.rotation, dtype=cov_world.dtype)
    w = jac @ rot
    m = w @ cov_world @ w.transpose(1, 2)
    a, b, c = m[:, 0, 0], m[:, 0, 1], m[:, 1, 1]
    lam_min = 0.5 * (a + c) - torch.sqrt((0.5 * (a - c)) ** 2 + b * b)
    bump = torch.where(lam_min < 0.3, torch.full_like(a, 0.3), torch.zeros_like(a))
    eye = torch.eye(2, dtype=m.dtype)
    m = m + bump[:, None, None] * eye
    return m[0] if single else m


@dataclass
class RenderResult:
    image: torch.Tensor  # (H, W, 3)
    transmittance: torch.Tensor  # (H, W)
    skipped: int  # primitives dropped for singular screen covariance

    def to_numpy(self) -> np.ndarray:
        return self.image.detach().numpy()


def _prepare_splats(g: GaussianSet, cam: Camera):
    for name in ("means", "scales", "quats", "opacities", "colors"):
        t = getattr(g, name)
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite gaussian parameter: {name}")
    uv, depth, jac, in_front = project(g.means, cam)
    cov2 = screen_cov(covariance(g.scales, g.quats), cam, jac)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    valid = in_front & (det > 0) & torch.isfinite(det)
    skipped = int((in_front & ~(det > 0)).sum())
    return uv, depth, (a, b, c, det), valid, skipped


def rasterize(g: GaussianSet, cam: Camera,
              term_threshold: float = TERM_THRESHOLD) -> RenderResult:
    """Tile-free bounded rasterization; differentiable w.r.t. all parameters."""
    dtype = g.means.dtype
    hw = cam.height * cam.width
    if len(g) == 0:
        return RenderResult(torch.zeros(cam.height, cam.width, 3, dtype=dtype),
                            torch.ones(cam.height, cam.width, dtype=dtype), 0)
    uv, depth, (a, b, c, det), valid, skipped = _prepare_splats(g, cam)
    ia, ib, ic = c / det, -b / det, a / det

    # stable depth order; rank is the per-splat blend priority
    order = torch.argsort(depth.detach(), stable=True)
    rank = torch.empty_like(order)
    rank[order] = torch.arange(len(g))

    rx = torch.sqrt(torch.clamp(_QMAX * a.detach(), min=0.0))
    ry = torch.sqrt(torch.clamp(_QMAX * c.detach(), min=0.0))
    ud, vd = uv[:, 0].detach(), uv[:, 1].detach()
    x0 = torch.ceil(ud - rx - 0.5).clamp(0, cam.width - 1).long()
    x1 = torch.floor(ud + rx - 0.5).clamp(0, cam.width - 1).long()
    y0 = torch.ceil(vd - ry - 0.5).clamp(0, cam.height - 1).long()
    y1 = torch.floor(vd + ry - 0.5).clamp(0, cam.height - 1).long()
    onscreen = (ud + rx >= 0) & (ud - rx <= cam.width) & (vd + ry >= 0) & (vd - ry <= cam.height)
    use = valid & onscreen
    nx = torch.where(use, x1 - x0 + 1, torch.zeros_like(x0)).clamp(min=0)
    ny = torch.where(use, y1 - y0 + 1, torch.zeros_like(y0)).clamp(min=0)
    counts = nx * ny

    gid = torch.repeat_interleave(torch.arange(len(g)), counts)
    if len(gid) == 0:
        return RenderResult(torch.zeros(cam.height, cam.width, 3, dtype=dtype),
                            torch.ones(cam.height, cam.width, dtype=dtype), skipped)
    offs = torch.cumsum(counts, 0) - counts
    local = torch.arange(len(gid)) - offs[gid]
    px = x0[gid] + local % nx[gid]
    py = y0[gid] + local // nx[gid]

    dx = (px.to(dtype) + 0.5) - uv[gid, 0]
    dy = (py.to(dtype) + 0.5) - uv[gid, 1]
    qv = ia[gid] * dx * dx + 2 * ib[gid] * dx * dy + ic[gid] * dy * dy
    alpha = (g.opacities[gid] * torch.exp(-0.5 * qv)).clamp(max=ALPHA_MAX)
    keep = alpha >= ALPHA_MIN
    gid, px, py, alpha = gid[keep], px[keep], py[keep], alpha[keep]

    pid = py * cam.width + px
    key = pid * len(g) + rank[gid]
    perm = torch.argsort(key, stable=True)
    gid, pid, alpha = gid[perm], pid[perm], alpha[perm]

    lg = torch.log1p(-alpha)
    cs = torch.cumsum(lg, 0)
    cs_prev = torch.cat([cs.new_zeros(1), cs[:-1]])
    starts = torch.cat([torch.ones(1, dtype=torch.bool), pid[1:] != pid[:-1]])
    seg_id = torch.cumsum(starts.long(), 0) - 1
    base = cs_prev[starts.nonzero(as_tuple=True)[0]]
    trans = torch.exp(cs_prev - base[seg_id])
    live = trans >= term_threshold

    weight = (trans * alpha)[live]
    img = torch.zeros(hw, 3, dtype=dtype)
    img = img.index_add(0, pid[live], weight[:, None] * g.colors[gid[live]])
    tlog = torch.zeros(hw, dtype=dtype)
    tlog = tlog.index_add(0, pid[live], lg[live])
    return RenderResult(img.reshape(cam.height, cam.width, 3),
                        torch.exp(tlog).reshape(cam.height, cam.width), skipped)


def brute_force_render(g: GaussianSet, cam: Camera) -> np.ndarray:
    """Per-pixel reference blend over every splat: no tiling, no early exit.

    Reference semantics for rasterize; float64 numpy throughout.
    """
    p = g.numpy()
    n = len(p["means"])
    img = np.zeros((cam.height, cam.width, 3))
    if n == 0:
        return img
    gg = GaussianSet(*(torch.from_numpy(p[k]) for k in ("means", "scales", "quats", "opacities", "colors")))
    uv, depth, (a, b, c, det), valid, _ = _prepare_splats(gg, cam)
    uv, depth = uv.numpy(), depth.numpy()
    a, b, c, det = a.numpy(), b.numpy(), c.numpy(), det.numpy()
    valid = valid.numpy()
    order = np.argsort(depth, kind="stable")
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    centers = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    color = np.zeros((cam.height * cam.width, 3))
    t = np.ones(cam.height * cam.width)
    for k in order:
        if not valid[k]:
            continue
        d = centers - uv[k]
        qv = (c[k] * d[:, 0] ** 2 - 2 * b[k] * d[:, 0] * d[:, 1] + a[k] * d[:, 1] ** 2) / det[k]
        alpha = np.minimum(p["opacities"][k] * np.exp(-0.5 * qv), ALPHA_MAX)
        alpha[alpha < ALPHA_MIN] = 0.0
        color += (t * alpha)[:, None] * p["colors"][k]
        t = t * (1.0 - alpha)
    return color.reshape(cam.height, cam.width, 3)


def rasterize_backward(g: GaussianSet, cam: Camera, grad_image: torch.Tensor) -> dict:
    """Gradients of sum(image * grad_image) w.r.t. every Gaussian parameter.

    Culled or skipped primitives receive exact zeros.
    """
    leaves = {k: getattr(g, k).detach().clone().requires_grad_(True)
              for k in ("means", "scales", "quats", "opacities", "colors")}
    out = rasterize(GaussianSet(**leaves), cam)
    loss = (out.image * torch.as_tensor(grad_image, dtype=out.image.dtype)).sum()
    loss.backward()
    return {k: (v.grad if v.grad is not None else torch.zeros_like(v))
            for k, v in leaves.items()}
