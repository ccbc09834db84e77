"""Deterministic volume-to-tensor preprocessing.

Chain per volume: brain mask -> isotropic resample (trilinear, centered,
zero outside the field of view) -> z-score normalization inside the mask
with background set to 0. Augmentation is a closed group of 16 exact
axis transforms: z-axis quarter turns times two reflections.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume_io import Volume

STD_GUARD = 1e-6
N_AUGMENTS = 16


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 1.5
    target_dims: tuple = (64, 64, 64)
    mask_mode: str = "auto"  # auto | provided
    normalize: str = "zscore_in_mask"

    def __post_init__(self):
        self.target_dims = tuple(int(d) for d in self.target_dims)
        if self.target_spacing_mm <= 0:
            raise ValidationError("bad spacing", f"target spacing must be > 0, got {self.target_spacing_mm}")
        if len(self.target_dims) != 3 or any(d < 8 for d in self.target_dims):
            raise ValidationError("bad dims", f"target dims must be three ints >= 8, got {self.target_dims}")
        if self.mask_mode not in ("auto", "provided"):
            raise ValidationError("bad mask mode", f"mask_mode must be auto or provided, got {self.mask_mode!r}")


def otsu_threshold(values, bins=256):
    """Threshold maximizing between-class variance of a 1D sample."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    w = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    cum_w = np.cumsum(w)
    cum_m = np.cumsum(w * centers)
    total_w, total_m = cum_w[-1], cum_m[-1]
    w0 = cum_w[:-1]
    w1 = total_w - w0
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, cum_m[:-1] / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (total_m - cum_m[:-1]) / np.maximum(w1, 1), 0.0)
    between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    k = int(np.argmax(between))
    return float(edges[k + 1])


_CLOSE_STRUCT = ndimage.generate_binary_structure(3, 1)  # radius-1 ball (6-neighborhood)


def brain_mask(volume):
    """Foreground mask: Otsu threshold, largest 6-connected component,
    one binary closing with a radius-1 ball, interior holes filled.

    Raises "no foreground" when nothing survives.
    """
    vox = volume.voxels
    if float(vox.max()) <= float(vox.min()):
        raise ValidationError("no foreground", "mask pipeline produced an empty mask (constant volume)")
    thr = otsu_threshold(vox)
    fg = vox > thr
    if not fg.any():
        raise ValidationError("no foreground", "mask pipeline produced an empty mask (nothing above threshold)")
    labels, n = ndimage.label(fg, structure=_CLOSE_STRUCT)
    if n == 0:
        raise ValidationError("no foreground", "mask pipeline produced an empty mask (no components)")
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    mask = labels == int(np.argmax(counts))
    mask = ndimage.binary_closing(mask, structure=_CLOSE_STRUCT, iterations=1)
    mask = ndimage.binary_fill_holes(mask)
    if not mask.any():
        raise ValidationError("no foreground", "mask pipeline produced an empty mask")
    return Volume(voxels=mask.astype(np.float32), spacing_mm=volume.spacing_mm, modality="MASK",
                  orientation=volume.orientation)


def resample_isotropic(volume, config):
    """Trilinear resample onto an isotropic grid of config.target_dims.

    The output grid shares the input's physical center; samples outside
    the input field of view are 0.
    """
    src = volume.voxels.astype(np.float64)
    d, h, w = src.shape
    out_dims = config.target_dims
    s_out = config.target_spacing_mm
    s_in = volume.spacing_mm

    coords = []
    for axis, (n_out, n_in, sp_in) in enumerate(zip(out_dims, (d, h, w), s_in)):
        # physical offset from center, mapped back to input voxel index
        mm = (np.arange(n_out, dtype=np.float64) - (n_out - 1) / 2.0) * s_out
        coords.append(mm / sp_in + (n_in - 1) / 2.0)
    gz = coords[0][:, None, None]
    gy = coords[1][None, :, None]
    gx = coords[2][None, None, :]

    out = _trilinear(src, gz, gy, gx)
    return Volume(voxels=out.astype(np.float32), spacing_mm=(s_out, s_out, s_out),
                  modality=volume.modality, orientation=volume.orientation)


def _trilinear(src, gz, gy, gx):
    """Gather trilinear samples at broadcastable fractional coordinates,
    treating everything outside the source extent as 0."""
    d, h, w = src.shape
    z0 = np.floor(gz).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    x0 = np.floor(gx).astype(np.int64)
    fz, fy, fx = gz - z0, gy - y0, gx - x0

    out = 0.0
    for dz in (0, 1):
        wz = np.where(dz == 1, fz, 1.0 - fz)
        zz = z0 + dz
        vz = (zz >= 0) & (zz < d)
        for dy in (0, 1):
            wy = np.where(dy == 1, fy, 1.0 - fy)
            yy = y0 + dy
            vy = (yy >= 0) & (yy < h)
            for dx in (0, 1):
                wx = np.where(dx == 1, fx, 1.0 - fx)
                xx = x0 + dx
                vx = (xx >= 0) & (xx < w)
                valid = vz & vy & vx
                vals = src[np.clip(zz, 0, d - 1), np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
                out = out + wz * wy * wx * np.where(valid, vals, 0.0)
    return out


def resample_mask(mask_volume, config):
    """Resample a binary mask with the same trilinear kernel, then rebinarize at 0.5."""
    resampled = resample_isotropic(mask_volume, config)
    binary = (resampled.voxels >= 0.5).astype(np.float32)
    return Volume(voxels=binary, spacing_mm=resampled.spacing_mm, modality="MASK",
                  orientation=resampled.orientation)


def normalize_intensity(volume, mask_volume):
    """Z-score inside the mask (std floored at 1e-6), background zeroed."""
    mask = mask_volume.voxels > 0.5
    if not mask.any():
        raise ValidationError("no foreground", "normalization needs a non-empty mask")
    vox = volume.voxels.astype(np.float64)
    vals = vox[mask]
    mu = float(vals.mean())
    sd = max(float(vals.std()), STD_GUARD)
    out = np.zeros_like(vox)
    out[mask] = (vals - mu) / sd
    return Volume(voxels=out.astype(np.float32), spacing_mm=volume.spacing_mm,
                  modality=volume.modality, orientation=volume.orientation)


def channelize_adc(volume):
    """Replicate the single channel three times: [D,H,W] -> [3,D,H,W]."""
    vox = volume.voxels if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    return np.repeat(vox[None, ...], 3, axis=0)


@dataclass(frozen=True)
class AugmentId:
    """One of 16 exact transforms: index = rot + 4*flip_xy + 8*flip_yz.

    rot is the number of 90-degree turns about the z axis (permutes H and
    W), flip_xy reflects across the XY plane (reverses D), flip_yz
    reflects across the YZ plane (reverses W). Index 0 is the identity.
    """

    index: int

    def __post_init__(self):
        if not 0 <= self.index < N_AUGMENTS:
            raise ValidationError("bad augment id", f"augment index must be in [0,{N_AUGMENTS - 1}], got {self.index}")

    @property
    def rotation(self):
        return self.index % 4

    @property
    def flip_xy(self):
        return bool((self.index // 4) % 2)

    @property
    def flip_yz(self):
        return bool((self.index // 8) % 2)


def augment(array, aug_id):
    """Apply one of the 16 transforms to the trailing [D,H,W] axes.

    Pure axis permutation/reversal, no interpolation; voxel values are
    preserved as a multiset. Rotation needs H == W.
    """
    if isinstance(aug_id, int):
        aug_id = AugmentId(aug_id)
    a = np.asarray(array)
    if a.ndim < 3:
        raise ValidationError("shape mismatch", f"augment expects >= 3 axes, got shape {list(a.shape)}")
    if aug_id.rotation and a.shape[-2] != a.shape[-1]:
        raise ValidationError("shape mismatch", f"rotation needs square in-plane dims, got H={a.shape[-2]} W={a.shape[-1]}")
    out = a
    if aug_id.rotation:
        out = np.rot90(out, k=aug_id.rotation, axes=(-2, -1))
    if aug_id.flip_xy:
        out = np.flip(out, axis=-3)
    if aug_id.flip_yz:
        out = np.flip(out, axis=-1)
    return np.ascontiguousarray(out)


def preprocess_volume(volume, config, mask_volume=None):
    """Full deterministic chain; returns (processed volume, resampled mask)."""
    if mask_volume is None:
        if config.mask_mode == "provided":
            raise ValidationError("missing mask", "mask_mode=provided but no mask supplied")
        mask_volume = brain_mask(volume)
    rs_vol = resample_isotropic(volume, config)
    rs_mask = resample_mask(mask_volume, config)
    if not (rs_mask.voxels > 0.5).any():
        raise ValidationError("no foreground", "mask is empty after resampling")
    return normalize_intensity(rs_vol, rs_mask), rs_mask
