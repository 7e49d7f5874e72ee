"""Head-CT preprocessing: intensity remap, brain extraction, registration.

Raw HU volumes become skull-stripped, intensity-normalized volumes on a
common template grid. Every step is a pure function of its inputs, so a
cohort can be preprocessed with per-subject parallelism.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volio import SingularAffine, Unit, Volume, grid_coords, resample, trilinear_sample


class PrepError(Exception):
    pass


class EmptyMask(PrepError):
    """No voxel falls inside the tissue window."""


class DegenerateInput(PrepError):
    """Constant volume cannot drive intensity registration."""


class PipelineError(PrepError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


class MapMode(enum.Enum):
    SHIFT_CLAMP = "ShiftClamp"
    WINDOW_STRETCH = "WindowStretch"


@dataclass(frozen=True)
class IntensityMap:
    """Monotone non-negative remap of HU values, lossless on integer HU.

    ShiftClamp: clamp to [hu_min, hu_max] then shift so hu_min -> 0.
    WindowStretch: same, plus the (window_low, window_high) HU band gets
    slope gain >= 1 with the upper segment re-offset to stay continuous.
    """

    mode: MapMode = MapMode.SHIFT_CLAMP
    hu_min: float = -1024.0
    hu_max: float = 3071.0
    window_low: float = 0.0
    window_high: float = 100.0
    gain: float = 1.0

    def __post_init__(self):
        if not self.hu_min < self.hu_max:
            raise ValueError("hu_min must be < hu_max")
        if self.mode is MapMode.WINDOW_STRETCH:
            if self.gain < 1.0:
                raise ValueError("gain must be >= 1")
            if not self.hu_min <= self.window_low < self.window_high <= self.hu_max:
                raise ValueError("stretch window must sit inside [hu_min, hu_max]")

    def apply(self, hu: np.ndarray) -> np.ndarray:
        hu = np.asarray(hu, dtype=np.float64)
        clamped = np.clip(hu, self.hu_min, self.hu_max)
        if self.mode is MapMode.SHIFT_CLAMP:
            return clamped - self.hu_min
        lo, hi, g = self.window_low, self.window_high, self.gain
        below = np.minimum(clamped, lo) - self.hu_min
        inside = g * (np.clip(clamped, lo, hi) - lo)
        above = np.maximum(clamped, hi) - hi
        return below + inside + above

    def clamp_count(self, hu: np.ndarray) -> int:
        hu = np.asarray(hu)
        return int(np.count_nonzero((hu < self.hu_min) | (hu > self.hu_max)))


@dataclass(frozen=True)
class BrainMask:
    grid: np.ndarray
    affine: np.ndarray
    voxel_count: int

    def volume_ml(self) -> float:
        vox_mm3 = abs(np.linalg.det(self.affine[:3, :3]))
        return self.voxel_count * vox_mm3 / 1000.0


class TransformKind(enum.Enum):
    IDENTITY = "Identity"
    RIGID = "Rigid"
    AFFINE = "Affine"


@dataclass(frozen=True)
class AffineTransform:
    """World-mm to world-mm map, applied fixed-space -> moving-space."""

    matrix: np.ndarray
    kind: TransformKind

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("transform must be 4x4 with bottom row (0,0,0,1)")
        if self.kind is TransformKind.RIGID:
            R = m[:3, :3]
            if not (np.allclose(R @ R.T, np.eye(3), atol=1e-6) and np.linalg.det(R) > 0):
                raise ValueError("rigid transform needs orthonormal 3x3 with det +1")
        object.__setattr__(self, "matrix", m)


def to_nonnegative(v: Volume, m: IntensityMap) -> tuple[Volume, int]:
    """Remap an HU volume to non-negative intensities; returns clamp count."""
    if v.unit is not Unit.HU:
        raise PrepError(f"expected HU volume, got {v.unit}")
    clamped = m.clamp_count(v.data)
    out = m.apply(v.data).astype(np.float32)
    return Volume(out, v.affine, unit=Unit.NONNEG), clamped


def _ball(radius: int) -> np.ndarray:
    r = int(radius)
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return (x * x + y * y + z * z) <= r * r


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_SIX_CONN)
    if n == 0:
        raise EmptyMask("no voxel in tissue window")
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == int(np.argmax(counts))


def extract_brain(
    v: Volume,
    tissue_low: float = 0.0,
    tissue_high: float = 100.0,
    closing_radius_vox: int = 2,
    intensity_map: IntensityMap | None = None,
) -> BrainMask:
    """Threshold-and-morphology brain mask.

    The tissue window is given in HU; when the volume is already remapped to
    non-negative units the window is pushed through the same IntensityMap
    (ShiftClamp defaults when none given). Steps: window threshold, largest
    6-connected component, ball closing, hole fill.
    """
    lo, hi = tissue_low, tissue_high
    if v.unit is not Unit.HU:
        m = intensity_map if intensity_map is not None else IntensityMap()
        lo, hi = float(m.apply(np.array(lo))), float(m.apply(np.array(hi)))
    raw = (v.data >= lo) & (v.data <= hi)
    if not raw.any():
        raise EmptyMask("no voxel in tissue window")
    mask = _largest_component(raw)
    if closing_radius_vox > 0:
        ball = _ball(closing_radius_vox)
        pad = closing_radius_vox + 1
        padded = np.pad(mask, pad)
        padded = ndimage.binary_closing(padded, structure=ball)
        mask = padded[pad:-pad, pad:-pad, pad:-pad]
    mask = ndimage.binary_fill_holes(mask, structure=_SIX_CONN)
    # closing can in principle bridge or pinch; re-taking the largest
    # component keeps the single-component invariant unconditionally
    mask = _largest_component(mask)
    return BrainMask(grid=mask, affine=v.affine, voxel_count=int(mask.sum()))


# ---------------------------------------------------------------------------
# registration


@dataclass
class RegOptions:
    levels: int = 3
    iters_per_level: int = 100
    step: float = 0.1
    kind: TransformKind = TransformKind.RIGID
    tol: float = 1e-10


@dataclass
class RegDiagnostics:
    initial_mse: float
    final_mse: float
    iterations: int
    converged: bool
    level_mse: list[float] = field(default_factory=list)


def _euler_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _params_to_matrix(params: np.ndarray, kind: TransformKind, center: np.ndarray) -> np.ndarray:
    """Map optimizer parameters to a centered world->world 4x4."""
    m = np.eye(4)
    if kind is TransformKind.RIGID:
        R = _euler_matrix(params[0], params[1], params[2])
        t = params[3:6]
    else:
        R = np.eye(3) + params[:9].reshape(3, 3)
        t = params[9:12]
    m[:3, :3] = R
    m[:3, 3] = center - R @ center + t
    return m


def _n_params(kind: TransformKind) -> int:
    return 6 if kind is TransformKind.RIGID else 12


def _downsample(vol: Volume, factor: int) -> Volume:
    if factor == 1:
        return vol
    sm = ndimage.gaussian_filter(vol.data.astype(np.float64), sigma=factor / 2.0)
    data = sm[::factor, ::factor, ::factor].astype(np.float32)
    aff = vol.affine.copy()
    aff[:3, :3] = aff[:3, :3] * factor
    return Volume(data, aff, unit=vol.unit)


def _mse_at(moving: Volume, fixed: Volume, matrix: np.ndarray, fixed_grid: np.ndarray) -> float:
    src = np.linalg.inv(moving.affine) @ matrix @ fixed.affine @ fixed_grid
    warped = trilinear_sample(moving.data, src[:3])
    diff = warped - fixed.data.astype(np.float64).ravel()
    return float(np.mean(diff * diff))


def _sample_points(fixed: Volume, max_points: int = 40000) -> tuple[np.ndarray, np.ndarray]:
    """Jittered, subsampled probe points for the registration objective.

    Probing at exact voxel centers grid-locks the optimizer: with aligned
    grids every sample sits on a trilinear-interpolation kink and finite
    differences return artifact gradients. A fixed sub-voxel jitter keeps
    the objective smooth while staying deterministic.
    """
    rng = np.random.default_rng(20230719)
    grid = grid_coords(fixed.shape).copy()
    n = grid.shape[1]
    jitter = rng.uniform(-0.49, 0.49, size=(3, n))
    grid[:3] += jitter
    if n > max_points:
        keep = rng.choice(n, size=max_points, replace=False)
        grid = grid[:, keep]
    vals = trilinear_sample(fixed.data, grid[:3])
    return grid, vals


def _objective(moving: Volume, fixed_affine: np.ndarray, matrix: np.ndarray,
               points: np.ndarray, fixed_vals: np.ndarray) -> float:
    src = np.linalg.inv(moving.affine) @ matrix @ fixed_affine @ points
    warped = trilinear_sample(moving.data, src[:3])
    diff = warped - fixed_vals
    return float(np.mean(diff * diff))


def _axis_polish(cost, params: np.ndarray, scale: np.ndarray, mse: float,
                 q_step: float, min_step: float = 2e-4) -> tuple[np.ndarray, float, int]:
    """Coordinate-descent refinement; steps are in displacement units (mm)."""
    n = len(params)
    sweeps = 0
    while q_step >= min_step:
        sweeps += 1
        improved = False
        for j in range(n):
            for s in (q_step, -q_step):
                cand = params.copy()
                cand[j] += s / scale[j]
                c = cost(cand)
                if c < mse:
                    params, mse = cand, c
                    improved = True
                    break
        if not improved:
            q_step *= 0.5
        if sweeps >= 200:
            break
    return params, mse, sweeps


def register_affine(
    moving: Volume, fixed: Volume, opts: RegOptions | None = None
) -> tuple[AffineTransform, Volume, RegDiagnostics]:
    """Recover the world->world transform minimizing intensity MSE.

    Coarse-to-fine gradient descent (downsampling 4, 2, 1) with central
    finite-difference gradients on the transform parameters and step
    halving, so the objective never increases across accepted iterates.
    Non-convergence is reported in the diagnostics, never raised.
    """
    opts = opts or RegOptions()
    if float(np.std(moving.data)) == 0.0 or float(np.std(fixed.data)) == 0.0:
        raise DegenerateInput("constant volume")

    center = (fixed.affine @ np.append((np.array(fixed.shape) - 1) / 2.0, 1.0))[:3]
    n = _n_params(opts.kind)
    params = np.zeros(n)
    # characteristic radius in mm: a unit rotation/linear-part change moves
    # points by ~radius, a unit translation by 1 mm. Optimizing in
    # displacement-equivalent coordinates q = scale * p keeps the search
    # isotropic regardless of the mixed rad/mm parameter units.
    radius = float(np.mean(fixed.voxel_sizes() * np.array(fixed.shape)) / 2.0)
    scale = np.ones(n)
    scale[: n - 3] = radius
    eps = 1e-2 / scale

    factors = [2 ** (opts.levels - 1 - i) for i in range(opts.levels)]
    total_iters = 0
    diag_levels: list[float] = []
    initial_mse = _mse_at(
        moving, fixed, _params_to_matrix(params, opts.kind, center), grid_coords(fixed.shape)
    )

    for factor in factors:
        mv = _downsample(moving, factor)
        fx = _downsample(fixed, factor)
        points, fixed_vals = _sample_points(fx)
        step = opts.step * factor

        def cost(p):
            return _objective(mv, fx.affine, _params_to_matrix(p, opts.kind, center),
                              points, fixed_vals)

        mse = cost(params)
        for _ in range(opts.iters_per_level):
            total_iters += 1
            grad = np.zeros(n)
            for j in range(n):
                p_hi = params.copy()
                p_hi[j] += eps[j]
                p_lo = params.copy()
                p_lo[j] -= eps[j]
                grad[j] = (cost(p_hi) - cost(p_lo)) / (2 * eps[j])
            grad_q = grad / scale
            gnorm = float(np.linalg.norm(grad_q))
            if gnorm == 0.0:
                break
            # unit descent direction in q-space, expressed in p-space
            direction = -(grad_q / gnorm) / scale
            accepted = False
            trial_step = step
            for _ in range(16):
                cand = params + trial_step * direction
                cand_mse = cost(cand)
                if cand_mse < mse:
                    params, mse = cand, cand_mse
                    step = trial_step * 1.5
                    accepted = True
                    break
                trial_step *= 0.5
            if not accepted or mse <= opts.tol:
                break
        # interpolation kinks can trap the all-parameter descent direction in
        # shallow local minima; an axis-aligned polish at full resolution
        # escapes them (coarse levels skip it, their optima are biased)
        if factor == 1:
            params, mse, polish_iters = _axis_polish(cost, params, scale, mse, q_step=0.2)
            total_iters += polish_iters
        diag_levels.append(mse)

    matrix = _params_to_matrix(params, opts.kind, center)
    final_mse = _mse_at(moving, fixed, matrix, grid_coords(fixed.shape))
    if final_mse > initial_mse:
        # keep the contract: never return something worse than identity
        matrix = _params_to_matrix(np.zeros(n), opts.kind, center)
        final_mse = initial_mse
    transform = AffineTransform(matrix, opts.kind)
    warped = apply_transform(moving, fixed, transform)
    diag = RegDiagnostics(
        initial_mse=float(initial_mse),
        final_mse=final_mse,
        iterations=total_iters,
        converged=final_mse <= max(opts.tol, 1e-6 * initial_mse),
        level_mse=diag_levels,
    )
    return transform, warped, diag


def apply_transform(
    moving: Volume, fixed: Volume, transform: AffineTransform, interp: str = "trilinear"
) -> Volume:
    """Resample moving onto fixed's grid through the world->world transform."""
    warped = resample(moving, transform.matrix @ fixed.affine, fixed.shape, interp=interp)
    return Volume(warped.data, fixed.affine, unit=moving.unit)


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PipelineResult:
    volume: Volume
    mask: BrainMask
    transform: AffineTransform
    qc: dict


def _is_axis_aligned(affine: np.ndarray) -> bool:
    off = affine[:3, :3].copy()
    np.fill_diagonal(off, 0.0)
    return bool(np.all(np.abs(off) < 1e-9))


def axis_aligned_grid(v: Volume) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Axis-aligned grid covering v's world bounding box at its voxel sizes."""
    corners = grid_coords((2, 2, 2)).copy()
    corners[:3] *= np.array(v.shape)[:, None] - 1
    world = (v.affine @ corners)[:3]
    lo, hi = world.min(axis=1), world.max(axis=1)
    sizes = v.voxel_sizes()
    shape = tuple(int(np.floor((hi[i] - lo[i]) / sizes[i])) + 1 for i in range(3))
    aff = np.diag([sizes[0], sizes[1], sizes[2], 1.0])
    aff[:3, 3] = lo
    return aff, shape


def run_pipeline(
    v: Volume,
    template: Volume,
    m: IntensityMap | None = None,
    reg_opts: RegOptions | None = None,
) -> PipelineResult:
    """HU head CT -> masked, registered, [0,1]-normalized volume on the template grid.

    Order: resample to an axis-aligned grid, intensity remap, brain
    extraction with background zeroing, affine registration to the
    template, percentile rescale (0.5th/99.5th) to [0,1].
    """
    m = m or IntensityMap()
    reg_opts = reg_opts or RegOptions(kind=TransformKind.AFFINE)
    qc: dict = {"intensity_mode": m.mode.value}

    def run(stage, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as e:  # noqa: BLE001 - stage labeling is the contract
            raise PipelineError(stage, e) from e

    if not _is_axis_aligned(v.affine):
        aff, shape = axis_aligned_grid(v)
        v = run("resample", resample, v, aff, shape)
    nonneg, clamped = run("to_nonnegative", to_nonnegative, v, m)
    qc["clamped_voxels"] = clamped
    mask = run("extract_brain", extract_brain, nonneg, intensity_map=m)
    qc["mask_voxels"] = mask.voxel_count
    qc["mask_ml"] = mask.volume_ml()
    masked = nonneg.with_data(np.where(mask.grid, nonneg.data, 0.0).astype(np.float32))
    transform, warped, diag = run("register_affine", register_affine, masked, template, reg_opts)
    qc["registration_mse"] = diag.final_mse
    qc["registration_iterations"] = diag.iterations
    lo, hi = np.percentile(warped.data, [0.5, 99.5])
    if hi <= lo:
        raise PipelineError("normalize", DegenerateInput("degenerate intensity window"))
    out = np.clip((warped.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    qc["norm_window"] = [float(lo), float(hi)]
    volume = Volume(out.astype(np.float32), template.affine, unit=Unit.NORMALIZED)
    return PipelineResult(volume=volume, mask=mask, transform=transform, qc=qc)


def desk_template(shape: tuple[int, int, int] = (64, 76, 64), voxel_mm: float = 3.0) -> Volume:
    """Deterministic synthetic head template on a desk-scale grid.

    Smooth ellipsoidal 'brain' with fixed internal intensity bumps, in the
    same non-negative intensity range the default ShiftClamp map produces
    for soft tissue. Stands in for a population CT atlas.
    """
    nx, ny, nz = shape
    x, y, z = np.meshgrid(
        np.linspace(-1, 1, nx), np.linspace(-1, 1, ny), np.linspace(-1, 1, nz), indexing="ij"
    )
    r2 = (x / 0.72) ** 2 + (y / 0.82) ** 2 + (z / 0.72) ** 2
    inside = r2 <= 1.0
    base = 1064.0 + 40.0 * np.exp(-((x - 0.2) ** 2 + y**2 + z**2) / 0.08)
    base += 30.0 * np.exp(-((x + 0.25) ** 2 + (y - 0.3) ** 2 + (z + 0.1) ** 2) / 0.05)
    base -= 25.0 * np.exp(-((y + 0.4) ** 2 + z**2) / 0.1)
    data = np.where(inside, base * (1.0 - 0.35 * r2), 0.0).astype(np.float32)
    aff = np.diag([voxel_mm, voxel_mm, voxel_mm, 1.0])
    aff[:3, 3] = -voxel_mm * (np.array(shape) - 1) / 2.0
    return Volume(data, aff, unit=Unit.NONNEG)
