"""Analytic deformation fields, image warping and dataset assembly.

Warping is Eulerian: ``deformed(x, y) = reference(x - u(x, y), y - v(x, y))``
and every ground-truth field is reported on the deformed-frame grid.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats
from .fields import DisplacementField, GrayImage, StrainField, sample_bicubic
from .speckle import MIN_SIZE, SpeckleParams, render_reference

KINDS = ("translation", "affine", "gaussian_bumps", "fourier", "damage_concentration")
MANIFEST_VERSION = 1

# documented ranges for the per-kind parameters
COUNT_RANGE = (1, 8)
WIDTH_RANGE = (2.0, 256.0)
MODES_RANGE = (1, 5)
WAVELENGTH_RANGE = (8.0, 4096.0)
HOTSPOT_RANGE = (1.5, 8.0)


@dataclass(frozen=True)
class DeformationSpec:
    """Recipe for one analytic displacement field.

    ``width_*`` are Gaussian standard deviations in pixels.  When
    ``coefficients`` is given the field is used verbatim instead of being
    drawn and rescaled: ``(c1, c2)`` for translation, ``(a1, a2, a3, b1, b2,
    b3)`` for affine, meaning ``u = a1 + a2 x + a3 y`` and
    ``v = b1 + b2 x + b3 y``.
    """

    kind: str = "gaussian_bumps"
    amplitude_max: float = 1.0
    seed: int = 0
    count: int = 3
    width_min: float = 8.0
    width_max: float = 16.0
    modes: int = 3
    wavelength_min: float = 32.0
    wavelength_max: float = 128.0
    hotspot_width: float = 3.0
    coefficients: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown deformation kind {self.kind!r}; expected one of {KINDS}")
        if not self.amplitude_max > 0:
            raise ValueError("amplitude_max must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not COUNT_RANGE[0] <= self.count <= COUNT_RANGE[1]:
            raise ValueError(f"count must lie in {COUNT_RANGE}")
        if not WIDTH_RANGE[0] <= self.width_min <= self.width_max <= WIDTH_RANGE[1]:
            raise ValueError(f"need {WIDTH_RANGE[0]} <= width_min <= width_max <= {WIDTH_RANGE[1]}")
        if not MODES_RANGE[0] <= self.modes <= MODES_RANGE[1]:
            raise ValueError(f"modes must lie in {MODES_RANGE}")
        if not WAVELENGTH_RANGE[0] <= self.wavelength_min <= self.wavelength_max <= WAVELENGTH_RANGE[1]:
            raise ValueError(f"wavelengths must satisfy {WAVELENGTH_RANGE[0]} <= min <= max")
        if not HOTSPOT_RANGE[0] <= self.hotspot_width <= HOTSPOT_RANGE[1]:
            raise ValueError(f"hotspot_width must lie in {HOTSPOT_RANGE}")
        if self.coefficients is not None:
            n = {"translation": 2, "affine": 6}.get(self.kind)
            if n is None:
                raise ValueError(f"explicit coefficients are not supported for kind {self.kind!r}")
            coef = tuple(float(c) for c in self.coefficients)
            if len(coef) != n:
                raise ValueError(f"{self.kind} takes {n} coefficients, got {len(coef)}")
            object.__setattr__(self, "coefficients", coef)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["coefficients"] is not None:
            d["coefficients"] = list(d["coefficients"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown deformation parameter(s): {', '.join(sorted(unknown))}")
        kw = dict(d)
        if kw.get("coefficients") is not None:
            kw["coefficients"] = tuple(kw["coefficients"])
        return cls(**kw)

    def replace(self, **changes) -> "DeformationSpec":
        return dataclasses.replace(self, **changes)


def _grid(h, w):
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return x, y


def _affine_parts(c, x, y):
    a1, a2, a3, b1, b2, b3 = c
    u = a1 + a2 * x + a3 * y
    v = b1 + b2 * x + b3 * y
    ones = np.ones_like(x)
    return u, v, a2 * ones, a3 * ones, b2 * ones, b3 * ones


def _random_affine(rng, h, w):
    cx, cy = (w - 1) / 2, (h - 1) / 2
    t = rng.uniform(-0.5, 0.5, 2)
    g = rng.uniform(-1.0, 1.0, (2, 2)) / max(h, w)
    # centred form u = t + G (p - c), rewritten about the origin
    return (t[0] - g[0, 0] * cx - g[0, 1] * cy, g[0, 0], g[0, 1],
            t[1] - g[1, 0] * cx - g[1, 1] * cy, g[1, 0], g[1, 1])


def _bumps(rng, x, y, k, wmin, wmax, h, w):
    u = np.zeros_like(x)
    v = np.zeros_like(x)
    ux = np.zeros_like(x)
    uy = np.zeros_like(x)
    vx = np.zeros_like(x)
    vy = np.zeros_like(x)
    for _ in range(k):
        xc, yc = rng.uniform(0, w - 1), rng.uniform(0, h - 1)
        s = rng.uniform(wmin, wmax)
        au, av = rng.choice([-1.0, 1.0], 2) * rng.uniform(0.3, 1.0, 2)
        dx, dy = x - xc, y - yc
        g = np.exp(-(dx * dx + dy * dy) / (2 * s * s))
        gx, gy = -dx / (s * s) * g, -dy / (s * s) * g
        u += au * g
        v += av * g
        ux += au * gx
        uy += au * gy
        vx += av * gx
        vy += av * gy
    return u, v, ux, uy, vx, vy


def _fourier(rng, x, y, m, lmin, lmax):
    u = np.zeros_like(x)
    v = np.zeros_like(x)
    ux = np.zeros_like(x)
    uy = np.zeros_like(x)
    vx = np.zeros_like(x)
    vy = np.zeros_like(x)
    for _ in range(m):
        lam = rng.uniform(lmin, lmax)
        theta = rng.uniform(0, 2 * np.pi)
        kx, ky = 2 * np.pi / lam * np.cos(theta), 2 * np.pi / lam * np.sin(theta)
        phase = rng.uniform(0, 2 * np.pi)
        au, av = rng.uniform(-1.0, 1.0, 2)
        arg = kx * x + ky * y + phase
        s, c = np.sin(arg), np.cos(arg)
        u += au * s
        v += av * s
        ux += au * kx * c
        uy += au * ky * c
        vx += av * kx * c
        vy += av * ky * c
    return u, v, ux, uy, vx, vy


def _fields(u, v, ux, uy, vx, vy):
    return DisplacementField(u, v), StrainField(ux, vy, 0.5 * (uy + vx))


def sample_field(spec: DeformationSpec, h: int, w: int) -> tuple[DisplacementField, StrainField]:
    """Displacement field of ``spec`` on an ``h x w`` grid with its exact strain.

    Randomly drawn fields are rescaled so that ``max(|u|, |v|)`` over the grid
    equals ``spec.amplitude_max``.
    """
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"fields must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    x, y = _grid(h, w)
    rng = np.random.default_rng(int(spec.seed))

    if spec.coefficients is not None:
        c = spec.coefficients
        if spec.kind == "translation":
            c = (c[0], 0.0, 0.0, c[1], 0.0, 0.0)
        parts = _affine_parts(c, x, y)
        peak = max(np.abs(parts[0]).max(), np.abs(parts[1]).max())
        if peak > spec.amplitude_max * (1 + 1e-12):
            raise ValueError(f"explicit field peaks at {peak:.6g} px, above amplitude_max "
                             f"{spec.amplitude_max:.6g}")
        return _fields(*parts)

    if spec.kind == "translation":
        c = rng.uniform(-1.0, 1.0, 2)
        parts = _affine_parts((c[0], 0.0, 0.0, c[1], 0.0, 0.0), x, y)
    elif spec.kind == "affine":
        parts = _affine_parts(_random_affine(rng, h, w), x, y)
    elif spec.kind == "gaussian_bumps":
        parts = _bumps(rng, x, y, spec.count, spec.width_min, spec.width_max, h, w)
    elif spec.kind == "fourier":
        parts = _fourier(rng, x, y, spec.modes, spec.wavelength_min, spec.wavelength_max)
    else:  # damage_concentration
        bg = _affine_parts(_random_affine(rng, h, w), x, y)
        bg_peak = max(np.abs(bg[0]).max(), np.abs(bg[1]).max())
        # keep the hot-spot away from the border so its gradient stays in view
        margin = min(3 * spec.hotspot_width, (min(h, w) - 1) / 3)
        xc = rng.uniform(margin, w - 1 - margin)
        yc = rng.uniform(margin, h - 1 - margin)
        hs = spec.hotspot_width
        dx, dy = x - xc, y - yc
        g = np.exp(-(dx * dx + dy * dy) / (2 * hs * hs))
        gx, gy = -dx / (hs * hs) * g, -dy / (hs * hs) * g
        direction = rng.uniform(0, 2 * np.pi)
        au, av = np.cos(direction), np.sin(direction)
        wb = 0.5 / bg_peak
        parts = (wb * bg[0] + au * g, wb * bg[1] + av * g,
                 wb * bg[2] + au * gx, wb * bg[3] + au * gy,
                 wb * bg[4] + av * gx, wb * bg[5] + av * gy)

    peak = max(np.abs(parts[0]).max(), np.abs(parts[1]).max())
    if peak == 0:
        raise ValueError("degenerate field with zero amplitude")
    scale = spec.amplitude_max / peak
    return _fields(*(p * scale for p in parts))


def warp(img: GrayImage, f: DisplacementField) -> GrayImage:
    """Deformed frame: each output pixel samples ``img`` at ``(x - u, y - v)``."""
    if img.shape != f.shape:
        raise ValueError(f"image {img.shape} and field {f.shape} differ in shape")
    x, y = _grid(*img.shape)
    return GrayImage(sample_bicubic(img.data, x - f.u, y - f.v, clip=(0.0, 1.0)))


@dataclass(frozen=True, eq=False)
class SamplePair:
    reference: GrayImage
    deformed: GrayImage
    truth_disp: DisplacementField
    truth_strain: StrainField
    spec: DeformationSpec
    speckle: SpeckleParams

    def __post_init__(self):
        shapes = {self.reference.shape, self.deformed.shape, self.truth_disp.shape,
                  self.truth_strain.shape}
        if len(shapes) != 1:
            raise ValueError(f"sample rasters disagree in shape: {sorted(shapes)}")


def make_pair(speckle: SpeckleParams, spec: DeformationSpec, h: int, w: int) -> SamplePair:
    ref = render_reference(speckle, h, w)
    disp, strain = sample_field(spec, h, w)
    return SamplePair(ref, warp(ref, disp), disp, strain, spec, speckle)


def make_sequence(ref: GrayImage, fields) -> list[GrayImage]:
    """Frames ``[ref, warp(ref, f1), warp(ref, f2), ...]`` for cumulative fields."""
    return [ref] + [warp(ref, f) for f in fields]


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class SpeckleSweep:
    """Ranges from which per-sample speckle parameters are drawn uniformly."""

    base: SpeckleParams = field(default_factory=SpeckleParams)
    density: tuple = (0.006, 0.010)
    radius_min: tuple = (1.5, 2.5)
    radius_max: tuple = (3.5, 5.0)
    blur_sigma: tuple = (0.6, 1.0)

    def draw(self, rng, seed) -> SpeckleParams:
        rmin = rng.uniform(*self.radius_min)
        rmax = max(rng.uniform(*self.radius_max), rmin)
        return self.base.replace(disk_density=float(rng.uniform(*self.density)),
                                 radius_min=float(rmin), radius_max=float(rmax),
                                 blur_sigma=float(rng.uniform(*self.blur_sigma)),
                                 seed=int(seed))

    def to_dict(self):
        return {"base": self.base.to_dict(), "density": list(self.density),
                "radius_min": list(self.radius_min), "radius_max": list(self.radius_max),
                "blur_sigma": list(self.blur_sigma)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"base", "density", "radius_min", "radius_max", "blur_sigma"}
        if unknown:
            raise ValueError(f"unknown speckle sweep key(s): {', '.join(sorted(unknown))}")
        if "base" in d:
            d["base"] = SpeckleParams.from_dict(d["base"])
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class DeformationSweep:
    """Per-sample deformation draws; amplitude is uniform on (0, amplitude_max]."""

    kinds: tuple = ("translation", "affine", "gaussian_bumps", "fourier")
    amplitude_max: float = 1.0
    count: tuple = (1, 3)
    width: tuple = (8.0, 16.0)
    modes: tuple = (1, 3)
    wavelength: tuple = (32.0, 128.0)
    hotspot_width: tuple = (3.0, 5.0)

    def __post_init__(self):
        bad = set(self.kinds) - set(KINDS)
        if not self.kinds or bad:
            raise ValueError(f"invalid kinds {self.kinds!r}")

    def draw(self, rng, seed) -> DeformationSpec:
        kind = self.kinds[int(rng.integers(len(self.kinds)))]
        amp = self.amplitude_max * (1.0 - rng.uniform())
        return DeformationSpec(
            kind=kind, amplitude_max=float(amp), seed=int(seed),
            count=int(rng.integers(self.count[0], self.count[1] + 1)),
            width_min=float(self.width[0]), width_max=float(self.width[1]),
            modes=int(rng.integers(self.modes[0], self.modes[1] + 1)),
            wavelength_min=float(self.wavelength[0]), wavelength_max=float(self.wavelength[1]),
            hotspot_width=float(rng.uniform(*self.hotspot_width)))

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown deformation sweep key(s): {', '.join(sorted(unknown))}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _sample_files(i):
    stem = f"sample_{i:05d}"
    return {"reference": f"{stem}_ref.pgm", "deformed": f"{stem}_def.pgm",
            "displacement": f"{stem}_disp.f32", "strain": f"{stem}_strain.f32"}


def _write_pair(out: Path, files: dict, pair: SamplePair):
    for key, writer, obj in (("reference", formats.write_pgm, pair.reference),
                             ("deformed", formats.write_pgm, pair.deformed),
                             ("displacement", formats.write_field, pair.truth_disp),
                             ("strain", formats.write_field, pair.truth_strain)):
        path = out / files[key]
        try:
            writer(path, obj)
        except OSError as exc:
            raise OSError(f"failed to write {path}: {exc.strerror or exc}") from exc


def make_dataset(n: int, speckle: SpeckleSweep, specs: DeformationSweep, out_dir,
                 size: int = 64, seed: int = 0) -> dict:
    """Generate ``n`` sample pairs under ``out_dir`` and write ``manifest.json``.

    Every sample draws its parameters from its own seed stream, so the
    result does not depend on generation order.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    out = formats.ensure_dir(out_dir)
    samples = []
    for i in range(n):
        ss = np.random.SeedSequence([int(seed), i])
        s_speckle, s_def, s_draw = (int(c.generate_state(2, np.uint64)[0]) for c in ss.spawn(3))
        rng = np.random.default_rng(s_draw)
        sp = speckle.draw(rng, s_speckle)
        spec = specs.draw(rng, s_def)
        samples.append({"id": i, "files": _sample_files(i),
                        "speckle_params": sp.to_dict(), "deformation_spec": spec.to_dict()})
    manifest = {"version": MANIFEST_VERSION, "image_format": "pgm", "field_format": "f32le+json",
                "height": size, "width": size, "seed": int(seed), "samples": samples}
    return regenerate(manifest, out)


def regenerate(manifest: dict, out_dir) -> dict:
    """Write every sample listed in ``manifest`` (and the manifest) to ``out_dir``."""
    out = formats.ensure_dir(out_dir)
    h, w = manifest["height"], manifest["width"]
    for entry in manifest["samples"]:
        pair = make_pair(SpeckleParams.from_dict(entry["speckle_params"]),
                         DeformationSpec.from_dict(entry["deformation_spec"]), h, w)
        _write_pair(out, entry["files"], pair)
    path = out / "manifest.json"
    try:
        formats.write_json(path, manifest)
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc.strerror or exc}") from exc
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    """Read a manifest; ``path`` may be the file or its directory."""
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    manifest = formats.read_json(p)
    for key in ("version", "image_format", "field_format", "samples"):
        if key not in manifest:
            raise ValueError(f"{p}: manifest lacks {key!r}")
    return manifest, p.parent


def load_pair(root: Path, entry: dict) -> tuple[GrayImage, GrayImage, DisplacementField, StrainField]:
    f = entry["files"]
    return (formats.read_pgm(root / f["reference"]), formats.read_pgm(root / f["deformed"]),
            formats.read_field(root / f["displacement"]), formats.read_field(root / f["strain"]))
