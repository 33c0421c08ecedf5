"""Synthetic paired data (phantom volumes + connectivity matrices) and file I/O.

Phantoms are built so that the connectivity matrix carries recoverable
information about the volume: every region's intensity is an affine function
of the corresponding matrix row-sum.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    FormatError,
    MissingArtifactError,
    TruncatedFileError,
    UnknownVersionError,
    ValidationError,
)

FORMAT_VERSION = 1
DTYPE_TAG = "f32le"
ORDER_TAG = "x-fastest"

# Region intensity = BASE + GAIN * coupling * (mean off-diagonal correlation of
# the region's row). The row mean lies in [-1, 1], so intensities stay inside
# [0.05, 0.95] before noise and the clamp never binds on a noiseless phantom.
REGION_BASE = 0.5
REGION_GAIN = 0.45
ENVELOPE_INTENSITY = 0.25
ENVELOPE_RADIUS = 0.85


@dataclass
class Volume3D:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 4:
            raise ValidationError(f"volume dims must be >= 4, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)


@dataclass
class FNCMatrix:
    data: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.data, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"FNC matrix must be square, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("FNC matrix contains non-finite entries")
        if np.max(np.abs(m - m.T)) > 1e-9:
            raise ValidationError("FNC matrix is not symmetric")
        if not np.all(np.diag(m) == 1.0):
            raise ValidationError("FNC diagonal must be exactly 1")
        if np.max(np.abs(m)) > 1.0:
            raise ValidationError("FNC entries must lie in [-1, 1]")
        self.data = m

    @property
    def K(self) -> int:
        return self.data.shape[0]


@dataclass
class PhantomSpec:
    n_regions: int = 8
    shape: tuple = (48, 56, 48)
    coupling_strength: float = 1.0
    noise_sigma: float = 0.05
    seed: int = 0
    n_components: int = 53
    patient_fraction: float = 0.5
    patient_shift: float = 0.5
    # None couples every region; otherwise only the listed region ids.
    coupled_regions: Optional[tuple] = None

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.coupled_regions is not None:
            self.coupled_regions = tuple(int(r) for r in self.coupled_regions)
        self.validate()

    def validate(self):
        if self.n_regions < 2:
            raise ValidationError("n_regions must be >= 2")
        if self.n_components < self.n_regions:
            raise ValidationError("n_components must be >= n_regions")
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValidationError(f"invalid phantom shape {self.shape}")
        if not 0.0 <= self.coupling_strength <= 1.0:
            raise ValidationError("coupling_strength must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not 0.0 <= self.patient_fraction <= 1.0:
            raise ValidationError("patient_fraction must lie in [0, 1]")
        if self.coupled_regions is not None:
            bad = [r for r in self.coupled_regions if not 0 <= r < self.n_regions]
            if bad:
                raise ValidationError(f"coupled_regions out of range: {bad}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        if self.coupled_regions is not None:
            d["coupled_regions"] = list(self.coupled_regions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class ManifestEntry:
    volume_path: str
    fnc_path: str
    subject_id: str
    group: str


@dataclass
class DatasetManifest:
    entries: list
    seed: int
    spec: PhantomSpec
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        for key in ("volume_path", "fnc_path"):
            paths = [getattr(e, key) for e in self.entries]
            if len(set(paths)) != len(paths):
                raise ValidationError(f"duplicate {key} in manifest")

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def __len__(self):
        return len(self.entries)


# --------------------------------------------------------------------------
# phantom generation


def _region_layout(n_regions: int):
    """Fixed template centers (normalized [-1, 1] coords) and radius."""
    i = np.arange(n_regions) + 0.5
    phi = np.arccos(1 - 2 * i / n_regions)
    theta = math.pi * (1 + 5 ** 0.5) * i
    centers = 0.5 * np.stack(
        [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1
    )
    d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    dmin = d[~np.eye(n_regions, dtype=bool)].min()
    radius = min(0.25, 0.45 * dmin)
    return centers, radius


def _grid(shape):
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    return np.meshgrid(*axes, indexing="ij")


def region_atlas(n_regions: int, shape: Sequence[int]) -> np.ndarray:
    """Integer label volume: region id for region voxels, -1 elsewhere."""
    centers, radius = _region_layout(n_regions)
    gx, gy, gz = _grid(shape)
    atlas = np.full(tuple(shape), -1, dtype=np.int32)
    for r, c in enumerate(centers):
        inside = (gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2 <= radius ** 2
        atlas[inside] = r
    return atlas


def envelope_mask(shape: Sequence[int]) -> np.ndarray:
    gx, gy, gz = _grid(shape)
    return gx ** 2 + gy ** 2 + gz ** 2 <= ENVELOPE_RADIUS ** 2


def generate_fnc(spec: PhantomSpec, rng: np.random.Generator, patient: bool) -> FNCMatrix:
    """Random low-rank factor model normalized to unit diagonal.

    A per-subject common factor with positive-mean loadings makes row-sums vary
    between subjects; patients get their loading mean shifted upward.
    """
    K = spec.n_components
    rank = math.ceil(K / 4)
    common = rng.normal(0.0, 1.0, size=rank)
    load_mean = 0.6 + (spec.patient_shift if patient else 0.0)
    loadings = rng.normal(load_mean, 0.8, size=K)
    W = 0.7 * rng.normal(size=(K, rank)) + np.outer(loadings, common)
    cov = W @ W.T + np.diag(rng.uniform(0.5, 1.5, size=K))
    d = np.sqrt(np.diag(cov))
    m = cov / np.outer(d, d)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    np.clip(m, -1.0, 1.0, out=m)
    return FNCMatrix(m)


def row_means(fnc: FNCMatrix) -> np.ndarray:
    """Mean off-diagonal correlation per row, an affine function of the row-sum."""
    K = fnc.K
    return (fnc.data.sum(axis=1) - 1.0) / (K - 1)


def region_intensities(spec: PhantomSpec, fnc: FNCMatrix) -> np.ndarray:
    s = row_means(fnc)[: spec.n_regions]
    slope = np.full(spec.n_regions, REGION_GAIN * spec.coupling_strength)
    if spec.coupled_regions is not None:
        mask = np.zeros(spec.n_regions, dtype=bool)
        mask[list(spec.coupled_regions)] = True
        slope[~mask] = 0.0
    return REGION_BASE + slope * s


def is_patient(spec: PhantomSpec, subject_index: int) -> bool:
    rng = np.random.default_rng([spec.seed, subject_index, 1])
    return bool(rng.random() < spec.patient_fraction)


def generate_phantom(spec: PhantomSpec, subject_index: int):
    spec.validate()
    patient = is_patient(spec, subject_index)
    rng = np.random.default_rng([spec.seed, subject_index, 0])
    fnc = generate_fnc(spec, rng, patient)

    vol = np.zeros(spec.shape, dtype=np.float64)
    vol[envelope_mask(spec.shape)] = ENVELOPE_INTENSITY
    atlas = region_atlas(spec.n_regions, spec.shape)
    intens = region_intensities(spec, fnc)
    inside = atlas >= 0
    vol[inside] = intens[atlas[inside]]
    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    np.clip(vol, 0.0, 1.0, out=vol)
    return Volume3D(vol.astype(np.float32)), fnc


def region_means(v: Volume3D, atlas: np.ndarray) -> np.ndarray:
    n = int(atlas.max()) + 1
    data = v.data.astype(np.float64)
    return np.array([data[atlas == r].mean() for r in range(n)])


# --------------------------------------------------------------------------
# conditioning helpers


def vectorize_fnc(m) -> np.ndarray:
    a = m.data if isinstance(m, FNCMatrix) else np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got {a.shape}")
    if np.max(np.abs(a - a.T)) > 1e-9:
        raise ValidationError("matrix is not symmetric")
    iu = np.triu_indices(a.shape[0], k=1)
    return a[iu].copy()


def random_condition(reference, seed: int) -> np.ndarray:
    """Standard-normal stand-in for an FNC matrix: symmetrized, unit diagonal."""
    a = reference.data if isinstance(reference, FNCMatrix) else np.asarray(reference)
    K = a.shape[0]
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((K, K))
    upper = np.triu(g, k=1)
    out = upper + upper.T
    np.fill_diagonal(out, 1.0)
    return out


# --------------------------------------------------------------------------
# raw + header file format


def _header_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_array(data: np.ndarray, path, kind: str = "volume"):
    path = Path(path)
    arr = np.asarray(data, dtype="<f4")
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "shape": list(arr.shape),
        "dtype": DTYPE_TAG,
        "order": ORDER_TAG,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    # x-fastest == Fortran order for an (x, y, z) indexed array
    path.write_bytes(arr.tobytes(order="F"))
    _header_path(path).write_text(json.dumps(header, indent=2) + "\n")


def load_array(path) -> np.ndarray:
    path = Path(path)
    hpath = _header_path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing payload file: {path}")
    if not hpath.exists():
        raise MissingArtifactError(f"missing header file: {hpath}")
    try:
        header = json.loads(hpath.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable header {hpath}: {e}") from e
    version = header.get("version")
    if version != FORMAT_VERSION:
        raise UnknownVersionError(f"unknown format version {version!r} in {hpath}")
    if header.get("dtype") != DTYPE_TAG or header.get("order") != ORDER_TAG:
        raise FormatError(f"unsupported dtype/order in {hpath}")
    shape = tuple(int(s) for s in header.get("shape", ()))
    if not shape or min(shape) <= 0:
        raise FormatError(f"invalid shape {shape} in {hpath}")
    payload = path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(payload) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload) // 4} voxels, header expects {expected // 4}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: payload longer than header shape {shape}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape, order="F").astype(np.float32)


def save_volume(v: Volume3D, path):
    save_array(v.data, path, kind="volume")


def load_volume(path) -> Volume3D:
    data = load_array(path)
    if data.ndim != 3:
        raise FormatError(f"{path} holds a {data.ndim}D array, expected 3D")
    return Volume3D(data)


def save_fnc(m: FNCMatrix, path):
    save_array(m.data, path, kind="fnc")


def load_fnc(path) -> np.ndarray:
    # FNC is stored as f32; rounding breaks exact symmetry checks only at 1e-7
    # level, so callers receive the raw array rather than a validated FNCMatrix.
    data = load_array(path)
    if data.ndim != 2:
        raise FormatError(f"{path} holds a {data.ndim}D array, expected 2D")
    return data


# --------------------------------------------------------------------------
# datasets


def generate_dataset(spec: PhantomSpec, n_subjects: int, start: int = 0):
    """In-memory cohort: (volumes (n, *shape) float32, fncs (n, K, K), groups)."""
    vols, fncs, groups = [], [], []
    for i in range(start, start + n_subjects):
        v, m = generate_phantom(spec, i)
        vols.append(v.data)
        fncs.append(m.data.astype(np.float32))
        groups.append("patient" if is_patient(spec, i) else "control")
    return np.stack(vols), np.stack(fncs), groups


def write_dataset(spec: PhantomSpec, n_subjects: int, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    entries = []
    for i in range(n_subjects):
        v, m = generate_phantom(spec, i)
        sid = f"sub-{i:05d}"
        vpath, fpath = f"volumes/{sid}.vol", f"fnc/{sid}.vol"
        save_volume(v, out_dir / vpath)
        save_fnc(m, out_dir / fpath)
        group = "patient" if is_patient(spec, i) else "control"
        entries.append(ManifestEntry(vpath, fpath, sid, group))
    manifest = DatasetManifest(entries=entries, seed=spec.seed, spec=spec, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: DatasetManifest, path):
    doc = {
        "version": FORMAT_VERSION,
        "seed": manifest.seed,
        "spec": manifest.spec.to_dict(),
        "entries": [asdict(e) for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing manifest: {path}")
    doc = json.loads(path.read_text())
    if doc.get("version") != FORMAT_VERSION:
        raise UnknownVersionError(f"unknown manifest version {doc.get('version')!r}")
    entries = [ManifestEntry(**e) for e in doc["entries"]]
    manifest = DatasetManifest(
        entries=entries, seed=doc["seed"], spec=PhantomSpec.from_dict(doc["spec"]), root=path.parent
    )
    if check_files:
        for e in entries:
            for rel in (e.volume_path, e.fnc_path):
                if not manifest.resolve(rel).exists():
                    raise MissingArtifactError(f"manifest references missing file {manifest.resolve(rel)}")
    return manifest


def load_manifest_arrays(manifest: DatasetManifest):
    vols = np.stack([load_volume(manifest.resolve(e.volume_path)).data for e in manifest.entries])
    fncs = np.stack([load_fnc(manifest.resolve(e.fnc_path)) for e in manifest.entries])
    return vols, fncs, [e.group for e in manifest.entries]
