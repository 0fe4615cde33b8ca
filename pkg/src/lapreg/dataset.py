"""Patient configuration and the on-the-fly synthetic sample factory.

A sample is a deterministic function of (patient config, seed):

    coin: compression vs lobe deformation (when both are enabled)
    constraints -> surface deformation -> camera sampling (<= 10 retries)
    -> visibility crop -> optional additive noise on the partial cloud
    -> random rigid motion of the complete cloud -> independent shuffles.

Ground-truth matches link every partial point to the complete-cloud row
holding its source vertex.  Samples round-trip losslessly through a
directory of binary PLY clouds plus JSON metadata.
"""
from __future__ import annotations

import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .arap import ArapConfig, DeformationConstraints, arap_solve, gen_compression, gen_lobe
from .crop import CameraPose, CropConfig, facing_candidates, sample_camera, visible_crop
from .errors import ConfigError, CropError, DataError
from .geometry import (
    Normalization,
    PointCloud,
    RigidTransform,
    TetMesh,
    TriMesh,
    apply_rigid,
    compute_vertex_normals,
    random_rigid,
    unit_normalize,
)
from .matching import CorrespondenceSet
from .meshio import load_cloud_ply, load_mesh, load_tet, save_cloud_ply

SCHEMA_VERSION = 1

_DEFORM_TYPES = ("compression", "lobe")


@dataclass
class DeformConfig:
    types: tuple = _DEFORM_TYPES
    handle_fraction: float = 0.1
    anchor_fraction: float = 0.1
    compression_max: float = 0.1
    lobe_max: float = 0.25
    max_iterations: int = 10
    energy_tolerance: float = 1e-6
    weight_scheme: str = "cotangent"
    seed_region: np.ndarray | None = None

    def __post_init__(self):
        self.types = tuple(self.types)
        if not self.types or any(t not in _DEFORM_TYPES for t in self.types):
            raise ConfigError(
                f"deform types must be a non-empty subset of {_DEFORM_TYPES}, "
                f"got {self.types}"
            )
        if len(set(self.types)) != len(self.types):
            raise ConfigError("deform types listed twice")
        for name in ("handle_fraction", "anchor_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 0.5:
                raise ConfigError(f"{name} must be in (0, 0.5], got {v}")
        if self.compression_max < 0 or self.lobe_max < 0:
            raise ConfigError("deformation magnitudes must be >= 0")
        ArapConfig(self.max_iterations, self.energy_tolerance, self.weight_scheme)


@dataclass
class PatientConfig:
    name: str
    surface: TriMesh          # unit-diagonal, centroid at the origin
    normals: np.ndarray
    normalization: Normalization
    scale_mm: float
    crop: CropConfig
    deform: DeformConfig
    rigid_max_angle: float = 30.0
    rigid_max_translation: float = 0.1
    noise_sigma: float = 0.0
    tet: TetMesh | None = None
    lobe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    base_dir: Path | None = None

    def __post_init__(self):
        n = self.surface.num_vertices
        self.lobe = np.unique(np.asarray(self.lobe, dtype=np.int64).ravel())
        if len(self.lobe) and (self.lobe.min() < 0 or self.lobe.max() >= n):
            raise ConfigError(f"lobe label out of range [0, {n})")
        if "lobe" in self.deform.types and len(self.lobe) == 0:
            raise ConfigError("lobe deformation enabled but lobe_labels is empty")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.scale_mm <= 0:
            raise ConfigError("scale_mm must be > 0")

    def config_echo(self) -> dict:
        c, d = self.crop, self.deform
        return {
            "name": self.name,
            "crop": {
                "keep_fraction": c.keep_fraction,
                "max_angle": c.max_angle,
                "polar_range": list(c.polar_range),
                "azimuth_range": list(c.azimuth_range),
                "radius_scale": c.radius_scale,
            },
            "deform": {
                "types": list(d.types),
                "handle_fraction": d.handle_fraction,
                "anchor_fraction": d.anchor_fraction,
                "compression_max": d.compression_max,
                "lobe_max": d.lobe_max,
                "max_iterations": d.max_iterations,
                "energy_tolerance": d.energy_tolerance,
                "weight_scheme": d.weight_scheme,
            },
            "rigid": {
                "max_angle": self.rigid_max_angle,
                "max_translation": self.rigid_max_translation,
            },
            "noise_sigma": self.noise_sigma,
        }


def _take(table: dict, allowed: dict, where: str) -> dict:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    out = {}
    for key, default in allowed.items():
        out[key] = table.get(key, default)
    return out


def _load_index_list(value, base: Path, what: str) -> np.ndarray:
    """A vertex index set given inline or as a path to a JSON array."""
    if isinstance(value, str):
        path = base / value
        if not path.exists():
            raise ConfigError(f"{what} file does not exist: {path}")
        value = json.loads(path.read_text())
    if not isinstance(value, list):
        raise ConfigError(f"{what} must be an index array or a path to one")
    return np.asarray(value, dtype=np.int64)


def load_patient(path) -> PatientConfig:
    """Load a patient TOML bundle; meshes are normalized to unit diagonal."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"patient config does not exist: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed patient config {path}: {exc}")
    base = path.parent

    top = _take(raw, {
        "schema_version": None, "name": "patient", "paths": {}, "units": {},
        "crop": {}, "deform": {}, "rigid": {}, "noise": {},
    }, str(path))
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(
            f"unsupported schema_version {top['schema_version']!r} "
            f"(expected {SCHEMA_VERSION})"
        )

    paths = _take(top["paths"], {
        "surface_mesh": None, "tet_mesh": None, "lobe_labels": None,
    }, "[paths]")
    if not paths["surface_mesh"]:
        raise ConfigError("patient config must set paths.surface_mesh")
    surface_path = base / paths["surface_mesh"]
    if not surface_path.exists():
        raise ConfigError(f"surface mesh does not exist: {surface_path}")
    surface = load_mesh(surface_path)
    verts, norm = unit_normalize(surface.vertices)
    surface = TriMesh(verts, surface.faces)
    normals, _ = compute_vertex_normals(surface)

    tet = None
    if paths["tet_mesh"]:
        tet_path = base / paths["tet_mesh"]
        if not tet_path.exists():
            raise ConfigError(f"tet mesh does not exist: {tet_path}")
        raw_tet = load_tet(tet_path)
        tet = TetMesh(norm.to_normalized(raw_tet.vertices), raw_tet.tets)

    lobe = np.zeros(0, dtype=np.int64)
    if paths["lobe_labels"] is not None:
        lobe = _load_index_list(paths["lobe_labels"], base, "lobe_labels")

    units = _take(top["units"], {"scale_mm": None}, "[units]")
    scale_mm = units["scale_mm"] if units["scale_mm"] is not None else norm.diagonal

    crop_kw = _take(top["crop"], {
        "keep_fraction": 0.05, "max_angle": 80.0,
        "polar_range": [10.0, 60.0], "azimuth_range": [-70.0, 70.0],
        "radius_scale": 2.5,
    }, "[crop]")
    crop = CropConfig(
        keep_fraction=crop_kw["keep_fraction"], max_angle=crop_kw["max_angle"],
        polar_range=tuple(crop_kw["polar_range"]),
        azimuth_range=tuple(crop_kw["azimuth_range"]),
        radius_scale=crop_kw["radius_scale"],
    )

    deform_kw = _take(top["deform"], {
        "types": None, "handle_fraction": 0.1, "anchor_fraction": 0.1,
        "compression_max": 0.1, "lobe_max": 0.25, "max_iterations": 10,
        "energy_tolerance": 1e-6, "weight_scheme": "cotangent",
        "seed_region": None,
    }, "[deform]")
    types = deform_kw["types"]
    if types is None:
        types = list(_DEFORM_TYPES) if len(lobe) else ["compression"]
    seed_region = None
    if deform_kw["seed_region"] is not None:
        seed_region = _load_index_list(deform_kw["seed_region"], base, "seed_region")
    deform = DeformConfig(
        types=tuple(types),
        handle_fraction=deform_kw["handle_fraction"],
        anchor_fraction=deform_kw["anchor_fraction"],
        compression_max=deform_kw["compression_max"],
        lobe_max=deform_kw["lobe_max"],
        max_iterations=deform_kw["max_iterations"],
        energy_tolerance=deform_kw["energy_tolerance"],
        weight_scheme=deform_kw["weight_scheme"],
        seed_region=seed_region,
    )
    if seed_region is not None and len(seed_region):
        if seed_region.min() < 0 or seed_region.max() >= surface.num_vertices:
            raise ConfigError("seed_region index out of range")

    rigid_kw = _take(top["rigid"], {"max_angle": 30.0, "max_translation": 0.1},
                     "[rigid]")
    noise_kw = _take(top["noise"], {"sigma": 0.0}, "[noise]")

    return PatientConfig(
        name=str(top["name"]),
        surface=surface,
        normals=normals,
        normalization=norm,
        scale_mm=float(scale_mm),
        crop=crop,
        deform=deform,
        rigid_max_angle=float(rigid_kw["max_angle"]),
        rigid_max_translation=float(rigid_kw["max_translation"]),
        noise_sigma=float(noise_kw["sigma"]),
        tet=tet,
        lobe=lobe,
        base_dir=base,
    )


@dataclass
class DatasetSample:
    complete: PointCloud           # X: rigidly moved rest cloud, shuffled
    partial: PointCloud            # Y: deformed visible crop, shuffled
    gt_matches: CorrespondenceSet  # complete row i <-> partial row j
    gt_overlap_x: np.ndarray
    gt_overlap_y: np.ndarray
    rigid: RigidTransform
    camera: CameraPose
    seed: int
    perm_x: np.ndarray             # complete = rigid(rest)[perm_x]
    perm_y: np.ndarray             # partial = deformed[retained][perm_y]
    deform_type: str
    gt_deformed: np.ndarray        # deformed positions, original vertex order
    candidates: np.ndarray         # angle-passing vertex indices (original order)
    constraints: DeformationConstraints
    flagged: bool = False
    normalization: Normalization | None = None
    scale_mm: float = 1.0
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        m, y = len(self.complete), len(self.partial)
        pairs = self.gt_matches.pairs
        if len(pairs) != y:
            raise DataError("gt_matches must pair every partial point")
        if y and (len(np.unique(pairs[:, 0])) != y or
                  not np.array_equal(np.sort(pairs[:, 1]), np.arange(y))):
            raise DataError("gt_matches must be a bijection onto the partial cloud")
        if pairs.size and pairs[:, 0].max() >= m:
            raise DataError("gt match source index out of range")
        self.gt_overlap_x = np.asarray(self.gt_overlap_x, dtype=np.int8)
        self.gt_overlap_y = np.asarray(self.gt_overlap_y, dtype=np.int8)
        expect_x = np.zeros(m, dtype=np.int8)
        expect_x[pairs[:, 0]] = 1
        if not np.array_equal(self.gt_overlap_x, expect_x):
            raise DataError("gt_overlap_x inconsistent with gt_matches")
        if not np.array_equal(self.gt_overlap_y, np.ones(y, dtype=np.int8)):
            raise DataError("gt_overlap_y must be all ones")
        if self.gt_deformed.shape != (m, 3):
            raise DataError("gt_deformed must hold one position per complete point")

    @property
    def retained(self) -> np.ndarray:
        """Original vertex index retained at each pre-shuffle partial row."""
        pairs = self.gt_matches.pairs
        by_row = np.empty(len(self.perm_y), dtype=np.int64)
        by_row[pairs[:, 1]] = self.perm_x[pairs[:, 0]]  # source vertex per partial row
        out = np.empty(len(self.perm_y), dtype=np.int64)
        out[self.perm_y] = by_row
        return out

    def hidden_vertex_mask(self) -> np.ndarray:
        """True on original vertex indices outside the visible candidate set."""
        mask = np.ones(len(self.complete), dtype=bool)
        mask[self.candidates] = False
        return mask


def generate_sample(patient: PatientConfig, seed: int,
                    max_camera_attempts: int = 10) -> DatasetSample:
    """Deterministic sample synthesis; see the module docstring for the
    draw order that fixes reproducibility."""
    rng = np.random.default_rng(seed)
    mesh = patient.surface
    M = mesh.num_vertices
    d = patient.deform

    if len(d.types) > 1:
        deform_type = d.types[0] if rng.uniform() < 0.5 else d.types[1]
    else:
        deform_type = d.types[0]

    if deform_type == "compression":
        constraints = gen_compression(
            mesh, rng,
            handle_fraction=d.handle_fraction,
            anchor_fraction=d.anchor_fraction,
            max_magnitude=d.compression_max,
            normals=patient.normals,
            seed_candidates=d.seed_region,
        )
    else:
        constraints = gen_lobe(
            mesh, rng, patient.lobe,
            handle_fraction=d.handle_fraction,
            anchor_fraction=d.anchor_fraction,
            max_magnitude=d.lobe_max,
        )
    arap_cfg = ArapConfig(d.max_iterations, d.energy_tolerance, d.weight_scheme)
    deformed = arap_solve(mesh, constraints, arap_cfg)
    deformed_mesh = TriMesh(deformed, mesh.faces)
    deformed_normals, _ = compute_vertex_normals(deformed_mesh)
    deformed_cloud = PointCloud(deformed, deformed_normals)

    camera = retained = None
    last_err = None
    for _ in range(max_camera_attempts):
        camera = sample_camera(rng, deformed_cloud, patient.crop)
        try:
            retained = visible_crop(deformed_cloud, camera, patient.crop)
            break
        except CropError as exc:
            last_err = exc
    if retained is None:
        raise CropError(
            f"no visible crop after {max_camera_attempts} camera attempts "
            f"({last_err})"
        )
    candidates = facing_candidates(deformed_cloud, camera, patient.crop)
    flagged = len(retained) < math.ceil(patient.crop.keep_fraction * M)

    Y = deformed[retained]
    Yn = deformed_normals[retained]
    if patient.noise_sigma > 0:
        Y = Y + rng.normal(0.0, patient.noise_sigma, Y.shape)

    rigid = random_rigid(rng, patient.rigid_max_angle, patient.rigid_max_translation)
    X = apply_rigid(PointCloud(mesh.vertices, patient.normals), rigid)

    perm_x = rng.permutation(M)
    perm_y = rng.permutation(len(Y))
    complete = PointCloud(X.points[perm_x], X.normals[perm_x])
    partial = PointCloud(Y[perm_y], Yn[perm_y])

    inv_x = np.empty(M, dtype=np.int64)
    inv_x[perm_x] = np.arange(M)
    src = inv_x[retained[perm_y]]
    pairs = np.stack([src, np.arange(len(Y))], axis=1)
    labels_x = np.zeros(M, dtype=np.int8)
    labels_x[src] = 1
    labels_y = np.ones(len(Y), dtype=np.int8)

    return DatasetSample(
        complete=complete,
        partial=partial,
        gt_matches=CorrespondenceSet(pairs, np.ones(len(pairs))),
        gt_overlap_x=labels_x,
        gt_overlap_y=labels_y,
        rigid=rigid,
        camera=camera,
        seed=int(seed),
        perm_x=perm_x,
        perm_y=perm_y,
        deform_type=deform_type,
        gt_deformed=deformed,
        candidates=candidates,
        constraints=constraints,
        flagged=flagged,
        normalization=patient.normalization,
        scale_mm=patient.scale_mm,
        config_echo=patient.config_echo(),
    )


def gt_overlap_labels(sample: DatasetSample):
    """Recompute overlap labels from the stored matches."""
    labels_x = np.zeros(len(sample.complete), dtype=np.int8)
    labels_x[sample.gt_matches.pairs[:, 0]] = 1
    labels_y = np.ones(len(sample.partial), dtype=np.int8)
    return labels_x, labels_y


def write_sample(sample: DatasetSample, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud_ply(out / "complete.ply", sample.complete)
    save_cloud_ply(out / "partial.ply", sample.partial)
    save_cloud_ply(out / "gt_deformed.ply", PointCloud(sample.gt_deformed))
    with open(out / "gt_matches.json", "w") as fh:
        json.dump([[int(i), int(j)] for i, j in sample.gt_matches.pairs], fh)
        fh.write("\n")
    norm = sample.normalization
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": sample.seed,
        "deform_type": sample.deform_type,
        "flagged": bool(sample.flagged),
        "rigid": sample.rigid.as_matrix34().tolist(),
        "camera": {
            "polar": sample.camera.polar,
            "azimuth": sample.camera.azimuth,
            "radius": sample.camera.radius,
            "look_at": sample.camera.look_at.tolist(),
            "position": sample.camera.position.tolist(),
        },
        "normalization": {
            "centroid": norm.centroid.tolist() if norm else [0.0, 0.0, 0.0],
            "diagonal": norm.diagonal if norm else 1.0,
            "scale_mm": sample.scale_mm,
        },
        "candidates": [int(v) for v in sample.candidates],
        "perm_x": [int(v) for v in sample.perm_x],
        "perm_y": [int(v) for v in sample.perm_y],
        "constraints": {
            "handle_indices": [int(v) for v in sample.constraints.handle_indices],
            "handle_targets": sample.constraints.handle_targets.tolist(),
            "anchor_indices": [int(v) for v in sample.constraints.anchor_indices],
        },
        "config": sample.config_echo,
    }
    with open(out / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")
    return out


def read_sample(sample_dir) -> DatasetSample:
    d = Path(sample_dir)
    for required in ("complete.ply", "partial.ply", "gt_deformed.ply",
                     "gt_matches.json", "meta.json"):
        if not (d / required).exists():
            raise DataError(f"sample directory {d} is missing {required}")
    complete = load_cloud_ply(d / "complete.ply")
    partial = load_cloud_ply(d / "partial.ply")
    gt_deformed = load_cloud_ply(d / "gt_deformed.ply").points
    with open(d / "gt_matches.json") as fh:
        raw_pairs = json.load(fh)
    pairs = np.asarray(raw_pairs, dtype=np.int64).reshape(-1, 2)
    with open(d / "meta.json") as fh:
        meta = json.load(fh)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataError(
            f"sample schema_version {meta.get('schema_version')!r} unsupported "
            f"(expected {SCHEMA_VERSION})"
        )
    cam = meta["camera"]
    camera = CameraPose(
        np.asarray(cam["position"]), np.asarray(cam["look_at"]),
        cam["polar"], cam["azimuth"], cam["radius"],
    )
    rigid = RigidTransform.from_matrix34(np.asarray(meta["rigid"]))
    normalization = Normalization(
        np.asarray(meta["normalization"]["centroid"]),
        meta["normalization"]["diagonal"],
    )
    constraints = DeformationConstraints(
        np.asarray(meta["constraints"]["handle_indices"], dtype=np.int64),
        np.asarray(meta["constraints"]["handle_targets"], dtype=np.float64).reshape(-1, 3),
        np.asarray(meta["constraints"]["anchor_indices"], dtype=np.int64),
    )
    labels_x = np.zeros(len(complete), dtype=np.int8)
    labels_x[pairs[:, 0]] = 1
    return DatasetSample(
        complete=complete,
        partial=partial,
        gt_matches=CorrespondenceSet(pairs, np.ones(len(pairs))),
        gt_overlap_x=labels_x,
        gt_overlap_y=np.ones(len(partial), dtype=np.int8),
        rigid=rigid,
        camera=camera,
        seed=int(meta["seed"]),
        perm_x=np.asarray(meta["perm_x"], dtype=np.int64),
        perm_y=np.asarray(meta["perm_y"], dtype=np.int64),
        deform_type=meta["deform_type"],
        gt_deformed=gt_deformed,
        candidates=np.asarray(meta["candidates"], dtype=np.int64),
        constraints=constraints,
        flagged=bool(meta["flagged"]),
        normalization=normalization,
        scale_mm=float(meta["normalization"]["scale_mm"]),
        config_echo=meta.get("config", {}),
    )


def samples_equal(a: DatasetSample, b: DatasetSample) -> bool:
    def clouds_equal(p, q):
        if not np.array_equal(p.points, q.points):
            return False
        if (p.normals is None) != (q.normals is None):
            return False
        return p.normals is None or np.array_equal(p.normals, q.normals)

    return (
        clouds_equal(a.complete, b.complete)
        and clouds_equal(a.partial, b.partial)
        and np.array_equal(a.gt_matches.pairs, b.gt_matches.pairs)
        and np.array_equal(a.gt_overlap_x, b.gt_overlap_x)
        and np.array_equal(a.gt_overlap_y, b.gt_overlap_y)
        and np.array_equal(a.rigid.as_matrix34(), b.rigid.as_matrix34())
        and a.camera.polar == b.camera.polar
        and a.camera.azimuth == b.camera.azimuth
        and a.camera.radius == b.camera.radius
        and np.array_equal(a.camera.position, b.camera.position)
        and np.array_equal(a.camera.look_at, b.camera.look_at)
        and a.seed == b.seed
        and np.array_equal(a.perm_x, b.perm_x)
        and np.array_equal(a.perm_y, b.perm_y)
        and a.deform_type == b.deform_type
        and np.array_equal(a.gt_deformed, b.gt_deformed)
        and np.array_equal(a.candidates, b.candidates)
        and a.flagged == b.flagged
    )
