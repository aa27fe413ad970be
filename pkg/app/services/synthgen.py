"""Procedural asymmetric objects and a deterministic software rasterizer.

Objects are unions of colored cuboids and tetrahedra placed at random
offsets. The renderer is orthographic: the camera sits on +z looking
down -z, image rows run top to bottom along -y, and a headlight along
the view axis shades each triangle flatly. Because the light is fixed in
the camera frame and points along the view axis, rotating the object
about z rotates the image in-plane and changes nothing else.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import zoom

from app.errors import BadCount, GeneratorPanic
from app.services.so3 import cube_group, random_rotations
from app.utils.hashing import derive_seed

logger = logging.getLogger(__name__)

MIN_TRIANGLES = 12
MAX_TRIANGLES = 60
ASYMMETRY_THRESHOLD = 0.15  # in bounding radii
MAX_GENERATION_TRIES = 100
FILL_FRACTION = 0.8  # unit sphere spans 80% of the crop
AMBIENT = 0.25
NOISE_LATTICE = 5

# Unit cube corners and the 12 triangles of its faces
_CUBE_CORNERS = np.array(
    [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
)
_CUBE_FACES = np.array([
    [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
    [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
    [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
])
_TETRA_CORNERS = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) * 0.5
_TETRA_FACES = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])


# ---------------------------------------------------------------------------
# Data classes
# ---------------------------------------------------------------------------

@dataclass
class ProceduralObject:
    """Triangles in the canonical frame with one flat RGB color each."""
    object_id: str
    seed: int
    triangles: NDArray[np.float64]  # (T, 3, 3): triangle, vertex, xyz
    colors: NDArray[np.float64]  # (T, 3) RGB in [0, 1]
    radius: float = 1.0

    @property
    def vertices(self) -> NDArray[np.float64]:
        return np.unique(self.triangles.reshape(-1, 3), axis=0)


@dataclass
class BackgroundSpec:
    kind: str = "black"  # black | solid | noise
    color: tuple = (0.0, 0.0, 0.0)
    seed: int = 0


@dataclass
class Episode:
    """References with known rotations and queries with ground truth."""
    object_id: str
    ref_images: NDArray  # (n_ref, H, W, 3)
    ref_rotations: NDArray[np.float64]  # (n_ref, 3, 3)
    query_images: NDArray  # (n_query, H, W, 3)
    query_rotations: NDArray[np.float64]  # (n_query, 3, 3)

    @property
    def n_ref(self) -> int:
        return int(self.ref_rotations.shape[0])

    @property
    def n_query(self) -> int:
        return int(self.query_rotations.shape[0])


# ---------------------------------------------------------------------------
# Object generation
# ---------------------------------------------------------------------------

def asymmetry_score(vertices: NDArray[np.float64], radius: float = 1.0) -> float:
    """Min over non-identity cube rotations of the mean distance from each
    rotated vertex to its nearest original vertex, in bounding radii."""
    best = np.inf
    for g in cube_group():
        if np.allclose(g, np.eye(3)):
            continue
        moved = vertices @ g.T
        dists = np.linalg.norm(moved[:, None, :] - vertices[None, :, :], axis=-1)
        best = min(best, float(dists.min(axis=1).mean()))
    return best / radius


def _candidate(rng: np.random.Generator) -> tuple:
    n_parts = int(rng.integers(3, 7))
    part_rotations = random_rotations(rng, n_parts)
    tris, cols = [], []
    budget = MAX_TRIANGLES
    for i in range(n_parts):
        remaining_parts = n_parts - i - 1
        # A cuboid must leave room for at least a tetrahedron per remaining part
        use_cuboid = rng.random() < 0.6 and budget - 12 >= 4 * remaining_parts
        corners, faces = (_CUBE_CORNERS, _CUBE_FACES) if use_cuboid else (_TETRA_CORNERS, _TETRA_FACES)
        size = rng.uniform(0.2, 0.7, size=3)
        offset = rng.normal(size=3)
        offset *= rng.uniform(0.2, 0.7) / max(np.linalg.norm(offset), 1e-9)
        placed = (corners * size) @ part_rotations[i].T + offset
        tris.append(placed[faces])
        cols.append(np.repeat(rng.uniform(0.15, 1.0, size=(1, 3)), len(faces), axis=0))
        budget -= len(faces)

    triangles = np.concatenate(tris)
    colors = np.concatenate(cols)
    verts = triangles.reshape(-1, 3)
    triangles = triangles - verts.mean(axis=0)
    triangles = triangles / np.linalg.norm(triangles.reshape(-1, 3), axis=1).max()
    return triangles, colors


def generate_object(seed: int) -> ProceduralObject:
    """Deterministically build an asymmetric object from ``seed``.

    Candidates are drawn from one seeded stream until one clears the
    asymmetry threshold; failing 100 times signals a generator bug.
    """
    rng = np.random.default_rng(seed)
    for attempt in range(MAX_GENERATION_TRIES):
        triangles, colors = _candidate(rng)
        score = asymmetry_score(np.unique(triangles.reshape(-1, 3), axis=0))
        if score >= ASYMMETRY_THRESHOLD:
            if attempt:
                logger.debug(f"Object seed {seed} accepted after {attempt + 1} candidates")
            return ProceduralObject(
                object_id=f"obj-{seed:016x}",
                seed=seed,
                triangles=triangles,
                colors=colors,
                radius=1.0,
            )
    raise GeneratorPanic(
        f"no candidate for seed {seed} reached asymmetry {ASYMMETRY_THRESHOLD} "
        f"in {MAX_GENERATION_TRIES} tries"
    )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_background(spec: BackgroundSpec, size: int) -> NDArray[np.float64]:
    if spec.kind == "black":
        return np.zeros((size, size, 3))
    if spec.kind == "solid":
        return np.broadcast_to(np.asarray(spec.color, dtype=float), (size, size, 3)).copy()
    if spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        lattice = rng.uniform(0.0, 1.0, size=(NOISE_LATTICE, NOISE_LATTICE, 3))
        factor = size / NOISE_LATTICE
        img = zoom(lattice, (factor, factor, 1), order=1, mode="nearest")
        return np.clip(img[:size, :size], 0.0, 1.0)
    raise ValueError(f"unknown background kind '{spec.kind}'")


def render(
    obj: ProceduralObject,
    R: NDArray[np.float64],
    size: int = 32,
    bg: Optional[BackgroundSpec] = None,
) -> NDArray[np.float64]:
    """Z-buffered, flat-shaded orthographic view of ``obj`` rotated by ``R``."""
    image = render_background(bg or BackgroundSpec(), size)
    depth = np.full((size, size), -np.inf)

    cam = obj.triangles @ np.asarray(R, dtype=np.float64).T  # (T, 3, 3)
    scale = FILL_FRACTION * size / (2.0 * obj.radius)
    # pixel coordinates: column from x, row from -y
    px = cam[..., 0] * scale + size / 2.0
    py = -cam[..., 1] * scale + size / 2.0
    pz = cam[..., 2]

    normals = np.cross(cam[:, 1] - cam[:, 0], cam[:, 2] - cam[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    shade = AMBIENT + (1.0 - AMBIENT) * np.abs(normals[:, 2]) / np.maximum(lengths, 1e-12)

    centers = np.arange(size) + 0.5
    for t in range(cam.shape[0]):
        x0, x1, x2 = px[t]
        y0, y1, y2 = py[t]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        c_lo = max(int(np.floor(min(x0, x1, x2))), 0)
        c_hi = min(int(np.ceil(max(x0, x1, x2))), size)
        r_lo = max(int(np.floor(min(y0, y1, y2))), 0)
        r_hi = min(int(np.ceil(max(y0, y1, y2))), size)
        if c_lo >= c_hi or r_lo >= r_hi:
            continue
        xs, ys = np.meshgrid(centers[c_lo:c_hi], centers[r_lo:r_hi])
        w0 = ((x1 - xs) * (y2 - ys) - (x2 - xs) * (y1 - ys)) / area
        w1 = ((x2 - xs) * (y0 - ys) - (x0 - xs) * (y2 - ys)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        z = w0 * pz[t, 0] + w1 * pz[t, 1] + w2 * pz[t, 2]
        region = depth[r_lo:r_hi, c_lo:c_hi]
        closer = inside & (z > region)
        region[closer] = z[closer]
        image[r_lo:r_hi, c_lo:c_hi][closer] = np.clip(obj.colors[t] * shade[t], 0.0, 1.0)
    return image


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

def draw_background(policy: str, rng: np.random.Generator) -> BackgroundSpec:
    """Pick a background for one image according to ``policy``."""
    if policy == "mixed":
        policy = "solid" if rng.random() < 0.5 else "noise"
    if policy == "black":
        return BackgroundSpec()
    if policy == "solid":
        return BackgroundSpec(kind="solid", color=tuple(float(c) for c in rng.uniform(0.0, 1.0, 3)))
    if policy == "noise":
        return BackgroundSpec(kind="noise", seed=int(rng.integers(0, 2 ** 63 - 1)))
    raise ValueError(f"unknown background policy '{policy}'")


def render_views(
    obj: ProceduralObject,
    rotations: NDArray[np.float64],
    size: int,
    rng: np.random.Generator,
    bg_policy: str,
) -> NDArray[np.float64]:
    """Render one image per rotation with independently drawn backgrounds."""
    images = np.empty((len(rotations), size, size, 3))
    for i, R in enumerate(rotations):
        images[i] = render(obj, R, size, draw_background(bg_policy, rng))
    return images


def make_episode(
    obj: ProceduralObject,
    n_ref: int,
    n_query: int,
    rng: np.random.Generator,
    bg_policy: str = "black",
    size: int = 32,
) -> Episode:
    """Sample n_ref + n_query Haar rotations and render each view."""
    if n_ref < 1 or n_query < 1:
        raise BadCount(f"make_episode needs at least one reference and one query, got {n_ref}/{n_query}")
    rotations = random_rotations(rng, n_ref + n_query)
    images = render_views(obj, rotations, size, rng, bg_policy)
    return Episode(
        object_id=obj.object_id,
        ref_images=images[:n_ref],
        ref_rotations=rotations[:n_ref],
        query_images=images[n_ref:],
        query_rotations=rotations[n_ref:],
    )


def quantize(images: NDArray) -> NDArray[np.uint8]:
    """Float RGB in [0, 1] to the stored u8 form."""
    return np.clip(np.rint(np.asarray(images) * 255.0), 0, 255).astype(np.uint8)


def dequantize(images: NDArray[np.uint8]) -> NDArray[np.float64]:
    return np.asarray(images, dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# Dataset corpus
# ---------------------------------------------------------------------------

@dataclass
class ObjectRecord:
    """One object of a dataset together with its rendered view pools."""
    obj: ProceduralObject
    episode: Episode


@dataclass
class Dataset:
    manifest: dict
    records: List[ObjectRecord] = field(default_factory=list)

    @property
    def holdout(self) -> int:
        return int(self.manifest.get("holdout_objects", 0))

    def split(self, name: str) -> List[ObjectRecord]:
        """Records of the ``train``, ``holdout`` or ``all`` split."""
        cut = len(self.records) - self.holdout
        if name == "train":
            return self.records[:cut]
        if name == "holdout":
            return self.records[cut:]
        if name == "all":
            return list(self.records)
        raise ValueError(f"unknown split '{name}'")

    def find(self, object_id: str) -> Optional[ObjectRecord]:
        for record in self.records:
            if record.obj.object_id == object_id:
                return record
        return None


def generate_record(data_cfg, index: int) -> ObjectRecord:
    """Object ``index`` of a corpus, independent of every other index."""
    obj = generate_object(derive_seed(data_cfg.seed, "object", index))
    rng = np.random.default_rng(derive_seed(data_cfg.seed, "views", index))
    episode = make_episode(
        obj,
        data_cfg.n_ref_pool,
        data_cfg.n_query_pool,
        rng,
        bg_policy=str(data_cfg.background),
        size=data_cfg.crop,
    )
    # Stored precision is u8; keep the in-memory copy identical to a reload.
    episode.ref_images = dequantize(quantize(episode.ref_images))
    episode.query_images = dequantize(quantize(episode.query_images))
    return ObjectRecord(obj=obj, episode=episode)


def generate_records(data_cfg, threads: int = 1) -> List[ObjectRecord]:
    """All objects of a corpus; ordering never depends on ``threads``."""
    indices = range(data_cfg.n_objects)
    if threads <= 1:
        return [generate_record(data_cfg, i) for i in indices]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: generate_record(data_cfg, i), indices))


def build_dataset(run_cfg, path, threads: int = 1) -> Dataset:
    """Generate the corpus described by ``run_cfg.data`` and write it."""
    from app.storage import write_dataset

    data_cfg = run_cfg.data
    logger.info(
        f"Generating {data_cfg.n_objects} objects "
        f"({data_cfg.n_ref_pool} refs + {data_cfg.n_query_pool} queries each, "
        f"crop {data_cfg.crop}, threads {threads})"
    )
    manifest = {
        "format": "rotset-dataset",
        "seed": data_cfg.seed,
        "data_hash": run_cfg.data_hash(),
        "config_hash": run_cfg.config_hash(),
        "object_count": data_cfg.n_objects,
        "n_ref_pool": data_cfg.n_ref_pool,
        "n_query_pool": data_cfg.n_query_pool,
        "crop": data_cfg.crop,
        "background": str(data_cfg.background),
        "holdout_objects": data_cfg.holdout_objects,
    }
    dataset = Dataset(manifest=manifest, records=generate_records(data_cfg, threads))
    write_dataset(dataset, path)
    return dataset
