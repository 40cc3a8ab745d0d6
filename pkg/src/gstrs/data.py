"""Dataset files and synthetic data.

Feature files are binary (compact, exact); manifests are CSV
(human-diffable). Features are stored as float32 and widened to float64
on load; all in-memory computation is float64.

Feature file layout (little-endian):

    offset 0   magic   8 bytes  b"GSTRSFTR"
    offset 8   version u32      1
    offset 12  n       u64      number of rows
    offset 20  dim     u64      number of columns
    offset 28  payload n*dim float32, row-major
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from ._validation import as_feature_matrix

__all__ = [
    "FEATURE_MAGIC",
    "DatasetManifest",
    "SynthSpec",
    "save_features",
    "load_features",
    "save_manifest",
    "load_manifest",
    "generate_synthetic",
    "split_roles",
]

FEATURE_MAGIC = b"GSTRSFTR"
_HEADER = struct.Struct("<8sIQQ")
ROLES = ("train", "query", "gallery")
GROUP_UNASSIGNED = -1


def save_features(path, X) -> None:
    """Write a feature matrix in the binary feature format."""
    X = as_feature_matrix(X, "X")
    n, dim = X.shape
    payload = np.ascontiguousarray(X, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, 1, n, dim))
        fh.write(payload)


def load_features(path) -> np.ndarray:
    """Read a binary feature file into a float64 matrix.

    Errors carry the byte offset of the problem so truncated or foreign
    files are diagnosable.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(
            f"truncated header in {path}: expected {_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, n, dim = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"bad magic at byte 0 in {path}: {magic!r}")
    if version != 1:
        raise ValueError(f"unsupported feature file version {version} in {path}")
    if n == 0 or dim == 0:
        raise ValueError(f"empty matrix in {path}: n={n}, dim={dim}")
    expected = n * dim * 4
    got = len(raw) - _HEADER.size
    if got < expected:
        raise ValueError(
            f"truncated payload in {path}: expected {expected} bytes at offset "
            f"{_HEADER.size}, got {got}"
        )
    if got > expected:
        raise ValueError(
            f"trailing data in {path} at byte {_HEADER.size + expected}: "
            f"{got - expected} unexpected bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", count=n * dim, offset=_HEADER.size)
    return data.reshape(n, dim).astype(np.float64)


@dataclass
class DatasetManifest:
    """Per-sample identity: id, class label, optional group, optional role.

    ``groups`` uses -1 for unassigned; ``roles`` uses "train" for blank.
    Rows are aligned with the rows of the companion feature matrix.
    """

    sample_ids: np.ndarray
    classes: np.ndarray  # string labels
    groups: np.ndarray  # int, -1 = unassigned
    roles: np.ndarray  # "train" | "query" | "gallery"

    def __post_init__(self):
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.classes = np.asarray(self.classes, dtype=str)
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.roles = np.asarray(self.roles, dtype=str)
        n = len(self.sample_ids)
        if not (len(self.classes) == len(self.groups) == len(self.roles) == n):
            raise ValueError("manifest columns have mismatched lengths")
        if n == 0:
            raise ValueError("empty manifest")
        uniq, counts = np.unique(self.sample_ids, return_counts=True)
        if np.any(counts > 1):
            raise ValueError(f"duplicate sample_id {uniq[counts > 1][0]}")
        if np.any(self.classes == ""):
            raise ValueError("empty class label")
        if np.any(self.groups < GROUP_UNASSIGNED):
            raise ValueError("group ids must be >= 0 (or -1 for unassigned)")
        bad = ~np.isin(self.roles, ROLES)
        if np.any(bad):
            raise ValueError(f"unknown role {self.roles[bad][0]!r}")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def class_list(self) -> list[str]:
        """Distinct class labels in sorted order."""
        return sorted(set(self.classes.tolist()))

    def rows_with_role(self, *roles: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.roles, roles))

    def replace(self, **kwargs) -> "DatasetManifest":
        fields = dict(
            sample_ids=self.sample_ids,
            classes=self.classes,
            groups=self.groups,
            roles=self.roles,
        )
        fields.update(kwargs)
        return DatasetManifest(**fields)


MANIFEST_HEADER = ["sample_id", "class", "group", "role"]


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for sid, cls, grp, role in zip(
            manifest.sample_ids, manifest.classes, manifest.groups, manifest.roles
        ):
            writer.writerow([sid, cls, "" if grp == GROUP_UNASSIGNED else int(grp), role])


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV; errors carry the line number."""
    ids, classes, groups, roles = [], [], [], []
    seen: dict[int, int] = {}
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValueError(
                f"{path}:1: expected header {','.join(MANIFEST_HEADER)}, got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            sid_s, cls, grp_s, role = (f.strip() for f in row)
            try:
                sid = int(sid_s)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad sample_id {sid_s!r}") from None
            if sid in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate sample_id {sid} (first at line {seen[sid]})"
                )
            seen[sid] = lineno
            if not cls:
                raise ValueError(f"{path}:{lineno}: empty class")
            if grp_s == "":
                grp = GROUP_UNASSIGNED
            else:
                try:
                    grp = int(grp_s)
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad group {grp_s!r}") from None
                if grp < 0:
                    raise ValueError(f"{path}:{lineno}: negative group {grp}")
            if role == "":
                role = "train"
            elif role not in ROLES:
                raise ValueError(f"{path}:{lineno}: unknown role {role!r}")
            ids.append(sid)
            classes.append(cls)
            groups.append(grp)
            roles.append(role)
    if not ids:
        raise ValueError(f"{path}: no data rows")
    return DatasetManifest(np.array(ids), np.array(classes), np.array(groups), np.array(roles))


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset shape: multimodal classes with group-level offsets.

    Classes sit on a sphere of radius ``class_separation``; each class has
    ``groups_per_class`` appearance modes offset by ``group_separation``
    from the class mean; samples add isotropic Gaussian noise.
    """

    n_classes: int = 10
    groups_per_class: int = 3
    samples_per_group: int = 20
    raw_dim: int = 32
    class_separation: float = 8.0
    group_separation: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "groups_per_class", "samples_per_group", "raw_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("class_separation", "group_separation", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return v / norms


def generate_synthetic(spec: SynthSpec) -> tuple[np.ndarray, DatasetManifest]:
    """Build (features, manifest) with ground-truth groups recorded.

    Deterministic in ``spec.seed``. All roles start as "train".
    """
    rng = np.random.default_rng(spec.seed)
    C, G, m, d = spec.n_classes, spec.groups_per_class, spec.samples_per_group, spec.raw_dim
    class_means = _random_directions(rng, C, d) * spec.class_separation
    rows, classes, groups = [], [], []
    for c in range(C):
        offsets = _random_directions(rng, G, d) * spec.group_separation
        for g in range(G):
            center = class_means[c] + offsets[g]
            samples = center + spec.noise_sigma * rng.standard_normal((m, d))
            rows.append(samples)
            classes.extend([f"class_{c:03d}"] * m)
            groups.extend([g] * m)
    X = np.vstack(rows)
    n = X.shape[0]
    manifest = DatasetManifest(
        sample_ids=np.arange(n),
        classes=np.array(classes),
        groups=np.array(groups),
        roles=np.full(n, "train"),
    )
    return X, manifest


def split_roles(manifest: DatasetManifest, query_fraction: float, seed: int) -> DatasetManifest:
    """Assign query/gallery roles per class, deterministically.

    Per class: floor(query_fraction * size) queries, at least 1 when the
    class has >= 2 samples, and always at least one gallery item. Classes
    of size 1 stay gallery-only (warned). Non-query rows become gallery;
    training consumers treat gallery rows as the training pool, so queries
    are genuinely held out.
    """
    if not (0.0 < query_fraction < 1.0):
        raise ValueError(f"query_fraction must be in (0, 1), got {query_fraction}")
    roles = np.full(len(manifest), "gallery", dtype=object)
    rng = np.random.default_rng(seed)
    for cls in manifest.class_list:
        idx = np.flatnonzero(manifest.classes == cls)
        if idx.size == 1:
            warnings.warn(f"class {cls!r} has a single sample; left gallery-only")
            continue
        n_query = max(1, int(np.floor(query_fraction * idx.size)))
        n_query = min(n_query, idx.size - 1)  # keep >= 1 gallery item
        chosen = rng.choice(idx, size=n_query, replace=False)
        roles[chosen] = "query"
    return manifest.replace(roles=np.asarray(roles, dtype=str))
