"""Datasets: synthetic generator, binary storage, evaluation and the
reconstruction-residual baseline.

Feature matrices are stored modality by modality as ``(n_s, N)`` arrays (one
column per sample).  Labels are 1-based class indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagic, DimensionMismatch, InvalidSpec, TruncatedFile, ValidationError
from .model import Head, Hyperparams, MultimodalDictionary, Prior, normalize_columns
from .sparse_coding import GramCache, SolverOptions, encode_batch
from .training import unsupervised_fit

MAGIC = b"JSDL"
HEADER = struct.Struct("<4sIII")  # magic, rows, cols, reserved (zero)
SPLIT_CODES = {"train": 0, "val": 1, "test": 2}
SPLIT_NAMES = {v: k for k, v in SPLIT_CODES.items()}


# --------------------------------------------------------------------------
# binary matrices

def write_matrix(path, M) -> None:
    """Little-endian float64, row-major, behind a 16-byte header."""
    M = np.ascontiguousarray(M, dtype="<f8")
    if M.ndim != 2:
        raise ValidationError("only 2-D matrices can be stored")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, M.shape[0], M.shape[1], 0))
        fh.write(M.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, shorter than the header")
    magic, rows, cols, _ = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}, expected {MAGIC!r}")
    need = HEADER.size + 8 * rows * cols
    if len(raw) < need:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, header promises {need}")
    if len(raw) > need:
        raise DimensionMismatch(f"{path}: {len(raw) - need} trailing bytes")
    return np.frombuffer(raw, dtype="<f8", offset=HEADER.size).reshape(rows, cols).astype(np.float64)


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------------------
# datasets

@dataclass
class Dataset:
    features: list  # per modality, (n_s, N)
    labels: np.ndarray
    names: list = field(default_factory=list)
    splits: Optional[np.ndarray] = None  # per sample, "train" / "val" / "test"
    truth: Optional[list] = None  # planted per-class dictionaries, diagnostics only

    def __post_init__(self):
        self.features = [np.asarray(X, dtype=np.float64) for X in self.features]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        N = self.labels.shape[0]
        if not self.features:
            raise ValidationError("dataset needs at least one modality")
        if any(X.ndim != 2 or X.shape[1] != N for X in self.features):
            raise DimensionMismatch("every modality needs one column per label")
        if not self.names:
            self.names = [f"m{s}" for s in range(len(self.features))]
        if len(self.names) != len(self.features):
            raise DimensionMismatch("one name per modality")
        if self.splits is None:
            self.splits = np.full(N, "train")
        self.splits = np.asarray(self.splits, dtype="<U5")
        if self.splits.shape != (N,) or not set(self.splits) <= set(SPLIT_CODES):
            raise ValidationError("split tags must be train/val/test, one per sample")

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) if self.n_samples else 0

    @property
    def dims(self) -> tuple:
        return tuple(X.shape[0] for X in self.features)

    def rows(self) -> list:
        """Features with one row per sample, the layout the solvers use."""
        return [np.ascontiguousarray(X.T) for X in self.features]

    def subset(self, split: str) -> "Dataset":
        mask = self.splits == split
        return Dataset([X[:, mask] for X in self.features], self.labels[mask], list(self.names),
                       self.splits[mask], self.truth)

    def normalized(self) -> "Dataset":
        return Dataset([normalize_columns(X) for X in self.features], self.labels, list(self.names),
                       self.splits, self.truth)


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for old in path.glob("modality_*.bin"):
        old.unlink()
    write_manifest(path / "manifest.txt", {
        "format": "mtdl-dataset-1",
        "S": dataset.n_modalities,
        "K": dataset.n_classes,
        "N": dataset.n_samples,
        "names": ",".join(dataset.names),
        "dims": ",".join(str(n) for n in dataset.dims),
        "precision": "float64",
        "layout": "modality_<s>.bin is n_s x N, one column per sample",
    })
    for s, X in enumerate(dataset.features):
        write_matrix(path / f"modality_{s}.bin", X)
    (path / "labels.bin").write_bytes(dataset.labels.astype("<u4").tobytes())
    (path / "splits.bin").write_bytes(np.array([SPLIT_CODES[t] for t in dataset.splits], dtype="u1").tobytes())


def _read_vector(path, dtype, N):
    raw = Path(path).read_bytes()
    size = np.dtype(dtype).itemsize
    if len(raw) < N * size:
        raise TruncatedFile(f"{path}: {len(raw)} bytes for {N} entries")
    if len(raw) > N * size:
        raise DimensionMismatch(f"{path}: more than {N} entries")
    return np.frombuffer(raw, dtype=dtype)


def load_dataset(path) -> Dataset:
    path = Path(path)
    man = read_manifest(path / "manifest.txt")
    try:
        S, N = int(man["S"]), int(man["N"])
        dims = [int(v) for v in man["dims"].split(",")]
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path}: bad manifest ({exc})") from None
    files = sorted(path.glob("modality_*.bin"))
    if len(files) != S or len(dims) != S:
        raise DimensionMismatch(f"{path}: manifest says S={S}, found {len(files)} matrix files")
    feats = []
    for s in range(S):
        X = read_matrix(path / f"modality_{s}.bin")
        if X.shape != (dims[s], N):
            raise DimensionMismatch(f"modality {s}: shape {X.shape}, manifest says {(dims[s], N)}")
        feats.append(X)
    labels = _read_vector(path / "labels.bin", "<u4", N).astype(np.int64)
    codes = _read_vector(path / "splits.bin", "u1", N)
    if not set(codes.tolist()) <= set(SPLIT_NAMES):
        raise ValidationError(f"{path}: unknown split code")
    splits = np.array([SPLIT_NAMES[c] for c in codes.tolist()], dtype="<U5")
    names = man.get("names", "").split(",") if man.get("names") else []
    return Dataset(feats, labels, names, splits)


# --------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SynthSpec:
    """Planted multimodal classification task.

    Each class owns ``atoms_per_class`` zero-mean unit atoms per modality,
    blended with a base shared by all classes (``class_similarity`` in
    [0, 1)). A sample activates ``active_per_sample`` of its class atoms in
    every modality (shared row support) plus optional nuisance atoms common
    to all classes, then receives Gaussian noise of relative size ``noise``.
    With ``correlated`` the same coefficients are reused in all modalities.
    """
    n_classes: int = 10
    n_modalities: int = 3
    dims: tuple = (20, 20, 20)
    atoms_per_class: int = 3
    train_per_class: int = 40
    test_per_class: int = 20
    noise: float = 0.6
    active_per_sample: int = 2
    class_similarity: float = 0.7
    shared_atoms: int = 0
    shared_weight: float = 1.0
    correlated: bool = False
    one_hot: bool = False  # single unit coefficient (overrides active_per_sample)

    def validate(self) -> None:
        if self.n_classes < 2 or self.n_modalities < 1:
            raise InvalidSpec("need K >= 2 classes and S >= 1 modalities")
        if len(self.dims) != self.n_modalities or min(self.dims) < 1:
            raise InvalidSpec("one positive dimension per modality")
        if self.atoms_per_class < 1 or self.train_per_class < 1 or self.test_per_class < 0:
            raise InvalidSpec("atoms and samples per class must be positive")
        if not 1 <= self.active_per_sample or self.noise < 0:
            raise InvalidSpec("active_per_sample >= 1 and noise >= 0 required")
        if not 0 <= self.class_similarity < 1 or self.shared_atoms < 0 or self.shared_weight < 0:
            raise InvalidSpec("class_similarity in [0, 1); nuisance settings nonnegative")


def _unit_atoms(rng, n, m):
    A = rng.standard_normal((n, m))
    if n > 1:
        A -= A.mean(axis=0)
    nrm = np.linalg.norm(A, axis=0)
    return A / np.where(nrm > 0, nrm, 1.0)


def generate_synthetic(spec: SynthSpec, seed: int = 0) -> Dataset:
    """Sample a train/test dataset from the planted model; deterministic in ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    K, S, m = spec.n_classes, spec.n_modalities, spec.atoms_per_class
    k = 1 if spec.one_hot else min(spec.active_per_sample, m)
    gam = spec.class_similarity
    truth = []
    for s, n in enumerate(spec.dims):
        base = _unit_atoms(rng, n, m)
        per = [np.sqrt(1 - gam) * _unit_atoms(rng, n, m) + np.sqrt(gam) * base for _ in range(K)]
        truth.append([P / np.linalg.norm(P, axis=0) for P in per])
    nuisance = [_unit_atoms(rng, n, spec.shared_atoms) for n in spec.dims]

    per_class = spec.train_per_class + spec.test_per_class
    N = K * per_class
    feats = [np.zeros((n, N)) for n in spec.dims]
    labels = np.repeat(np.arange(1, K + 1), per_class)
    splits = np.tile(np.array(["train"] * spec.train_per_class + ["test"] * spec.test_per_class), K)
    for i in range(N):
        c = labels[i] - 1
        support = rng.choice(m, k, replace=False)
        shared_coef = rng.uniform(0.5, 1.5, k)
        nz = rng.integers(0, spec.shared_atoms + 1) if spec.shared_atoms else 0
        nsup = rng.choice(spec.shared_atoms, nz, replace=False) if nz else np.zeros(0, dtype=int)
        nco = spec.shared_weight * rng.standard_normal(nz)
        for s, n in enumerate(spec.dims):
            if spec.one_hot:
                coef = np.ones(1)
            elif spec.correlated:
                coef = shared_coef
            else:
                coef = rng.uniform(0.5, 1.5, k)
            clean = truth[s][c][:, support] @ coef
            if nz:
                clean = clean + nuisance[s][:, nsup] @ (nco if spec.correlated else
                                                        spec.shared_weight * rng.standard_normal(nz))
            clean = clean / max(np.linalg.norm(clean), 1e-12)
            if spec.noise > 0:
                clean = clean + spec.noise * rng.standard_normal(n) / np.sqrt(n)
            feats[s][:, i] = clean
    ds = Dataset(feats, labels, [f"m{s}" for s in range(S)], splits, truth)
    return ds.normalized()


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    confusion: np.ndarray  # (K, K), rows = true class, columns = predicted

    def to_csv(self) -> str:
        K = self.confusion.shape[0]
        lines = [f"accuracy,{self.accuracy!r}", "true\\pred," + ",".join(str(c) for c in range(1, K + 1))]
        for r in range(K):
            lines.append(f"{r + 1}," + ",".join(str(int(v)) for v in self.confusion[r]))
        return "\n".join(lines) + "\n"


def score(labels, predictions, n_classes: Optional[int] = None) -> Metrics:
    """Correct classification rate and confusion counts for 1-based labels."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape or labels.size == 0:
        raise ValidationError("need one prediction per label and at least one label")
    K = n_classes or int(max(labels.max(), predictions.max()))
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (labels - 1, predictions - 1), 1)
    return Metrics(float(np.mean(labels == predictions)), conf)


def class_dictionary(blocks: Sequence[Sequence[np.ndarray]]):
    """Stack per-class blocks ``blocks[c][s]`` into one dictionary plus atom tags."""
    S = len(blocks[0])
    mats = tuple(np.hstack([b[s] for b in blocks]) for s in range(S))
    tags = np.concatenate([np.full(b[0].shape[1], c + 1) for c, b in enumerate(blocks)])
    return MultimodalDictionary(mats), tags


def residual_classify(X, dictionary: MultimodalDictionary, atom_classes, lambda1: float,
                      opts: Optional[SolverOptions] = None, chunk: int = 500) -> np.ndarray:
    """Class with the smallest joint reconstruction residual.

    ``X[s]`` holds samples as rows. Codes come from one joint encode against
    the full dictionary (l12 prior, no ridge term); each class is scored with
    its own atoms and coefficients only. Ties go to the smallest class.
    """
    atom_classes = np.asarray(atom_classes)
    classes = np.unique(atom_classes)
    cache = GramCache(dictionary)
    X = [np.atleast_2d(np.asarray(Xs, dtype=np.float64)) for Xs in X]
    out = np.zeros(X[0].shape[0], dtype=np.int64)
    for k0 in range(0, X[0].shape[0], chunk):
        Xb = [Xs[k0:k0 + chunk] for Xs in X]
        A = encode_batch(Xb, cache, lambda1, 0.0, 0.0, opts=opts)["codes"]
        res = np.zeros((A.shape[0], classes.size))
        for ci, c in enumerate(classes):
            sel = atom_classes == c
            for s, D in enumerate(dictionary.dicts):
                R = Xb[s] - A[:, sel, s] @ D[:, sel].T
                res[:, ci] += np.einsum("ij,ij->i", R, R)
        out[k0:k0 + chunk] = classes[np.argmin(res, axis=1)]
    return out


def jsrc_dictionary(train: Dataset):
    """Class-tagged dictionary whose atoms are the normalized training samples."""
    order = np.argsort(train.labels, kind="stable")
    mats = tuple(np.ascontiguousarray(X[:, order]) for X in train.features)
    return MultimodalDictionary(mats), train.labels[order]


def jsrc_udl_dictionary(train: Dataset, atoms_per_class: int, hp: Hyperparams):
    """Per-class unsupervised dictionaries, stacked with class tags."""
    blocks = []
    for c in range(1, train.n_classes + 1):
        Xc = [X[:, train.labels == c].T for X in train.features]
        sub = replace(hp, seed=hp.seed + c)
        blocks.append(unsupervised_fit(Xc, sub, Prior.L12, n_atoms=atoms_per_class).dictionary.dicts)
    return class_dictionary(blocks)


def to_head_labels(labels, head) -> np.ndarray:
    """Map 1-based labels to the label convention of ``head``."""
    labels = np.asarray(labels, dtype=np.int64)
    if Head(head) is Head.LOGISTIC:
        if labels.size and labels.max() > 2:
            raise ValidationError("logistic head handles two classes only")
        return np.where(labels == 2, 1, -1)
    return labels


def from_head_labels(pred, head) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    return np.where(pred == 1, 2, 1) if Head(head) is Head.LOGISTIC else pred
