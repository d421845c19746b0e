"""Synthetic two-view sequence corpus.

A smooth latent walk ``z`` drives both views: the continuous view is a
noisy linear mix of ``z``; the unit view is ``z B`` pushed through a
k-means codebook, so it only keeps the nearest centroid. Targets are the
argmax of a fixed linear readout of ``z``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusIOError

FORMAT = "mvfuse-corpus/1"
PARTITIONS = ("train", "valid", "test")


@dataclass(frozen=True)
class CorpusSpec:
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seq_len: int = 12
    fbank_dim: int = 16
    unit_dim: int = 8
    vocab_size: int = 16
    latent_dim: int = 4
    noise_sigma: float = 1.0
    codebook_k: int = 32
    kmeans_iters: int = 50
    seed: int = 0
    # unit view := continuous view (diagnostic control: no conflict possible)
    identical_views: bool = False

    def __post_init__(self):
        counts = (self.n_train, self.n_valid, self.n_test, self.seq_len, self.fbank_dim,
                  self.unit_dim, self.latent_dim, self.codebook_k)
        if min(counts) < 1:
            raise ConfigError("corpus sizes and dimensions must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.identical_views and self.unit_dim != self.fbank_dim:
            raise ConfigError("identical_views requires unit_dim == fbank_dim")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Codebook:
    centroids: np.ndarray
    distortions: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class MultiViewExample:
    x_fbank: np.ndarray  # [T, D_f]
    x_unit: np.ndarray   # [T, D_u]
    targets: np.ndarray  # [T]


@dataclass
class Batch:
    """Examples flattened to rows; the backbone is position-wise."""
    x_fbank: np.ndarray
    x_unit: np.ndarray
    targets: np.ndarray
    unit_ids: np.ndarray | None = None


@dataclass
class Partition:
    x_fbank: np.ndarray  # [n, T, D_f]
    x_unit: np.ndarray   # [n, T, D_u]
    targets: np.ndarray  # [n, T]
    unit_ids: np.ndarray | None = None

    def __len__(self):
        return self.x_fbank.shape[0]

    def example(self, i: int) -> MultiViewExample:
        return MultiViewExample(self.x_fbank[i], self.x_unit[i], self.targets[i])

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        ids = None if self.unit_ids is None else self.unit_ids[idx].reshape(-1)
        return Batch(self.x_fbank[idx].reshape(-1, self.x_fbank.shape[-1]),
                     self.x_unit[idx].reshape(-1, self.x_unit.shape[-1]),
                     self.targets[idx].reshape(-1), ids)

    def all(self) -> Batch:
        return self.batch(np.arange(len(self)))


@dataclass
class Corpus:
    spec: CorpusSpec
    train: Partition
    valid: Partition
    test: Partition
    codebook: Codebook | None
    unit_range: tuple[float, float]

    def partition(self, name: str) -> Partition:
        if name not in PARTITIONS:
            raise ConfigError(f"unknown partition {name!r}")
        return getattr(self, name)


# -- vector quantisation ---------------------------------------------------

def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 4096) -> np.ndarray:
    # explicit differences, not the |x|^2 - 2xc + |c|^2 expansion: exact ties stay ties
    out = np.empty((points.shape[0], centroids.shape[0]))
    for s in range(0, points.shape[0], chunk):
        diff = points[s:s + chunk, None, :] - centroids[None, :, :]
        out[s:s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[chosen].copy()


def kmeans_fit(points, k: int, max_iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeding.

    ``distortions[i]`` is the mean squared distance after the i-th
    assignment step. Empty clusters are respawned at the currently worst
    represented points.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError(f"k-means: points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ConfigError("k-means: k must be >= 1")
    if n < k:
        raise ConfigError(f"k-means: k exceeds points (k={k}, N={n})")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(points, k, rng)
    history: list[float] = []
    prev = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(points, centroids)
        ids = d.argmin(axis=1)
        d2 = d[np.arange(n), ids]
        history.append(float(d2.mean()))
        if prev is not None and np.array_equal(ids, prev):
            break
        prev = ids
        counts = np.bincount(ids, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, ids, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        empty = np.flatnonzero(~nonempty)
        if empty.size:
            worst = np.argsort(-d2, kind="stable")[:empty.size]
            centroids[empty] = points[worst]
    return Codebook(centroids, history, it)


def quantize(points, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-centroid ids (lowest id on ties) and the centroid rows."""
    points = np.asarray(points, dtype=np.float64)
    c = codebook.centroids
    if points.shape[-1] != c.shape[1]:
        raise ConfigError(f"quantize: point width {points.shape[-1]} != codebook width {c.shape[1]}")
    flat = points.reshape(-1, c.shape[1])
    ids = _sq_dists(flat, c).argmin(axis=1)
    return ids.reshape(points.shape[:-1]), c[ids].reshape(points.shape)


def distortion(points, codebook: Codebook) -> float:
    points = np.asarray(points, dtype=np.float64)
    return float(_sq_dists(points, codebook.centroids).min(axis=1).mean())


# -- view transforms ---------------------------------------------------------

def _check_range(value_range):
    lo, hi = value_range
    if lo > hi:
        raise ConfigError(f"noise range min {lo} exceeds max {hi}")
    return float(lo), float(hi)


def noise_sum(example, value_range, rng: np.random.Generator, view: str = "fbank"):
    """Add uniform(min, max) noise to one view of an example or batch."""
    lo, hi = _check_range(value_range)
    attr = f"x_{view}"
    x = getattr(example, attr)
    return replace(example, **{attr: x + rng.uniform(lo, hi, x.shape)})


def noise_replace(example, value_range, rng: np.random.Generator):
    """Swap the unit view for uniform(min, max) noise of the same shape."""
    lo, hi = _check_range(value_range)
    return replace(example, x_unit=rng.uniform(lo, hi, example.x_unit.shape))


def length_align(x, T: int) -> np.ndarray:
    """Nearest-index resampling of rows onto ``T`` positions (row floor(i*T'/T))."""
    x = np.asarray(x)
    src = x.shape[0]
    if src < 1 or T < 1:
        raise ConfigError("length_align needs non-empty input and target length")
    idx = (np.arange(T) * src) // T
    return x[idx]


# -- generation ----------------------------------------------------------------

def _latent_walks(rng, n, T, dim, momentum=0.9, step=0.3, bound=3.0):
    z = np.empty((n, T, dim))
    pos = rng.uniform(-2.0, 2.0, (n, dim))
    vel = np.zeros((n, dim))
    for t in range(T):
        vel = momentum * vel + step * rng.normal(size=(n, dim))
        pos = np.clip(pos + vel, -bound, bound)
        z[:, t] = pos
    return z


def generate_corpus(spec: CorpusSpec) -> Corpus:
    rng = np.random.default_rng(spec.seed)
    mix_f = rng.normal(size=(spec.latent_dim, spec.fbank_dim)) / np.sqrt(spec.latent_dim)
    mix_u = rng.normal(size=(spec.latent_dim, spec.unit_dim)) / np.sqrt(spec.latent_dim)
    readout = rng.normal(size=(spec.latent_dim, spec.vocab_size))

    sizes = [spec.n_train, spec.n_valid, spec.n_test]
    latents = [_latent_walks(rng, n, spec.seq_len, spec.latent_dim) for n in sizes]
    fbank = [z @ mix_f + spec.noise_sigma * rng.normal(size=z.shape[:2] + (spec.fbank_dim,))
             for z in latents]
    targets = [np.argmax(z @ readout, axis=-1).astype(np.int64) for z in latents]

    if spec.identical_views:
        codebook = None
        units = [f.copy() for f in fbank]
        ids = [None, None, None]
    else:
        pre = [z @ mix_u for z in latents]
        # fitted on the training partition only
        codebook = kmeans_fit(pre[0].reshape(-1, spec.unit_dim), spec.codebook_k,
                              spec.kmeans_iters, spec.seed)
        quantized = [quantize(p, codebook) for p in pre]
        ids = [q[0] for q in quantized]
        units = [q[1] for q in quantized]

    parts = [Partition(f, u, t, i) for f, u, t, i in zip(fbank, units, targets, ids)]
    unit_range = (float(units[0].min()), float(units[0].max()))
    return Corpus(spec, *parts, codebook=codebook, unit_range=unit_range)


# -- on-disk format ----------------------------------------------------------

def _encode_partition(p: Partition) -> bytes:
    chunks = [struct.pack("<Q", len(p))]
    for i in range(len(p)):
        T = p.x_fbank.shape[1]
        chunks.append(struct.pack("<I", T))
        chunks.append(np.ascontiguousarray(p.x_fbank[i], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(p.x_unit[i], dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(p.targets[i], dtype="<i4").tobytes())
    return b"".join(chunks)


def _decode_partition(buf: bytes, d_f: int, d_u: int, where: str) -> Partition:
    try:
        (count,) = struct.unpack_from("<Q", buf, 0)
        off = 8
        xf, xu, tg = [], [], []
        for _ in range(count):
            (T,) = struct.unpack_from("<I", buf, off)
            off += 4
            xf.append(np.frombuffer(buf, "<f8", T * d_f, off).reshape(T, d_f))
            off += 8 * T * d_f
            xu.append(np.frombuffer(buf, "<f8", T * d_u, off).reshape(T, d_u))
            off += 8 * T * d_u
            tg.append(np.frombuffer(buf, "<i4", T, off))
            off += 4 * T
    except (struct.error, ValueError) as exc:
        raise CorpusIOError(f"{where}: truncated or malformed partition file ({exc})") from None
    if off != len(buf):
        raise CorpusIOError(f"{where}: {len(buf) - off} trailing bytes")
    return Partition(np.array(xf, dtype=np.float64), np.array(xu, dtype=np.float64),
                     np.array(tg, dtype=np.int64))


def save_corpus(corpus: Corpus, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = {}
    for name in PARTITIONS:
        blob = _encode_partition(corpus.partition(name))
        (out / f"{name}.bin").write_bytes(blob)
        parts[name] = {"file": f"{name}.bin", "count": len(corpus.partition(name)),
                       "sha256": hashlib.sha256(blob).hexdigest()}
    cb = corpus.codebook
    meta = {
        "format": FORMAT,
        "spec": corpus.spec.to_dict(),
        "codebook": None if cb is None else cb.centroids.tolist(),
        "codebook_distortion": None if cb is None else cb.distortions[-1],
        "unit_range": list(corpus.unit_range),
        "partitions": parts,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return meta


def load_corpus(data_dir) -> Corpus:
    d = Path(data_dir)
    meta_path = d / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise CorpusIOError(f"no corpus at {d} (missing meta.json)") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise CorpusIOError(f"{meta_path}: unreadable ({exc})") from None
    if meta.get("format") != FORMAT:
        raise CorpusIOError(f"{meta_path}: unsupported format {meta.get('format')!r}")
    known = {f.name for f in fields(CorpusSpec)}
    spec = CorpusSpec(**{k: v for k, v in meta["spec"].items() if k in known})
    codebook = None if meta["codebook"] is None else Codebook(np.array(meta["codebook"], dtype=np.float64))
    parts = []
    for name in PARTITIONS:
        path = d / meta["partitions"][name]["file"]
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise CorpusIOError(f"{path}: {exc.strerror or exc}") from None
        p = _decode_partition(buf, spec.fbank_dim, spec.unit_dim, str(path))
        if codebook is not None:
            # re-quantising centroid rows recovers the ids exactly
            p.unit_ids = quantize(p.x_unit, codebook)[0]
        parts.append(p)
    lo, hi = meta["unit_range"]
    return Corpus(spec, *parts, codebook=codebook, unit_range=(float(lo), float(hi)))
