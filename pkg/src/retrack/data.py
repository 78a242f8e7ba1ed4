"""Synthetic composed-retrieval triplets with a controllable reference bias.

Generative story (all draws documented in :mod:`retrack.seeding`):

* latent rule: ``z_t = z_r + z_m @ M_mod`` with ``z_r, z_m ~ N(0, I)``,
* reference rows:     ``f_r[q] = z_r @ E_v + sigma * noise``,
* modification rows:  ``f_m[q] = z_m @ E_m + sigma * noise`` where
  ``E_m = M_mod @ E_v + 0.25 * E_txt`` — modification text lives mostly in
  the shared feature space, aligned with the change it describes, plus a
  text-specific residue,
* target rows:        ``f_t[q] = (z_r + (1 - beta) * z_m @ M_mod) @ E_v
  + sigma * noise`` — a fraction ``beta`` of the composed latent is
  replaced by reference content, injecting the reference bias the run is
  supposed to calibrate away.

Reference and target share one projection ``E_v`` (both are "videos"),
so at beta = 1 targets really do collapse onto the reference in feature
space.  Hard negatives for a query reuse its ``z_r`` with a fresh
modification latent; easy negatives draw fresh global latents.  Both are
deterministic functions of (seed, split, query id, negative index) and
are re-derived on demand rather than stored.

On disk a dataset is ``manifest.json`` plus ``data.bin``: magic ``RTRK``,
a little-endian u32 format version, the splits' float32 payload in
(sample, tensor[f_r, f_m, f_t], row, col) order, then a CRC32 of the
payload.  Features are float32 in the file and promoted to float64 for
all computation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .config import ConfigError, RunConfig

__all__ = [
    "DataFormatError",
    "SynthDataset",
    "Split",
    "generate",
    "save",
    "load",
    "dataset_sha256",
    "hard_negative",
    "easy_negative",
    "clean_composed_features",
    "batches_per_epoch",
    "batch_indices",
]

MAGIC = b"RTRK"
FORMAT_VERSION = 1

DATA_FIELDS = (
    "seed", "d_z", "q", "d", "sigma", "beta",
    "n_train", "n_val", "n_test", "n_hard", "n_easy",
)


class DataFormatError(ValueError):
    """The on-disk dataset is malformed or fails its integrity check."""


@dataclass
class Split:
    """One split's triplets: float32 features plus float64 latents."""

    f_r: np.ndarray  # (N, Q, D) float32
    f_m: np.ndarray
    f_t: np.ndarray
    z_r: np.ndarray  # (N, d_z) float64
    z_m: np.ndarray

    @property
    def count(self) -> int:
        return self.f_r.shape[0]


@dataclass
class SynthDataset:
    config: dict  # the DATA_FIELDS subset of a RunConfig
    e_v: np.ndarray  # (d_z, D)
    e_txt: np.ndarray  # (d_z, D)
    m_mod: np.ndarray  # (d_z, d_z)
    splits: dict[str, Split]

    @property
    def e_m(self) -> np.ndarray:
        return self.m_mod @ self.e_v + 0.25 * self.e_txt

    @property
    def seed(self) -> int:
        return self.config["seed"]


def data_config(cfg: RunConfig) -> dict:
    return {name: getattr(cfg, name) for name in DATA_FIELDS}


def _draw_maps(config: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    g = seeding.rng(config["seed"], seeding.MAPS)
    d_z, d = config["d_z"], config["d"]
    scale = 1.0 / np.sqrt(d_z)
    e_v = g.standard_normal((d_z, d)) * scale
    m_mod = g.standard_normal((d_z, d_z)) * scale
    e_txt = g.standard_normal((d_z, d)) * scale
    return e_v, m_mod, e_txt


def _sample_triplet(
    config: dict, maps: tuple[np.ndarray, np.ndarray, np.ndarray], split: str, i: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One triplet, fully determined by (seed, split, sample id)."""
    e_v, m_mod, e_txt = maps
    e_m = m_mod @ e_v + 0.25 * e_txt
    c = config
    g = seeding.rng(c["seed"], seeding.SPLIT_TAGS[split], i)
    z_r = g.standard_normal(c["d_z"])
    z_m = g.standard_normal(c["d_z"])
    shape = (c["q"], c["d"])
    f_r = z_r @ e_v + c["sigma"] * g.standard_normal(shape)
    f_m = z_m @ e_m + c["sigma"] * g.standard_normal(shape)
    biased = z_r + (1.0 - c["beta"]) * (z_m @ m_mod)
    f_t = biased @ e_v + c["sigma"] * g.standard_normal(shape)
    return f_r, f_m, f_t, z_r, z_m


def generate(cfg: RunConfig) -> SynthDataset:
    """Materialize the dataset for a config, bit-reproducibly."""
    config = data_config(cfg)
    maps = _draw_maps(config)
    counts = {"train": config["n_train"], "val": config["n_val"], "test": config["n_test"]}
    splits: dict[str, Split] = {}
    for split, n in counts.items():
        q, d, d_z = config["q"], config["d"], config["d_z"]
        f_r = np.empty((n, q, d), dtype=np.float32)
        f_m = np.empty((n, q, d), dtype=np.float32)
        f_t = np.empty((n, q, d), dtype=np.float32)
        z_r = np.empty((n, d_z))
        z_m = np.empty((n, d_z))
        for i in range(n):
            fr, fm, ft, zr, zm = _sample_triplet(config, maps, split, i)
            f_r[i] = fr.astype(np.float32)
            f_m[i] = fm.astype(np.float32)
            f_t[i] = ft.astype(np.float32)
            z_r[i] = zr
            z_m[i] = zm
        splits[split] = Split(f_r=f_r, f_m=f_m, f_t=f_t, z_r=z_r, z_m=z_m)
    e_v, m_mod, e_txt = maps
    return SynthDataset(config=config, e_v=e_v, e_txt=e_txt, m_mod=m_mod, splits=splits)


def hard_negative(ds: SynthDataset, split: str, i: int, j: int) -> np.ndarray:
    """Distractor target sharing query i's reference latent (float32, QxD)."""
    c = ds.config
    g = seeding.rng(c["seed"], seeding.HARD, seeding.SPLIT_TAGS[split], i, j)
    z_m = g.standard_normal(c["d_z"])
    noise = g.standard_normal((c["q"], c["d"]))
    latent = ds.splits[split].z_r[i] + (1.0 - c["beta"]) * (z_m @ ds.m_mod)
    return (latent @ ds.e_v + c["sigma"] * noise).astype(np.float32)


def easy_negative(ds: SynthDataset, split: str, i: int, j: int) -> np.ndarray:
    """Distractor target drawn from fresh global latents (float32, QxD)."""
    c = ds.config
    g = seeding.rng(c["seed"], seeding.EASY, seeding.SPLIT_TAGS[split], i, j)
    z_r = g.standard_normal(c["d_z"])
    z_m = g.standard_normal(c["d_z"])
    noise = g.standard_normal((c["q"], c["d"]))
    latent = z_r + (1.0 - c["beta"]) * (z_m @ ds.m_mod)
    return (latent @ ds.e_v + c["sigma"] * noise).astype(np.float32)


def clean_composed_features(ds: SynthDataset, split: str) -> np.ndarray:
    """Noise-free target-space encodings of the composed latents (N, Q, D).

    The latent nearest-neighbour upper bound: with sigma = 0 and beta = 0
    these equal the stored targets exactly, so retrieval over the split's
    targets must score Recall@1 = 1.
    """
    sp = ds.splits[split]
    composed = sp.z_r + sp.z_m @ ds.m_mod  # (N, d_z)
    rows = (composed @ ds.e_v).astype(np.float32)  # (N, D)
    return np.repeat(rows[:, None, :], ds.config["q"], axis=1)


# ---------------------------------------------------------------------------
# on-disk format


def _split_payload(sp: Split) -> bytes:
    stacked = np.stack([sp.f_r, sp.f_m, sp.f_t], axis=1)  # (N, 3, Q, D)
    return stacked.astype("<f4").tobytes(order="C")


def dataset_sha256(ds: SynthDataset) -> str:
    """Content hash of a dataset: config JSON plus the float32 feature payload.

    Latents are omitted on purpose — they are a pure function of the config,
    exactly as in the on-disk format.  Two datasets hash equal iff a run
    trained on either would see identical bytes.
    """
    h = hashlib.sha256()
    h.update(json.dumps(ds.config, sort_keys=True).encode())
    for name in ("train", "val", "test"):
        h.update(_split_payload(ds.splits[name]))
    return h.hexdigest()


def save(ds: SynthDataset, out_dir: str | Path) -> Path:
    """Write manifest.json + data.bin; returns the dataset directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = b"".join(_split_payload(ds.splits[s]) for s in ("train", "val", "test"))
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(out / "data.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "order": "sample,(f_r,f_m,f_t),row,col",
        "config": ds.config,
        "splits": {s: {"count": ds.splits[s].count} for s in ("train", "val", "test")},
        "maps": {
            "e_v": ds.e_v.tolist(),
            "m_mod": ds.m_mod.tolist(),
            "e_txt": ds.e_txt.tolist(),
        },
        "payload_crc32": crc,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load(data_dir: str | Path) -> SynthDataset:
    """Read a dataset directory back, verifying magic, version, and CRC.

    Features come from data.bin bit-exactly; latents are re-derived from
    the manifest seed (they are not stored — the generator is the record).
    """
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    bin_path = root / "data.bin"
    if not manifest_path.exists() or not bin_path.exists():
        raise FileNotFoundError(f"dataset at {root} is missing manifest.json or data.bin")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"unsupported dataset format version {manifest.get('format_version')}")
    config = manifest["config"]
    missing = set(DATA_FIELDS) - set(config)
    if missing:
        raise DataFormatError(f"manifest config lacks keys: {sorted(missing)}")

    raw = bin_path.read_bytes()
    if raw[:4] != MAGIC:
        raise DataFormatError(f"bad magic in {bin_path}: {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"unsupported data.bin version {version}")
    payload, (crc,) = raw[8:-4], struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataFormatError(f"CRC mismatch in {bin_path}")
    if manifest.get("payload_crc32") != crc:
        raise DataFormatError("manifest/payload CRC disagreement")

    q, d, d_z = config["q"], config["d"], config["d_z"]
    counts = {s: manifest["splits"][s]["count"] for s in ("train", "val", "test")}
    expected = sum(counts.values()) * 3 * q * d * 4
    if len(payload) != expected:
        raise DataFormatError(f"payload holds {len(payload)} bytes, expected {expected}")

    maps = _draw_maps(config)
    splits: dict[str, Split] = {}
    offset = 0
    for split in ("train", "val", "test"):
        n = counts[split]
        nbytes = n * 3 * q * d * 4
        block = np.frombuffer(payload[offset : offset + nbytes], dtype="<f4").reshape(n, 3, q, d)
        offset += nbytes
        z_r = np.empty((n, d_z))
        z_m = np.empty((n, d_z))
        for i in range(n):
            g = seeding.rng(config["seed"], seeding.SPLIT_TAGS[split], i)
            z_r[i] = g.standard_normal(d_z)
            z_m[i] = g.standard_normal(d_z)
        splits[split] = Split(
            f_r=block[:, 0].copy(), f_m=block[:, 1].copy(), f_t=block[:, 2].copy(),
            z_r=z_r, z_m=z_m,
        )
    e_v, m_mod, e_txt = maps
    man_ev = np.asarray(manifest["maps"]["e_v"])
    if man_ev.shape != e_v.shape or not np.array_equal(man_ev, e_v):
        raise DataFormatError("manifest maps disagree with the seed-derived maps")
    return SynthDataset(config=config, e_v=e_v, e_txt=e_txt, m_mod=m_mod, splits=splits)


def batches_per_epoch(n: int, batch: int) -> int:
    return -(-n // batch)


def batch_indices(seed: int, n: int, batch: int, step: int) -> np.ndarray:
    """Training batch for a 1-based step: deterministic shuffled epochs.

    Each epoch e is an independent permutation from ``(seed, EPOCH, e)``;
    steps consume it ``batch`` samples at a time, ceil(n / batch) batches
    per epoch with the last one short when batch does not divide n.
    Stateless in ``step`` — resuming a run at step k sees exactly the
    batches a fresh run would.
    """
    if batch > n:
        raise ConfigError(f"batch={batch} exceeds split size {n}")
    per_epoch = batches_per_epoch(n, batch)
    epoch, k = divmod(step - 1, per_epoch)
    perm = seeding.rng(seed, seeding.EPOCH, epoch).permutation(n)
    return perm[k * batch : (k + 1) * batch]
