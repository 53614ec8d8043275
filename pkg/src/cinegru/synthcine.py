"""Synthetic cine series with sliding (negative) or locally tethered (positive) interfaces.

Each frame shows two textured regions separated by a horizontal interface.
The upper region slides tangentially, ``s(t) = A sin(2 pi cycles t / T)``,
over a static lower region. In positive series a contiguous patch of the
lower region close to the interface is dragged along with the upper region,
so the relative slip vanishes there.

``temporal_only`` mode adds a breathing-like global intensity swing whose
extremes coincide with zero slip, plus small per-frame rigid jitter. The
frame pair with the largest intensity difference then carries no slip at
all, and the tether is only visible in the frames in between.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng as rngmod

MODES = ("pairwise_detectable", "temporal_only")

_MAGIC = b"CINE"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


class DataError(ValueError):
    pass


@dataclass
class SynthConfig:
    T: int = 30
    H: int = 64
    W: int = 48
    frame_interval_s: float = 0.4
    slip_amplitude_px: float = 8.0
    cycles: float = 2.0
    adhesion_patch_frac: float = 0.6
    noise_sigma: float = 0.01
    mode: str = "temporal_only"
    texture_sigma_px: float = 2.0
    texture_contrast: float = 0.2
    band_px: int = 32
    # temporal_only nuisance, both proportional to the slip amplitude
    breath_gain_per_px: float = 0.04
    jitter_frac: float = 0.1

    def validate(self) -> None:
        if self.T < 2:
            raise DataError(f"T must be >= 2, got {self.T}")
        if self.H < 8 or self.W < 8:
            raise DataError(f"frame extent too small: {self.H}x{self.W}")
        if not 0 < self.adhesion_patch_frac < 1:
            raise DataError(f"adhesion_patch_frac must lie in (0,1), got {self.adhesion_patch_frac}")
        if self.slip_amplitude_px < 0:
            raise DataError("slip_amplitude_px must be non-negative")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")
        if self.mode not in MODES:
            raise DataError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.patch_width_px < 2:
            raise DataError(f"adhesion patch is {self.patch_width_px:.2f} px wide; need at least 2 px")

    @property
    def patch_width_px(self) -> float:
        return self.adhesion_patch_frac * self.W


@dataclass
class Series:
    series_id: str
    patient_id: str
    label: int
    frames: np.ndarray  # float32 [T,H,W] in [0,1]

    @property
    def T(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------- generation


def slip_profile(cfg: SynthConfig) -> np.ndarray:
    t = np.arange(cfg.T)
    return cfg.slip_amplitude_px * np.sin(2 * np.pi * cfg.cycles * t / cfg.T)


def breath_profile(cfg: SynthConfig) -> np.ndarray:
    """Global intensity offset per frame; extremes fall on zero-slip frames."""
    if cfg.mode != "temporal_only":
        return np.zeros(cfg.T)
    t = np.arange(cfg.T)
    return cfg.breath_gain_per_px * cfg.slip_amplitude_px * np.cos(np.pi * cfg.cycles * t / cfg.T)


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return (tex - tex.mean()) / tex.std()


def _sample(canvas: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """Bilinear lookup; x wraps around, y is clamped."""
    h, w = canvas.shape
    yy = np.clip(yy, 0, h - 1)
    y0 = np.minimum(np.floor(yy).astype(int), h - 2)
    x0 = np.floor(xx).astype(int)
    fy, fx = yy - y0, xx - x0
    x0 %= w
    x1 = (x0 + 1) % w
    top = canvas[y0, x0] * (1 - fx) + canvas[y0, x1] * fx
    bot = canvas[y0 + 1, x0] * (1 - fx) + canvas[y0 + 1, x1] * fx
    return top * (1 - fy) + bot * fy


def tether_weight(cfg: SynthConfig, interface_y: float, patch_center: float) -> np.ndarray:
    """Fraction of the upper-region slip carried by each lower-region pixel, [H,W]."""
    y = np.arange(cfg.H)[:, None] - interface_y
    half = cfg.band_px / 2
    wy = np.clip((cfg.band_px - y) / half, 0, 1) * (y >= 0)
    dx = np.abs((np.arange(cfg.W)[None, :] - patch_center + cfg.W / 2) % cfg.W - cfg.W / 2)
    taper = 3.0
    wx = np.clip((cfg.patch_width_px / 2 + taper - dx) / taper, 0, 1)
    return wy * wx


def generate_series(cfg: SynthConfig, label: int, seed: int, series_id: str = "S0", patient_id: str = "P0") -> Series:
    cfg.validate()
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label!r}")
    rng = rngmod.stream(seed, "synthcine", "series")
    pad = 8
    tex_b = _texture(rng, cfg.H + 2 * pad, cfg.W, cfg.texture_sigma_px)
    tex_a = _texture(rng, cfg.H + 2 * pad, cfg.W, cfg.texture_sigma_px)
    interface_y = cfg.H / 2 + float(rng.integers(-3, 4))
    patch_center = float(rng.uniform(0, cfg.W))
    weight = tether_weight(cfg, interface_y, patch_center) if label == 1 else np.zeros((cfg.H, cfg.W))

    slip = slip_profile(cfg)
    breath = breath_profile(cfg)
    if cfg.mode == "temporal_only":
        jit = rng.uniform(-1, 1, size=(cfg.T, 2)) * cfg.jitter_frac * cfg.slip_amplitude_px
    else:
        jit = np.zeros((cfg.T, 2))
    noise = rng.standard_normal((cfg.T, cfg.H, cfg.W)) * cfg.noise_sigma

    yy, xx = np.mgrid[0 : cfg.H, 0 : cfg.W].astype(np.float64)
    frames = np.empty((cfg.T, cfg.H, cfg.W), dtype=np.float32)
    for t in range(cfg.T):
        wy, wx = yy - jit[t, 0], xx - jit[t, 1]
        b = _sample(tex_b, wy + pad, wx - slip[t])
        a = _sample(tex_a, wy + pad, wx - slip[t] * weight)
        upper = np.clip(interface_y - wy + 0.5, 0, 1)
        img = upper * (0.65 + cfg.texture_contrast * b) + (1 - upper) * (0.35 + cfg.texture_contrast * a)
        frames[t] = np.clip(img + breath[t] + noise[t], 0, 1)
    return Series(series_id, patient_id, int(label), frames)


# ---------------------------------------------------------------- pair selection


def select_inspexp_pair(frames: np.ndarray) -> tuple[int, int]:
    """Frame pair with the largest mean absolute intensity difference.

    Ties go to the smallest ``i``, then the smallest ``j``.
    """
    f = np.asarray(frames, dtype=np.float64).reshape(len(frames), -1)
    n = len(f)
    if n < 2:
        raise DataError("need at least 2 frames")
    best, pair = -1.0, (0, 1)
    for i in range(n - 1):
        d = np.abs(f[i + 1 :] - f[i]).mean(axis=1)
        k = int(np.argmax(d))
        if d[k] > best:
            best, pair = d[k], (i, i + 1 + k)
    return pair


# ---------------------------------------------------------------- block-matching oracle


def find_interface(frame: np.ndarray) -> int:
    """Row index of the sharpest bright-to-dark transition in the row-mean profile."""
    prof = gaussian_filter(np.asarray(frame, dtype=np.float64).mean(axis=1), 1.0)
    return int(np.argmin(np.diff(prof))) + 1


def strip_shift(f0: np.ndarray, f1: np.ndarray, rows: slice, cols: np.ndarray, max_shift: int | None = None) -> float:
    """Horizontal displacement of the content of ``f0[rows, cols]`` in ``f1``.

    Exhaustive integer search on zero-mean SSD followed by a parabolic
    sub-pixel refinement. Rows wrap horizontally, so the default search
    covers every distinguishable shift.
    """
    ref = np.asarray(f1, dtype=np.float64)[rows][:, cols]
    ref = ref - ref.mean()
    src = np.asarray(f0, dtype=np.float64)[rows]
    if max_shift is None:
        max_shift = (src.shape[1] - 1) // 2
    shifts = np.arange(-max_shift, max_shift + 1)
    cost = np.empty(len(shifts))
    for k, d in enumerate(shifts):
        cand = np.roll(src, d, axis=1)[:, cols]
        cost[k] = np.sum((cand - cand.mean() - ref) ** 2)
    k = int(np.argmin(cost))
    if 0 < k < len(shifts) - 1:
        c0, c1, c2 = cost[k - 1], cost[k], cost[k + 1]
        den = c0 - 2 * c1 + c2
        off = 0.5 * (c0 - c2) / den if den > 0 else 0.0
        return float(shifts[k] + np.clip(off, -0.5, 0.5))
    return float(shifts[k])


def window_relative_slip(f0, f1, interface_y: int | None = None, win: int = 8, step: int = 4, depth: int = 5):
    """Relative tangential displacement (upper minus lower) per column window."""
    f0 = np.asarray(f0)
    h, w = f0.shape
    y = find_interface(f0) if interface_y is None else interface_y
    upper = slice(max(y - depth - 1, 0), y - 1)
    lower = slice(y + 1, min(y + depth + 1, h))
    rel = []
    for start in range(0, w, step):
        cols = (np.arange(win) + start) % w
        rel.append(strip_shift(f0, f1, upper, cols) - strip_shift(f0, f1, lower, cols))
    return np.array(rel)


def pair_tether_score(f0, f1, interface_y: int | None = None) -> float:
    """Spread of relative slip across column windows, relative to the largest slip.

    Near 0 when the whole interface slides uniformly (or not at all), near 1
    when part of it is held still while the rest slides.
    """
    rel = np.abs(window_relative_slip(f0, f1, interface_y))
    lo, hi = np.percentile(rel, [10, 90])
    return float((hi - lo) / (hi + 0.25))


def sequence_tether_score(frames: np.ndarray) -> float:
    """Median tether score over all consecutive frame pairs."""
    y = find_interface(frames[0])
    return float(np.median([pair_tether_score(frames[t], frames[t + 1], y) for t in range(len(frames) - 1)]))


def selected_pair_tether_score(frames: np.ndarray) -> float:
    i, j = select_inspexp_pair(frames)
    return pair_tether_score(frames[i], frames[j], find_interface(frames[i]))


# ---------------------------------------------------------------- series files


def series_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DataError(f"frames must be [T,H,W], got shape {frames.shape}")
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    t, h, w = frames.shape
    return _HEADER.pack(_MAGIC, _VERSION, t, h, w) + payload + struct.pack("<I", zlib.crc32(payload))


def save_series(path: str | Path, series: Series) -> str:
    """Write the frames of ``series``; returns the file checksum (CRC32 hex)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = series_bytes(series.frames)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(raw)
    os.replace(tmp, path)
    return f"{zlib.crc32(raw):08x}"


def read_frames(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"series file missing: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise DataError(f"{path}: truncated series file")
    magic, version, t, h, w = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise DataError(f"{path}: unknown series format version {version}")
    n = t * h * w * 4
    if len(raw) != _HEADER.size + n + 4:
        raise DataError(f"{path}: truncated series file (expected {_HEADER.size + n + 4} bytes, got {len(raw)})")
    payload = raw[_HEADER.size : _HEADER.size + n]
    (crc,) = struct.unpack_from("<I", raw, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise DataError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(t, h, w).astype(np.float32)


def load_series(path: str | Path, series_id: str = "", patient_id: str = "", label: int = 0) -> Series:
    path = Path(path)
    return Series(series_id or path.stem, patient_id, label, read_frames(path))


# ---------------------------------------------------------------- datasets


@dataclass
class SeriesRecord:
    series_id: str
    patient_id: str
    label: int
    path: str
    T: int
    H: int
    W: int
    checksum: str


@dataclass
class DatasetManifest:
    series: list[SeriesRecord]
    config: dict
    seed: int
    root: Path | None = field(default=None, repr=False)

    def to_json(self) -> str:
        d = {"series": [asdict(r) for r in self.series], "config": self.config, "seed": self.seed}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @property
    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.series})


def series_counts(n_patients: int, series_per_patient, rng: np.random.Generator) -> list[int]:
    """Per-patient series counts from an int, an inclusive ``(lo, hi)`` range, or an explicit list."""
    if isinstance(series_per_patient, int):
        return [series_per_patient] * n_patients
    if isinstance(series_per_patient, tuple):
        lo, hi = series_per_patient
        return [int(c) for c in rng.integers(lo, hi + 1, size=n_patients)]
    counts = [int(c) for c in series_per_patient]
    if len(counts) != n_patients:
        raise DataError(f"{len(counts)} series counts given for {n_patients} patients")
    return counts


def counts_for_total(n_patients: int, total: int, seed: int) -> list[int]:
    """Spread ``total`` series over patients (each >= 1), as evenly as possible."""
    if total < n_patients:
        raise DataError(f"cannot spread {total} series over {n_patients} patients")
    base, extra = divmod(total, n_patients)
    counts = np.full(n_patients, base)
    idx = rngmod.stream(seed, "counts").permutation(n_patients)[:extra]
    counts[idx] += 1
    return [int(c) for c in counts]


def generate_dataset(
    out_dir: str | Path,
    cfg: SynthConfig,
    n_patients: int = 40,
    series_per_patient=(1, 3),
    prevalence: float = 0.5,
    seed: int = 0,
    k_folds: int = 5,
) -> DatasetManifest:
    """Generate series files plus ``manifest.json`` under ``out_dir``.

    All series of one patient share that patient's label.
    """
    cfg.validate()
    if not 0 < prevalence < 1:
        raise DataError(f"prevalence must lie in (0,1), got {prevalence}")
    if n_patients < k_folds:
        raise DataError(f"{n_patients} patients is fewer than {k_folds} folds")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = series_counts(n_patients, series_per_patient, rngmod.stream(seed, "dataset", "counts"))
    n_pos = int(round(prevalence * n_patients))
    labels = np.zeros(n_patients, dtype=int)
    labels[:n_pos] = 1
    labels = rngmod.stream(seed, "dataset", "labels").permutation(labels)

    records = []
    for p in range(n_patients):
        pid = f"P{p:03d}"
        for k in range(counts[p]):
            sid = f"{pid}_S{k}"
            s = generate_series(cfg, int(labels[p]), rngmod.derive_seed(seed, sid), sid, pid)
            rel = f"series/{sid}.cine"
            checksum = save_series(out / rel, s)
            records.append(SeriesRecord(sid, pid, int(labels[p]), rel, cfg.T, cfg.H, cfg.W, checksum))
    manifest = DatasetManifest(records, asdict(cfg), int(seed), out)
    tmp = out / "manifest.json.tmp"
    tmp.write_text(manifest.to_json())
    os.replace(tmp, out / "manifest.json")
    return manifest


def _manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / "manifest.json" if path.is_dir() else path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = _manifest_path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    d = json.loads(path.read_text())
    records = [SeriesRecord(**r) for r in d["series"]]
    return DatasetManifest(records, d["config"], int(d["seed"]), path.parent)


def validate_manifest(path: str | Path) -> DatasetManifest:
    """Check id uniqueness, file presence and checksums; raise DataError listing problems."""
    m = read_manifest(path)
    ids = [r.series_id for r in m.series]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise DataError(f"duplicate series ids: {dup}")
    missing = [r.path for r in m.series if not (m.root / r.path).exists()]
    if missing:
        raise DataError(f"missing series files: {missing}")
    bad = []
    for r in m.series:
        raw = (m.root / r.path).read_bytes()
        if f"{zlib.crc32(raw):08x}" != r.checksum:
            bad.append(r.path)
    if bad:
        raise DataError(f"checksum mismatch for: {bad}")
    labels = {}
    for r in m.series:
        if labels.setdefault(r.patient_id, r.label) != r.label:
            raise DataError(f"patient {r.patient_id} has series with different labels")
    return m


def load_dataset(path: str | Path) -> tuple[DatasetManifest, list[Series]]:
    m = read_manifest(path)
    missing = [r.path for r in m.series if not (m.root / r.path).exists()]
    if missing:
        raise DataError(f"missing series files: {missing}")
    series = []
    for r in m.series:
        frames = read_frames(m.root / r.path)
        if frames.shape != (r.T, r.H, r.W):
            raise DataError(f"{r.path}: shape {frames.shape} does not match manifest {(r.T, r.H, r.W)}")
        series.append(Series(r.series_id, r.patient_id, r.label, frames))
    return m, series


def normalize_series(frames: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the whole series."""
    f = np.asarray(frames, dtype=np.float64)
    sd = f.std()
    return ((f - f.mean()) / (sd if sd > 0 else 1.0)).astype(np.float32)


def make_series_set(cfg: SynthConfig, n: int, seed: int, prevalence: float = 0.5) -> list[Series]:
    """In-memory labeled series, one per patient, alternating labels by a seeded shuffle."""
    labels = np.zeros(n, dtype=int)
    labels[: int(round(prevalence * n))] = 1
    labels = rngmod.stream(seed, "series-set").permutation(labels)
    return [
        generate_series(cfg, int(lab), rngmod.derive_seed(seed, f"S{i}"), f"S{i:04d}", f"P{i:04d}")
        for i, lab in enumerate(labels)
    ]


__all__: Sequence[str] = [
    "SynthConfig",
    "Series",
    "generate_series",
    "generate_dataset",
    "select_inspexp_pair",
    "save_series",
    "load_series",
    "validate_manifest",
    "load_dataset",
]
