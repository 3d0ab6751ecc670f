"""Synthetic reverberant multi-channel K-speaker mixtures with direct-path targets.

Room responses are deliberately simple: a fractional-delay direct path with
1/r attenuation plus an exponentially decaying white-noise tail, independent
per microphone. True inter-microphone delays are present, which is what the
spatial features need. Dry sources are either mono WAV files or a built-in
generator of amplitude-modulated harmonic tones.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .config import format_kv, parse_kv
from .stft import read_wav, write_wav

log = logging.getLogger(__name__)

SPEED_OF_SOUND = 343.0
SINC_TAPS = 32
DECAY_60DB = np.log(1000.0)  # amplitude falls by 1e3 (60 dB) at t = T60


@dataclass
class SimConfig:
    sample_rate: int = 8000
    n_mics: int = 2
    n_src: int = 2
    duration: float = 2.4
    t60_min: float = 0.2
    t60_max: float = 0.6
    snr_min: float = 0.0
    snr_max: float = 20.0
    overlap_min: float = 0.0
    overlap_max: float = 1.0
    distance_min: float = 1.0
    distance_max: float = 2.0
    array_radius: float = 0.05
    reverb_level: float = 2.0
    sir_range_db: float = 2.5
    min_separation_deg: float = 30.0

    def to_kv(self) -> dict[str, str]:
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "SimConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = sorted(set(kv) - set(types))
        if unknown:
            raise KeyError(f"unknown scene keys: {unknown}")
        return cls(**{k: (int if types[k] in (int, "int") else float)(v) for k, v in kv.items()})

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_kv(parse_kv(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(format_kv(self.to_kv()), encoding="utf-8")


@dataclass
class RoomScene:
    mic_positions: np.ndarray     # (M, 3) meters
    source_positions: np.ndarray  # (K, 3) meters
    t60: float
    snr_db: float
    overlap_ratio: float
    sample_rate: int = 8000
    c: float = SPEED_OF_SOUND
    reverb_level: float = 2.0
    source_gains_db: list[float] = field(default_factory=list)

    def __post_init__(self):
        pts = np.concatenate([self.mic_positions, self.source_positions])
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        if np.any(d[np.triu_indices(len(pts), 1)] < 1e-6):
            raise ValueError("microphone and source positions must be distinct")

    def distance(self, k: int, m: int) -> float:
        return float(np.linalg.norm(self.source_positions[k] - self.mic_positions[m]))

    def summary(self) -> dict:
        return {
            "t60": self.t60,
            "snr_db": self.snr_db,
            "overlap_ratio": self.overlap_ratio,
            "mics": np.asarray(self.mic_positions).round(4).tolist(),
            "sources": np.asarray(self.source_positions).round(4).tolist(),
            "source_gains_db": list(self.source_gains_db),
        }


def array_geometry(n_mics: int, radius: float) -> np.ndarray:
    """Two mics on a line 2*radius apart, otherwise a uniform circle in the horizontal plane."""
    if n_mics == 1:
        return np.zeros((1, 3))
    ang = 2 * np.pi * np.arange(n_mics) / n_mics
    return np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(n_mics)], axis=1)


def sample_scene(cfg: SimConfig, rng: np.random.Generator) -> RoomScene:
    center = np.array([3.0, 2.5, 1.2])
    mics = center + array_geometry(cfg.n_mics, cfg.array_radius)
    azimuths: list[float] = []
    min_sep = np.deg2rad(cfg.min_separation_deg)
    while len(azimuths) < cfg.n_src:
        a = rng.uniform(0, 2 * np.pi)
        if all(abs(np.angle(np.exp(1j * (a - b)))) >= min_sep for b in azimuths):
            azimuths.append(a)
    dist = rng.uniform(cfg.distance_min, cfg.distance_max, cfg.n_src)
    height = rng.uniform(-0.3, 0.3, cfg.n_src)
    az = np.array(azimuths)
    srcs = center + np.stack([dist * np.cos(az), dist * np.sin(az), height], axis=1)
    return RoomScene(
        mic_positions=mics,
        source_positions=srcs,
        t60=float(rng.uniform(cfg.t60_min, cfg.t60_max)),
        snr_db=float(rng.uniform(cfg.snr_min, cfg.snr_max)),
        overlap_ratio=float(rng.uniform(cfg.overlap_min, cfg.overlap_max)),
        sample_rate=cfg.sample_rate,
        reverb_level=cfg.reverb_level,
        source_gains_db=rng.uniform(-cfg.sir_range_db, cfg.sir_range_db, cfg.n_src).tolist(),
    )


def fractional_delay(delay: float, length: int, taps: int = SINC_TAPS) -> np.ndarray:
    """Hann-windowed sinc of ``taps`` samples centered at ``delay`` (in samples)."""
    h = np.zeros(length)
    n0 = int(np.floor(delay)) - taps // 2 + 1
    n = np.arange(n0, n0 + taps)
    x = n - delay
    w = 0.5 * (1 + np.cos(2 * np.pi * x / taps))
    valid = (n >= 0) & (n < length)
    h[n[valid]] = (np.sinc(x) * w)[valid]
    return h


def rir_length(scene: RoomScene) -> int:
    dmax = max(scene.distance(k, m) for k in range(len(scene.source_positions))
               for m in range(len(scene.mic_positions)))
    return int(np.ceil(dmax / scene.c * scene.sample_rate + scene.t60 * scene.sample_rate)) + SINC_TAPS + 1


def synth_rir(scene: RoomScene, k: int, m: int, rng: np.random.Generator | None = None,
              length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(direct, tail) impulse responses from source ``k`` to mic ``m``; the full RIR is their sum.

    The tail starts right after the direct-path kernel, decays by 60 dB in
    ``t60`` seconds and carries ``reverb_level * t60`` energy.
    """
    fs = scene.sample_rate
    length = rir_length(scene) if length is None else length
    d = scene.distance(k, m)
    delay = d / scene.c * fs
    direct = fractional_delay(delay, length) / d
    tail = np.zeros(length)
    if scene.t60 > 0:
        rng = np.random.default_rng() if rng is None else rng
        start = int(np.floor(delay)) + SINC_TAPS // 2 + 1
        n = np.arange(length - start) / fs
        env = np.exp(-DECAY_60DB * n / scene.t60)
        # continuous energy of env^2 is t60 / (2 * DECAY_60DB)
        gain = np.sqrt(scene.reverb_level * scene.t60 / (scene.t60 / (2 * DECAY_60DB) * fs))
        tail[start:] = gain * env * rng.standard_normal(n.size)
    return direct, tail


# ---------------------------------------------------------------------------
# dry sources
# ---------------------------------------------------------------------------

def synth_speech(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """Speech-like test signal: harmonic tone with gliding pitch, formant shaping and syllabic AM."""
    t = np.arange(n) / sample_rate
    f0_base = rng.uniform(90, 240)
    f0 = f0_base * (1 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.3, 1.2) * t + rng.uniform(0, 2 * np.pi))
                    + 0.04 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int(sample_rate / 2 / (f0_base * 1.2))
    formants = np.sort(rng.uniform([300, 900, 2000], [900, 2200, 3500]))
    sig = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = sum(np.exp(-0.5 * ((fh - fc) / (0.15 * fc)) ** 2) for fc in formants) + 0.05
        amp = amp / h ** 0.5 * (fh < sample_rate / 2 - 100)
        sig += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syll_rate = rng.uniform(3, 5.5)
    env = np.clip(np.sin(2 * np.pi * syll_rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 0.7
    gate = (np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi)) > -0.6)
    sig = sig * env * gate + 0.01 * rng.standard_normal(n) * env
    return sig / (np.sqrt(np.mean(sig ** 2)) + 1e-12)


def load_dry_sources(directory) -> list[np.ndarray]:
    """Mono (first channel) float signals from every WAV file in ``directory``, sorted by name."""
    out = []
    for p in sorted(Path(directory).glob("*.wav")):
        data, _ = read_wav(p)
        out.append(data[0].astype(np.float64))
    return out


# ---------------------------------------------------------------------------
# mixtures
# ---------------------------------------------------------------------------

@dataclass
class MixtureExample:
    mixture: np.ndarray  # (M, N)
    images: np.ndarray   # (K, M, N) reverberant source images
    direct: np.ndarray   # (K, M, N) direct-path targets
    noise: np.ndarray    # (M, N), equal to mixture - images.sum(0)
    scene: RoomScene
    seed: int
    sample_rate: int
    activity: list[tuple[int, int]] = field(default_factory=list)

    @property
    def reference_targets(self) -> np.ndarray:
        return self.direct[:, 0]

    @property
    def duration(self) -> float:
        return self.mixture.shape[-1] / self.sample_rate


def placement(n: int, n_src: int, overlap_ratio: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Active (start, stop) spans covering [0, n) with ``overlap_ratio * n`` samples of overlap.

    Two sources: one starts at 0 and the other ends at n, the split point is
    random. More sources: equal spans at equal steps, consecutive spans
    sharing ``overlap_ratio * n / (K - 1)`` samples.
    """
    if n_src == 1:
        return [(0, n)]
    if n_src == 2:
        o = int(round(overlap_ratio * n))
        a = o + int(round(rng.uniform(0.3, 0.7) * (n - o)))
        spans = [(0, a), (a - o, n)]
        return spans if rng.random() < 0.5 else spans[::-1]
    o = overlap_ratio * n / (n_src - 1)
    length = (n + (n_src - 1) * o) / n_src
    step = length - o
    return [(int(round(k * step)), min(n, int(round(k * step + length)))) for k in range(n_src)]


def _colored_noise(n_mics: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pole = rng.uniform(0.0, 0.9)
    white = rng.standard_normal((n_mics, n))
    return lfilter([1 - pole], [1, -pole], white, axis=-1)


def make_mixture(scene: RoomScene, dry: list[np.ndarray], seed: int, n_samples: int,
                 rng: np.random.Generator | None = None) -> MixtureExample:
    """Convolve ``dry`` sources with the scene's RIRs, place them with the scene's overlap and add noise."""
    rng = np.random.default_rng(seed) if rng is None else rng
    n_src, n_mics = len(scene.source_positions), len(scene.mic_positions)
    if len(dry) != n_src:
        raise ValueError(f"scene has {n_src} sources but {len(dry)} dry signals were given")
    spans = placement(n_samples, n_src, scene.overlap_ratio, rng)
    gains = scene.source_gains_db or [0.0] * n_src
    rir_len = rir_length(scene)

    direct = np.zeros((n_src, n_mics, n_samples))
    images = np.zeros((n_src, n_mics, n_samples))
    for k, ((a, b), sig) in enumerate(zip(spans, dry)):
        if len(sig) < b - a:
            raise ValueError(f"dry source {k} has {len(sig)} samples, needs {b - a}")
        off = int(rng.integers(0, len(sig) - (b - a) + 1))
        seg = np.asarray(sig[off:off + b - a], dtype=np.float64)
        seg = seg / (np.sqrt(np.mean(seg ** 2)) + 1e-12) * 10 ** (gains[k] / 20)
        placed = np.zeros(n_samples)
        placed[a:b] = seg
        for m in range(n_mics):
            h_dir, h_tail = synth_rir(scene, k, m, rng, rir_len)
            direct[k, m] = fftconvolve(placed, h_dir)[:n_samples]
            images[k, m] = direct[k, m]
            if scene.t60 > 0:
                images[k, m] = direct[k, m] + fftconvolve(placed, h_tail)[:n_samples]

    images32 = images.astype(np.float32)
    speech = images32.sum(axis=0)
    if np.isfinite(scene.snr_db):
        noise = _colored_noise(n_mics, n_samples, rng)
        p_sig = np.sum(speech.astype(np.float64) ** 2)
        p_noise = np.sum(noise ** 2)
        noise *= np.sqrt(p_sig / (p_noise * 10 ** (scene.snr_db / 10)))
        mixture = speech + noise.astype(np.float32)
    else:
        mixture = speech + np.float32(0)
    return MixtureExample(
        mixture=mixture,
        images=images32,
        direct=direct.astype(np.float32),
        noise=mixture - speech,
        scene=scene,
        seed=seed,
        sample_rate=scene.sample_rate,
        activity=spans,
    )


def simulate_example(cfg: SimConfig, seed: int, dry_pool: list[np.ndarray] | None = None) -> MixtureExample:
    """One example, fully determined by ``cfg`` and ``seed``."""
    rng = np.random.default_rng(seed)
    scene = sample_scene(cfg, rng)
    n = int(round(cfg.duration * cfg.sample_rate))
    if dry_pool:
        idx = rng.choice(len(dry_pool), size=cfg.n_src, replace=len(dry_pool) < cfg.n_src)
        dry = [dry_pool[i] for i in idx]
    else:
        dry = [synth_speech(n, cfg.sample_rate, rng) for _ in range(cfg.n_src)]
    return make_mixture(scene, dry, seed, n, rng)


def simulate_examples(cfg: SimConfig, n_examples: int, base_seed: int = 0,
                      dry_pool: list[np.ndarray] | None = None) -> list[MixtureExample]:
    return [simulate_example(cfg, base_seed + i, dry_pool) for i in range(n_examples)]


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------

def save_example(ex: MixtureExample, directory, subtype: str = "float32") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_wav(d / "mixture.wav", ex.mixture, ex.sample_rate, subtype)
    write_wav(d / "noise.wav", ex.noise, ex.sample_rate, subtype)
    for k in range(ex.direct.shape[0]):
        write_wav(d / f"direct_{k}.wav", ex.direct[k], ex.sample_rate, subtype)
        write_wav(d / f"image_{k}.wav", ex.images[k], ex.sample_rate, subtype)
    meta = {
        "seed": ex.seed,
        "sample_rate": ex.sample_rate,
        "n_samples": int(ex.mixture.shape[-1]),
        "n_src": int(ex.direct.shape[0]),
        "activity": [list(map(int, s)) for s in ex.activity],
        "scene": ex.scene.summary(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return d


def load_example(directory) -> MixtureExample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    mixture, sr = read_wav(d / "mixture.wav")
    noise, _ = read_wav(d / "noise.wav")
    k = meta["n_src"]
    direct = np.stack([read_wav(d / f"direct_{i}.wav")[0] for i in range(k)])
    images = np.stack([read_wav(d / f"image_{i}.wav")[0] for i in range(k)])
    sc = meta["scene"]
    scene = RoomScene(np.array(sc["mics"]), np.array(sc["sources"]), sc["t60"], sc["snr_db"],
                      sc["overlap_ratio"], sample_rate=sr, source_gains_db=sc["source_gains_db"])
    return MixtureExample(mixture, images, direct, noise, scene, meta["seed"], sr,
                          [tuple(s) for s in meta["activity"]])


MANIFEST_NAME = "manifest.jsonl"


def build_manifest(directory) -> list[dict]:
    """Index every example subdirectory (one with meta.json) into ``manifest.jsonl``."""
    root = Path(directory)
    records = []
    for meta_path in sorted(root.glob("*/meta.json")):
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        ex_dir = meta_path.parent
        records.append({
            "id": ex_dir.name,
            "mixture": str(ex_dir / "mixture.wav"),
            "direct": [str(ex_dir / f"direct_{k}.wav") for k in range(meta["n_src"])],
            "images": [str(ex_dir / f"image_{k}.wav") for k in range(meta["n_src"])],
            "noise": str(ex_dir / "noise.wav"),
            "duration": meta["n_samples"] / meta["sample_rate"],
            "sample_rate": meta["sample_rate"],
            "seed": meta["seed"],
            "scene": {k: meta["scene"][k] for k in ("t60", "snr_db", "overlap_ratio")},
        })
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return records


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def generate_dataset(directory, cfg: SimConfig, n_examples: int, base_seed: int = 0,
                     dry_pool: list[np.ndarray] | None = None, subtype: str = "float32") -> list[dict]:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    cfg.save(root / "scene.cfg")
    for i in range(n_examples):
        save_example(simulate_example(cfg, base_seed + i, dry_pool), root / f"ex{i:05d}", subtype)
    return build_manifest(root)
