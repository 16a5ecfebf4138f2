"""Audio I/O, protocol manifests, and a synthetic spoof corpus generator.

Audio is fixed at mono 16 kHz 16-bit PCM WAV.  Manifests are plain text,
one record per line with 5 whitespace-separated fields::

    speaker_id utt_id gender attack_id key

Column 3 is parsed and ignored (real protocol files vary there); the
attack id is "-" exactly when the key is "bonafide".  Ground-truth
artefact regions live in a JSON sidecar per manifest:
``{utt_id: [[start_sample, end_sample, kind], ...]}``.

The synthetic generator produces speech-like bona fide utterances (a
pitch-drifting harmonic series shaped by slowly moving formant
resonances, framed by low-level noise "silence") and spoofed versions
carrying one of five localized artefact kinds, each recorded with its
exact sample region so attribution claims can be scored quantitatively.
"""

import json
import math
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .utils import derive_seed

SAMPLE_RATE = 16000
PCM_SCALE = 32768.0

ARTEFACT_KINDS = ("click", "band_noise", "hum", "notch", "onset_distortion")
PARTITIONS = ("train", "dev", "eval")

# Default synthetic attack suite: attack id -> artefact template.
# Three localized kinds by default; notch and onset distortion remain
# available for custom configs.
DEFAULT_ATTACK_TEMPLATES = {
    "A01": {"kind": "click", "magnitude": 4.0, "duration_s": (0.03, 0.06)},
    "A02": {"kind": "band_noise", "magnitude": 1.5, "band": (6000.0, 7800.0),
            "duration_s": (0.10, 0.15)},
    "A03": {"kind": "hum", "magnitude": 2.0, "band": (80.0, 120.0),
            "duration_s": (0.25, 0.40)},
}


class CorpusError(ValueError):
    pass


class WavFormatError(CorpusError):
    pass


class ManifestError(CorpusError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise CorpusError("waveform must hold at least one mono sample")
        if self.sample_rate <= 0:
            raise CorpusError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise CorpusError("waveform samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    attack_id: str            # "-" for bona fide
    key: str                  # "bonafide" | "spoof"
    audio_ref: str = ""
    artefact_regions: Optional[list] = None   # [(start, end, kind), ...]

    def __post_init__(self):
        if self.key not in ("bonafide", "spoof"):
            raise ManifestError(f"key must be bonafide or spoof, got {self.key!r}")
        if (self.key == "bonafide") != (self.attack_id == "-"):
            raise ManifestError(
                f"attack/key mismatch for {self.utt_id!r}: "
                f"attack={self.attack_id!r} key={self.key!r}")

    @property
    def is_bonafide(self) -> bool:
        return self.key == "bonafide"


@dataclass
class CorpusManifest:
    records: list
    partition: str = "train"

    def __post_init__(self):
        if self.partition not in PARTITIONS:
            raise ManifestError(f"partition must be one of {PARTITIONS}")
        seen = set()
        for r in self.records:
            if r.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {r.utt_id!r}")
            seen.add(r.utt_id)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def attack_ids(self) -> list:
        return sorted({r.attack_id for r in self.records if not r.is_bonafide})

    def filter(self, attack_id: Optional[str] = None) -> "CorpusManifest":
        """Bona fide records plus, when given, spoof records of one attack."""
        if attack_id is None:
            return self
        recs = [r for r in self.records
                if r.is_bonafide or r.attack_id == attack_id]
        return CorpusManifest(records=recs, partition=self.partition)


@dataclass
class ArtefactSpec:
    kind: str
    region: tuple                 # (start_sample, length_samples)
    magnitude: float
    band: Optional[tuple] = None  # (low_hz, high_hz)

    def __post_init__(self):
        if self.kind not in ARTEFACT_KINDS:
            raise CorpusError(f"unknown artefact kind {self.kind!r}")
        start, length = self.region
        if start < 0 or length < 1:
            raise CorpusError(f"bad artefact region {self.region}")
        if self.magnitude <= 0:
            raise CorpusError("artefact magnitude must be positive")
        if self.band is not None:
            lo, hi = self.band
            if not (0 < lo < hi):
                raise CorpusError(f"bad artefact band {self.band}")


# ---------------------------------------------------------------------------
# WAV I/O (RIFF PCM16 mono)
# ---------------------------------------------------------------------------

def load_wav(path) -> Waveform:
    """Read a mono 16-bit PCM WAV; samples are scaled by 1/32768."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            comptype = wf.getcomptype()
            sample_rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise WavFormatError(f"not a readable RIFF/WAVE file: {path} ({exc})") from exc
    except EOFError as exc:
        raise WavFormatError(f"truncated WAV header: {path}") from exc
    if n_channels != 1:
        raise WavFormatError(f"unsupported channel count {n_channels} (need mono)")
    if comptype != "NONE":
        raise WavFormatError(f"unsupported compression {comptype!r} (need PCM)")
    if sampwidth != 2:
        raise WavFormatError(
            f"unsupported sample width {8 * sampwidth} bits (need 16-bit PCM)")
    if len(raw) < 2 * n_frames:
        raise WavFormatError(f"truncated WAV data: {path}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return Waveform(samples=samples, sample_rate=sample_rate)


def write_wav(waveform: Waveform, path) -> None:
    """Write mono PCM16; round-trips within 1/32768 per sample."""
    x = waveform.samples
    if np.any(np.abs(x) > 1.0):
        worst = float(np.max(np.abs(x)))
        raise CorpusError(f"sample out of range: |{worst:.6g}| > 1")
    q = np.clip(np.round(x * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(waveform.sample_rate)
        wf.writeframes(q.tobytes())


# ---------------------------------------------------------------------------
# manifests and ground-truth sidecars
# ---------------------------------------------------------------------------

def parse_manifest(path, partition: str = "train") -> CorpusManifest:
    """Parse a 5-column protocol file; reports offending line numbers."""
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split()
        if len(cols) != 5:
            raise ManifestError(
                f"{path}:{lineno}: expected 5 whitespace-separated fields, "
                f"got {len(cols)}")
        speaker, utt_id, _gender, attack, key = cols
        try:
            records.append(UtteranceRecord(
                utt_id=utt_id, speaker_id=speaker, attack_id=attack, key=key))
        except ManifestError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    try:
        return CorpusManifest(records=records, partition=partition)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [
        f"{r.speaker_id} {r.utt_id} - {r.attack_id} {r.key}"
        for r in manifest.records
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_regions(manifest: CorpusManifest, path) -> None:
    """JSON sidecar {utt_id: [[start, end, kind], ...]} for spoofed records."""
    payload = {
        r.utt_id: [[int(s), int(e), k] for (s, e, k) in r.artefact_regions]
        for r in manifest.records if r.artefact_regions
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_regions(path) -> dict:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return {utt: [(int(s), int(e), str(k)) for s, e, k in regions]
            for utt, regions in raw.items()}


# ---------------------------------------------------------------------------
# synthetic bona fide speech
# ---------------------------------------------------------------------------

def _gen_bonafide(seed: int, duration_s: float, sample_rate: int = SAMPLE_RATE):
    """Internal generator; also returns the (start, end) voiced span."""
    if not (0.5 <= duration_s <= 10.0):
        raise CorpusError(f"duration {duration_s} s outside [0.5, 10]")
    rng = np.random.default_rng(seed)
    n = round(duration_s * sample_rate)
    t = np.arange(n) / sample_rate

    hi = min(0.5, 0.4 * duration_s)
    lead = rng.uniform(0.2, hi) if hi > 0.2 else 0.2
    trail = rng.uniform(0.2, hi) if hi > 0.2 else 0.2
    v0 = round(lead * sample_rate)
    v1 = n - round(trail * sample_rate)
    tv = t[v0:v1]

    # Pitch contour: slow sinusoidal drift kept inside 80-250 Hz.
    f0_base = rng.uniform(110.0, 190.0)
    r1, r2 = rng.uniform(0.3, 1.5, size=2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    f0 = f0_base + 35.0 * np.sin(2 * np.pi * r1 * tv + p1) \
        + 20.0 * np.sin(2 * np.pi * r2 * tv + p2)
    f0 = np.clip(f0, 80.0, 250.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate

    # Two to three formant resonances with slow center drift.
    n_formants = int(rng.integers(2, 4))
    centers = [rng.uniform(*lohi) for lohi in
               ((300.0, 800.0), (900.0, 1800.0), (2000.0, 3200.0))][:n_formants]
    widths = rng.uniform(120.0, 220.0, size=n_formants)
    drift_hz = rng.uniform(0.2, 0.8, size=n_formants)
    drift_ph = rng.uniform(0, 2 * np.pi, size=n_formants)
    gains = rng.uniform(0.6, 1.0, size=n_formants)

    n_harm = max(4, int(7500.0 // np.max(f0)))
    voiced = np.zeros_like(tv)
    harm_phase = rng.uniform(0, 2 * np.pi, size=n_harm + 1)
    for h in range(1, n_harm + 1):
        fh = h * f0
        env = np.zeros_like(tv)
        for j in range(n_formants):
            cj = centers[j] * (1.0 + 0.08 * np.sin(2 * np.pi * drift_hz[j] * tv
                                                   + drift_ph[j]))
            env += gains[j] * np.exp(-0.5 * ((fh - cj) / widths[j]) ** 2)
        voiced += (env + 0.02) / h * np.sin(h * phase + harm_phase[h])

    # Amplitude modulation plus a 30 ms raised-cosine onset/offset.
    am_hz = rng.uniform(1.5, 4.0)
    am_ph = rng.uniform(0, 2 * np.pi)
    voiced *= 0.75 + 0.25 * np.sin(2 * np.pi * am_hz * tv + am_ph)
    ramp = min(len(tv) // 2, round(0.03 * sample_rate))
    if ramp > 0:
        edge = 0.5 * (1 - np.cos(np.pi * np.arange(ramp) / ramp))
        voiced[:ramp] *= edge
        voiced[-ramp:] *= edge[::-1]

    x = rng.normal(0.0, 1.0, size=n) * 0.003
    x[v0:v1] += voiced
    peak = float(np.max(np.abs(x)))
    x *= 0.75 / peak
    return Waveform(samples=x, sample_rate=sample_rate), (v0, v1)


def gen_bonafide(seed: int, duration_s: float,
                 sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Deterministic speech-like utterance with leading/trailing silence.

    The voiced part's RMS exceeds the silence RMS by at least a factor
    of 10 by construction (harmonic level vs. the fixed noise floor).
    """
    return _gen_bonafide(seed, duration_s, sample_rate)[0]


# ---------------------------------------------------------------------------
# artefact injection
# ---------------------------------------------------------------------------

def _reference_rms(x: np.ndarray, start: int, end: int) -> float:
    seg_rms = float(np.sqrt(np.mean(x[start:end] ** 2)))
    if seg_rms < 1e-6:
        seg_rms = float(np.sqrt(np.mean(x ** 2)))
    return max(seg_rms, 1e-4)


def _fade(length: int, edge: int) -> np.ndarray:
    env = np.ones(length)
    edge = min(edge, length // 2)
    if edge > 0:
        ramp = 0.5 * (1 - np.cos(np.pi * np.arange(edge) / edge))
        env[:edge] = ramp
        env[-edge:] = ramp[::-1]
    return env


def inject_artefact(waveform: Waveform, spec: ArtefactSpec, seed: int = 0):
    """Apply one artefact; returns (new waveform, (start, end, kind)).

    Additive kinds (click, band_noise, hum) leave samples outside the
    region exactly unchanged; notch and onset_distortion rewrite only the
    region's samples.  Magnitude is relative to the RMS of the underlying
    signal in the region.
    """
    x = waveform.samples.copy()
    start, length = spec.region
    end = start + length
    if end > x.size:
        raise CorpusError(
            f"artefact region [{start}, {end}) beyond signal end {x.size}")
    sr = waveform.sample_rate
    nyquist = sr / 2
    if spec.band is not None and spec.band[1] >= nyquist:
        raise CorpusError(f"artefact band {spec.band} reaches Nyquist {nyquist}")
    rng = np.random.default_rng(seed)
    ref = _reference_rms(x, start, end)

    if spec.kind == "click":
        amp = spec.magnitude * ref
        spacing = max(1, sr // 100)        # one impulse every 10 ms
        positions = np.arange(start, end, spacing)
        signs = np.where(np.arange(positions.size) % 2 == 0, 1.0, -1.0)
        x[positions] += amp * signs
    elif spec.kind == "band_noise":
        if spec.band is None:
            raise CorpusError("band_noise needs a (low_hz, high_hz) band")
        noise = rng.standard_normal(length)
        f = np.fft.rfftfreq(length, d=1.0 / sr)
        keep = (f >= spec.band[0]) & (f <= spec.band[1])
        shaped = np.fft.irfft(np.fft.rfft(noise) * keep, n=length)
        shaped *= _fade(length, round(0.005 * sr))
        rms = float(np.sqrt(np.mean(shaped ** 2)))
        if rms > 0:
            shaped *= spec.magnitude * ref / rms
        x[start:end] += shaped
    elif spec.kind == "hum":
        freq = np.mean(spec.band) if spec.band is not None else 100.0
        tt = np.arange(length) / sr
        tone = np.sin(2 * np.pi * freq * tt + rng.uniform(0, 2 * np.pi))
        tone *= _fade(length, round(0.01 * sr))
        x[start:end] += spec.magnitude * ref * math.sqrt(2.0) * tone
    elif spec.kind == "notch":
        if spec.band is None:
            raise CorpusError("notch needs a (low_hz, high_hz) band")
        seg = x[start:end]
        f = np.fft.rfftfreq(length, d=1.0 / sr)
        keep = ~((f >= spec.band[0]) & (f <= spec.band[1]))
        x[start:end] = np.fft.irfft(np.fft.rfft(seg) * keep, n=length)
    elif spec.kind == "onset_distortion":
        seg = x[start:end]
        drive = 4.0
        shaped = np.tanh(drive * seg) / math.tanh(drive)
        blend = min(1.0, spec.magnitude)
        x[start:end] = (1.0 - blend) * seg + blend * shaped

    peak = float(np.max(np.abs(x)))
    if peak > 1.0:
        x /= peak * 1.0001
    return Waveform(samples=x, sample_rate=sr), (start, end, spec.kind)


def _voiced_onset(x: np.ndarray, sample_rate: int) -> int:
    """First sample whose 20 ms window RMS exceeds 10% of the peak window RMS."""
    win = round(0.02 * sample_rate)
    if x.size <= win:
        return 0
    sq = np.convolve(x ** 2, np.ones(win) / win, mode="valid")
    rms = np.sqrt(sq)
    above = np.nonzero(rms >= 0.1 * rms.max())[0]
    return int(above[0]) if above.size else 0


# ---------------------------------------------------------------------------
# corpus builder
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    attacks: dict = field(default_factory=lambda: {
        k: dict(v) for k, v in DEFAULT_ATTACK_TEMPLATES.items()})
    n_bonafide: dict = field(default_factory=lambda: {"train": 40, "eval": 20})
    n_per_attack: dict = field(default_factory=lambda: {"train": 40, "eval": 20})
    duration_s: tuple = (0.8, 1.2)
    seed: int = 0
    sample_rate: int = SAMPLE_RATE

    def validate(self) -> None:
        if len(self.attacks) < 2:
            raise CorpusError("need at least 2 synthetic attack kinds")
        for part in ("train", "eval"):
            if self.n_bonafide.get(part, 0) < 20 or self.n_per_attack.get(part, 0) < 20:
                raise CorpusError(
                    f"need at least 20 utterances per class in partition {part!r}")
        for attack_id, tpl in self.attacks.items():
            if tpl.get("kind") not in ARTEFACT_KINDS:
                raise CorpusError(
                    f"attack {attack_id!r}: unknown artefact kind {tpl.get('kind')!r}")
            if float(tpl.get("magnitude", 0)) <= 0:
                raise CorpusError(f"attack {attack_id!r}: magnitude must be positive")
        lo, hi = self.duration_s
        if not (0.5 <= lo <= hi <= 10.0):
            raise CorpusError(f"duration range {self.duration_s} outside [0.5, 10]")


def _instantiate_spec(template: dict, rng, voiced: tuple, n: int,
                      sample_rate: int) -> ArtefactSpec:
    kind = template["kind"]
    lo_s, hi_s = template.get("duration_s", (0.05, 0.15))
    length = round(rng.uniform(lo_s, hi_s) * sample_rate)
    v0, v1 = voiced
    length = min(length, max(1, n - 2))
    if kind == "onset_distortion":
        start = v0
    else:
        latest = max(v0 + 1, v1 - length)
        start = int(rng.integers(v0, latest)) if latest > v0 else v0
    start = min(start, n - length)
    band = template.get("band")
    return ArtefactSpec(kind=kind, region=(start, length),
                        magnitude=float(template["magnitude"]),
                        band=tuple(band) if band else None)


def build_synthetic_corpus(config: CorpusConfig, out_dir) -> dict:
    """Generate audio, manifests and ground-truth region sidecars.

    Layout under out_dir: ``wav/<utt_id>.wav``, ``<partition>.txt``,
    ``<partition>.regions.json``.  Pure function of (config, seed): the
    same inputs produce byte-identical trees.  Returns the manifests
    keyed by partition.
    """
    config.validate()
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    part_tag = {"train": "T", "eval": "E"}
    manifests = {}
    for partition in ("train", "eval"):
        records = []
        counter = 0
        jobs = [("-", None)] * config.n_bonafide[partition]
        for attack_id in sorted(config.attacks):
            jobs += [(attack_id, config.attacks[attack_id])] * \
                config.n_per_attack[partition]
        for attack_id, template in jobs:
            utt_id = f"SC_{part_tag[partition]}_{counter:07d}"
            counter += 1
            rng = np.random.default_rng(
                derive_seed(config.seed, "utt", partition, utt_id))
            duration = rng.uniform(*config.duration_s)
            wav_seed = int(rng.integers(0, 2 ** 31))
            w, voiced = _gen_bonafide(wav_seed, duration, config.sample_rate)
            regions = None
            if template is not None:
                spec = _instantiate_spec(template, rng, voiced, len(w),
                                         config.sample_rate)
                w, region = inject_artefact(w, spec,
                                            seed=int(rng.integers(0, 2 ** 31)))
                regions = [region]
            rel = f"wav/{utt_id}.wav"
            target = wav_dir / f"{utt_id}.wav"
            if target.exists():
                raise CorpusError(f"colliding output path: {target}")
            write_wav(w, target)
            records.append(UtteranceRecord(
                utt_id=utt_id,
                speaker_id=f"SY_{counter % 20:04d}",
                attack_id=attack_id,
                key="bonafide" if attack_id == "-" else "spoof",
                audio_ref=rel,
                artefact_regions=regions))
        manifest = CorpusManifest(records=records, partition=partition)
        write_manifest(manifest, out_dir / f"{partition}.txt")
        save_regions(manifest, out_dir / f"{partition}.regions.json")
        manifests[partition] = manifest
    return manifests


def load_audio(manifest: CorpusManifest, base_dir) -> dict:
    """Load every record's waveform, resolving refs relative to base_dir."""
    base = Path(base_dir)
    return {r.utt_id: load_wav(base / r.audio_ref) for r in manifest.records}
